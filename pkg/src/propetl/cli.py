"""Command-line interface: train, eval, sweep, bls, inspect, gen-tasks.

Exit codes: 0 success, 2 bad configuration, 3 training failure,
4 corrupt artifact.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import storage, tasks as tasklib
from .backbone import TransformerConfig, init_backbone
from .petl import MODES, VARIANTS, build_attachment
from .trainer import (TrainConfig, TrainingDiverged, evaluate, run_sweep, train_multi_task, train_single_task,
                      warmup_backbone, write_summary_csv)

log = logging.getLogger("propetl")

EXIT_OK, EXIT_CONFIG, EXIT_TRAIN, EXIT_CORRUPT = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    """Fully resolved run configuration; validated before any compute."""

    # backbone
    num_layers: int = 4
    d: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 16
    seq_len: int = 16
    backbone_seed: int = 0
    warmup_steps: int = 300
    # module
    variant: str = "adapter"
    mode: str = "propetl"
    size: int = 8
    k: float | None = None
    k_task: float | None = None
    alpha: float | None = None
    nonlinearity: str = "relu"
    combine_mode: str = "OR"
    # optimisation
    lambda_p: float = 3e-3
    lambda_m: float = 3e-2
    lambda_head: float | None = None
    steps: int = 300
    batch_size: int = 32
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    schedule: str = "constant"
    eval_every: int = 100
    seed: int = 0
    # data
    tasks: str = "contains"
    n_train: int = 2000
    n_eval: int = 500
    temperature: float = 10.0
    multitask: bool = False
    out: str = "runs/out"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.mode == "only_share" and self.k is not None:
            raise ConfigError("k: sparsity is meaningless with mode=only_share")
        for name in ("k", "k_task"):
            v = getattr(self, name)
            if v is not None and not 0 < v <= 1:
                raise ConfigError(f"{name}: must lie in (0, 1], got {v}")
        if self.combine_mode not in ("OR", "AND", "ADD"):
            raise ConfigError(f"combine_mode: expected OR/AND/ADD, got {self.combine_mode!r}")
        if self.lambda_p <= 0 or self.lambda_m < 0:
            raise ConfigError("lambda_p must be > 0 and lambda_m >= 0")
        for name in ("num_layers", "d", "num_heads", "ffn_dim", "vocab_size", "seq_len", "size", "steps",
                     "batch_size", "n_train", "n_eval", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.d % self.num_heads:
            raise ConfigError(f"d: {self.d} not divisible by num_heads={self.num_heads}")
        if self.temperature < 1:
            raise ConfigError("temperature: must be >= 1")
        try:
            TrainConfig(**self.train_kwargs())
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.task_list()

    @property
    def sparsity(self) -> float:
        if self.mode == "only_share":
            return 1.0
        return 0.5 if self.k is None else self.k

    def backbone_config(self) -> TransformerConfig:
        return TransformerConfig(self.num_layers, self.d, self.num_heads, self.ffn_dim, self.vocab_size,
                                 self.seq_len)

    def train_kwargs(self) -> dict:
        return dict(lambda_p=self.lambda_p, lambda_m=self.lambda_m, lambda_head=self.lambda_head,
                    steps=self.steps, batch_size=self.batch_size, optimizer=self.optimizer,
                    weight_decay=self.weight_decay, schedule=self.schedule, seed=self.seed,
                    eval_every=self.eval_every)

    def task_list(self) -> list[str]:
        items = [t.strip() for t in self.tasks.split(",") if t.strip()]
        if not items:
            raise ConfigError("tasks: at least one task required")
        for t in items:
            if t not in tasklib.RULES and not Path(t).is_file():
                raise ConfigError(f"tasks: {t!r} is neither a rule kind {tasklib.RULES} nor a task file")
        return items


_SPEC_FIELDS = {f.name: f for f in fields(RunSpec)}


def _coerce(name: str, raw: str):
    f = _SPEC_FIELDS[name]
    typ = str(f.type)
    if raw in ("", "none", "None") and "None" in typ:
        return None
    try:
        if typ.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ.startswith("int"):
            return int(raw)
        if typ.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {typ}") from None
    return raw


def read_config_file(path) -> dict:
    """Flat ``key = value`` file; sections only group keys."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"config file {path}: {e}") from None
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            name = key.replace("-", "_")
            if name not in _SPEC_FIELDS:
                raise ConfigError(f"{path} [{section}] {key}: unknown key")
            out[name] = _coerce(name, raw)
    return out


def resolve_spec(args: argparse.Namespace) -> RunSpec:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _SPEC_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    spec = RunSpec(**values)
    spec.validate()
    return spec


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    for name, f in _SPEC_FIELDS.items():
        flag = "--" + name.replace("_", "-")
        typ = str(f.type)
        if typ.startswith("bool"):
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None)
        else:
            conv = int if typ.startswith("int") else float if typ.startswith("float") else str
            p.add_argument(flag, dest=name, type=conv, default=None)
    p.add_argument("--L", dest="num_layers", type=int, default=None)
    p.add_argument("--bn", dest="size", type=int, default=None)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

_BACKBONES: dict = {}


def warmup_tasks(cfg: TransformerConfig, seed: int) -> list[tasklib.Task]:
    """Held-out tasks used only to give the frozen backbone useful features."""
    kinds = ("contains", "compare", "linear", "first_last")
    return [tasklib.generate_task(f"warmup-{k}", k, 1000, 0, 0, vocab_size=cfg.vocab_size,
                                  seq_len=cfg.max_seq_len, seed=10_000 + 97 * seed + i)
            for i, k in enumerate(kinds)]


def make_backbone(cfg: TransformerConfig, seed: int, warmup_steps: int):
    key = (cfg, seed, warmup_steps)
    if key not in _BACKBONES:
        w = init_backbone(cfg, seed)
        if warmup_steps:
            w = warmup_backbone(w, warmup_tasks(cfg, seed), steps=warmup_steps, seed=seed)
        _BACKBONES[key] = w
    return _BACKBONES[key]


def load_tasks(spec: RunSpec, seed: int | None = None) -> list[tasklib.Task]:
    seed = spec.seed if seed is None else seed
    out = []
    for i, t in enumerate(spec.task_list()):
        if Path(t).is_file():
            out.append(tasklib.load_task(t))
        else:
            out.append(tasklib.generate_task(f"{t}{i}", t, spec.n_train, spec.n_eval, spec.n_eval,
                                             vocab_size=spec.vocab_size, seq_len=spec.seq_len,
                                             seed=1000 * seed + i))
    return out


def _attach(spec: RunSpec, task_list, seed: int):
    return build_attachment(spec.variant, spec.d, spec.size, spec.num_layers, mode=spec.mode, k=spec.sparsity,
                            num_classes=tuple(t.num_classes for t in task_list),
                            k_task=spec.k_task, combine_mode=spec.combine_mode, alpha=spec.alpha,
                            nonlinearity=spec.nonlinearity, multitask=spec.multitask, seed=seed)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    spec = resolve_spec(args)
    out = Path(spec.out)
    task_list = load_tasks(spec)
    if not spec.multitask and len(task_list) != 1:
        raise ConfigError("tasks: single-task training takes exactly one task (use --multitask)")
    out.mkdir(parents=True, exist_ok=True)
    cfg = spec.backbone_config()
    weights = make_backbone(cfg, spec.backbone_seed, spec.warmup_steps)
    att = _attach(spec, task_list, spec.seed)
    tc = TrainConfig(**spec.train_kwargs())
    metrics = out / "metrics.csv"
    if metrics.exists():
        metrics.unlink()
    if spec.multitask:
        res = train_multi_task(weights, att, tasklib.TaskSet(task_list, spec.temperature), tc, metrics)
    else:
        res = train_single_task(weights, att, task_list[0], tc, metrics)
    meta = {"backbone": asdict(cfg), "backbone_seed": spec.backbone_seed, "warmup_steps": spec.warmup_steps,
            "backbone_crc": weights.fingerprint()}
    ck = storage.save_checkpoint(res.attachment, out / "model.pptl", meta)
    manifest = {"spec": asdict(spec), "best_valid": res.best_valid, "payload_bits": ck.payload_bits,
                "bls_predicted": storage.bls_propetl(spec.variant, spec.d, spec.size, spec.num_layers,
                                                     len(task_list) if spec.multitask else 0)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"best valid accuracy {res.best_valid:.4f}; checkpoint {out / 'model.pptl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    att = storage.load_checkpoint(args.checkpoint)
    meta = storage.read_checkpoint_file(args.checkpoint).meta
    if "backbone" not in meta:
        raise ConfigError("checkpoint carries no backbone description")
    cfg = TransformerConfig(**meta["backbone"])
    weights = make_backbone(cfg, meta["backbone_seed"], meta["warmup_steps"])
    if weights.fingerprint() != meta["backbone_crc"]:
        raise ConfigError("rebuilt backbone does not match the checkpoint fingerprint")
    task = tasklib.load_task(args.task) if Path(args.task).is_file() else tasklib.generate_task(
        args.task, args.task, 0, args.n_eval, args.n_eval, vocab_size=cfg.vocab_size,
        seq_len=cfg.max_seq_len, seed=1000 * args.seed + args.task_index)
    r = evaluate(weights, att, task, args.split, args.task_id)
    print(json.dumps({"task": task.name, "split": args.split, "accuracy": r.accuracy, "loss": r.loss}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = resolve_spec(args)
    grid = [float(g) for g in args.grid.split(",")]
    if args.axis == "size":
        grid = [int(g) for g in grid]
    elif any(not 0 < g <= 1 for g in grid):
        raise ConfigError("grid: sparsity values must lie in (0, 1]")
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = spec.backbone_config()
    seeds = list(range(spec.seed, spec.seed + args.seeds))
    rows = run_sweep(lambda s: make_backbone(cfg, spec.backbone_seed + s, spec.warmup_steps),
                     lambda s: load_tasks(spec, s)[0], args.axis, grid, spec.variant, spec.size,
                     spec.sparsity, TrainConfig(**spec.train_kwargs()), seeds=seeds, mode=spec.mode,
                     alpha=spec.alpha, nonlinearity=spec.nonlinearity)
    path = out / f"sweep_{args.axis}.csv"
    write_summary_csv(rows, path, ["axis", "value", "size", "k", "bls", "runs", "mean", "sd"])
    for r in rows:
        print(f"{args.axis}={r['value']}: acc {r['mean']:.4f} +- {r['sd']:.4f}  (bls {r['bls']:,})")
    return EXIT_OK


def cmd_bls(args) -> int:
    size = args.size
    if size is None or args.d is None or args.L is None:
        raise ConfigError("bls: --d, --L and --bn/--l are required")
    if min(size, args.d, args.L) < 1 or args.T < 0:
        raise ConfigError("bls: dimensions must be positive")
    v = args.variant
    try:
        vanilla = storage.bls_vanilla(v, args.d, size, args.L)
        if args.mode == "propetl":
            groups = storage.propetl_groups(v, args.d, size, args.L, args.T)
        elif args.mode == "only-mask":
            total = storage.bls_only_mask(v, args.d, size, args.L, args.k, literal_prefix=args.literal_prefix)
            groups = [("retained params (32-bit)", total // 32, 32)] if total % 32 == 0 else \
                [("retained params (approx.)", total, 1)]
        elif args.mode == "only-share":
            groups = [("shared module (32-bit)", storage.prototype_numel(v, args.d, size), 32)]
        else:
            groups = [("per-layer modules (32-bit)", storage.prototype_numel(v, args.d, size) * args.L, 32)]
    except ValueError as e:
        raise ConfigError(str(e)) from None
    full = 32 * args.full_params if args.full_params else None
    print(storage.BlsReport(groups, baseline_bits=vanilla, full_model_bits=full).render())
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(storage.inspect_checkpoint(args.checkpoint))
    return EXIT_OK


def parse_suite(text: str):
    if text == "default":
        return tasklib.DEFAULT_SUITE
    if text == "imbalanced":
        return tasklib.IMBALANCED_SUITE
    out = []
    for item in text.split(","):
        kind, _, n = item.partition(":")
        if kind not in tasklib.RULES or not n.isdigit():
            raise ConfigError(f"suite: bad entry {item!r} (expected kind:size)")
        out.append((kind, int(n)))
    return tuple(out)


def cmd_gen_tasks(args) -> int:
    suite = parse_suite(args.suite)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ts = tasklib.generate_suite(suite, args.seed, vocab_size=args.vocab_size, seq_len=args.seq_len,
                                eval_size=args.n_eval, temperature=args.temperature)
    names = []
    for t in ts.tasks:
        tasklib.save_task(t, out / f"{t.name}.json")
        names.append(t.name)
    (out / "suite.json").write_text(json.dumps(
        {"tasks": names, "train_sizes": ts.train_sizes, "temperature": ts.sampling_temperature,
         "seed": args.seed}, indent=2) + "\n")
    print(f"wrote {len(names)} task files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="propetl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one attachment and write checkpoint + metrics")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    e.add_argument("checkpoint")
    e.add_argument("--task", required=True, help="task file or rule kind")
    e.add_argument("--task-index", type=int, default=0)
    e.add_argument("--task-id", type=int, default=None)
    e.add_argument("--split", default="test", choices=tasklib.SPLITS)
    e.add_argument("--n-eval", type=int, default=500)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="sparsity or size sweep over several seeds")
    _add_run_flags(s)
    s.add_argument("--axis", choices=("sparsity", "size"), required=True)
    s.add_argument("--grid", required=True, help="comma-separated grid values")
    s.add_argument("--seeds", type=int, default=5)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bls", help="bit-level storage report")
    b.add_argument("--variant", choices=VARIANTS, default="adapter")
    b.add_argument("--d", type=int)
    b.add_argument("--bn", "--l", dest="size", type=int)
    b.add_argument("--L", type=int)
    b.add_argument("--T", type=int, default=0)
    b.add_argument("--mode", choices=("propetl", "only-mask", "only-share", "vanilla"), default="propetl")
    b.add_argument("--k", type=float, default=0.5)
    b.add_argument("--full-params", type=int, default=None)
    b.add_argument("--literal-prefix", action="store_true")
    b.set_defaults(func=cmd_bls)

    i = sub.add_parser("inspect", help="dump a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gen-tasks", help="write synthetic task files")
    g.add_argument("--suite", default="default", help="default, imbalanced, or kind:size,...")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--vocab-size", type=int, default=16)
    g.add_argument("--seq-len", type=int, default=16)
    g.add_argument("--n-eval", type=int, default=500)
    g.add_argument("--temperature", type=float, default=10.0)
    g.set_defaults(func=cmd_gen_tasks)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN
    except storage.CheckpointError as e:
        print(f"corrupt artifact: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as e:
        print(f"file not found: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
