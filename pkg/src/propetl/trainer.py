"""Mask + prototype training loop, multi-task sampling, evaluation, ablations."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import storage
from .backbone import BackboneWeights, encode, encode_features
from .optim import SGD, AdamW, ParamGroup
from .petl import ProPetlAttachment, build_attachment, make_head
from .tasks import Task, TaskSet

log = logging.getLogger(__name__)

METRICS_VERSION = "# propetl-metrics v1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``lambda_m`` is the mask-score learning rate and is normally larger
    than the prototype rate ``lambda_p``.
    """

    lambda_p: float = 1e-4
    lambda_m: float = 3e-3
    lambda_head: float | None = None
    steps: int = 500
    batch_size: int = 32
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    schedule: str = "constant"
    seed: int = 0
    eval_every: int = 100
    keep_best: bool = True
    log_every: int = 1
    finetune_backbone: bool = False
    lambda_backbone: float | None = None

    def __post_init__(self):
        if self.lambda_p <= 0:
            raise ValueError("lambda_p must be > 0")
        if self.lambda_m < 0:
            raise ValueError("lambda_m must be >= 0")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")


@dataclass
class EvalResult:
    accuracy: float
    loss: float


@dataclass
class TrainResult:
    attachment: ProPetlAttachment
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_valid: float = float("nan")
    backbone: BackboneWeights | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history if h["split"] == "train"])


class MetricsWriter:
    """Append-only CSV: step, task, split, loss, accuracy, per-layer density, wall clock."""

    def __init__(self, path, num_layers: int):
        self.path = Path(path)
        self.columns = ["step", "task", "split", "loss", "accuracy"] + \
            [f"mask_density_l{l}" for l in range(num_layers)] + ["wall_clock"]
        new = not self.path.exists()
        self._fh = self.path.open("a", newline="")
        self._w = csv.writer(self._fh)
        if new:
            self._fh.write(METRICS_VERSION + "\n")
            self._w.writerow(self.columns)

    def write(self, step, task, split, loss, accuracy, densities, wall) -> None:
        self._w.writerow([step, task, split, f"{loss:.6f}", f"{accuracy:.6f}"] +
                         [f"{d:.6f}" for d in densities] + [f"{wall:.3f}"])

    def close(self) -> None:
        self._fh.close()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != METRICS_VERSION:
            raise ValueError(f"unsupported metrics header {first!r}")
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# sampling and evaluation
# ---------------------------------------------------------------------------

def sample_task(train_sizes, temperature: float = 10.0) -> np.ndarray:
    """Task probabilities proportional to (N_t / sum N)^(1/T)."""
    sizes = np.asarray(train_sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("sample_task: empty task list")
    if (sizes <= 0).any():
        raise ValueError("sample_task: train sizes must be positive")
    if temperature < 1:
        raise ValueError("sample_task: temperature must be >= 1")
    p = (sizes / sizes.sum()) ** (1.0 / temperature)
    return p / p.sum()


def evaluate(weights: BackboneWeights, attachment: ProPetlAttachment, task: Task, split: str = "valid",
             task_id: int | None = None, batch_size: int = 256, mask_seed: int | None = None) -> EvalResult:
    """Accuracy and mean NLL with hard masks (no straight-through graph)."""
    X, Y = task.split(split)
    if len(Y) == 0:
        raise ValueError(f"evaluate: split {split!r} of {task.name} is empty")
    attachment.reset_mask_rng(mask_seed)
    correct = 0
    nll = 0.0
    for i in range(0, len(Y), batch_size):
        xb, yb = X[i:i + batch_size], Y[i:i + batch_size]
        logits = encode(xb, weights, attachment, task_id, train=False).data.astype(np.float64)
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        nll += float((lse - logits[np.arange(len(yb)), yb]).sum())
        correct += int((logits.argmax(axis=1) == yb).sum())
    return EvalResult(correct / len(Y), nll / len(Y))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _make_optimizer(attachment, weights, config: TrainConfig):
    g = attachment.parameter_groups()
    groups = [ParamGroup(g["prototype"], config.lambda_p, config.weight_decay),
              ParamGroup(g["scores"], config.lambda_m, 0.0),
              ParamGroup(g["head"], config.lambda_head or config.lambda_p, 0.0)]
    if config.finetune_backbone:
        groups.append(ParamGroup(weights.parameters(), config.lambda_backbone or config.lambda_p,
                                 config.weight_decay))
    if config.optimizer == "sgd":
        return SGD(groups)
    return AdamW(groups, betas=(config.beta1, config.beta2))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[i:i + batch_size]


def _lr_scale(config: TrainConfig, step: int) -> float:
    if config.schedule == "linear":
        return 1.0 - step / config.steps
    return 1.0


def _snapshot(attachment, weights, config):
    snap = {"att": attachment.state_dict()}
    if config.finetune_backbone:
        snap["bb"] = {n: t.data.copy() for n, t in weights.tensors.items()}
    return snap


def _restore(snap, attachment, weights):
    attachment.load_state_dict(snap["att"])
    for n, arr in snap.get("bb", {}).items():
        weights.tensors[n].data = arr.copy()


def _train_loop(weights: BackboneWeights, attachment: ProPetlAttachment, tasks: list[Task],
                config: TrainConfig, probs: np.ndarray | None, multitask: bool,
                metrics_path=None, valid_tasks: list[Task] | None = None) -> TrainResult:
    if not attachment.trainable:
        raise ValueError("attachment holds frozen masks (loaded checkpoint); nothing to train")
    for t in tasks:
        if t.train_size == 0:
            raise ValueError(f"task {t.name} has an empty training set")
    if config.finetune_backbone:
        weights = weights.copy()
        weights.set_trainable(True)
    rng = np.random.default_rng(config.seed)
    opt = _make_optimizer(attachment, weights, config)
    streams = [_batches(t.train_size, min(config.batch_size, t.train_size), rng) for t in tasks]
    writer = MetricsWriter(metrics_path, attachment.num_layers) if metrics_path else None
    result = TrainResult(attachment, backbone=weights if config.finetune_backbone else None)
    best, best_snap = -math.inf, None
    t0 = time.perf_counter()
    try:
        for step in range(config.steps):
            ti = int(rng.choice(len(tasks), p=probs)) if multitask else 0
            task = tasks[ti]
            idx = next(streams[ti])
            X, Y = task.split("train")
            xb, yb = X[idx], Y[idx]
            tid = ti if multitask else None
            try:
                # overflow surfaces as NonFiniteError below, so numpy's warning is redundant
                with np.errstate(over="ignore", invalid="ignore"):
                    logits = encode(xb, weights, attachment, tid, train=True)
                    loss = ad.cross_entropy(logits, yb)
            except ad.NonFiniteError as e:
                raise TrainingDiverged(f"step {step} on task {task.name}: {e}") from e
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"loss became {lv} at step {step} on task {task.name}")
            ad.backward(loss)
            opt.step(_lr_scale(config, step))
            opt.zero_grad()
            acc = float((logits.data.argmax(axis=1) == yb).mean())
            row = {"step": step, "task": task.name, "split": "train", "loss": lv, "accuracy": acc}
            result.history.append(row)
            if writer and step % config.log_every == 0:
                writer.write(step, task.name, "train", lv, acc, attachment.layer_densities(tid),
                             time.perf_counter() - t0)
            last = step == config.steps - 1
            if (step + 1) % config.eval_every == 0 or last:
                vts = valid_tasks or tasks
                accs = []
                for vi, vt in enumerate(vts):
                    r = evaluate(weights, attachment, vt, "valid", vi if multitask else None)
                    accs.append(r.accuracy)
                    result.evals.append({"step": step, "task": vt.name, "accuracy": r.accuracy, "loss": r.loss})
                    if writer:
                        writer.write(step, vt.name, "valid", r.loss, r.accuracy,
                                     attachment.layer_densities(vi if multitask else None),
                                     time.perf_counter() - t0)
                score = float(np.mean(accs))
                if score > best:
                    best = score
                    if config.keep_best:
                        best_snap = _snapshot(attachment, weights, config)
    finally:
        if writer:
            writer.close()
    if config.keep_best and best_snap is not None:
        _restore(best_snap, attachment, weights)
    result.best_valid = best
    return result


def train_single_task(weights: BackboneWeights, attachment: ProPetlAttachment, task: Task,
                      config: TrainConfig, metrics_path=None) -> TrainResult:
    """Train prototype, layer scores and head on one task.

    Every step recomputes m_l = h(s_l) for each layer, runs the masked
    forward pass, and updates the prototype with ``lambda_p`` and the
    scores with ``lambda_m``.  Final masks are read off the trained scores
    with :meth:`ProPetlAttachment.binary_layer_masks`.
    """
    return _train_loop(weights, attachment, [task], config, None, False, metrics_path)


def train_multi_task(weights: BackboneWeights, attachment: ProPetlAttachment, taskset: TaskSet,
                     config: TrainConfig, metrics_path=None) -> TrainResult:
    """Temperature-sampled multi-task training with hybrid layer/task masks."""
    if attachment.mode in ("propetl", "only_mask") and (
            not attachment.task_scores or len(attachment.task_scores) != len(taskset.tasks)):
        raise ValueError("multi-task training needs one task-score set per task")
    if len(attachment.heads) != len(taskset.tasks):
        raise ValueError("attachment needs one classifier head per task")
    probs = sample_task(taskset.train_sizes, taskset.sampling_temperature)
    return _train_loop(weights, attachment, taskset.tasks, config, probs, True, metrics_path)


def finetune_full(weights: BackboneWeights, task: Task, config: TrainConfig, seed: int = 0) -> TrainResult:
    """Unfrozen-backbone baseline: backbone and a head trained jointly."""
    att = build_attachment("adapter", weights.config.d, 1, weights.config.num_layers, mode="only_share",
                           num_classes=(task.num_classes,), seed=seed)
    for t in att.prototype.params.values():
        t.data = np.zeros_like(t.data)
    return train_single_task(weights, att, task, replace(config, finetune_backbone=True))


def warmup_backbone(weights: BackboneWeights, tasks: list[Task], steps: int = 300, lr: float = 3e-3,
                    batch_size: int = 32, seed: int = 0) -> BackboneWeights:
    """Briefly pretrain a copy of the backbone on held-out tasks, then freeze it."""
    w = weights.copy()
    w.set_trainable(True)
    rng = np.random.default_rng(seed)
    heads = [make_head(w.config.d, t.num_classes, rng) for t in tasks]
    params = w.parameters() + [p for h in heads for p in h.values()]
    opt = AdamW([ParamGroup(params, lr, 0.0)])
    for step in range(steps):
        ti = step % len(tasks)
        X, Y = tasks[ti].split("train")
        idx = rng.choice(len(Y), size=min(batch_size, len(Y)), replace=False)
        feats = encode_features(X[idx], w)
        logits = ad.add(ad.matmul(feats, heads[ti]["W"]), heads[ti]["b"])
        ad.backward(ad.cross_entropy(logits, Y[idx]))
        opt.step(1.0 - step / steps)
        opt.zero_grad()
    w.freeze()
    return w


# ---------------------------------------------------------------------------
# ablations and sweeps
# ---------------------------------------------------------------------------

ABLATION_MODES = ("propetl", "random_mask", "only_mask_same_bn", "only_mask_same_k", "only_share")


@dataclass
class AblationSetting:
    name: str
    mode: str
    size: int
    k: float
    bls: int


def ablation_settings(variant: str, d: int, size: int, L: int, k: float,
                      modes=ABLATION_MODES) -> list[AblationSetting]:
    """Module size / sparsity for each mode, matched to the propetl bit budget."""
    target = storage.bls_propetl(variant, d, size, L)
    out = []
    for name in modes:
        if name in ("propetl", "random_mask"):
            out.append(AblationSetting(name, name, size, k, target))
        elif name == "only_share":
            s = storage.match_size(lambda x: storage.bls_vanilla(variant, d, x, 1), target, prefer_at_least=size)
            out.append(AblationSetting(name, "only_share", s, 1.0, storage.bls_vanilla(variant, d, s, 1)))
        elif name == "only_mask_same_bn":
            kk = storage.match_sparsity(variant, d, size, L, target)
            out.append(AblationSetting(name, "only_mask", size, kk, storage.bls_only_mask(variant, d, size, L, kk)))
        elif name == "only_mask_same_k":
            s = storage.match_size(lambda x: storage.bls_only_mask(variant, d, x, L, k), target)
            out.append(AblationSetting(name, "only_mask", s, k, storage.bls_only_mask(variant, d, s, L, k)))
        else:
            raise ValueError(f"unknown ablation mode {name!r}")
    return out


def run_once(weights, task: Task, variant: str, size: int, mode: str, k: float, config: TrainConfig,
             seed: int, **attach_kw) -> dict:
    att = build_attachment(variant, weights.config.d, size, weights.config.num_layers, mode=mode, k=k,
                           num_classes=(task.num_classes,), seed=seed, **attach_kw)
    res = train_single_task(weights, att, task, replace(config, seed=seed))
    test = evaluate(weights, att, task, "test")
    return {"valid": res.best_valid, "test": test.accuracy, "test_loss": test.loss, "result": res}


def _summ(vals) -> tuple[float, float]:
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def run_ablation(weights_for_seed, task_for_seed, variant: str, size: int, k: float, config: TrainConfig,
                 seeds=(0, 1, 2, 3, 4), modes=ABLATION_MODES, **attach_kw) -> list[dict]:
    """Train every mode at matched bit-level storage over several seeds.

    ``weights_for_seed`` / ``task_for_seed`` map a seed to a frozen
    backbone and a task (they may ignore it).  Returns one row per mode
    with mean and sample standard deviation of test accuracy.
    """
    any_w = weights_for_seed(seeds[0])
    settings = ablation_settings(variant, any_w.config.d, size, any_w.config.num_layers, k, modes)
    rows = []
    for s in settings:
        accs = []
        for seed in seeds:
            r = run_once(weights_for_seed(seed), task_for_seed(seed), variant, s.size, s.mode, s.k,
                         config, seed, **attach_kw)
            accs.append(r["test"])
            log.info("ablation %s seed %d: test acc %.4f", s.name, seed, r["test"])
        mean, sd = _summ(accs)
        rows.append({"mode": s.name, "size": s.size, "k": s.k, "bls": s.bls, "mean": mean, "sd": sd,
                     "accs": accs})
    return rows


def run_sweep(weights_for_seed, task_for_seed, axis: str, grid, variant: str, size: int, k: float,
              config: TrainConfig, seeds=(0, 1, 2, 3, 4), mode: str = "propetl", **attach_kw) -> list[dict]:
    """Sparsity (k) or module-size sweep; one summary row per grid point."""
    if axis not in ("sparsity", "size"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    rows = []
    for g in grid:
        kk, ss = (g, size) if axis == "sparsity" else (k, int(g))
        w0 = weights_for_seed(seeds[0])
        bls = storage.bls_propetl(variant, w0.config.d, ss, w0.config.num_layers)
        accs = [run_once(weights_for_seed(seed), task_for_seed(seed), variant, ss, mode, kk, config, seed,
                         **attach_kw)["test"] for seed in seeds]
        mean, sd = _summ(accs)
        rows.append({"axis": axis, "value": g, "size": ss, "k": kk, "bls": bls, "runs": len(accs),
                     "mean": mean, "sd": sd, "accs": accs})
    return rows


def write_summary_csv(rows: list[dict], path, columns) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_VERSION.replace("metrics", "summary") + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])
