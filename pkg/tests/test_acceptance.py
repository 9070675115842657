"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed in the terminal
summary) with the measured values, then asserts.  Tolerances are the
ones pinned by the criteria; nothing here is loosened to make a run pass.
"""

from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest

from propetl import autodiff as ad
from propetl import storage as stg
from propetl.autodiff import Tensor
from propetl.backbone import TransformerConfig, encode, init_backbone
from propetl.masking import MaskScores, combine, density, threshold_topk
from propetl.petl import build_attachment, count_trainable
from propetl.tasks import generate_task
from propetl.trainer import TrainConfig, evaluate, finetune_full, sample_task, train_single_task


# 1 -----------------------------------------------------------------------------

def test_criterion_01_bls_exactness(verdict):
    bits = stg.bls_propetl("adapter", 768, 64, 12)
    # independent integer oracle
    oracle = 32 * (2 * 64 * 768 + 64 + 768) + 2 * 64 * 768 * 12
    vanilla = stg.bls_vanilla("adapter", 768, 64, 12)
    ratio = bits / vanilla
    full = 100 * bits / (125_000_000 * 32)
    ok = (bits == oracle == 4_352_000 and vanilla == 38_068_224 and round(ratio, 4) == 0.1143
          and 0.105 <= full <= 0.115)
    verdict(1, ok, f"bits={bits:,} vanilla={vanilla:,} ratio={ratio:.5f} full-model={full:.4f}%")
    assert ok


# 2 -----------------------------------------------------------------------------

def test_criterion_02_trainable_count(verdict):
    att = build_attachment("adapter", 768, 64, 12, mode="propetl", k=0.5)
    n = count_trainable(att)
    fracs = [100 * n / b for b in (124_000_000, 125_000_000, 126_000_000)]
    ok = n == 1_288_768 and all(1.02 <= f <= 1.06 for f in fracs)
    verdict(2, ok, f"count={n:,} fraction over 124-126M backbones={min(fracs):.4f}%..{max(fracs):.4f}%")
    assert ok


# 3 -----------------------------------------------------------------------------

def test_criterion_03_topk_cardinality(verdict):
    rng = np.random.default_rng(3)
    ks = (0.1, 0.3, 0.5, 1.0)
    failures = checks = 0
    for n in (7, 100, 98_304):
        want = {k: int((Decimal(repr(k)) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP)) for k in ks}
        for _ in range(1000):
            s = rng.uniform(-1, 1, size=n).astype(np.float32)
            for k in ks:
                checks += 1
                failures += threshold_topk(MaskScores("s", s, k)).popcount() != want[k]
    ok = failures == 0
    verdict(3, ok, f"{checks} (vector, k) checks, {failures} failures")
    assert ok


# 4 -----------------------------------------------------------------------------

CFG4 = TransformerConfig(num_layers=2, d=8, num_heads=2, ffn_dim=16, vocab_size=8, max_seq_len=6)


def _model4(seed=0):
    weights = init_backbone(CFG4, seed=seed)
    att = build_attachment("adapter", 8, 3, 2, mode="propetl", k=0.5, seed=seed, nonlinearity="gelu")
    rng = np.random.default_rng(seed + 1)
    for t in att.prototype.params.values():
        t.data = rng.normal(0, 0.5, size=t.shape).astype(np.float32)
    X = rng.integers(8, size=(4, 6))
    Y = rng.integers(2, size=4)
    return weights, att, X, Y


def _rel(a, n):
    return float(np.max(np.abs(a - n) / (np.abs(a) + 1e-8)))


def test_criterion_04_ste_and_gradients(verdict):
    # (a) straight-through contract, bit for bit, on many upstream gradients
    rng = np.random.default_rng(4)
    ste_ok = True
    for _ in range(200):
        n = int(rng.integers(1, 64))
        s = Tensor(rng.normal(size=n), requires_grad=True)
        g = rng.normal(size=n).astype(np.float32)
        ad.backward(ad.sum_all(ad.elementwise_mul(ad.binarize_topk_ste(s, float(rng.uniform(0.05, 1))), Tensor(g))))
        ste_ok &= s.grad.tobytes() == g.tobytes()

    # (b) prototype grads vs central differences; score grads vs the identity-substituted oracle
    weights, att, X, Y = _model4()
    loss = ad.cross_entropy(encode(X, weights, att, train=True), Y)
    ad.backward(loss)
    proto = att.prototype
    hard = [{n: m.as_float() for n, m in g.items()} for g in att.binary_layer_masks()]

    def loss_with(masks=None, name=None, value=None):
        saved_masks, saved = att.masks_for, None
        if masks is not None:
            att.masks_for = lambda l, task_id=None, train=False: masks[l]
        if name is not None:
            saved = proto.params[name]
            proto.params[name] = value
        try:
            return ad.cross_entropy(encode(X, weights, att), Y)
        finally:
            att.masks_for = saved_masks
            if name is not None:
                proto.params[name] = saved

    err_p = 0.0
    for name in ("W_down", "W_up"):
        idx = rng.choice(proto.params[name].size, size=10, replace=False)
        analytic = proto.params[name].grad.reshape(-1)[idx]
        with ad.working_precision(np.float64):
            numeric = ad.numerical_grad(lambda arr, name=name: float(loss_with(None, name, Tensor(arr)).data),
                                        proto.params[name].data.astype(np.float64), 1e-3, idx, dtype=np.float64)
        err_p = max(err_p, _rel(analytic, numeric.reshape(-1)[idx]))

    # identity substitution: h(s) -> s at the current binary point, so dL/ds = dL/dm
    err_s = err_o = 0.0
    for l in range(2):
        for name in ("W_down", "W_up"):
            analytic = att.layer_scores[l][name].grad.reshape(-1)
            idx = rng.choice(analytic.size, size=5, replace=False)

            def f(arr, l=l, name=name):
                masks = [{n: Tensor(m) for n, m in g.items()} for g in hard]
                masks[l][name] = Tensor(arr)
                return float(loss_with(masks).data)

            with ad.working_precision(np.float64):
                numeric = ad.numerical_grad(f, hard[l][name].astype(np.float64), 1e-3, idx, dtype=np.float64)
            err_s = max(err_s, _rel(analytic[idx], numeric.reshape(-1)[idx]))
            # same quantity by autodiff: hard masks as leaves, gradient taken w.r.t. the mask itself
            masks = [{n: Tensor(m, requires_grad=True) for n, m in g.items()} for g in hard]
            ad.backward(loss_with(masks))
            err_o = max(err_o, float(np.max(np.abs(analytic - masks[l][name].grad.reshape(-1)))))

    # (c) shared prototype gradient == sum of per-layer detached gradients, L = 3
    cfg3 = TransformerConfig(num_layers=3, d=8, num_heads=2, ffn_dim=16, vocab_size=8, max_seq_len=6)
    w3 = init_backbone(cfg3, seed=5)
    att3 = build_attachment("adapter", 8, 3, 3, mode="propetl", k=0.5, seed=5)
    for t in att3.prototype.params.values():
        t.data = rng.normal(0, 0.5, size=t.shape).astype(np.float32)
    shared = att3.prototype

    def grads(active):
        frozen = shared.frozen_copy()
        att3.prototype_for = lambda l: shared if l in active else frozen
        for t in shared.params.values():
            t.grad = None
        try:
            ad.backward(ad.cross_entropy(encode(X, w3, att3), Y))
        finally:
            del att3.prototype_for
        return {n: t.grad.astype(np.float64) for n, t in shared.params.items()}

    total = grads({0, 1, 2})
    parts = [grads({l}) for l in range(3)]
    err_c = max(float(np.max(np.abs(total[n] - sum(p[n] for p in parts)))) /
                max(float(np.max(np.abs(total[n]))), 1e-30) for n in total)

    ok = ste_ok and err_p < 1e-3 and err_s < 1e-3 and err_o < 1e-3 and err_c < 1e-5
    verdict(4, ok, f"(a) STE bit-exact={ste_ok}; (b) proto FD err={err_p:.2e}, score FD err={err_s:.2e}, "
                   f"mask-leaf err={err_o:.1e}; (c) accumulation err={err_c:.1e} (float32 summation order)")
    assert ok


# 5 -----------------------------------------------------------------------------

def test_criterion_05_hybrid_densities(verdict):
    rng = np.random.default_rng(5)
    ors, ands = [], []
    for _ in range(1000):
        a = threshold_topk(MaskScores.init("a", (10_000,), 0.3, rng))
        b = threshold_topk(MaskScores.init("b", (10_000,), 0.3, rng))
        ors.append(density(combine(a, b, "OR")))
        ands.append(density(combine(a, b, "AND")))
    mo, ma = float(np.mean(ors)), float(np.mean(ands))
    ok = 0.50 <= mo <= 0.52 and 0.08 <= ma <= 0.10
    verdict(5, ok, f"OR density={mo:.4f} (expect 0.51), AND density={ma:.4f} (expect 0.09)")
    assert ok


# 6 -----------------------------------------------------------------------------

def test_criterion_06_k1_reduction(verdict):
    cfg = TransformerConfig(num_layers=4, d=32, num_heads=4, ffn_dim=64, vocab_size=16, max_seq_len=16)
    weights = init_backbone(cfg, seed=6)
    task = generate_task("lin", "linear", 512, 64, 128, seed=6)
    tc = TrainConfig(lambda_p=3e-3, lambda_m=3e-2, steps=100, batch_size=16, eval_every=50, keep_best=False)
    a = build_attachment("adapter", 32, 8, 4, mode="propetl", k=1.0, seed=6)
    b = build_attachment("adapter", 32, 8, 4, mode="only_share", seed=6)
    same_init = all(np.array_equal(a.prototype.params[n].data, b.prototype.params[n].data) for n in a.prototype.params)
    ra, rb = train_single_task(weights, a, task, tc), train_single_task(weights, b, task, tc)
    X = task.split("test")[0]
    la, lb = encode(X, weights, a).data, encode(X, weights, b).data
    ok = same_init and ra.losses.tobytes() == rb.losses.tobytes() and la.tobytes() == lb.tobytes()
    verdict(6, ok, f"matched init={same_init}, 100 step losses identical={ra.losses.tobytes() == rb.losses.tobytes()}, "
                   f"logits identical={la.tobytes() == lb.tobytes()}")
    assert ok


# 7 -----------------------------------------------------------------------------

def test_criterion_07_checkpoint_contract(verdict, tmp_path):
    cfg = TransformerConfig(num_layers=4, d=32, num_heads=4, ffn_dim=64, vocab_size=16, max_seq_len=16)
    weights = init_backbone(cfg, seed=7)
    task = generate_task("cmp", "compare", 256, 64, 128, seed=7)
    details, ok = [], True
    for variant, size in (("adapter", 8), ("lora", 4), ("prefix", 4)):
        att = build_attachment(variant, 32, size, 4, mode="propetl", k=0.5, seed=7)
        train_single_task(weights, att, task, TrainConfig(lambda_p=3e-3, lambda_m=3e-2, steps=30, batch_size=16,
                                                          eval_every=15))
        X = task.split("test")[0]
        before = encode(X, weights, att).data
        ck = stg.save_checkpoint(att, tmp_path / f"{variant}.pptl")
        loaded = stg.load_checkpoint(tmp_path / f"{variant}.pptl")
        same = encode(X, weights, loaded).data.tobytes() == before.tobytes()
        predicted = stg.bls_propetl(variant, 32, size, 4)
        no_scores = not any("scores" in s.name for s in ck.sections) and loaded.layer_scores is None
        ok &= same and ck.payload_bits == predicted and no_scores
        details.append(f"{variant}: logits identical={same} payload={ck.payload_bits:,} "
                       f"predicted={predicted:,} no scores={no_scores}")
    verdict(7, ok, "; ".join(details))
    assert ok


# 8 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_desk_scale_ablation(verdict):
    from propetl.cli import make_backbone
    from propetl.trainer import ablation_settings, run_once

    weights = make_backbone(TransformerConfig(num_layers=4, d=64), 0, 300)
    tc = TrainConfig(lambda_p=3e-3, lambda_m=3e-3, steps=400, eval_every=100)
    share = {s.name: s for s in ablation_settings("adapter", 64, 16, 4, 0.5)}["only_share"]
    runs = [("propetl", 16, k) for k in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0)]
    runs += [("only_share", share.size, 1.0), ("random_mask", 16, 0.5)]
    accs: dict = {}
    for seed in range(5):
        task = generate_task("linear", "linear", 1000, 500, 2000, seed=100 + seed)
        for mode, size, k in runs:
            accs.setdefault((mode, k), []).append(run_once(weights, task, "adapter", size, mode, k, tc, seed)["test"])
    m = {key: float(np.mean(v)) for key, v in accs.items()}
    sd = {key: float(np.std(v, ddof=1)) for key, v in accs.items()}
    sweep = {k: m[("propetl", k)] for _, _, k in runs[:6]}
    a = m[("propetl", 0.5)] >= m[("only_share", 1.0)]
    b = m[("propetl", 0.5)] >= m[("random_mask", 0.5)]
    c = max(sweep.values()) > sweep[1.0]
    txt = "; ".join(f"{mode}{'' if mode != 'propetl' else f' k={k}'} {m[(mode, k)]:.4f}+-{sd[(mode, k)]:.4f}"
                    for mode, _, k in runs)
    ok = a and b and c
    verdict(8, ok, f"(a) propetl>=only_share(bn={share.size}) {a}; (b) propetl>=random_mask {b}; "
                   f"(c) some k<1 beats k=1 {c}; 5 seeds: {txt}")
    assert ok


# 9 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_training_sanity(verdict):
    from propetl.cli import make_backbone

    weights = make_backbone(TransformerConfig(num_layers=4, d=64), 0, 300)
    tc = TrainConfig(lambda_p=3e-3, lambda_m=3e-2, steps=500, eval_every=100)
    lin = generate_task("linear", "linear", 2000, 500, 500, seed=9)
    att = build_attachment("adapter", 64, 16, 4, mode="propetl", k=0.5, seed=9)
    res = train_single_task(weights, att, lin, tc)
    acc = evaluate(weights, att, lin, "test").accuracy
    full = finetune_full(init_backbone(TransformerConfig(num_layers=4, d=64), seed=0), lin,
                         TrainConfig(lambda_p=1e-3, steps=500, eval_every=100), seed=9)
    full_acc = evaluate(full.backbone, full.attachment, lin, "test").accuracy
    drops = {"linear": (res.losses[:100].mean(), res.losses[-100:].mean())}
    for kind in ("contains", "compare", "parity", "first_last"):
        t = generate_task(kind, kind, 2000, 200, 200, seed=9)
        r = train_single_task(weights, build_attachment("adapter", 64, 16, 4, k=0.5, seed=9), t,
                              TrainConfig(lambda_p=3e-3, lambda_m=3e-2, steps=300, eval_every=300))
        drops[kind] = (r.losses[:100].mean(), r.losses[-100:].mean())
    falls = all(b < a for a, b in drops.values())
    ok = acc >= 0.95 and full_acc >= 0.99 and falls
    loss_txt = ", ".join(f"{k} {a:.3f}->{b:.3f}" for k, (a, b) in drops.items())
    verdict(9, ok, f"propetl-adapter test acc={acc:.4f} (>=0.95), full fine-tune={full_acc:.4f} (>=0.99); "
                   f"leading->trailing 100-step loss: {loss_txt}")
    assert ok


# 10 ----------------------------------------------------------------------------

def test_criterion_10_temperature_sampling(verdict):
    p = sample_task([100, 1], 10)
    draws = np.random.default_rng(10).choice(2, size=100_000, p=p)
    freq = np.bincount(draws, minlength=2) / 100_000
    ok = np.max(np.abs(p - [0.6131, 0.3869])) <= 1e-4 and np.max(np.abs(freq - p)) <= 0.005
    verdict(10, ok, f"p={p.round(5).tolist()} empirical={freq.round(4).tolist()}")
    assert ok
