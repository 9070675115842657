import numpy as np
import pytest

from propetl import autodiff as ad
from propetl.backbone import (TransformerConfig, analytic_param_count, attachment_sites, encode,
                              encode_features, init_backbone)
from propetl.petl import build_attachment

CFG = TransformerConfig(num_layers=2, d=16, num_heads=4, ffn_dim=32, vocab_size=10, max_seq_len=6)


def tokens(seed=0, B=3, S=6):
    return np.random.default_rng(seed).integers(CFG.vocab_size, size=(B, S))


@pytest.fixture(scope="module")
def weights():
    return init_backbone(CFG, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        TransformerConfig(d=30, num_heads=4)
    with pytest.raises(ValueError):
        TransformerConfig(num_layers=0)


def test_init_is_deterministic_and_frozen(weights):
    again = init_backbone(CFG, seed=0)
    assert weights.fingerprint() == again.fingerprint()
    assert all(np.array_equal(weights.tensors[n].data, again.tensors[n].data) for n in weights.tensors)
    assert weights.frozen
    assert init_backbone(CFG, seed=1).fingerprint() != weights.fingerprint()


def test_param_count_matches_closed_form(weights):
    d, f, V, S, L = 16, 32, 10, 6, 2
    per_layer = (4 * (d * d + d)) + (d * f + f) + (f * d + d) + 2 * 2 * d
    assert weights.param_count == analytic_param_count(CFG) == V * d + S * d + L * per_layer + 2 * d


def test_attachment_sites():
    cfg = TransformerConfig(num_layers=2, d=32, num_heads=4)
    assert len(attachment_sites(cfg, "adapter")) == 2
    assert len(attachment_sites(cfg, "prefix")) == 2
    assert attachment_sites(cfg, "lora") == [(0, "q"), (0, "v"), (1, "q"), (1, "v")]


@pytest.mark.parametrize("variant", ["adapter", "lora", "prefix"])
def test_logit_shapes(weights, variant):
    att = build_attachment(variant, CFG.d, 2, CFG.num_layers, num_classes=(3,))
    assert encode(tokens(), weights, att).shape == (3, 3)
    assert encode_features(tokens(), weights).shape == (3, CFG.d)


def test_only_head_and_attachment_get_gradients(weights):
    att = build_attachment("adapter", CFG.d, 2, CFG.num_layers, mode="propetl", k=0.5)
    loss = ad.cross_entropy(encode(tokens(), weights, att, train=True), [0, 1, 1])
    ad.backward(loss)
    assert all(t.grad is None for t in weights.parameters())
    groups = att.parameter_groups()
    assert all(t.grad is not None for g in groups.values() for t in g)


def test_batch_permutation_equivariance(weights):
    att = build_attachment("lora", CFG.d, 2, CFG.num_layers, mode="only_share")
    att.prototype.params["q_up"].data[:] = 0.1
    X = tokens(B=5)
    perm = np.array([3, 0, 4, 1, 2])
    a = encode(X, weights, att).data
    b = encode(X[perm], weights, att).data
    np.testing.assert_allclose(b, a[perm], rtol=1e-6, atol=1e-7)


def test_identity_modules_leave_backbone_output_unchanged(weights):
    # zero-initialised LoRA up projections make the module an exact no-op
    att = build_attachment("lora", CFG.d, 2, CFG.num_layers, mode="only_share")
    assert np.array_equal(encode_features(tokens(), weights, att).data, encode_features(tokens(), weights).data)


def test_backbone_values_matter(weights):
    att = build_attachment("adapter", CFG.d, 2, CFG.num_layers)
    other = init_backbone(CFG, seed=5)
    assert not np.array_equal(encode(tokens(), weights, att).data, encode(tokens(), other, att).data)


def test_errors(weights):
    att = build_attachment("adapter", CFG.d, 2, CFG.num_layers)
    with pytest.raises(ValueError, match="task_id"):
        encode(tokens(), weights, att, task_id=3)
    with pytest.raises(ValueError):
        encode(np.full((1, 6), 10), weights, att)
    with pytest.raises(ValueError):
        encode(tokens(S=6)[:, None], weights, att)
    wrong = build_attachment("adapter", 8, 2, CFG.num_layers)
    with pytest.raises(ValueError, match="d="):
        encode(tokens(), weights, wrong)


def test_trainable_toggle(weights):
    w = weights.copy()
    w.set_trainable(True)
    assert not w.frozen
    att = build_attachment("adapter", CFG.d, 2, CFG.num_layers)
    ad.backward(ad.cross_entropy(encode(tokens(), w, att), [0, 1, 0]))
    assert all(t.grad is not None for t in w.parameters())
    w.freeze()
    assert w.frozen and weights.frozen
