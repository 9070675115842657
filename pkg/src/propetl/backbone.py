"""Tiny pre-norm transformer encoder used as the frozen language model."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .petl import ProPetlAttachment, adapter_forward, attention, lora_forward, prefix_forward

@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 4
    d: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 16
    max_seq_len: int = 16

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 1:
                raise ValueError(f"TransformerConfig.{name} must be >= 1, got {v}")
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.d // self.num_heads


LAYER_TENSORS = ("ln1_g", "ln1_b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
                 "ln2_g", "ln2_b", "W1", "b1", "W2", "b2")


def analytic_param_count(cfg: TransformerConfig) -> int:
    """Closed-form parameter count (classifier heads excluded)."""
    d, f = cfg.d, cfg.ffn_dim
    per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    return cfg.vocab_size * d + cfg.max_seq_len * d + cfg.num_layers * per_layer + 2 * d


class BackboneWeights:
    """Embeddings, per-layer attention/FFN weights and layer norms.

    Frozen by default: no tensor requires a gradient.
    """

    def __init__(self, config: TransformerConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.grad = None

    def freeze(self) -> None:
        self.set_trainable(False)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def layer(self, l: int) -> dict[str, Tensor]:
        return {n: self.tensors[f"layer{l}.{n}"] for n in LAYER_TENSORS}

    def fingerprint(self) -> int:
        """CRC-32 over all weight bytes in name order."""
        crc = 0
        for name in sorted(self.tensors):
            crc = zlib.crc32(self.tensors[name].data.tobytes(), crc)
        return crc

    def copy(self) -> "BackboneWeights":
        return BackboneWeights(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})


def init_backbone(config: TransformerConfig, seed: int = 0) -> BackboneWeights:
    rng = np.random.default_rng(seed)
    d, f = config.d, config.ffn_dim

    t = {"tok_emb": Tensor(rng.normal(0.0, 1.0, size=(config.vocab_size, d))),
         "pos_emb": Tensor(rng.normal(0.0, 0.1, size=(config.max_seq_len, d)))}
    for l in range(config.num_layers):
        p = f"layer{l}."
        t[p + "ln1_g"], t[p + "ln1_b"] = Tensor(np.ones(d)), Tensor(np.zeros(d))
        for w in ("q", "k", "v", "o"):
            t[p + f"W{w}"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
            t[p + f"b{w}"] = Tensor(np.zeros(d))
        t[p + "ln2_g"], t[p + "ln2_b"] = Tensor(np.ones(d)), Tensor(np.zeros(d))
        t[p + "W1"], t[p + "b1"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, f))), Tensor(np.zeros(f))
        t[p + "W2"], t[p + "b2"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(f), size=(f, d))), Tensor(np.zeros(d))
    t["lnf_g"], t["lnf_b"] = Tensor(np.ones(d)), Tensor(np.zeros(d))
    return BackboneWeights(config, t)


def attachment_sites(config: TransformerConfig, variant: str) -> list[tuple[int, str]]:
    """(layer, site) pairs where a variant is injected."""
    per_layer = {"adapter": ("ffn_out",), "lora": ("q", "v"), "prefix": ("kv",)}[variant]
    return [(l, s) for l in range(config.num_layers) for s in per_layer]


def _ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.elementwise_mul(ad.layer_norm(x), g), b)


def _split_heads(x: Tensor, B: int, S: int, H: int) -> Tensor:
    return ad.transpose(ad.reshape(x, (B, S, H, x.shape[-1] // H)), (0, 2, 1, 3))


def encode_features(tokens, weights: BackboneWeights, attachment: ProPetlAttachment | None = None,
                    task_id: int | None = None, train: bool = False) -> Tensor:
    """Mean-pooled final hidden states, B x d."""
    cfg = weights.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be B x S, got shape {tokens.shape}")
    B, S = tokens.shape
    if S > cfg.max_seq_len:
        raise ValueError(f"sequence length {S} exceeds max_seq_len={cfg.max_seq_len}")
    if attachment is not None and attachment.d != cfg.d:
        raise ValueError(f"attachment d={attachment.d} does not match backbone d={cfg.d}")
    H = cfg.num_heads
    w = weights.tensors
    pos = ad.embedding_lookup(w["pos_emb"], np.arange(S))
    x = ad.add(ad.embedding_lookup(w["tok_emb"], tokens), pos)
    variant = attachment.variant if attachment is not None else None
    for l in range(cfg.num_layers):
        p = weights.layer(l)
        masks = proto = None
        if attachment is not None:
            proto = attachment.prototype_for(l)
            masks = attachment.masks_for(l, task_id, train=train)
        a = _ln(x, p["ln1_g"], p["ln1_b"])
        q = ad.add(ad.matmul(a, p["Wq"]), p["bq"])
        k = ad.add(ad.matmul(a, p["Wk"]), p["bk"])
        v = ad.add(ad.matmul(a, p["Wv"]), p["bv"])
        if variant == "lora":
            q = lora_forward(q, a, proto, masks, site="q")
            v = lora_forward(v, a, proto, masks, site="v")
        Q, K, V = (_split_heads(t, B, S, H) for t in (q, k, v))
        if variant == "prefix":
            att = prefix_forward(Q, K, V, proto, masks)
        else:
            att = attention(Q, K, V)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (B, S, cfg.d))
        x = ad.add(x, ad.add(ad.matmul(att, p["Wo"]), p["bo"]))
        hdn = _ln(x, p["ln2_g"], p["ln2_b"])
        hdn = ad.gelu(ad.add(ad.matmul(hdn, p["W1"]), p["b1"]))
        hdn = ad.add(ad.matmul(hdn, p["W2"]), p["b2"])
        if variant == "adapter":
            hdn = adapter_forward(hdn, proto, masks)
        x = ad.add(x, hdn)
    x = _ln(x, w["lnf_g"], w["lnf_b"])
    return ad.mean_pool(x)


def encode(tokens, weights: BackboneWeights, attachment: ProPetlAttachment, task_id: int | None = None,
           train: bool = False) -> Tensor:
    """Logits B x num_classes for ``task_id`` (head 0 when omitted)."""
    head_id = 0 if task_id is None else task_id
    if not 0 <= head_id < len(attachment.heads):
        raise ValueError(f"unknown task_id {task_id}; attachment has {len(attachment.heads)} head(s)")
    feats = encode_features(tokens, weights, attachment, task_id, train)
    head = attachment.heads[head_id]
    return ad.add(ad.matmul(feats, head["W"]), head["b"])
