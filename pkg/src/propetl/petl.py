"""Prototype PETL modules (adapter, LoRA, prefix) and the attachment bundle.

A single prototype is shared by every layer; each layer (and each task in
the multi-task setting) owns mask scores that select a sub-network of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import masking
from .autodiff import Tensor

VARIANTS = ("adapter", "lora", "prefix")
MODES = ("propetl", "only_share", "only_mask", "random_mask")
INIT_STD = 0.02

LORA_ALPHA = 32.0
PROPETL_LORA_ALPHA = 48.0


def _normal(rng, shape):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Prototype:
    """Common surface of the three prototype variants.

    ``params`` maps names to trainable tensors; ``mask_shapes`` maps the
    names of masked quantities to their shapes.
    """

    variant: str
    params: dict[str, Tensor]

    @property
    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def mask_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    @property
    def size(self) -> int:
        """Bottleneck dimension (adapter, LoRA) or prefix length."""
        raise NotImplementedError

    def frozen_copy(self) -> "Prototype":
        raise NotImplementedError


class AdapterPrototype(Prototype):
    variant = "adapter"

    def __init__(self, W_down, b_down, W_up, b_up, nonlinearity: str = "relu"):
        if nonlinearity not in ("relu", "gelu"):
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        self.params = {"W_down": W_down, "b_down": b_down, "W_up": W_up, "b_up": b_up}
        self.nonlinearity = nonlinearity
        d, bn = W_down.shape
        if W_up.shape != (bn, d) or b_down.shape != (bn,) or b_up.shape != (d,):
            raise ValueError(f"adapter tensors inconsistent with d={d}, bn={bn}")
        self.d, self.bn = d, bn

    @classmethod
    def init(cls, d: int, bn: int, rng: np.random.Generator, nonlinearity: str = "relu"):
        return cls(_normal(rng, (d, bn)), _zeros((bn,)), _normal(rng, (bn, d)), _zeros((d,)), nonlinearity)

    @property
    def size(self) -> int:
        return self.bn

    def mask_shapes(self):
        # biases are never masked
        return {"W_down": (self.d, self.bn), "W_up": (self.bn, self.d)}

    def frozen_copy(self):
        p = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return AdapterPrototype(p["W_down"], p["b_down"], p["W_up"], p["b_up"], self.nonlinearity)


class LoraPrototype(Prototype):
    """Low-rank pairs for the query and value projections."""

    variant = "lora"
    SITES = ("q", "v")

    def __init__(self, q_down, q_up, v_down, v_up, alpha: float = LORA_ALPHA):
        if alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        self.params = {"q_down": q_down, "q_up": q_up, "v_down": v_down, "v_up": v_up}
        self.alpha = float(alpha)
        d, bn = q_down.shape
        for name, shp in (("q_up", (bn, d)), ("v_down", (d, bn)), ("v_up", (bn, d))):
            if self.params[name].shape != shp:
                raise ValueError(f"LoRA tensor {name} has shape {self.params[name].shape}, expected {shp}")
        self.d, self.bn = d, bn

    @classmethod
    def init(cls, d: int, bn: int, rng: np.random.Generator, alpha: float = LORA_ALPHA):
        return cls(_normal(rng, (d, bn)), _zeros((bn, d)), _normal(rng, (d, bn)), _zeros((bn, d)), alpha)

    @property
    def size(self) -> int:
        return self.bn

    def mask_shapes(self):
        return {name: t.shape for name, t in self.params.items()}

    def frozen_copy(self):
        p = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        return LoraPrototype(p["q_down"], p["q_up"], p["v_down"], p["v_up"], self.alpha)


class PrefixPrototype(Prototype):
    """Prefix keys/values generated as P = P' W (l x 2d).

    After training the product can be collapsed into a stored ``P``; the
    masks always act on the generated P_k and P_v.
    """

    variant = "prefix"

    def __init__(self, P_prime=None, W_reparam=None, *, P=None, d: int | None = None):
        if P is not None:
            if P.ndim != 2 or P.shape[1] % 2:
                raise ValueError(f"collapsed prefix must be l x 2d, got {P.shape}")
            self.params = {"P": P}
            self.l, self.d = P.shape[0], P.shape[1] // 2
            self.r = None
        else:
            l, r = P_prime.shape
            if W_reparam.shape[0] != r or W_reparam.shape[1] % 2:
                raise ValueError(f"W_reparam shape {W_reparam.shape} incompatible with P' {P_prime.shape}")
            self.params = {"P_prime": P_prime, "W_reparam": W_reparam}
            self.l, self.r, self.d = l, r, W_reparam.shape[1] // 2
        if d is not None and d != self.d:
            raise ValueError(f"prefix width {self.d} does not match d={d}")

    @classmethod
    def init(cls, d: int, l: int, rng: np.random.Generator, r: int | None = None):
        r = 2 * l if r is None else r
        return cls(_normal(rng, (l, r)), _normal(rng, (r, 2 * d)))

    @property
    def size(self) -> int:
        return self.l

    @property
    def collapsed(self) -> bool:
        return "P" in self.params

    def prefixes(self) -> tuple[Tensor, Tensor]:
        """(P_k, P_v), each l x d, recomputed from P' W unless collapsed."""
        P = self.params["P"] if self.collapsed else ad.matmul(self.params["P_prime"], self.params["W_reparam"])
        return tuple(ad.split_cols(P, 2))

    def mask_shapes(self):
        return {"P_k": (self.l, self.d), "P_v": (self.l, self.d)}

    def collapse(self) -> "PrefixPrototype":
        P = self.params["P"].data if self.collapsed else np.matmul(
            self.params["P_prime"].data, self.params["W_reparam"].data)
        return PrefixPrototype(P=Tensor(np.array(P, dtype=np.float32)))

    def frozen_copy(self):
        if self.collapsed:
            return PrefixPrototype(P=Tensor(self.params["P"].data.copy()))
        return PrefixPrototype(Tensor(self.params["P_prime"].data.copy()),
                               Tensor(self.params["W_reparam"].data.copy()))


def init_prototype(variant: str, d: int, size: int, rng: np.random.Generator, *,
                   alpha: float | None = None, nonlinearity: str = "relu",
                   r: int | None = None, mode: str = "propetl") -> Prototype:
    if variant == "adapter":
        return AdapterPrototype.init(d, size, rng, nonlinearity)
    if variant == "lora":
        if alpha is None:
            alpha = PROPETL_LORA_ALPHA if mode == "propetl" else LORA_ALPHA
        return LoraPrototype.init(d, size, rng, alpha)
    if variant == "prefix":
        return PrefixPrototype.init(d, size, rng, r)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


# ---------------------------------------------------------------------------
# forward functions
# ---------------------------------------------------------------------------

def materialize_subnetwork(theta: Tensor, mask) -> Tensor:
    """theta * mask; ``mask`` may be a BinaryMask, an array or a mask Tensor."""
    if isinstance(mask, masking.BinaryMask):
        mask = Tensor(mask.as_float())
    elif not isinstance(mask, Tensor):
        mask = Tensor(np.asarray(mask, dtype=np.float32))
    if mask.shape != theta.shape:
        raise ValueError(f"materialize_subnetwork: shape mismatch {theta.shape} vs {mask.shape}")
    return ad.elementwise_mul(theta, mask)


def _masked(proto: Prototype, name: str, masks) -> Tensor:
    t = proto.params[name]
    if masks is None or name not in masks:
        return t
    return materialize_subnetwork(t, masks[name])


def adapter_forward(h: Tensor, proto: AdapterPrototype, masks=None) -> Tensor:
    """h + f(h W_down' + b_down) W_up' + b_up with masked weights."""
    if h.shape[-1] != proto.d:
        raise ValueError(f"adapter_forward: hidden size {h.shape[-1]} != adapter d={proto.d}")
    Wd = _masked(proto, "W_down", masks)
    Wu = _masked(proto, "W_up", masks)
    z = ad.add(ad.matmul(h, Wd), proto.params["b_down"])
    z = ad.relu(z) if proto.nonlinearity == "relu" else ad.gelu(z)
    return ad.add(h, ad.add(ad.matmul(z, Wu), proto.params["b_up"]))


def lora_forward(h: Tensor, x: Tensor, proto: LoraPrototype, masks=None, site: str = "q") -> Tensor:
    """h + alpha * x (W_down * m_down)(W_up * m_up) at the ``site`` projection."""
    if site not in LoraPrototype.SITES:
        raise ValueError(f"unknown LoRA site {site!r}")
    if x.shape[-1] != proto.d or h.shape[-1] != proto.d:
        raise ValueError(f"lora_forward: dims {x.shape[-1]}/{h.shape[-1]} != LoRA d={proto.d}")
    Wd = _masked(proto, f"{site}_down", masks)
    Wu = _masked(proto, f"{site}_up", masks)
    return ad.add(h, ad.scale(ad.matmul(ad.matmul(x, Wd), Wu), proto.alpha))


def attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(dh)) V over the last two axes."""
    dh = Q.shape[-1]
    if K.shape[-1] != dh or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"attention: incompatible shapes {Q.shape}, {K.shape}, {V.shape}")
    nd = K.data.ndim
    Kt = ad.transpose(K, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    logits = ad.scale(ad.matmul(Q, Kt), 1.0 / math.sqrt(dh))
    return ad.matmul(ad.softmax_lastdim(logits), V)


def _prefix_like(P: Tensor, ref: Tensor) -> Tensor:
    """Lay an l x d prefix out like ``ref`` (..., H, S, dh) -> (..., H, l, dh)."""
    dh = ref.shape[-1]
    l, d = P.shape
    if ref.data.ndim == 2:
        if d != dh:
            raise ValueError(f"prefix width {d} != key width {dh}")
        return P
    heads = d // dh
    if heads * dh != d or ref.shape[-3] != heads:
        raise ValueError(f"prefix width {d} incompatible with keys {ref.shape}")
    ph = ad.transpose(ad.reshape(P, (l, heads, dh)), (1, 0, 2))
    target = ref.shape[:-2] + (l, dh)
    return ad.add(Tensor(np.zeros(target, dtype=np.float32)), ph)


def prefix_forward(Q: Tensor, K: Tensor, V: Tensor, proto: PrefixPrototype, masks=None) -> Tensor:
    """attention(Q, [P_k * m_k; K], [P_v * m_v; V]).

    Q, K, V are either S x d or (..., heads, S, dh).
    """
    if proto.l == 0:
        if masks:
            raise ValueError("prefix_forward: masks given for zero-length prefix")
        return attention(Q, K, V)
    Pk, Pv = proto.prefixes()
    if masks is not None:
        Pk = materialize_subnetwork(Pk, masks["P_k"])
        Pv = materialize_subnetwork(Pv, masks["P_v"])
    Kc = ad.concat_rows([_prefix_like(Pk, K), K])
    Vc = ad.concat_rows([_prefix_like(Pv, V), V])
    return attention(Q, Kc, Vc)


# ---------------------------------------------------------------------------
# attachment
# ---------------------------------------------------------------------------

@dataclass
class ProPetlAttachment:
    """Prototype(s), mask scores or frozen masks, and classifier heads.

    ``prototypes`` has one entry (shared) or ``num_layers`` entries
    (``only_mask``).  Training uses ``layer_scores``/``task_scores``; a
    loaded checkpoint carries ``layer_masks``/``task_masks`` instead.
    """

    variant: str
    mode: str
    num_layers: int
    prototypes: list[Prototype]
    heads: list[dict[str, Tensor]]
    k: float = 1.0
    k_task: float | None = None
    combine_mode: str = "OR"
    layer_scores: list[dict[str, Tensor]] | None = None
    task_scores: list[dict[str, Tensor]] | None = None
    layer_masks: list[dict[str, masking.BinaryMask]] | None = None
    task_masks: list[dict[str, masking.BinaryMask]] | None = None
    mask_seed: int = 0
    _mask_rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.combine_mode not in masking.COMBINE_MODES:
            raise ValueError(f"unknown combine mode {self.combine_mode!r}")
        expected = self.num_layers if self.mode == "only_mask" else 1
        if len(self.prototypes) != expected:
            raise ValueError(f"mode {self.mode} needs {expected} prototype(s), got {len(self.prototypes)}")
        if self.mode == "only_share" and (self.layer_scores or self.task_scores):
            raise ValueError("only_share attachments carry no mask scores")
        shapes = self.prototype.mask_shapes()
        for group in (self.layer_scores or []) + (self.task_scores or []):
            for name, s in group.items():
                if s.shape != shapes[name]:
                    raise ValueError(f"scores {name} shape {s.shape} != target {shapes[name]}")
        if self._mask_rng is None:
            self.reset_mask_rng()

    @property
    def prototype(self) -> Prototype:
        return self.prototypes[0]

    @property
    def d(self) -> int:
        return self.prototype.d

    @property
    def num_tasks(self) -> int:
        return len(self.heads)

    @property
    def multitask(self) -> bool:
        return bool(self.task_scores) or bool(self.task_masks)

    @property
    def trainable(self) -> bool:
        return self.layer_masks is None

    def reset_mask_rng(self, seed: int | None = None) -> None:
        self._mask_rng = np.random.default_rng(self.mask_seed if seed is None else seed)

    def prototype_for(self, layer: int) -> Prototype:
        return self.prototypes[layer if self.mode == "only_mask" else 0]

    # masks ----------------------------------------------------------------

    def masks_for(self, layer: int, task_id: int | None = None, train: bool = False):
        """Mask tensors for one layer (None when the prototype is used unmasked).

        In training mode the masks carry the straight-through graph back to
        the scores; otherwise they are constants.
        """
        if self.mode == "only_share":
            return None
        shapes = self.prototype.mask_shapes()
        if self.mode == "random_mask":
            return {n: Tensor(masking.random_mask(n, shp, self.k, self._mask_rng).as_float())
                    for n, shp in shapes.items()}
        if task_id is not None and self.multitask and not 0 <= task_id < self.num_tasks:
            raise ValueError(f"unknown task_id {task_id}")
        if self.layer_masks is not None:
            out = {}
            for n in shapes:
                m = self.layer_masks[layer][n]
                if task_id is not None and self.task_masks:
                    m = masking.combine(m, self.task_masks[task_id][n], self.combine_mode)
                out[n] = Tensor(m.as_float())
            return out
        out = {}
        for n in shapes:
            s = self.layer_scores[layer][n]
            use_task = task_id is not None and self.task_scores
            if train:
                m = ad.binarize_topk_ste(s, self.k)
                if use_task:
                    mt = ad.binarize_topk_ste(self.task_scores[task_id][n], self.k_task)
                    m = ad.combine_ste(m, mt, self.combine_mode)
            else:
                bits = masking.topk_bits(s.data, self.k)
                if use_task:
                    bits = masking.combine_bits(bits, masking.topk_bits(self.task_scores[task_id][n].data, self.k_task),
                                                self.combine_mode)
                m = Tensor(bits.astype(np.float32))
            out[n] = m
        return out

    def binary_layer_masks(self) -> list[dict[str, masking.BinaryMask]] | None:
        """Hard per-layer masks h(s_l) read off the trained scores."""
        if self.layer_masks is not None:
            return self.layer_masks
        if not self.layer_scores:
            return None
        return [{n: masking.threshold_topk(masking.MaskScores(f"layer{l}.{n}", s.data, self.k))
                 for n, s in group.items()} for l, group in enumerate(self.layer_scores)]

    def binary_task_masks(self) -> list[dict[str, masking.BinaryMask]] | None:
        if self.task_masks is not None:
            return self.task_masks
        if not self.task_scores:
            return None
        return [{n: masking.threshold_topk(masking.MaskScores(f"task{t}.{n}", s.data, self.k_task))
                 for n, s in group.items()} for t, group in enumerate(self.task_scores)]

    def layer_densities(self, task_id: int | None = None) -> list[float]:
        """Fraction of ones per layer over all masked tensors."""
        lm = self.binary_layer_masks()
        if lm is None:
            return [1.0] * self.num_layers
        tm = self.binary_task_masks()
        out = []
        for l, group in enumerate(lm):
            ones = total = 0
            for n, m in group.items():
                if task_id is not None and tm:
                    m = masking.combine(m, tm[task_id][n], self.combine_mode)
                ones += m.popcount()
                total += m.size
            out.append(ones / total)
        return out

    # parameters -----------------------------------------------------------

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        protos = [t for p in self.prototypes for t in p.params.values()]
        scores = [t for g in (self.layer_scores or []) + (self.task_scores or []) for t in g.values()]
        heads = [t for h in self.heads for t in h.values()]
        return {"prototype": protos, "scores": scores, "head": heads}

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.prototypes):
            for n, t in p.params.items():
                out[f"proto{i}.{n}"] = t.data
        for kind, groups in (("layer", self.layer_scores), ("task", self.task_scores)):
            for i, g in enumerate(groups or []):
                for n, t in g.items():
                    out[f"{kind}{i}.{n}.scores"] = t.data
        for i, h in enumerate(self.heads):
            for n, t in h.items():
                out[f"head{i}.{n}"] = t.data
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {}
        for i, p in enumerate(self.prototypes):
            targets.update({f"proto{i}.{n}": t for n, t in p.params.items()})
        for kind, groups in (("layer", self.layer_scores), ("task", self.task_scores)):
            for i, g in enumerate(groups or []):
                targets.update({f"{kind}{i}.{n}.scores": t for n, t in g.items()})
        for i, h in enumerate(self.heads):
            targets.update({f"head{i}.{n}": t for n, t in h.items()})
        if set(targets) != set(state):
            raise ValueError("state dict keys do not match attachment")
        for k, t in targets.items():
            t.data = state[k].copy()

    def num_trainable(self) -> int:
        """Actual number of trainable scalars (prototype + scores, no heads)."""
        g = self.parameter_groups()
        return sum(t.size for t in g["prototype"] + g["scores"])


def make_head(d: int, num_classes: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"W": Tensor(rng.normal(0.0, INIT_STD, size=(d, num_classes)), requires_grad=True),
            "b": _zeros((num_classes,))}


def build_attachment(variant: str, d: int, size: int, num_layers: int, *, mode: str = "propetl",
                     k: float = 0.5, num_classes=(2,), k_task: float | None = None,
                     combine_mode: str = "OR", alpha: float | None = None,
                     nonlinearity: str = "relu", r: int | None = None,
                     multitask: bool = False, seed: int = 0) -> ProPetlAttachment:
    """Randomly initialise an attachment.

    ``num_classes`` gives one classifier head per task; ``multitask`` adds
    one task-score set per head.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if size < 1:
        raise ValueError(f"module size must be >= 1, got {size}")
    rng = np.random.default_rng(seed)
    n_proto = num_layers if mode == "only_mask" else 1
    protos = [init_prototype(variant, d, size, rng, alpha=alpha, nonlinearity=nonlinearity, r=r, mode=mode)
              for _ in range(n_proto)]
    heads = [make_head(d, c, rng) for c in num_classes]
    if mode == "only_share":
        k = 1.0
    masking._check_k(k)
    shapes = protos[0].mask_shapes()

    def score_set(prefix, kk):
        return {n: Tensor(masking.MaskScores.init(f"{prefix}.{n}", shp, kk, rng).values, requires_grad=True)
                for n, shp in shapes.items()}

    layer_scores = task_scores = None
    if mode in ("propetl", "only_mask"):
        layer_scores = [score_set(f"layer{l}", k) for l in range(num_layers)]
        if multitask:
            k_task = k if k_task is None else k_task
            task_scores = [score_set(f"task{t}", k_task) for t in range(len(num_classes))]
    return ProPetlAttachment(variant=variant, mode=mode, num_layers=num_layers, prototypes=protos,
                             heads=heads, k=k, k_task=k_task, combine_mode=combine_mode,
                             layer_scores=layer_scores, task_scores=task_scores,
                             mask_seed=int(rng.integers(2**31)))


def count_trainable(attachment: ProPetlAttachment, L: int | None = None, T: int | None = None) -> int:
    """Trainable-parameter count under the nL + n accounting.

    propetl: n*L + n single-task, n*(L+T) + n multi-task, with n the
    prototype size.  only_share: n.  only_mask: retained prototype
    parameters (pruned ones not counted) plus n*L scores.
    """
    L = attachment.num_layers if L is None else L
    if T is None:
        T = attachment.num_tasks if attachment.multitask else 0
    proto = attachment.prototype
    n = proto.param_count
    if attachment.mode == "only_share":
        return n
    if attachment.mode == "only_mask":
        shapes = proto.mask_shapes()
        masked = sum(math.prod(s) for s in shapes.values())
        retained = sum(masking.num_ones(attachment.k, math.prod(s)) for s in shapes.values())
        unmasked = n - masked if proto.variant != "prefix" else 0
        return (retained + unmasked) * L + n * L
    return n * (L + T) + n
