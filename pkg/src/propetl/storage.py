"""Bit-level storage accounting and the prototype + packed-mask checkpoint.

All storage arithmetic is exact integer arithmetic.  Sparsity ratios are
handled as fractions and retained-parameter counts use the same rounding
as the top-k thresholding.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import masking
from .autodiff import Tensor
from .petl import (VARIANTS, AdapterPrototype, LoraPrototype, PrefixPrototype, ProPetlAttachment)

MAX_BITS = 2**64 - 1


# ---------------------------------------------------------------------------
# bit-level storage
# ---------------------------------------------------------------------------

def bls(groups) -> int:
    """Sum of count * bit width over (count, width) groups."""
    total = 0
    for rho, b in groups:
        if int(rho) != rho or int(b) != b:
            raise ValueError("parameter counts and bit widths must be integers")
        if rho < 0 or b < 1:
            raise ValueError(f"invalid group ({rho}, {b}): counts >= 0, widths >= 1")
        total += int(rho) * int(b)
        if total > MAX_BITS:
            raise OverflowError("bit-level storage exceeds 64-bit range")
    return total


@dataclass
class BlsReport:
    groups: list[tuple[str, int, int]]
    baseline_bits: int | None = None
    full_model_bits: int | None = None
    total_bits: int = field(init=False)

    def __post_init__(self):
        self.total_bits = bls((rho, b) for _, rho, b in self.groups)

    @property
    def ratio(self) -> float | None:
        return None if not self.baseline_bits else self.total_bits / self.baseline_bits

    @property
    def full_fraction(self) -> float | None:
        return None if not self.full_model_bits else self.total_bits / self.full_model_bits

    def render(self) -> str:
        lines = [f"{'group':<28}{'params':>14}{'bits':>6}{'total':>16}"]
        for name, rho, b in self.groups:
            lines.append(f"{name:<28}{rho:>14,}{b:>6}{rho * b:>16,}")
        lines.append(f"{'TOTAL':<28}{'':>14}{'':>6}{self.total_bits:>16,}")
        if self.baseline_bits:
            lines.append(f"ratio vs vanilla ({self.baseline_bits:,} bits): {self.ratio:.4f}")
        if self.full_model_bits:
            lines.append(f"fraction of full model ({self.full_model_bits:,} bits): {100 * self.full_fraction:.4f}%")
        return "\n".join(lines)


def _check(variant: str, d: int, size: int, L: int) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if min(d, size, L) < 1:
        raise ValueError(f"dimensions must be positive (d={d}, size={size}, L={L})")


def masked_numel(variant: str, d: int, size: int) -> int:
    """Number of mask bits per layer (biases excluded)."""
    return {"adapter": 2 * size * d, "lora": 4 * size * d, "prefix": 2 * size * d}[variant]


def prototype_numel(variant: str, d: int, size: int) -> int:
    """32-bit values stored for one module."""
    return {"adapter": 2 * size * d + size + d, "lora": 4 * size * d, "prefix": 2 * size * d}[variant]


def propetl_groups(variant: str, d: int, size: int, L: int, T: int = 0) -> list[tuple[str, int, int]]:
    _check(variant, d, size, L)
    g = [("prototype (32-bit)", prototype_numel(variant, d, size), 32),
         ("layer masks (1-bit)", masked_numel(variant, d, size) * L, 1)]
    if T:
        g.append(("task masks (1-bit)", masked_numel(variant, d, size) * T, 1))
    return g


def bls_propetl(variant: str, d: int, size: int, L: int, T: int = 0) -> int:
    """Shared 32-bit prototype plus one 1-bit mask per layer (and task)."""
    return bls((rho, b) for _, rho, b in propetl_groups(variant, d, size, L, T))


def bls_vanilla(variant: str, d: int, size: int, L: int) -> int:
    """One independent 32-bit module per layer."""
    _check(variant, d, size, L)
    return 32 * prototype_numel(variant, d, size) * L


def _retained(k, n: int) -> int:
    return masking.num_ones(k, n)


def bls_only_mask(variant: str, d: int, size: int, L: int, k, literal_prefix: bool = False) -> int:
    """Per-layer modules where pruned parameters are not counted.

    ``literal_prefix`` gives the prefix cost as 2*k*l*d*L, without the
    32-bit factor used by the other variants.
    """
    _check(variant, d, size, L)
    masking._check_k(k)
    if variant == "adapter":
        return 32 * (2 * _retained(k, size * d) + size + d) * L
    if variant == "lora":
        return 32 * 4 * _retained(k, size * d) * L
    if literal_prefix:
        val = 2 * masking.k_fraction(k) * size * d * L
        return math.floor(val + Fraction(1, 2))
    return 32 * 2 * _retained(k, size * d) * L


def bls_multitask(p: int, L: int, T: int) -> int:
    """p + (p / 32) (L + T) for a single-module cost ``p`` in bits."""
    if p % 32:
        raise ValueError(f"single-module bits p={p} must be a multiple of 32")
    if L < 0 or T < 0:
        raise ValueError("L and T must be non-negative")
    return p + (p // 32) * (L + T)


def match_size(bits_of_size, target: int, prefer_at_least: int | None = None, limit: int = 1 << 16) -> int:
    """Module size whose storage is closest to ``target`` bits.

    With ``prefer_at_least``, ties and near-ties resolve upward.
    """
    best, best_err = None, None
    for s in range(1, limit):
        b = bits_of_size(s)
        err = abs(b - target)
        if best_err is None or err < best_err or (err == best_err and prefer_at_least and s >= prefer_at_least):
            best, best_err = s, err
        if b > target and err > best_err:
            break
    if best is None or best < 1:
        raise ValueError("no feasible module size (size < 1)")
    return best


def match_sparsity(variant: str, d: int, size: int, L: int, target: int, step: Fraction = Fraction(1, 10_000)) -> float:
    """Sparsity ratio on a ``step`` grid whose only-mask storage is closest to ``target``.

    A decimal grid keeps the ratio exactly representable in checkpoint headers.
    """
    best, best_err = None, None
    for j in range(1, int(1 / step) + 1):
        kk = float(j * step)
        err = abs(bls_only_mask(variant, d, size, L, kk) - target)
        if best_err is None or err < best_err:
            best, best_err = kk, err
    return best


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"PPTL"
VERSION = 1
VARIANT_CODES = {"adapter": 0, "lora": 1, "prefix": 2}
MODE_CODES = {"propetl": 0, "only_share": 1, "only_mask": 2, "random_mask": 3}
COMBINE_CODES = {"OR": 0, "AND": 1, "ADD": 2}
KIND_TENSOR, KIND_MASK, KIND_HEAD, KIND_META = 0, 1, 2, 3
KIND_NAMES = {KIND_TENSOR: "tensor", KIND_MASK: "mask", KIND_HEAD: "head", KIND_META: "meta"}

_HEADER = struct.Struct("<4sHBBB5I2I")
_SEC = struct.Struct("<H")


class CheckpointError(ValueError):
    """Malformed checkpoint; ``location`` names the failing part."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


@dataclass
class Section:
    name: str
    kind: int
    shape: tuple[int, ...]
    payload: bytes
    crc_ok: bool = True

    @property
    def kind_name(self) -> str:
        return KIND_NAMES[self.kind]


@dataclass
class CheckpointFile:
    variant: str
    mode: str
    combine_mode: str
    d: int
    size: int
    L: int
    T: int
    k: Fraction
    k_task: Fraction
    sections: list[Section]

    def section(self, name: str) -> Section:
        for s in self.sections:
            if s.name == name:
                return s
        raise CheckpointError(name, "section missing")

    @property
    def payload_bits(self) -> int:
        """Bits of prototype tensors and masks (header, names, heads excluded)."""
        return sum(8 * len(s.payload) for s in self.sections if s.kind in (KIND_TENSOR, KIND_MASK))

    @property
    def meta(self) -> dict:
        return json.loads(self.section("meta").payload.decode("utf-8"))


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(attachment: ProPetlAttachment, path, meta: dict | None = None) -> CheckpointFile:
    """Write 32-bit prototype tensors, packed masks, heads and metadata.

    Mask scores are never written; masks are h(s) of the current scores.
    Prefix prototypes are stored collapsed (P = P'W).
    """
    att = attachment
    sections: list[Section] = []
    protos = att.prototypes
    if att.variant == "prefix":
        protos = [p.collapse() for p in protos]
    for i, p in enumerate(protos):
        for n, t in p.params.items():
            sections.append(Section(f"proto{i}.{n}", KIND_TENSOR, t.shape, _tensor_bytes(t.data)))
    for kind, masks in (("layer", att.binary_layer_masks()), ("task", att.binary_task_masks())):
        for i, group in enumerate(masks or []):
            for n, m in group.items():
                sections.append(Section(f"{kind}{i}.{n}", KIND_MASK, m.shape, masking.pack(m)))
    for i, h in enumerate(att.heads):
        for n, t in h.items():
            sections.append(Section(f"head{i}.{n}", KIND_HEAD, t.shape, _tensor_bytes(t.data)))
    info = {"alpha": getattr(att.prototype, "alpha", None),
            "nonlinearity": getattr(att.prototype, "nonlinearity", None),
            "num_classes": [h["b"].shape[0] for h in att.heads],
            "mask_seed": att.mask_seed,
            "multitask": att.multitask}
    info.update(meta or {})
    sections.append(Section("meta", KIND_META, (), json.dumps(info, sort_keys=True).encode("utf-8")))

    k = masking.k_fraction(att.k)
    kt = masking.k_fraction(att.k_task if att.k_task is not None else att.k)
    if max(k.numerator, k.denominator, kt.numerator, kt.denominator) >= 2**32:
        raise ValueError(f"sparsity {att.k}/{att.k_task} has no exact 32-bit rational form")
    T = att.num_tasks if att.multitask else 0
    buf = bytearray(_HEADER.pack(MAGIC, VERSION, VARIANT_CODES[att.variant], MODE_CODES[att.mode],
                                 COMBINE_CODES[att.combine_mode], att.d, att.prototype.size, att.num_layers, T,
                                 len(sections), k.numerator, k.denominator))
    buf += struct.pack("<2I", kt.numerator, kt.denominator)
    for s in sections:
        name = s.name.encode("utf-8")
        body = _SEC.pack(len(name)) + name + struct.pack("<BB", s.kind, len(s.shape))
        body += struct.pack(f"<{len(s.shape)}I", *s.shape) + struct.pack("<Q", len(s.payload)) + s.payload
        buf += body + struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(bytes(buf))
    return read_checkpoint_file(path)


def read_checkpoint_file(path, verify_crc: bool = True) -> CheckpointFile:
    """Parse the container; with ``verify_crc`` a bad section raises."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise CheckpointError("header", "file truncated")
    (magic, version, vcode, mcode, ccode, d, size, L, T, nsec, kn, kd) = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("header", f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError("header", f"unsupported version {version}")
    try:
        variant = {v: k for k, v in VARIANT_CODES.items()}[vcode]
        mode = {v: k for k, v in MODE_CODES.items()}[mcode]
        combine = {v: k for k, v in COMBINE_CODES.items()}[ccode]
    except KeyError:
        raise CheckpointError("header", "unknown variant/mode/combine code") from None
    if kd == 0:
        raise CheckpointError("header", "zero sparsity denominator")
    off = _HEADER.size
    ktn, ktd = struct.unpack_from("<2I", data, off)
    off += 8
    sections = []
    for i in range(nsec):
        start = off
        try:
            (nlen,) = _SEC.unpack_from(data, off)
            off += _SEC.size
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            kind, ndim = struct.unpack_from("<BB", data, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            (plen,) = struct.unpack_from("<Q", data, off)
            off += 8
            if off + plen + 4 > len(data):
                raise struct.error("payload past end of file")
            payload = data[off:off + plen]
            off += plen
            (crc,) = struct.unpack_from("<I", data, off)
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"section {i}", f"truncated or malformed ({e})") from None
        ok = zlib.crc32(data[start:off]) == crc
        off += 4
        if verify_crc and not ok:
            raise CheckpointError(f"section {i} ({name})", "CRC mismatch")
        if kind not in KIND_NAMES:
            raise CheckpointError(f"section {i} ({name})", f"unknown kind {kind}")
        sections.append(Section(name, kind, tuple(shape), bytes(payload), ok))
    if off != len(data):
        raise CheckpointError("trailer", f"{len(data) - off} unexpected trailing bytes")
    return CheckpointFile(variant, mode, combine, d, size, L, T, Fraction(kn, kd),
                          Fraction(ktn, ktd) if ktd else Fraction(kn, kd), sections)


def _tensor_of(sec: Section) -> Tensor:
    n = math.prod(sec.shape)
    if len(sec.payload) != 4 * n:
        raise CheckpointError(sec.name, f"payload {len(sec.payload)} bytes, expected {4 * n}")
    return Tensor(np.frombuffer(sec.payload, dtype="<f4").reshape(sec.shape).astype(np.float32))


def _mask_of(sec: Section) -> masking.BinaryMask:
    try:
        return masking.unpack(sec.payload, sec.shape, sec.name)
    except ValueError as e:
        raise CheckpointError(sec.name, str(e)) from None


def load_checkpoint(path, verify_crc: bool = True) -> ProPetlAttachment:
    """Rebuild an inference-only attachment.

    Loads the shared 32-bit prototype, then the 1-bit layer/task masks;
    sub-networks are materialised from them at forward time.
    """
    ck = read_checkpoint_file(path, verify_crc)
    meta = ck.meta
    by_name = {s.name: s for s in ck.sections}
    n_proto = ck.L if ck.mode == "only_mask" else 1
    protos = []
    for i in range(n_proto):
        def t(n):
            return _tensor_of(by_name.get(f"proto{i}.{n}") or _missing(f"proto{i}.{n}"))
        if ck.variant == "adapter":
            p = AdapterPrototype(t("W_down"), t("b_down"), t("W_up"), t("b_up"), meta["nonlinearity"])
        elif ck.variant == "lora":
            p = LoraPrototype(t("q_down"), t("q_up"), t("v_down"), t("v_up"), meta["alpha"])
        else:
            p = PrefixPrototype(P=t("P"))
        if p.d != ck.d or p.size != ck.size:
            raise CheckpointError(f"proto{i}", f"dims ({p.d}, {p.size}) disagree with header ({ck.d}, {ck.size})")
        protos.append(p)
    shapes = protos[0].mask_shapes()

    def mask_groups(kind, count, k):
        groups = []
        for i in range(count):
            g = {}
            for n, shp in shapes.items():
                sec = by_name.get(f"{kind}{i}.{n}") or _missing(f"{kind}{i}.{n}")
                if sec.shape != tuple(shp):
                    raise CheckpointError(sec.name, f"mask shape {sec.shape} != target {tuple(shp)}")
                m = _mask_of(sec)
                if m.popcount() != masking.num_ones(k, m.size):
                    raise CheckpointError(sec.name, f"popcount {m.popcount()} != round(k*n) for k={k}")
                g[n] = m
            groups.append(g)
        return groups

    layer_masks = task_masks = None
    if ck.mode in ("propetl", "only_mask"):
        layer_masks = mask_groups("layer", ck.L, ck.k)
        if ck.T:
            task_masks = mask_groups("task", ck.T, ck.k_task)
    heads = []
    for i, c in enumerate(meta["num_classes"]):
        heads.append({n: _tensor_of(by_name.get(f"head{i}.{n}") or _missing(f"head{i}.{n}")) for n in ("W", "b")})
    for s in ck.sections:
        if s.name.endswith(".scores"):
            raise CheckpointError(s.name, "checkpoint must not contain mask scores")
    return ProPetlAttachment(variant=ck.variant, mode=ck.mode, num_layers=ck.L, prototypes=protos, heads=heads,
                             k=float(ck.k), k_task=float(ck.k_task) if ck.T else None,
                             combine_mode=ck.combine_mode, layer_masks=layer_masks, task_masks=task_masks,
                             mask_seed=meta.get("mask_seed", 0))


def _missing(name):
    raise CheckpointError(name, "section missing")


def inspect_checkpoint(path) -> str:
    """Human-readable dump: header, section table, mask densities, tensor norms."""
    ck = read_checkpoint_file(path, verify_crc=True)
    lines = [f"PPTL v{VERSION}  variant={ck.variant}  mode={ck.mode}  combine={ck.combine_mode}",
             f"d={ck.d}  size={ck.size}  L={ck.L}  T={ck.T}  k={ck.k}  k_task={ck.k_task}",
             f"payload bits (prototype + masks): {ck.payload_bits:,}",
             f"{'section':<24}{'kind':<8}{'shape':<16}{'bytes':>10}  detail"]
    masks = {}
    for s in ck.sections:
        detail = ""
        if s.kind in (KIND_TENSOR, KIND_HEAD):
            detail = f"norm={float(np.linalg.norm(_tensor_of(s).data.astype(np.float64))):.6f}"
        elif s.kind == KIND_MASK:
            m = _mask_of(s)
            masks[s.name] = m
            detail = f"density={masking.density(m):.6f} ({m.popcount()}/{m.size})"
        lines.append(f"{s.name:<24}{s.kind_name:<8}{str(s.shape):<16}{len(s.payload):>10}  {detail}")
    if ck.T:
        lines.append(f"hybrid ({ck.combine_mode}) densities per (layer, task):")
        for l in range(ck.L):
            for t in range(ck.T):
                ones = total = 0
                for name, m in masks.items():
                    if not name.startswith(f"layer{l}."):
                        continue
                    tm = masks[f"task{t}." + name.split(".", 1)[1]]
                    hm = masking.combine(m, tm, ck.combine_mode)
                    ones += hm.popcount()
                    total += hm.size
                lines.append(f"  layer {l} task {t}: {ones / total:.6f}")
    return "\n".join(lines)
