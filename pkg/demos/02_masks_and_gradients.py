"""
Binary masks with a straight-through gradient
=============================================

Each layer keeps real-valued scores; the forward pass keeps the top-k
fraction by magnitude and the backward pass pretends the threshold was
the identity.
"""

import numpy as np

from propetl import autodiff as ad
from propetl.masking import MaskScores, combine, density, pack, threshold_topk

rng = np.random.default_rng(0)
s = MaskScores.init("demo", (4, 5), k=0.3, rng=rng)
m = threshold_topk(s)
print(m.bits.astype(int))
print("ones:", m.popcount(), "of", m.size)   # round-half-up(0.3 * 20) = 6

# masks are stored packed, 8 per byte
print("packed:", pack(m).hex())

#%%
# Straight-through: the score gradient equals the mask gradient, bit for bit.
scores = ad.Tensor(rng.normal(size=6), requires_grad=True)
upstream = rng.normal(size=6).astype(np.float32)
ad.backward(ad.sum_all(ad.elementwise_mul(ad.binarize_topk_ste(scores, 0.5), ad.Tensor(upstream))))
print(np.array_equal(scores.grad, upstream))

#%%
# Multi-task: a layer mask and a task mask, each at 30%, combined.
a = threshold_topk(MaskScores.init("a", (10_000,), 0.3, rng))
b = threshold_topk(MaskScores.init("b", (10_000,), 0.3, rng))
for mode in ("OR", "AND"):
    print(mode, round(density(combine(a, b, mode)), 3))   # about 0.51 and 0.09
