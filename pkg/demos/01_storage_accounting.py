"""
Bit-level storage of a shared prototype
=======================================

How many bits does a ProPETL adapter cost compared with one adapter per
layer?  Everything below is exact integer arithmetic.
"""

from propetl import storage as stg

d, bn, L = 768, 64, 12

# one 32-bit prototype plus a 1-bit mask per layer
shared = stg.bls_propetl("adapter", d, bn, L)
# a separate 32-bit adapter in every layer
vanilla = stg.bls_vanilla("adapter", d, bn, L)
print(f"shared prototype + masks: {shared:,} bits")
print(f"one adapter per layer   : {vanilla:,} bits  (ratio {shared / vanilla:.4f})")

# against storing a full 125M-parameter fine-tuned model
print(f"fraction of a full model: {100 * shared / (125_000_000 * 32):.4f}%")

#%%
# LoRA and prefix tuning with matched sizes land on the same budget.
print(stg.bls_propetl("lora", d, 32, L), stg.bls_propetl("prefix", d, 64, L))

#%%
# Keeping a separate masked module per layer ("only mask") is much costlier.
print(f"only-mask at k=0.5: {stg.bls_only_mask('adapter', d, bn, L, 0.5):,} bits")

#%%
# Budget-matched baselines for an ablation: grow the unmasked module until
# it spends the same bits, or thin the per-layer modules.
target = shared
bn_share = stg.match_size(lambda s: stg.bls_vanilla("adapter", d, s, 1), target)
k_same_bn = stg.match_sparsity("adapter", d, bn, L, target)
print(f"only_share matched bn = {bn_share}, only_mask same-bn k = {k_same_bn:.4f}")
