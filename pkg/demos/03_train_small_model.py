"""
Training a shared adapter on a toy task
=======================================

A 4-layer transformer is warmed up on held-out tasks and frozen.  One
adapter prototype is then shared by all layers, each layer learning its
own 50% mask.  Takes about a minute on a laptop CPU.
"""

from propetl import storage as stg
from propetl.backbone import TransformerConfig
from propetl.cli import make_backbone
from propetl.petl import build_attachment, count_trainable
from propetl.tasks import generate_task
from propetl.trainer import TrainConfig, evaluate, train_single_task

weights = make_backbone(TransformerConfig(num_layers=4, d=64), seed=0, warmup_steps=300)
task = generate_task("linear", "linear", 1000, 200, 1000, seed=1)

att = build_attachment("adapter", 64, 16, 4, mode="propetl", k=0.5, seed=1)
print("trainable parameters:", count_trainable(att))

res = train_single_task(weights, att, task, TrainConfig(lambda_p=3e-3, lambda_m=3e-3, steps=400))
print("first/last 50-step loss:", res.losses[:50].mean().round(3), res.losses[-50:].mean().round(3))
print("test accuracy:", evaluate(weights, att, task, "test").accuracy)
print("per-layer mask density:", att.layer_densities())

#%%
# Only the prototype and the packed masks are written; scores are dropped.
ck = stg.save_checkpoint(att, "/tmp/demo.pptl")
print(ck.payload_bits, "bits on disk, predicted", stg.bls_propetl("adapter", 64, 16, 4))
print(stg.inspect_checkpoint("/tmp/demo.pptl"))
