"""Shared prototype PETL modules with learned binary layer/task masks."""

from .autodiff import Tensor, backward, binarize_topk_ste, finite_difference_check, forward_op
from .backbone import TransformerConfig, encode, init_backbone
from .masking import BinaryMask, MaskScores, combine, density, pack, threshold_topk, unpack
from .petl import (AdapterPrototype, LoraPrototype, PrefixPrototype, ProPetlAttachment, adapter_forward,
                   build_attachment, count_trainable, lora_forward, materialize_subnetwork, prefix_forward)
from .storage import (bls, bls_multitask, bls_only_mask, bls_propetl, bls_vanilla, load_checkpoint,
                      save_checkpoint)
from .trainer import TrainConfig, evaluate, sample_task, train_multi_task, train_single_task

__version__ = "0.1.0"
