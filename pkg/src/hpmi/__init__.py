"""Head pruning and malicious head injection for toy transformer classifiers.

A benign encoder is trained, one attention head is pruned, and a separately
trained single-head model is spliced into the freed channel so that its scalar
output lands on one target logit while every other logit stays unchanged.
"""

from .backdoor import Trigger, apply_trigger, poison_dataset, select_offset, train_malicious_head
from .checkpoint import load_checkpoint, save_checkpoint
from .harness import ExperimentConfig, ExperimentReport, run_dp_baseline, run_hpmi
from .kernels import BACKEND
from .surgery import SurgeryPlan, inject_head, prune_head, scan_prune_targets, verify_logit_identity
from .transformer import ModelConfig, TransformerCheckpoint, forward, init_checkpoint, predict, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ExperimentConfig", "ExperimentReport", "ModelConfig", "SurgeryPlan",
    "TransformerCheckpoint", "Trigger", "apply_trigger", "forward", "init_checkpoint",
    "inject_head", "load_checkpoint", "poison_dataset", "predict", "prune_head", "run_dp_baseline",
    "run_hpmi", "save_checkpoint", "scan_prune_targets", "select_offset", "train",
    "train_malicious_head", "verify_logit_identity",
]
