"""Contrastive pretraining with transfer-learning initialisation for Swin-Unet segmentation.

Modules:
    synthdata: phantom slices, masks and dataset manifests.
    augment: contrastive and segmentation augmentation.
    nets: Swin-Unet and embedding heads with parameter tags.
    cl_pretrain: momentum contrastive encoder pretraining.
    dec_pretrain: contrastive decoder pretraining behind a frozen encoder.
    transfer: checkpoints and selective weight loading.
    metrics: DSC, MPA, MIoU and Hausdorff distance.
    exp: schedules, training, ablation runner and plots.
"""

from .augment import AugmentConfig, contrastive_augment, segmentation_augment
from .cl_pretrain import CLConfig, infonce, momentum_step, pretrain_contrastive, symmetric_loss
from .dec_pretrain import DecCLConfig, pretrain_decoder, table3_matrix
from .metrics import MetricsReport, aggregate, evaluate
from .nets import NetConfig, build_segnet
from .synthdata import DatasetManifest, build_dataset, generate_phantom, split_dataset
from .transfer import Checkpoint, LoadPolicy, apply_policy, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "CLConfig", "Checkpoint", "DatasetManifest", "DecCLConfig", "LoadPolicy", "MetricsReport",
    "NetConfig", "aggregate", "apply_policy", "build_dataset", "build_segnet", "contrastive_augment", "evaluate",
    "generate_phantom", "infonce", "load_checkpoint", "momentum_step", "pretrain_contrastive", "pretrain_decoder",
    "save_checkpoint", "segmentation_augment", "split_dataset", "symmetric_loss", "table3_matrix",
]
