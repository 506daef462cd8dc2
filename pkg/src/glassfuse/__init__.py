"""RGB-D glass surface segmentation with weighted feature fusion.

A small, fully deterministic numpy training stack: tensor ops with
reverse-mode gradients, a channel-weighted RGB-D fusion block, a compact
two-stream segmentation network, IoU/boundary-IoU metrics, a synthetic
glass-scene generator, and a training/evaluation harness.
"""

from .tensor import Tensor, ShapeMismatchError, finite_diff_check, no_grad
from .wff import WffParams, FusionWeights, wff_forward
from .segnet import NetworkConfig, SegNet, Checkpoint, classify, predict, bce_loss
from .metrics import ConfusionCounts, MetricsReport, confusion, iou_glass, miou, boundary_band, biou, aggregate
from .data import RgbdSample, SceneRecipe, load_sample, save_sample, normalize_depth, synth_scene, build_manifest
from .trainer import TrainConfig, TrainLog, train, evaluate, select_difficult

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "finite_diff_check",
    "no_grad",
    "WffParams",
    "FusionWeights",
    "wff_forward",
    "NetworkConfig",
    "SegNet",
    "Checkpoint",
    "classify",
    "predict",
    "bce_loss",
    "ConfusionCounts",
    "MetricsReport",
    "confusion",
    "iou_glass",
    "miou",
    "boundary_band",
    "biou",
    "aggregate",
    "RgbdSample",
    "SceneRecipe",
    "load_sample",
    "save_sample",
    "normalize_depth",
    "synth_scene",
    "build_manifest",
    "TrainConfig",
    "TrainLog",
    "train",
    "evaluate",
    "select_difficult",
]
