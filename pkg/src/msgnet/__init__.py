"""Desk-scale building blocks for alignment-free RGB/thermal video detection."""

from .apl import GAMMA_BINS, AdaptivePartitioner, crop_fused, lambda_to_gamma
from .detect import (
    Box,
    Detection,
    DetectionHead,
    DetectionLoss,
    average_precision,
    bce_loss,
    box_iou,
    ciou_loss,
    dfl_loss,
    nms,
)
from .encoder import Encoder, FeaturePyramid
from .hstm import HybridTemporal, TemporalSparseGraph, TemporalStarBlock
from .model import ModelConfig, MSGNet, load_checkpoint, save_checkpoint
from .sparsegraph import (
    GraphConfig,
    NodeSet,
    SparseBipartiteGraph,
    aggregate,
    edge_cost,
    prune,
    score_dense,
)
from .ssglm import SpatialFusion
from .synth import make_dataset, random_scene, render
from .tensor import Tensor, dump_msgt, load_msgt
from .train import TrainConfig, evaluate, train_toy

__all__ = [
    "GAMMA_BINS",
    "AdaptivePartitioner",
    "crop_fused",
    "lambda_to_gamma",
    "Box",
    "Detection",
    "DetectionHead",
    "DetectionLoss",
    "average_precision",
    "bce_loss",
    "box_iou",
    "ciou_loss",
    "dfl_loss",
    "nms",
    "Encoder",
    "FeaturePyramid",
    "HybridTemporal",
    "TemporalSparseGraph",
    "TemporalStarBlock",
    "ModelConfig",
    "MSGNet",
    "load_checkpoint",
    "save_checkpoint",
    "GraphConfig",
    "NodeSet",
    "SparseBipartiteGraph",
    "aggregate",
    "edge_cost",
    "prune",
    "score_dense",
    "SpatialFusion",
    "make_dataset",
    "random_scene",
    "render",
    "Tensor",
    "dump_msgt",
    "load_msgt",
    "TrainConfig",
    "evaluate",
    "train_toy",
]

__version__ = "0.1.0"
