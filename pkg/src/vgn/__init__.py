"""Vessel graph network: CNN + graph convolution for vessel segmentation."""
from vgn._backend import BACKEND
from vgn.checkpoint import load_checkpoint, save_checkpoint
from vgn.data import Sample, load_dataset, load_sample, save_sample
from vgn.evaluation import PRCurve, average_precision, emit_report, max_f1, pr_curve
from vgn.graph import VesselGraph, construct_graph, normalize_adjacency, skeletonize
from vgn.model import VGN, ModelConfig
from vgn.synth import SynthConfig, synth_generate
from vgn.trainer import TrainConfig, predict, pretrain_cnn, refresh_graphs, train_vgn

__all__ = [
    "BACKEND", "PRCurve", "Sample", "SynthConfig", "TrainConfig", "VGN", "ModelConfig",
    "VesselGraph", "average_precision", "construct_graph", "emit_report", "load_checkpoint",
    "load_dataset", "load_sample", "max_f1", "normalize_adjacency", "pr_curve", "predict",
    "pretrain_cnn", "refresh_graphs", "save_checkpoint", "save_sample", "skeletonize",
    "synth_generate", "train_vgn",
]
__version__ = "0.1.0"
