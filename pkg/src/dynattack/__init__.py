"""Dynamics-aware adversarial attacks on adaptive networks.

Layer skipping, 2D masked convolution and 3D sparse convolution victims,
a float64 reverse-mode tape, differentiable occupancy releases, and FGSM /
I-FGSM / point-coordinate attacks under detached-gate (``fgm``) or
gate-aware (``lgm``) gradients.
"""

from .attacks import AttackConfig, attack_clouds, fgsm, ifgsm, point_attack, random_baseline
from .autodiff import NonFiniteError, ShapeError, Tensor, backward, tensor
from .data import make_synthetic_clouds, make_synthetic_images
from .metrics import AttackReport, accuracy, architecture_change_ratio, miou, serialize_report
from .models import (
    build_layer_skip_classifier,
    build_sparse2d_classifier,
    build_sparse3d_segmenter,
    train,
)
from .units import GradientMode

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackReport", "GradientMode", "NonFiniteError", "ShapeError", "Tensor",
    "accuracy", "architecture_change_ratio", "attack_clouds", "backward",
    "build_layer_skip_classifier", "build_sparse2d_classifier", "build_sparse3d_segmenter",
    "fgsm", "ifgsm", "make_synthetic_clouds", "make_synthetic_images", "miou", "point_attack",
    "random_baseline", "serialize_report", "tensor", "train",
]
