"""Adaptive computation units with FGM and LGM gradient paths.

Every unit multiplies a computation by an occupancy gate. How the gate enters
the tape is decided by :class:`GradientMode`:

=========  ========  =====================================================
mode       forward   gate on the tape
=========  ========  =====================================================
fgm        hard      hard occupancy as a constant (plain inference)
fgm        soft      soft occupancy value, detached
lgm        soft      soft occupancy, differentiable (default attack path)
lgm        hard      hard value, soft derivative (straight-through)
=========  ========  =====================================================

Image tensors are NCHW with a batch axis; 3D features are (voxels, channels).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .occupancy import (
    DEFAULT_LAMBDA_GATE,
    SparseVoxelGrid,
    hard_sign_occupancy,
    lookup,
    soft_occupancy,
)

FGM = "fgm"
LGM = "lgm"


class ModeMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientMode:
    kind: str = FGM
    forward: str = "hard"
    slope: float = DEFAULT_LAMBDA_GATE

    def __post_init__(self):
        if self.kind not in (FGM, LGM):
            raise ValueError(f"unknown gradient mode {self.kind!r}")
        if self.forward not in ("hard", "soft"):
            raise ValueError(f"unknown forward occupancy {self.forward!r}")
        if not self.slope > 0:
            raise ValueError("slope must be positive")

    @property
    def is_inference(self) -> bool:
        return self.kind == FGM and self.forward == "hard"

    @property
    def needs_soft(self) -> bool:
        return not self.is_inference

    @classmethod
    def inference(cls) -> "GradientMode":
        return cls(FGM, "hard")

    @classmethod
    def lgm(cls, slope: float = DEFAULT_LAMBDA_GATE, forward: str = "soft") -> "GradientMode":
        return cls(LGM, forward, slope)

    @classmethod
    def fgm(cls, slope: float = DEFAULT_LAMBDA_GATE, forward: str = "hard") -> "GradientMode":
        return cls(FGM, forward, slope)

    def detached(self) -> "GradientMode":
        """Same forward values with the occupancy derivative removed."""
        return GradientMode(FGM, self.forward, self.slope)


INFERENCE = GradientMode.inference()


def make_gate(soft: Tensor | None, hard: np.ndarray, mode: GradientMode) -> Tensor:
    hard = np.asarray(hard, dtype=float)
    if mode.is_inference:
        return Tensor(hard)
    if soft is None:
        raise ValueError("soft occupancy required outside inference")
    if mode.kind == FGM:
        return ad.detach(soft)
    if mode.forward == "soft":
        return soft
    # hard value, soft derivative: hard + (g - stop(g)) is exactly hard in value
    return ad.add(Tensor(hard), ad.sub(soft, ad.detach(soft)))


@dataclass
class GateRecord:
    """One unit's gate in a forward pass: scores/occupancies as numpy, gate on tape."""

    unit: str
    hard: np.ndarray
    gate: Tensor
    scores: np.ndarray | None = None
    phi: Tensor | None = None
    soft: Tensor | None = None


# ---------------------------------------------------------------- parameters

@dataclass
class ConvKernel:
    """Weights (out, in, k, k) for 2D or (k^3, out, in) for 3D, plus bias (out,)."""

    weight: Tensor
    bias: Tensor

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1] if self.weight.ndim == 3 else self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2] if self.weight.ndim == 3 else self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @classmethod
    def init2d(cls, rng, cin, cout, k=3, scale=1.0) -> "ConvKernel":
        std = scale * np.sqrt(2.0 / (cin * k * k))
        return cls(ad.tensor(rng.normal(0, std, (cout, cin, k, k)), True),
                   ad.tensor(np.zeros(cout), True))

    @classmethod
    def init3d(cls, rng, cin, cout, k=3, scale=1.0) -> "ConvKernel":
        std = scale * np.sqrt(2.0 / (cin * k**3))
        return cls(ad.tensor(rng.normal(0, std, (k**3, cout, cin)), True),
                   ad.tensor(np.zeros(cout), True))


@dataclass
class OccupancyGenerator:
    """Pooled affine score (per example) or 3x3 conv score map (per pixel)."""

    weight: Tensor
    bias: Tensor
    spatial: bool = False

    def __call__(self, F: Tensor) -> Tensor:
        if self.spatial:
            q = ad.conv2d(F, self.weight, self.bias)
            return ad.reshape(q, (q.shape[0], q.shape[2], q.shape[3]))
        pooled = ad.mean(F, axis=(2, 3))
        return ad.add(ad.matmul(pooled, ad.reshape(self.weight, (-1, 1))), self.bias).reshape(-1)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @classmethod
    def pooled(cls, rng, channels, bias=0.5) -> "OccupancyGenerator":
        return cls(ad.tensor(rng.normal(0, 1.0 / np.sqrt(channels), channels), True),
                   ad.tensor(np.array([bias]), True))

    @classmethod
    def conv(cls, rng, channels, bias=0.5) -> "OccupancyGenerator":
        w = rng.normal(0, np.sqrt(1.0 / (9 * channels)), (1, channels, 3, 3))
        return cls(ad.tensor(w, True), ad.tensor(np.array([bias]), True), spatial=True)


@dataclass
class SkippableLayer:
    """Residual transform ``H(F) = F + relu(conv(F))`` behind a scalar gate."""

    kernel: ConvKernel
    generator: OccupancyGenerator

    def transform(self, F: Tensor) -> Tensor:
        if F.shape[1] != self.kernel.in_channels:
            raise ad.ShapeError(f"layer expects {self.kernel.in_channels} channels, got {F.shape[1]}")
        return ad.add(F, ad.relu(ad.conv2d(F, self.kernel.weight, self.kernel.bias)))

    def parameters(self) -> list[Tensor]:
        return self.kernel.parameters() + self.generator.parameters()


# ---------------------------------------------------------------- layer skip

def layer_skip_forward(F: Tensor, layer: SkippableLayer, mode: GradientMode = INFERENCE,
                       trace: list | None = None) -> Tensor:
    """``g * H(F) + (1 - g) * F`` with the gate ``g`` chosen by ``mode``."""
    F = ad.as_tensor(F)
    if F.ndim != 4:
        raise ad.ShapeError(f"expected NCHW features, got {F.shape}")
    q = layer.generator(F)
    hard = hard_sign_occupancy(q.data).astype(float).reshape(-1)
    soft = ad.sigmoid(ad.mul(q, mode.slope)) if mode.needs_soft else None
    g = make_gate(soft, hard, mode)
    g4 = ad.reshape(g, (-1, 1, 1, 1))
    H = layer.transform(F)
    out = ad.add(ad.mul(g4, H), ad.mul(ad.sub(1.0, g4), F))
    if trace is not None:
        trace.append(GateRecord("skip", hard, g, q.data.copy(), ad.sub(H, F), soft))
    return out


# ---------------------------------------------------------------- 2D sparse conv

def sparse_conv2d_forward(F: Tensor, kernel: ConvKernel, mask_scores: Tensor,
                          mode: GradientMode = INFERENCE, trace: list | None = None) -> Tensor:
    """Per-pixel gated convolution ``g_p * (sum_u W_u f_{p+u} + b)``, zero padded."""
    F = ad.as_tensor(F)
    mask_scores = ad.as_tensor(mask_scores)
    if F.ndim != 4 or mask_scores.shape != (F.shape[0],) + F.shape[2:]:
        raise ad.ShapeError(f"mask {mask_scores.shape} does not match features {F.shape}")
    hard = hard_sign_occupancy(mask_scores.data).astype(float)
    soft = ad.sigmoid(ad.mul(mask_scores, mode.slope)) if mode.needs_soft else None
    g = make_gate(soft, hard, mode)
    conv = ad.conv2d(F, kernel.weight, kernel.bias)
    out = ad.mul(ad.reshape(g, (g.shape[0], 1) + g.shape[1:]), conv)
    if trace is not None:
        trace.append(GateRecord("mask2d", hard, g, mask_scores.data.copy(), conv, soft))
    return out


def dense_conv2d_reference(F: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct loop convolution used as an independent check."""
    B, C, H, W = F.shape
    O, _, k, _ = weight.shape
    r = k // 2
    out = np.zeros((B, O, H, W))
    for b in range(B):
        for h in range(H):
            for w in range(W):
                acc = bias.astype(float).copy()
                for i in range(k):
                    for j in range(k):
                        hh, ww = h + i - r, w + j - r
                        if 0 <= hh < H and 0 <= ww < W:
                            acc += weight[:, :, i, j] @ F[b, :, hh, ww]
                out[b, :, h, w] = acc
    return out


# ---------------------------------------------------------------- 3D sparse conv

def kernel_offsets(k: int = 3) -> np.ndarray:
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    r = k // 2
    return np.array(list(itertools.product(range(-r, r + 1), repeat=3)), dtype=np.int64)


def neighbor_table(out_voxels: np.ndarray, in_voxels: np.ndarray, k: int = 3) -> np.ndarray:
    """``table[m, j]`` = row of ``out_voxels[m] + offset_j`` in ``in_voxels`` or -1."""
    offs = kernel_offsets(k)
    q = out_voxels[:, None, :] + offs[None, :, :]
    return lookup(in_voxels, q.reshape(-1, 3)).reshape(len(out_voxels), len(offs))


def active_voxels(grid: SparseVoxelGrid, mode: GradientMode) -> np.ndarray:
    """Occupied voxels for plain inference, the extended set otherwise."""
    if mode.is_inference:
        return grid.voxels
    if grid.step_budget is None:
        raise ValueError("differentiable occupancy needs the extended voxel set")
    return grid.extended_voxels


def voxel_gate(grid: SparseVoxelGrid, mode: GradientMode, points: Tensor | None = None,
               relation_kind: str = "sigmoid_like", param: float | None = None) -> Tensor:
    """Gate over :func:`active_voxels` (hard ones, or the relaxed occupancy)."""
    if mode.is_inference:
        return Tensor(np.ones(grid.n_voxels))
    pts = ad.as_tensor(grid.points if points is None else points)
    soft = soft_occupancy(pts, grid, relation_kind, param)
    return make_gate(soft, grid.hard_occupancy(), mode)


def sparse_conv3d_forward(grid: SparseVoxelGrid, features: Tensor, kernel: ConvKernel,
                          mode: GradientMode = INFERENCE, relation_kind: str = "sigmoid_like",
                          lam: float | None = None, points: Tensor | None = None,
                          gate: Tensor | None = None, table: np.ndarray | None = None,
                          trace: list | None = None):
    """Gated sparse convolution over the voxels active under ``mode``.

    Returns ``(voxels, features')``. ``gate`` and ``table`` can be passed in to
    share them across stacked layers.
    """
    voxels = active_voxels(grid, mode)
    features = ad.as_tensor(features)
    if features.ndim != 2 or features.shape[0] != len(voxels):
        raise ad.ShapeError(f"features {features.shape} not aligned with {len(voxels)} voxels")
    if gate is None:
        gate = voxel_gate(grid, mode, points, relation_kind, lam)
    if table is None:
        k = round(kernel.weight.shape[0] ** (1 / 3))
        table = neighbor_table(voxels, voxels, k)
    conv = ad.sparse_conv(features, table, kernel.weight, kernel.bias)
    out = ad.mul(ad.reshape(gate, (-1, 1)), conv)
    if trace is not None:
        hard = np.ones(len(voxels)) if mode.is_inference else grid.hard_occupancy()
        trace.append(GateRecord("voxel", hard, gate, None, conv))
    return voxels, out


def sparse_conv3d_reference(voxels: np.ndarray, features: np.ndarray, weight: np.ndarray,
                            bias: np.ndarray) -> np.ndarray:
    """Dictionary-based literal sparse convolution over occupied voxels."""
    offs = kernel_offsets(round(weight.shape[0] ** (1 / 3)))
    index = {tuple(v): i for i, v in enumerate(voxels.tolist())}
    out = np.zeros((len(voxels), weight.shape[1]))
    for m, v in enumerate(voxels.tolist()):
        acc = bias.astype(float).copy()
        for j, u in enumerate(offs.tolist()):
            q = index.get((v[0] + u[0], v[1] + u[1], v[2] + u[2]))
            if q is not None:
                acc += weight[j] @ features[q]
        out[m] = acc
    return out


# ---------------------------------------------------------------- gradients

@dataclass
class UnitGradient:
    mode: GradientMode
    grads: dict = field(default_factory=dict)


def unit_gradient(loss: Tensor, inputs: dict, mode: GradientMode,
                  forward_mode: GradientMode) -> UnitGradient:
    """Backpropagate ``loss`` and collect gradients of the named input tensors.

    ``forward_mode`` is the mode the forward pass ran under; it must agree with
    ``mode`` (gradients cannot be switched after the tape was built).
    """
    if mode != forward_mode:
        raise ModeMismatchError(f"forward ran as {forward_mode}, backward requested {mode}")
    ad.backward(loss, inputs=list(inputs.values()))
    return UnitGradient(mode, {k: t.grad.copy() for k, t in inputs.items()})
