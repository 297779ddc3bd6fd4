"""Desk-scale adaptive victims and their training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SyntheticDataset
from .occupancy import DEFAULT_LAMBDA_3D, SparseVoxelGrid, build_extended_voxels, voxelize
from .units import (
    INFERENCE,
    ConvKernel,
    GradientMode,
    OccupancyGenerator,
    SkippableLayer,
    active_voxels,
    layer_skip_forward,
    neighbor_table,
    sparse_conv2d_forward,
    voxel_gate,
)

log = logging.getLogger(__name__)

DEFAULT_VOXEL_SIZE = 0.1
SCENE_CENTRE = 1.0


class TrainingDiverged(RuntimeError):
    pass


def _pool2(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    return ad.mean(ad.reshape(x, (B, C, H // 2, 2, W // 2, 2)), axis=(3, 5))


class AdaptiveNetwork:
    """Common parameter bookkeeping. Subclasses define ``forward`` and ``census``."""

    kind = "base"

    def __init__(self, spec: dict):
        self.spec = dict(spec)
        self.training_log: list[float] = []

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.named_parameters():
            arr = np.asarray(state[k], dtype=float)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


# ---------------------------------------------------------------- layer skipping

class LayerSkipClassifier(AdaptiveNetwork):
    """stem conv -> pool -> [skippable layers, a static conv after every second] -> GAP -> linear."""

    kind = "layer_skip"

    def __init__(self, spec, stem, units, head_w, head_b):
        super().__init__(spec)
        self.stem = stem
        self.units = units  # list of ("skip", SkippableLayer) / ("static", ConvKernel)
        self.head_w = head_w
        self.head_b = head_b

    @property
    def skippable(self) -> list[SkippableLayer]:
        return [u for k, u in self.units if k == "skip"]

    @property
    def census(self) -> int:
        return len(self.skippable)

    def named_parameters(self):
        out = [("stem.w", self.stem.weight), ("stem.b", self.stem.bias)]
        for i, (k, u) in enumerate(self.units):
            if k == "skip":
                out += [(f"u{i}.w", u.kernel.weight), (f"u{i}.b", u.kernel.bias),
                        (f"u{i}.gw", u.generator.weight), (f"u{i}.gb", u.generator.bias)]
            else:
                out += [(f"u{i}.w", u.weight), (f"u{i}.b", u.bias)]
        return out + [("head.w", self.head_w), ("head.b", self.head_b)]

    def forward(self, x, mode: GradientMode = INFERENCE, trace: list | None = None) -> Tensor:
        h = _pool2(ad.relu(ad.conv2d(x, self.stem.weight, self.stem.bias)))
        for k, u in self.units:
            if k == "skip":
                h = layer_skip_forward(h, u, mode, trace)
            else:
                h = ad.relu(ad.conv2d(h, u.weight, u.bias))
        pooled = ad.mean(h, axis=(2, 3))
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)

    def gates(self, x) -> np.ndarray:
        """Hard execution decisions, shape (B, layers)."""
        trace: list = []
        self.forward(ad.as_tensor(x), INFERENCE, trace)
        return np.stack([r.hard for r in trace], axis=1)


def build_layer_skip_classifier(layers: int = 4, channels: int = 8, classes: int = 2,
                                seed: int = 0, in_channels: int = 1,
                                gate_bias: float = 0.5) -> LayerSkipClassifier:
    if layers < 1 or channels < 1 or classes < 2 or in_channels < 1:
        raise ValueError("invalid network dimensions")
    rng = np.random.default_rng(seed)
    stem = ConvKernel.init2d(rng, in_channels, channels)
    units = []
    for i in range(layers):
        units.append(("skip", SkippableLayer(ConvKernel.init2d(rng, channels, channels, scale=0.5),
                                             OccupancyGenerator.pooled(rng, channels, gate_bias))))
        if i % 2 == 1 and i != layers - 1:
            units.append(("static", ConvKernel.init2d(rng, channels, channels)))
    head_w = ad.tensor(rng.normal(0, 1 / np.sqrt(channels), (channels, classes)), True)
    head_b = ad.tensor(np.zeros(classes), True)
    spec = dict(builder="layer_skip", layers=layers, channels=channels, classes=classes,
                seed=seed, in_channels=in_channels, gate_bias=gate_bias)
    return LayerSkipClassifier(spec, stem, units, head_w, head_b)


# ---------------------------------------------------------------- 2D sparse conv

class Sparse2dClassifier(AdaptiveNetwork):
    """stem conv -> pool -> residual masked-conv blocks -> GAP -> linear."""

    kind = "sparse2d"

    def __init__(self, spec, stem, blocks, head_w, head_b):
        super().__init__(spec)
        self.stem = stem
        self.blocks = blocks  # list of (OccupancyGenerator, ConvKernel)
        self.head_w = head_w
        self.head_b = head_b

    def named_parameters(self):
        out = [("stem.w", self.stem.weight), ("stem.b", self.stem.bias)]
        for i, (g, k) in enumerate(self.blocks):
            out += [(f"b{i}.gw", g.weight), (f"b{i}.gb", g.bias),
                    (f"b{i}.w", k.weight), (f"b{i}.b", k.bias)]
        return out + [("head.w", self.head_w), ("head.b", self.head_b)]

    def mask_shape(self, image_hw) -> tuple:
        return (image_hw[0] // 2, image_hw[1] // 2)

    def census(self, image_hw, include_input: bool = True) -> int:
        """Changeable pixels: every mask layer, optionally plus the input image."""
        h, w = self.mask_shape(image_hw)
        n = len(self.blocks) * h * w
        return n + (image_hw[0] * image_hw[1] if include_input else 0)

    def forward(self, x, mode: GradientMode = INFERENCE, trace: list | None = None) -> Tensor:
        h = _pool2(ad.relu(ad.conv2d(x, self.stem.weight, self.stem.bias)))
        for gen, kernel in self.blocks:
            q = gen(h)
            h = ad.add(h, ad.relu(sparse_conv2d_forward(h, kernel, q, mode, trace)))
        pooled = ad.mean(h, axis=(2, 3))
        return ad.add(ad.matmul(pooled, self.head_w), self.head_b)

    def masks(self, x) -> np.ndarray:
        """Hard masks, shape (B, blocks, H, W)."""
        trace: list = []
        self.forward(ad.as_tensor(x), INFERENCE, trace)
        return np.stack([r.hard for r in trace], axis=1)


def build_sparse2d_classifier(blocks: int = 3, channels: int = 8, classes: int = 2, seed: int = 0,
                              in_channels: int = 1, gate_bias: float = 0.5) -> Sparse2dClassifier:
    if blocks < 1 or channels < 1 or classes < 2 or in_channels < 1:
        raise ValueError("invalid network dimensions")
    rng = np.random.default_rng(seed)
    stem = ConvKernel.init2d(rng, in_channels, channels)
    blist = [(OccupancyGenerator.conv(rng, channels, gate_bias),
              ConvKernel.init2d(rng, channels, channels, scale=0.5)) for _ in range(blocks)]
    head_w = ad.tensor(rng.normal(0, 1 / np.sqrt(channels), (channels, classes)), True)
    head_b = ad.tensor(np.zeros(classes), True)
    spec = dict(builder="sparse2d", blocks=blocks, channels=channels, classes=classes,
                seed=seed, in_channels=in_channels, gate_bias=gate_bias)
    return Sparse2dClassifier(spec, stem, blist, head_w, head_b)


# ---------------------------------------------------------------- 3D sparse conv

@dataclass
class CloudForward:
    """Outputs of one segmenter pass."""

    point_logits: Tensor
    voxel_logits: Tensor
    grid: SparseVoxelGrid
    voxels: np.ndarray
    trace: list = field(default_factory=list)


def point_features(points: Tensor, feature_kind: str, colors: np.ndarray | None = None,
                   grid: SparseVoxelGrid | None = None) -> Tensor:
    """Per-point input features plus a constant channel.

    ``offsets``: position inside the point's voxel in voxel units, in
    [-0.5, 0.5)^3. ``coords``: scene-centred coordinates in voxel units.
    ``colors``: per-point pseudo-colours (no gradient path to the points).
    """
    n = points.shape[0]
    ones = Tensor(np.ones((n, 1)))
    if feature_kind in ("offsets", "coords"):
        if grid is None:
            raise ValueError("coordinate features need the voxel grid")
        scaled = ad.mul(points, 1.0 / grid.voxel_size)
        if feature_kind == "offsets":
            origin = grid.voxels[grid.point_to_voxel] + 0.5
        else:
            origin = np.full((n, 3), SCENE_CENTRE / grid.voxel_size)
        return ad.concat([ad.sub(scaled, origin.astype(float)), ones], axis=1)
    if feature_kind == "colors":
        if colors is None:
            raise ValueError("colour features need per-point colours")
        return Tensor(np.concatenate([colors, np.ones((n, 1))], axis=1))
    raise ValueError(f"unknown feature kind {feature_kind!r}")


FEATURE_KINDS = ("offsets", "coords", "colors")


class Sparse3dSegmenter(AdaptiveNetwork):
    """Stacked 3^3 sparse convolutions gated by voxel occupancy, pointwise head.

    There is no learned occupancy generator: a voxel executes iff it holds a
    point. Each point reads the logits of the voxel it falls in.
    """

    kind = "sparse3d"

    def __init__(self, spec, kernels, head_w, head_b):
        super().__init__(spec)
        self.kernels = kernels
        self.head_w = head_w
        self.head_b = head_b
        self.voxel_size = spec["voxel_size"]
        self.feature_kind = spec["features"]

    def named_parameters(self):
        out = []
        for i, k in enumerate(self.kernels):
            out += [(f"c{i}.w", k.weight), (f"c{i}.b", k.bias)]
        return out + [("head.w", self.head_w), ("head.b", self.head_b)]

    def census(self, grid: SparseVoxelGrid) -> int:
        return grid.n_voxels

    def prepare(self, points, mode: GradientMode, step_budget: float | None) -> SparseVoxelGrid:
        grid = voxelize(np.asarray(points.data if isinstance(points, Tensor) else points),
                        self.voxel_size)
        if not mode.is_inference:
            if step_budget is None:
                raise ValueError("relaxed occupancy needs a step budget")
            grid = build_extended_voxels(grid, step_budget)
        return grid

    def forward(self, points, mode: GradientMode = INFERENCE, colors=None,
                relation_kind: str = "sigmoid_like", param: float | None = DEFAULT_LAMBDA_3D,
                step_budget: float | None = None, grid: SparseVoxelGrid | None = None) -> CloudForward:
        pts = ad.as_tensor(points)
        if grid is None:
            grid = self.prepare(pts, mode, step_budget)
        voxels = active_voxels(grid, mode)
        gate = ad.reshape(voxel_gate(grid, mode, pts, relation_kind, param), (-1, 1))
        table = neighbor_table(voxels, voxels, 3)

        feats = point_features(pts, self.feature_kind, colors, grid)
        counts = np.bincount(grid.point_to_voxel, minlength=len(voxels)).astype(float)
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)[:, None]
        h = ad.mul(ad.segment_sum(feats, grid.point_to_voxel, len(voxels)), inv)

        trace = []
        for i, kernel in enumerate(self.kernels):
            conv = ad.sparse_conv(h, table, kernel.weight, kernel.bias)
            trace.append(conv)
            h = ad.relu(ad.mul(gate, conv))
        vlogits = ad.add(ad.matmul(h, self.head_w), self.head_b)
        plogits = ad.gather_rows(vlogits, grid.point_to_voxel)
        return CloudForward(plogits, vlogits, grid, voxels, trace)

    def predict(self, points, colors=None) -> np.ndarray:
        return self.forward(points, INFERENCE, colors).point_logits.data.argmax(axis=1)


def build_sparse3d_segmenter(classes: int = 2, width: int = 16, depth: int = 3, seed: int = 0,
                             voxel_size: float = DEFAULT_VOXEL_SIZE,
                             features: str = "offsets") -> Sparse3dSegmenter:
    if classes < 2 or width < 1 or depth < 1 or not voxel_size > 0:
        raise ValueError("invalid network dimensions")
    if features not in FEATURE_KINDS:
        raise ValueError(f"unknown feature kind {features!r}")
    rng = np.random.default_rng(seed)
    dims = [4] + [width] * depth
    kernels = [ConvKernel.init3d(rng, dims[i], dims[i + 1]) for i in range(depth)]
    head_w = ad.tensor(rng.normal(0, 1 / np.sqrt(width), (width, classes)), True)
    head_b = ad.tensor(np.zeros(classes), True)
    spec = dict(builder="sparse3d", classes=classes, width=width, depth=depth, seed=seed,
                voxel_size=voxel_size, features=features)
    return Sparse3dSegmenter(spec, kernels, head_w, head_b)


BUILDERS = {
    "layer_skip": build_layer_skip_classifier,
    "sparse2d": build_sparse2d_classifier,
    "sparse3d": build_sparse3d_segmenter,
}


def build_from_spec(spec: dict) -> AdaptiveNetwork:
    spec = dict(spec)
    builder = spec.pop("builder")
    return BUILDERS[builder](**spec)


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, params, lr=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad**2
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 60
    lr: float = 1e-2
    seed: int = 0
    batch_size: int = 64
    gate_slope: float = 1.0
    gate_target: float = 0.5
    gate_weight: float = 0.5
    step_budget: float = 0.005


def _image_loss(net, x, y, cfg: TrainConfig):
    trace: list = []
    mode = GradientMode.lgm(cfg.gate_slope, forward="hard")
    logits = net.forward(Tensor(x), mode, trace)
    loss = ad.softmax_cross_entropy(logits, y)
    if cfg.gate_weight > 0 and trace:
        reg = None
        for rec in trace:
            gap = ad.sub(ad.mean(rec.soft), cfg.gate_target)
            term = ad.mul(gap, gap)
            reg = term if reg is None else ad.add(reg, term)
        loss = ad.add(loss, ad.mul(reg, cfg.gate_weight / len(trace)))
    return loss, logits


def train(net: AdaptiveNetwork, data: SyntheticDataset, epochs: int | None = None,
          lr: float | None = None, seed: int | None = None,
          cfg: TrainConfig | None = None) -> AdaptiveNetwork:
    """Train in place (and return ``net``) with Adam on cross-entropy.

    Image victims use hard gates forward with straight-through sigmoid
    gradients for the generators, plus a squared penalty pulling each gate's
    mean execution rate toward ``gate_target``.
    """
    cfg = cfg or TrainConfig()
    if epochs is not None:
        cfg.epochs = epochs
    if lr is not None:
        cfg.lr = lr
    if seed is not None:
        cfg.seed = seed
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.parameters(), lr=cfg.lr)
    net.training_log = []
    for epoch in range(cfg.epochs):
        losses = []
        if data.is_image:
            order = rng.permutation(len(data))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                try:
                    loss, _ = _image_loss(net, data.images[idx], data.labels[idx], cfg)
                    ad.backward(loss, inputs=net.parameters())
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}: {exc}") from exc
                opt.step()
                losses.append(loss.item())
        else:
            for i in rng.permutation(len(data)):
                try:
                    out = net.forward(data.clouds[i], INFERENCE, data.colors[i])
                    loss = ad.softmax_cross_entropy(out.point_logits, data.point_labels[i])
                    ad.backward(loss, inputs=net.parameters())
                except ad.NonFiniteError as exc:
                    raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}: {exc}") from exc
                opt.step()
                losses.append(loss.item())
        net.training_log.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.4f", epoch, net.training_log[-1])
    return net


def predict_images(net, images, batch_size: int = 256) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        out.append(net.forward(Tensor(images[s:s + batch_size]), INFERENCE).data.argmax(axis=1))
    return np.concatenate(out)
