"""Experiment configs and seed-paired sweep runners.

An :class:`ExperimentConfig` bundles a dataset spec, a victim spec, a training
recipe and an attack grid. ``run_seed`` trains one victim and evaluates every
cell of the grid on the test split, returning one :class:`AttackReport` per
(method, epsilon, lambda, alpha, relation) cell; :func:`best_per_epsilon`
reduces those to the best swept value per (method, epsilon, seed).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, attack_clouds, fgsm, ifgsm
from .data import CLOUD_KINDS, IMAGE_KINDS, SyntheticDataset, make_synthetic_clouds, make_synthetic_images
from .metrics import AttackReport, layer_execution_rates
from .models import (
    AdaptiveNetwork,
    TrainConfig,
    build_layer_skip_classifier,
    build_sparse2d_classifier,
    build_sparse3d_segmenter,
    train,
)

log = logging.getLogger(__name__)

ARCHES = ("layer_skip", "sparse2d", "sparse3d")
GATE_BAND = (0.05, 0.95)
VICTIM_RETRIES = 5
_RETRY_STRIDE = 7919


@dataclass
class DatasetSpec:
    kind: str = "bars_blobs"
    seed: int = 0
    n_train: int = 512
    n_test: int = 200
    size: int = 16
    noise: float = 0.2
    contrast: tuple = (0.15, 0.3)
    n_points: int = 1024

    @property
    def is_image(self) -> bool:
        return self.kind in IMAGE_KINDS

    def validate(self):
        if self.kind not in IMAGE_KINDS and self.kind not in CLOUD_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("dataset sizes must be >= 1")

    def make(self, split: str) -> SyntheticDataset:
        n = self.n_train if split == "train" else self.n_test
        if self.is_image:
            return make_synthetic_images(self.kind, n, self.seed, size=self.size, split=split,
                                         noise=self.noise, contrast=tuple(self.contrast))
        return make_synthetic_clouds(self.kind, n, self.seed, n_points=self.n_points, split=split)


@dataclass
class VictimSpec:
    arch: str = "layer_skip"
    seeds: tuple = tuple(range(10))
    layers: int = 4
    blocks: int = 3
    channels: int = 8
    gate_bias: float = 0.5
    width: int = 16
    depth: int = 3
    voxel_size: float = 0.1
    features: str = "offsets"

    def validate(self):
        if self.arch not in ARCHES:
            raise ValueError(f"unknown victim architecture {self.arch!r}")
        if not self.seeds:
            raise ValueError("victim seed list is empty")

    def build(self, classes: int, seed: int, in_channels: int = 1) -> AdaptiveNetwork:
        if self.arch == "layer_skip":
            return build_layer_skip_classifier(self.layers, self.channels, classes, seed,
                                               in_channels, self.gate_bias)
        if self.arch == "sparse2d":
            return build_sparse2d_classifier(self.blocks, self.channels, classes, seed,
                                             in_channels, self.gate_bias)
        return build_sparse3d_segmenter(classes, self.width, self.depth, seed,
                                        self.voxel_size, self.features)


@dataclass
class TrainSpec:
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 64
    gate_weight: float = 0.5
    gate_target: float = 0.5

    def config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, seed=seed, batch_size=self.batch_size,
                           gate_weight=self.gate_weight, gate_target=self.gate_target)


@dataclass
class AttackGrid:
    """``attack`` is fgsm, ifgsm or point. Point-cloud epsilons are given as
    multiples of the voxel size."""

    attack: str = "fgsm"
    methods: tuple = ("fgm", "lgm", "random")
    epsilons: tuple = (2.0, 4.0, 8.0)
    lambdas: tuple = (1e-4, 1e-2, 0.1, 1.0, 5.0, 10.0, 20.0, 40.0)
    alphas: tuple = (1.0,)
    iterations: int = 0
    relations: tuple = ("sigmoid_like",)
    valid_fraction: float = 1.0
    forward: str = "soft"

    def validate(self):
        if self.attack not in ("fgsm", "ifgsm", "point"):
            raise ValueError(f"unknown attack {self.attack!r}")
        for name in ("methods", "epsilons", "lambdas", "alphas", "relations"):
            if not getattr(self, name):
                raise ValueError(f"sweep grid {name!r} is empty")
        bad = set(self.methods) - {"fgm", "lgm", "random"}
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    victim: VictimSpec = field(default_factory=VictimSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    attack: AttackGrid = field(default_factory=AttackGrid)

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        self.victim.validate()
        self.attack.validate()
        if self.dataset.is_image == (self.victim.arch == "sparse3d"):
            raise ValueError("victim architecture does not match the dataset kind")
        if (self.attack.attack == "point") != (self.victim.arch == "sparse3d"):
            raise ValueError("point attacks go with the 3D segmenter and only with it")
        return self

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Stable 12-hex-digit hash of the canonical JSON form."""
        blob = json.dumps(_canonical(self.as_dict()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _canonical(obj):
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        return float(obj)
    return obj


# ---------------------------------------------------------------- presets

def image_preset(arch: str = "layer_skip", seeds=range(10)) -> ExperimentConfig:
    """Single-step FGSM on the low-contrast bars/blobs task."""
    return ExperimentConfig(DatasetSpec(), VictimSpec(arch=arch, seeds=tuple(seeds)), TrainSpec(),
                            AttackGrid(methods=("fgm", "lgm")))


def cloud_preset(seeds=range(10)) -> ExperimentConfig:
    """Iterative point attack at 0.25, 0.5 and 1 voxel sizes."""
    return ExperimentConfig(
        DatasetSpec(kind="plane_sphere", n_train=64, n_test=4),
        VictimSpec(arch="sparse3d", seeds=tuple(seeds)),
        TrainSpec(epochs=10),
        AttackGrid(attack="point", epsilons=(0.25, 0.5, 1.0), lambdas=(10.0, 20.0, 55.0),
                   alphas=(0.005, 0.01, 0.025), iterations=20),
    )


def ablation_preset(seeds=range(10)) -> ExperimentConfig:
    """Point attack with everything fixed except the relation function."""
    cfg = cloud_preset(seeds)
    cfg.attack = AttackGrid(attack="point", methods=("lgm",), epsilons=(0.5,), lambdas=(20.0,),
                            alphas=(0.01,), iterations=20,
                            relations=("sigmoid_like", "rbf", "bilinear"))
    return cfg


# ---------------------------------------------------------------- victims

def gating_is_dynamic(net: AdaptiveNetwork, data: SyntheticDataset) -> bool:
    """True when some gated unit executes on a fraction of the data strictly
    inside :data:`GATE_BAND`. 3D gating is pure geometry and always dynamic."""
    if net.kind == "sparse3d":
        return True
    if net.kind == "layer_skip":
        rates = layer_execution_rates(net, data.images)
    else:
        rates = net.masks(data.images).mean(axis=(0, 2, 3))
    lo, hi = GATE_BAND
    return bool(np.any((rates > lo) & (rates < hi)))


def fit_victim(cfg: ExperimentConfig, seed: int, train_data=None, test_data=None):
    """Build and train the victim for ``seed``; if gating came out static,
    retry with a derived seed up to :data:`VICTIM_RETRIES` times.

    Returns ``(net, init_seed_used)``.
    """
    train_data = train_data if train_data is not None else cfg.dataset.make("train")
    test_data = test_data if test_data is not None else cfg.dataset.make("test")
    in_ch = train_data.images.shape[1] if train_data.is_image else 1
    net = None
    for attempt in range(VICTIM_RETRIES + 1):
        init_seed = seed + attempt * _RETRY_STRIDE
        net = cfg.victim.build(train_data.classes, init_seed, in_ch)
        train(net, train_data, cfg=cfg.train.config(init_seed))
        if gating_is_dynamic(net, test_data):
            return net, init_seed
        log.info("seed %d: static gating after training, retrying", init_seed)
    return net, init_seed


# ---------------------------------------------------------------- sweeps

def attack_cells(cfg: ExperimentConfig, seed: int):
    """Every AttackConfig in the grid for one seed (random ignores lambda/alpha)."""
    g = cfg.attack
    scale = cfg.victim.voxel_size if g.attack == "point" else 1.0
    cells = []
    for eps_raw in g.epsilons:
        eps = eps_raw * scale
        for method in g.methods:
            for relation in g.relations:
                if method == "random":
                    cells.append(AttackConfig(eps, mode="random", relation_kind=relation, seed=seed,
                                              valid_fraction=g.valid_fraction))
                    continue
                lams = g.lambdas if method == "lgm" else (1.0,)
                for alpha in g.alphas:
                    alpha = _clip_alpha(alpha, eps, g.attack)
                    for lam in lams:
                        cells.append(AttackConfig(
                            eps, alpha=alpha, iterations=g.iterations or None, lam=lam, mode=method,
                            forward=g.forward, relation_kind=relation,
                            valid_fraction=g.valid_fraction, seed=seed))
    return _dedupe(cells)


def _clip_alpha(alpha, eps, attack):
    if attack == "fgsm":
        return None
    return min(alpha, eps) if eps > 0 else alpha


def _dedupe(cells):
    seen, out = set(), []
    for c in cells:
        key = json.dumps(c.as_dict(), sort_keys=True)
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def run_seed(cfg: ExperimentConfig, seed: int, net: AdaptiveNetwork | None = None,
             test_data: SyntheticDataset | None = None) -> list[AttackReport]:
    """Train (unless ``net`` is given) and attack one victim over the grid."""
    cfg.validate()
    test_data = test_data if test_data is not None else cfg.dataset.make("test")
    if net is None:
        net, _ = fit_victim(cfg, seed, test_data=test_data)
    reports = []
    for cell in attack_cells(cfg, seed):
        if cfg.attack.attack == "point":
            rep = attack_clouds(test_data, net, cell)
        elif cfg.attack.attack == "ifgsm":
            rep = ifgsm(test_data.images, test_data.labels, net, cell)[1]
        else:
            rep = fgsm(test_data.images, test_data.labels, net, cell)[1]
        rep.config = {"attack": cell.as_dict(), "experiment": cfg.as_dict()}
        reports.append(rep)
    return reports


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[AttackReport]:
    """All seeds of ``cfg``; seeds run in separate processes when ``jobs > 1``.
    Output order is by seed regardless of completion order."""
    cfg.validate()
    seeds = list(cfg.victim.seeds)
    if jobs <= 1 or len(seeds) == 1:
        out = [run_seed(cfg, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_run_seed_job, [(cfg, s) for s in seeds]))
    return [r for rows in out for r in rows]


# ---------------------------------------------------------------- summaries

def best_per_epsilon(reports) -> list[AttackReport]:
    """Lowest post-attack metric per (victim, method, relation, epsilon, seed);
    ties keep the first swept cell."""
    best: dict = {}
    for r in reports:
        key = (r.victim, r.method, r.relation, r.epsilon, r.seed)
        if key not in best or r.post_metric < best[key].post_metric:
            best[key] = r
    return list(best.values())


def metric_table(reports, relation: str | None = None) -> dict:
    """``{(method, epsilon): {seed: post_metric}}`` over best-per-epsilon rows."""
    table: dict = {}
    for r in best_per_epsilon(reports):
        if relation is not None and r.relation != relation:
            continue
        table.setdefault((r.method, r.epsilon), {})[r.seed] = r.post_metric
    return table


def paired_wins(table: dict, better: str, worse: str, epsilon: float) -> tuple[int, int]:
    """(# seeds where ``better`` <= ``worse`` at ``epsilon``, # paired seeds)."""
    a, b = table.get((better, epsilon), {}), table.get((worse, epsilon), {})
    seeds = sorted(set(a) & set(b))
    return sum(a[s] <= b[s] for s in seeds), len(seeds)


def with_seeds(cfg: ExperimentConfig, seeds) -> ExperimentConfig:
    return replace(cfg, victim=replace(cfg.victim, seeds=tuple(seeds)))
