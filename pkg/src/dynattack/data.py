"""Seeded synthetic images and point-cloud scenes.

Images are parametric shape families (bars, blobs, checkerboards) on a noisy
background with intensities in [0, 1]. Clouds are scenes in a 2 m cube made of
planar patches, spheres and (optionally) boxes, sampled on their surfaces, with
one semantic label per point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE_KINDS = {
    "bars_blobs": ("bars", "blobs"),
    "hbars_vbars": ("hbars", "vbars"),
    "bars_blobs_checker": ("bars", "blobs", "checker"),
}

CLOUD_KINDS = {
    "plane_sphere": ("plane", "sphere"),
    "plane_sphere_box": ("plane", "sphere", "box"),
}

SCENE_SIZE = 2.0


@dataclass
class SyntheticDataset:
    kind: str
    seed: int
    split: str
    classes: int
    images: np.ndarray | None = None
    labels: np.ndarray | None = None
    clouds: list = field(default_factory=list)
    point_labels: list = field(default_factory=list)
    colors: list = field(default_factory=list)

    @property
    def is_image(self) -> bool:
        return self.images is not None

    def __len__(self) -> int:
        return len(self.images) if self.is_image else len(self.clouds)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx)
        if self.is_image:
            return SyntheticDataset(self.kind, self.seed, self.split, self.classes,
                                    images=self.images[idx], labels=self.labels[idx])
        return SyntheticDataset(self.kind, self.seed, self.split, self.classes,
                                clouds=[self.clouds[i] for i in idx],
                                point_labels=[self.point_labels[i] for i in idx],
                                colors=[self.colors[i] for i in idx])


def _split_seed(seed: int, split: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, {"train": 0, "test": 1, "val": 2}.get(split, 3)])


# ---------------------------------------------------------------- images

def _draw_family(rng, family: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    img = np.zeros((size, size))
    if family in ("bars", "hbars", "vbars"):
        if family == "bars":
            vertical = rng.random() < 0.5
        else:
            vertical = family == "vbars"
        coord = xx if vertical else yy
        period = rng.integers(4, 7)
        width = rng.integers(1, 3)
        phase = rng.integers(0, period)
        img[((coord + phase) % period) < width] = 1.0
    elif family == "blobs":
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(2, size - 2, 2)
            r = rng.uniform(1.5, size / 5)
            img = np.maximum(img, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2)))
    elif family == "checker":
        cell = rng.integers(2, 5)
        oy, ox = rng.integers(0, cell, 2)
        img[(((yy + oy) // cell + (xx + ox) // cell) % 2) == 0] = 1.0
    else:
        raise ValueError(f"unknown shape family {family!r}")
    return img


def make_synthetic_images(kind: str = "bars_blobs", n: int = 64, seed: int = 0, size: int = 16,
                          channels: int = 1, split: str = "train", noise: float = 0.15,
                          contrast: tuple = (0.4, 0.8)) -> SyntheticDataset:
    """Class-balanced shape images, shape ``(n, channels, size, size)``."""
    if kind not in IMAGE_KINDS:
        raise ValueError(f"unknown image kind {kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 16 <= size <= 32:
        raise ValueError("image size must be within 16..32")
    families = IMAGE_KINDS[kind]
    rng = np.random.default_rng(_split_seed(seed, split))
    labels = np.arange(n) % len(families)
    rng.shuffle(labels)
    images = np.empty((n, channels, size, size))
    for i, y in enumerate(labels):
        shape = _draw_family(rng, families[y], size)
        amp = rng.uniform(*contrast)
        base = rng.uniform(0.1, 0.3)
        for c in range(channels):
            tint = rng.uniform(0.8, 1.0)
            img = base + amp * tint * shape + rng.normal(0, noise, shape.shape)
            images[i, c] = np.clip(img, 0.0, 1.0)
    return SyntheticDataset(kind, seed, split, len(families), images=images, labels=labels.astype(np.int64))


# ---------------------------------------------------------------- point clouds

def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ])


def _sample_plane(rng, n, centre):
    side = rng.uniform(0.3, 0.6, 2)
    uv = rng.uniform(-0.5, 0.5, (n, 2)) * side
    local = np.column_stack([uv, np.zeros(n)])
    return local @ _random_rotation(rng).T + centre


def _sample_sphere(rng, n, centre):
    r = rng.uniform(0.15, 0.3)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + centre


def _sample_box(rng, n, centre):
    half = rng.uniform(0.1, 0.22, 3)
    face = rng.integers(0, 6, n)
    axis, sign = face // 2, np.where(face % 2 == 0, -1.0, 1.0)
    p = rng.uniform(-1, 1, (n, 3)) * half
    p[np.arange(n), axis] = sign * half[axis]
    return p @ _random_rotation(rng).T + centre


_SAMPLERS = {"plane": _sample_plane, "sphere": _sample_sphere, "box": _sample_box}


def make_scene(rng, families, n_points: int = 1024, noise: float = 0.003):
    """One scene: objects in distinct cells of a 2x2x1 layout (plus jitter)."""
    n_obj = 4
    slots = np.array([[0.5, 0.5], [0.5, 1.5], [1.5, 0.5], [1.5, 1.5]])
    rng.shuffle(slots)
    classes = np.arange(n_obj) % len(families)
    rng.shuffle(classes)
    counts = np.full(n_obj, n_points // n_obj)
    counts[: n_points % n_obj] += 1
    pts, labels, colors = [], [], []
    for k in range(n_obj):
        centre = np.array([*(slots[k] + rng.uniform(-0.15, 0.15, 2)), rng.uniform(0.5, 1.5)])
        p = _SAMPLERS[families[classes[k]]](rng, counts[k], centre)
        pts.append(p)
        labels.append(np.full(counts[k], classes[k]))
        colors.append(np.tile(rng.uniform(0, 1, 3), (counts[k], 1)))
    pts = np.concatenate(pts) + rng.normal(0, noise, (n_points, 3))
    pts = np.clip(pts, 1e-6, SCENE_SIZE - 1e-6)
    return pts, np.concatenate(labels).astype(np.int64), np.concatenate(colors)


def make_synthetic_clouds(kind: str = "plane_sphere", n: int = 8, seed: int = 0,
                          n_points: int = 1024, split: str = "train") -> SyntheticDataset:
    if kind not in CLOUD_KINDS:
        raise ValueError(f"unknown cloud kind {kind!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 256 <= n_points <= 2048:
        raise ValueError("clouds carry 256..2048 points")
    families = CLOUD_KINDS[kind]
    rng = np.random.default_rng(_split_seed(seed, split))
    ds = SyntheticDataset(kind, seed, split, len(families))
    for _ in range(n):
        pts, lab, col = make_scene(rng, families, n_points)
        ds.clouds.append(pts)
        ds.point_labels.append(lab)
        ds.colors.append(col)
    return ds


def nearest_neighbor_accuracy(points: np.ndarray, labels: np.ndarray, seed: int = 0) -> float:
    """Half/half split of one scene; 1-NN on raw coordinates."""
    from scipy.spatial import cKDTree

    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(points))
    a, b = perm[: len(perm) // 2], perm[len(perm) // 2:]
    _, nn = cKDTree(points[a]).query(points[b])
    return float(np.mean(labels[a][nn] == labels[b]))
