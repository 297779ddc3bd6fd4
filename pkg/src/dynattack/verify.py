"""Finite-difference and brute-force oracle suite.

Each oracle returns an :class:`OracleResult` with the worst error it saw and
its tolerance. The gradient oracles build unit-level fixtures (one layer-skip
unit, one masked 2D conv, one gated 3D sparse conv) with a random linear
read-out ``sum(c * out)`` as the loss, so every derivative has a closed form
that can be recomputed in plain numpy without the tape.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import architecture_change_counts
from .models import build_layer_skip_classifier, build_sparse2d_classifier, build_sparse3d_segmenter
from .occupancy import build_extended_voxels, voxelize
from .units import (
    INFERENCE,
    ConvKernel,
    GradientMode,
    OccupancyGenerator,
    SkippableLayer,
    dense_conv2d_reference,
    kernel_offsets,
    layer_skip_forward,
    sparse_conv2d_forward,
    sparse_conv3d_forward,
    sparse_conv3d_reference,
)

FD_TOL_2D = 1e-4
FD_TOL_3D = 1e-3
DECOMP_TOL = 1e-10
AGREE_TOL = 1e-3
N_FIXTURES = 20


@dataclass
class OracleResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    cases: int = 1


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def central_fd(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(approx: np.ndarray, ref: np.ndarray) -> float:
    scale = max(float(np.abs(ref).max()), 1e-12)
    return float(np.abs(approx - ref).max()) / scale


# ---------------------------------------------------------------- fixtures

@dataclass
class SkipFixture:
    F: np.ndarray
    layer: SkippableLayer
    c: np.ndarray
    lam: float

    def loss(self, F, mode: GradientMode) -> Tensor:
        return ad.tsum(ad.mul(layer_skip_forward(F, self.layer, mode), self.c))

    def leaded(self) -> np.ndarray:
        """dL/dg * dg/dF from numpy: g = sigmoid(lam * (w . mean_hw(F) + b))."""
        F = self.F
        W, b = self.layer.kernel.weight.data, self.layer.kernel.bias.data
        H = F + np.maximum(dense_conv2d_reference(F, W, b), 0.0)
        w, gb = self.layer.generator.weight.data, self.layer.generator.bias.data
        q = F.mean(axis=(2, 3)) @ w + gb[0]
        g = _sigmoid(self.lam * q)
        dl_dg = np.sum(self.c * (H - F), axis=(1, 2, 3))
        coef = dl_dg * self.lam * g * (1 - g) / (F.shape[2] * F.shape[3])
        return coef[:, None, None, None] * w[None, :, None, None] * np.ones_like(F)


def skip_fixture(rng) -> SkipFixture:
    C = int(rng.integers(2, 4))
    F = rng.normal(0, 1, (2, C, 5, 5))
    layer = SkippableLayer(ConvKernel.init2d(rng, C, C, scale=0.7),
                           OccupancyGenerator.pooled(rng, C, float(rng.normal(0, 0.3))))
    layer.generator.weight.data *= 3.0
    return SkipFixture(F, layer, rng.normal(0, 1, F.shape), float(rng.uniform(0.5, 5.0)))


@dataclass
class MaskFixture:
    F: np.ndarray
    kernel: ConvKernel
    generator: OccupancyGenerator
    c: np.ndarray
    lam: float

    def loss(self, F, mode: GradientMode) -> Tensor:
        F = ad.as_tensor(F)
        out = sparse_conv2d_forward(F, self.kernel, self.generator(F), mode)
        return ad.tsum(ad.mul(out, self.c))

    def leaded(self) -> np.ndarray:
        """Transpose-convolve lam*o(1-o)*dL/do with the generator kernel, by loops."""
        F = self.F
        conv = dense_conv2d_reference(F, self.kernel.weight.data, self.kernel.bias.data)
        Gw, Gb = self.generator.weight.data, self.generator.bias.data
        Q = dense_conv2d_reference(F, Gw, Gb)[:, 0]
        o = _sigmoid(self.lam * Q)
        s = self.lam * o * (1 - o) * np.sum(self.c * conv, axis=1)
        B, C, H, W = F.shape
        k = Gw.shape[-1]
        r = k // 2
        out = np.zeros_like(F)
        for b_, h, w, i, j in itertools.product(range(B), range(H), range(W), range(k), range(k)):
            hh, ww = h + i - r, w + j - r
            if 0 <= hh < H and 0 <= ww < W:
                out[b_, :, hh, ww] += s[b_, h, w] * Gw[0, :, i, j]
        return out


def mask_fixture(rng) -> MaskFixture:
    C = int(rng.integers(1, 3))
    F = rng.normal(0, 1, (1, C, 6, 6))
    gen = OccupancyGenerator.conv(rng, C, float(rng.normal(0, 0.3)))
    gen.weight.data *= 2.0
    kernel = ConvKernel.init2d(rng, C, 3)
    kernel.bias.data[:] = rng.normal(0, 0.1, 3)
    return MaskFixture(F, kernel, gen, rng.normal(0, 1, (1, 3, 6, 6)), float(rng.uniform(0.5, 5.0)))


@dataclass
class VoxelFixture:
    points: np.ndarray
    grid: object
    features: np.ndarray
    kernel: ConvKernel
    c: np.ndarray
    lam: float

    def loss(self, points, mode: GradientMode) -> Tensor:
        pts = ad.as_tensor(points)
        _, out = sparse_conv3d_forward(self.grid, self.features, self.kernel, mode,
                                       "sigmoid_like", self.lam, points=pts)
        return ad.tsum(ad.mul(out, self.c))

    def leaded(self, flip: bool = False) -> np.ndarray:
        """sum_v dL/do_v * do_v/dp with the or-gather and sigmoid-like relation
        differentiated by hand; candidates enumerated by brute force."""
        L, lam, pts = self.grid.voxel_size, self.lam, self.points
        vox = self.grid.extended_voxels
        conv = sparse_conv3d_reference(vox, self.features, self.kernel.weight.data,
                                       self.kernel.bias.data)
        dl_do = np.sum(self.c * conv, axis=1)
        out = np.zeros_like(pts)
        s_budget = self.grid.step_budget
        for v_idx, v in enumerate(vox):
            cands = [n for n in range(len(pts)) if _cube_hits_voxel(pts[n], s_budget, v, L)]
            r, parts = [], []
            for n in cands:
                t = pts[n] / L - (v + 0.5)
                d = np.abs(t)
                s = _sigmoid(-lam * (d - 0.5))
                rn = float(np.prod(s))
                r.append(rn)
                parts.append(-lam * rn * (1 - s) * np.sign(t) / L)
            for k, n in enumerate(cands):
                others = np.prod([1 - r[m] for m in range(len(cands)) if m != k])
                out[n] += dl_do[v_idx] * others * parts[k]
        return -out if flip else out


def _cube_hits_voxel(p, s, v, L) -> bool:
    return bool(np.all((p - s < (v + 1) * L) & (p + s >= v * L)))


def voxel_fixture(rng, L: float = 0.1, margin: float = 0.02) -> VoxelFixture:
    """Points in a 3-voxel cube, none within ``margin * L`` of a voxel face or
    of a voxel-centre plane (where |d| has its kink)."""
    n = int(rng.integers(8, 20))
    pts = []
    while len(pts) < n:
        p = rng.uniform(0, 3 * L, 3)
        frac = (p / L) % 1.0
        if np.all(np.minimum(frac, 1 - frac) > margin) and np.all(np.abs(frac - 0.5) > margin):
            pts.append(p)
    pts = np.array(pts)
    grid = build_extended_voxels(voxelize(pts, L), float(rng.uniform(0.1, 0.4)) * L)
    D = 2
    kernel = ConvKernel.init3d(rng, D, 3)
    kernel.bias.data[:] = rng.normal(0, 0.1, 3)
    feats = rng.normal(0, 1, (grid.n_extended, D))
    c = rng.normal(0, 0.1, (grid.n_extended, 3))
    return VoxelFixture(pts, grid, feats, kernel, c, float(rng.uniform(10, 30)))


# ---------------------------------------------------------------- gradient oracles

def _tape_grad(fx, x, mode: GradientMode) -> np.ndarray:
    t = ad.tensor(x, requires_grad=True)
    ad.backward(fx.loss(t, mode), inputs=[t])
    return t.grad.copy()


def _fd_oracle(name, make, n, h, tol, rng) -> OracleResult:
    worst = 0.0
    for _ in range(n):
        fx = make(rng)
        x = fx.points if isinstance(fx, VoxelFixture) else fx.F
        mode = GradientMode.lgm(fx.lam if not isinstance(fx, VoxelFixture) else 1.0)
        g = _tape_grad(fx, x, mode)
        fd = central_fd(lambda z: fx.loss(Tensor(z), mode).item(), x, h)
        worst = max(worst, rel_error(g, fd))
    return OracleResult(name, worst, tol, worst < tol, n)


def _decomp_oracle(name, make, n, rng) -> OracleResult:
    worst = 0.0
    for _ in range(n):
        fx = make(rng)
        x = fx.points if isinstance(fx, VoxelFixture) else fx.F
        lam = 1.0 if isinstance(fx, VoxelFixture) else fx.lam
        lgm = GradientMode.lgm(lam)
        diff = _tape_grad(fx, x, lgm) - _tape_grad(fx, x, lgm.detached())
        worst = max(worst, float(np.abs(diff - fx.leaded()).max()))
    return OracleResult(name, worst, DECOMP_TOL, worst < DECOMP_TOL, n)


def oracle_dense_net(rng) -> OracleResult:
    """Three-layer tanh-free dense net (sigmoid, relu, linear) vs central differences."""
    worst = 0.0
    for _ in range(5):
        W1, W2, W3 = rng.normal(0, 1, (4, 6)), rng.normal(0, 1, (6, 5)), rng.normal(0, 1, (5, 3))
        x0 = rng.normal(0, 1, (3, 4))
        y = rng.integers(0, 3, 3)

        def f(x):
            h = ad.sigmoid(ad.matmul(x, W1))
            h = ad.relu(ad.sub(ad.matmul(h, W2), 0.3))
            return ad.softmax_cross_entropy(ad.matmul(h, W3), y)

        t = ad.tensor(x0, requires_grad=True)
        ad.backward(f(t), inputs=[t])
        fd = central_fd(lambda z: f(Tensor(z)).item(), x0, 1e-4)
        worst = max(worst, rel_error(t.grad, fd))
    return OracleResult("autodiff_dense_fd", worst, 1e-5, worst < 1e-5, 5)


def oracle_mutation(rng) -> OracleResult:
    """A sign flip injected into the 3D leaded term must fail the FD oracle.
    The reported error is the mutant's; passing means it exceeded tolerance."""
    worst = np.inf
    for _ in range(3):
        fx = voxel_fixture(rng)
        lgm = GradientMode.lgm()
        fgm_grad = _tape_grad(fx, fx.points, lgm.detached())
        mutant = fgm_grad + fx.leaded(flip=True)
        h = 1e-5 * fx.grid.voxel_size
        fd = central_fd(lambda z: fx.loss(Tensor(z), lgm).item(), fx.points, h)
        worst = min(worst, rel_error(mutant, fd))
    return OracleResult("mutation_sign_flip_detected", worst, FD_TOL_3D, worst > FD_TOL_3D, 3)


def oracle_hard_soft_agreement(rng, lam: float = 200.0) -> OracleResult:
    """3D unit restricted to occupied voxels: soft forward at lam=200 vs hard."""
    worst = 0.0
    for _ in range(5):
        fx = voxel_fixture(rng, margin=0.05)
        grid = build_extended_voxels(voxelize(fx.points, fx.grid.voxel_size),
                                     0.01 * fx.grid.voxel_size)
        if grid.n_extended != grid.n_voxels:
            raise AssertionError("fixture leaked into empty voxels")
        feats = fx.features[: grid.n_voxels]
        _, hard = sparse_conv3d_forward(grid, feats, fx.kernel, INFERENCE)
        _, soft = sparse_conv3d_forward(grid, feats, fx.kernel, GradientMode.lgm(), "sigmoid_like",
                                        lam, points=fx.points)
        worst = max(worst, float(np.abs(hard.data - soft.data).max()))
    return OracleResult("hard_soft_agreement_lambda200", worst, AGREE_TOL, worst < AGREE_TOL, 5)


# ---------------------------------------------------------------- brute-force oracles

def brute_voxelize(points: np.ndarray, L: float):
    cells = {}
    mapping = []
    for p in points.tolist():
        key = tuple(int(math.floor(c / L)) for c in p)
        cells.setdefault(key, len(cells))
        mapping.append(key)
    return set(cells), mapping


def brute_extended(points: np.ndarray, L: float, s: float):
    """(extended voxel set, set of (voxel, point) pairs) by scanning each
    point's 27 neighbouring cells for cube intersection."""
    vox, pairs = set(), set()
    for n, p in enumerate(points):
        base = np.floor(p / L).astype(int)
        for off in itertools.product((-1, 0, 1), repeat=3):
            v = base + np.array(off)
            if _cube_hits_voxel(p, s, v, L):
                vox.add(tuple(v.tolist()))
                pairs.add((tuple(v.tolist()), n))
    return vox, pairs


def oracle_voxelize(rng) -> OracleResult:
    bad = 0
    cases = [(rng.uniform(0, 1, (1000, 3)), 0.25), (rng.uniform(-1, 1, (500, 3)), 0.1),
             (rng.normal(0, 0.3, (300, 3)), 0.05)]
    for pts, L in cases:
        grid = voxelize(pts, L)
        want, mapping = brute_voxelize(pts, L)
        got = {tuple(v) for v in grid.voxels.tolist()}
        bad += got != want
        bad += [tuple(v) for v in grid.voxels[grid.point_to_voxel].tolist()] != mapping
    return OracleResult("voxelize_bruteforce", float(bad), 0.5, bad == 0, len(cases))


def oracle_extended(rng) -> OracleResult:
    bad = 0
    cases = [(rng.uniform(0, 0.5, (200, 3)), 0.05, 0.01), (rng.uniform(0, 1, (500, 3)), 0.1, 0.025),
             (rng.uniform(0, 0.4, (100, 3)), 0.05, 0.0005)]
    for pts, L, s in cases:
        grid = build_extended_voxels(voxelize(pts, L), s)
        want_v, want_p = brute_extended(pts, L, s)
        got_v = {tuple(v) for v in grid.extended_voxels.tolist()}
        ev = grid.extended_voxels
        got_p = {(tuple(ev[v].tolist()), int(n)) for v, n in zip(grid.cand_voxel, grid.cand_point)}
        occupied = {tuple(v) for v in grid.voxels.tolist()}
        first = {tuple(v) for v in ev[: grid.n_voxels].tolist()}
        bad += (got_v != want_v) + (got_p != want_p) + (first != occupied)
    return OracleResult("extended_voxels_bruteforce", float(bad), 0.5, bad == 0, len(cases))


def _brute_masks(net, x) -> list:
    masks = []
    trace: list = []
    net.forward(Tensor(x), INFERENCE, trace)
    for rec in trace:
        masks.append([[float(s > 0) for s in np.ravel(rec.scores)]])
    return masks


def oracle_archi_change(rng) -> OracleResult:
    bad = 0
    # 2D masks on 8x8 inputs: counts from per-pixel loops over traced scores
    for _ in range(3):
        net = build_sparse2d_classifier(blocks=2, channels=4, seed=int(rng.integers(1 << 30)),
                                        gate_bias=0.0)
        x = rng.uniform(0, 1, (2, 1, 8, 8))
        y = np.clip(x + rng.uniform(-0.3, 0.3, x.shape), 0, 1)
        ma, mb = _brute_masks(net, x), _brute_masks(net, y)
        changed = sum(a != b for la, lb in zip(ma, mb) for ra, rb in zip(la, lb) for a, b in zip(ra, rb))
        n_mask = sum(len(r) for layer in ma for r in layer)
        for include, census in ((True, n_mask + 2 * 64), (False, n_mask)):
            bad += architecture_change_counts(net, x, y, include) != (changed, census)
    # layer skip: gate per example per layer
    for _ in range(3):
        net = build_layer_skip_classifier(layers=4, channels=4, seed=int(rng.integers(1 << 30)),
                                          gate_bias=0.0)
        x = rng.uniform(0, 1, (5, 1, 8, 8))
        y = rng.uniform(0, 1, (5, 1, 8, 8))
        ga = [m for layer in _brute_masks(net, x) for r in layer for m in r]
        gb = [m for layer in _brute_masks(net, y) for r in layer for m in r]
        changed = sum(a != b for a, b in zip(ga, gb))
        bad += architecture_change_counts(net, x, y) != (changed, 4 * 5)
    # 3D: symmetric difference of brute-force voxel sets
    net = build_sparse3d_segmenter(seed=0, voxel_size=0.1)
    for _ in range(3):
        a = rng.uniform(0, 0.8, (300, 3))
        b = a + rng.uniform(-0.05, 0.05, a.shape)
        va, _ = brute_voxelize(a, 0.1)
        vb, _ = brute_voxelize(b, 0.1)
        bad += architecture_change_counts(net, a, b) != (len(va ^ vb), len(va | vb))
    return OracleResult("archi_change_bruteforce", float(bad), 0.5, bad == 0, 9)


def oracle_relation_finite(rng, n: int = 100_000) -> OracleResult:
    """Relation gradients (via the tape) are finite over a wide distance sweep."""
    from .occupancy import RELATION_KINDS, relation

    worst = 0.0
    d0 = np.abs(rng.normal(0, 2, (n, 3)))
    d0[:10] = [[0, 0, 0], [0.5, 0.5, 0.5], [1, 1, 1], [1, 0, 0], [50, 0, 0],
               [0.5, 0, 0], [1e-300, 0, 0], [0, 0.999999, 0], [5, 5, 5], [0.25, 0.75, 1.0]]
    for kind in RELATION_KINDS:
        d = ad.tensor(d0, requires_grad=True)
        ad.backward(ad.tsum(relation(kind, d, None)), inputs=[d])
        finite = np.all(np.isfinite(d.grad))
        worst = max(worst, 0.0 if finite else np.inf)
    return OracleResult("relation_gradients_finite", worst, 0.5, worst == 0.0, n)


def run_all(seed: int = 0) -> list[OracleResult]:
    rng = np.random.default_rng(seed)
    return [
        oracle_dense_net(rng),
        _fd_oracle("layer_skip_fd", skip_fixture, N_FIXTURES, 1e-6, FD_TOL_2D, rng),
        _fd_oracle("sparse2d_fd", mask_fixture, N_FIXTURES, 1e-6, FD_TOL_2D, rng),
        _fd_oracle("sparse3d_fd", voxel_fixture, N_FIXTURES, 1e-6, FD_TOL_3D, rng),
        _decomp_oracle("layer_skip_decomposition", skip_fixture, N_FIXTURES, rng),
        _decomp_oracle("sparse2d_decomposition", mask_fixture, N_FIXTURES, rng),
        _decomp_oracle("sparse3d_decomposition", voxel_fixture, N_FIXTURES, rng),
        oracle_mutation(rng),
        oracle_hard_soft_agreement(rng),
        oracle_voxelize(rng),
        oracle_extended(rng),
        oracle_archi_change(rng),
        oracle_relation_finite(rng),
    ]
