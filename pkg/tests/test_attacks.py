import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynattack.attacks import (
    AttackConfig,
    _image_grad,
    attack_clouds,
    default_iterations,
    enforce_budget,
    fgsm,
    ifgsm,
    pixel_budget_mask,
    point_attack,
    random_baseline,
)
from dynattack.data import make_synthetic_clouds, make_synthetic_images
from dynattack.models import build_layer_skip_classifier, build_sparse2d_classifier, build_sparse3d_segmenter
from dynattack.units import INFERENCE, GradientMode


@pytest.fixture(scope="module")
def batch():
    ds = make_synthetic_images(n=16, seed=3, split="test")
    return ds.images, ds.labels


@pytest.fixture(scope="module")
def net():
    return build_sparse2d_classifier(seed=0)


@pytest.fixture(scope="module")
def scene():
    ds = make_synthetic_clouds(n=1, seed=0, n_points=256, split="test")
    return ds.clouds[0], ds.point_labels[0], ds.colors[0]


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epsilon=-1), dict(epsilon=1, alpha=2), dict(epsilon=1, mode="pgd"),
                                    dict(epsilon=1, iterations=0), dict(epsilon=1, valid_fraction=0),
                                    dict(epsilon=1, lam=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)

    def test_modes(self):
        assert AttackConfig(1.0, mode="fgm").gradient_mode() == INFERENCE
        assert AttackConfig(1.0, mode="lgm", lam=20).gradient_mode() == GradientMode.lgm(20.0, "soft")

    @pytest.mark.parametrize("eps,n", [(8, 10), (16, 20), (2, 2), (4, 5), (1, 1)])
    def test_iteration_rule(self, eps, n):
        assert default_iterations(eps) == n


class TestImageAttacks:
    @pytest.mark.parametrize("mode", ["fgm", "lgm", "random"])
    def test_zero_epsilon_identity(self, batch, net, mode):
        x, y = batch
        cfg = AttackConfig(0.0, mode=mode)
        assert np.array_equal(fgsm(x, y, net, cfg, report=False)[0], x)
        assert np.array_equal(ifgsm(x, y, net, AttackConfig(0.0, alpha=None, mode=mode), report=False)[0], x)

    @pytest.mark.parametrize("mode", ["fgm", "lgm"])
    def test_fgsm_is_signed_step(self, batch, net, mode):
        x, y = batch
        cfg = AttackConfig(4.0, mode=mode, lam=1.0)
        adv, rep = fgsm(x, y, net, cfg)
        g = _image_grad(net, x, y, cfg.gradient_mode())
        eps = 4 / 255
        want = np.clip(x + eps * np.sign(g), 0, 1)
        np.testing.assert_allclose(adv, want, atol=1e-15)
        assert rep.max_linf <= 4.0 + 1e-9 and rep.method == mode

    def test_deterministic(self, batch, net):
        x, y = batch
        cfg = AttackConfig(8.0, alpha=1.0, mode="lgm", lam=5.0)
        a, ra = ifgsm(x, y, net, cfg)
        b, rb = ifgsm(x, y, net, cfg)
        assert np.array_equal(a, b) and ra == rb

    def test_ifgsm_history_and_budget(self, batch, net):
        x, y = batch
        hist = []
        adv, rep = ifgsm(x, y, net, AttackConfig(8.0, alpha=1.0, mode="fgm"), history=hist)
        assert len(hist) == 10 == rep.iterations
        for h in hist:
            assert np.all(np.abs(h - x) <= 8 / 255) and h.min() >= 0 and h.max() <= 1

    def test_lgm_and_fgm_first_step_differ(self):
        # a layer-skip gate sitting right on its decision boundary
        net = build_layer_skip_classifier(layers=1, seed=0, gate_bias=0.0)
        x = make_synthetic_images(n=4, seed=0).images
        y = np.zeros(4, np.int64)
        net.skippable[0].generator.weight.data[:] = 1e-3
        net.skippable[0].generator.bias.data[:] = -1e-3 * net.stem.bias.data.sum()
        g_f = _image_grad(net, x, y, INFERENCE)
        g_l = _image_grad(net, x, y, GradientMode.lgm(10.0, "hard"))
        assert np.max(np.abs(g_l - g_f)) > 1e-6

    def test_pixel_mask_valid_fraction(self, batch, net):
        x, y = batch
        adv, _ = fgsm(x, y, net, AttackConfig(8.0, mode="fgm", valid_fraction=0.25), report=False)
        changed = np.any(adv != x, axis=1).reshape(len(x), -1).sum(axis=1)
        assert np.all(changed <= 64)


class TestPixelMask:
    def test_bruteforce_top_k_4x4(self, rng):
        for _ in range(20):
            g = rng.normal(size=(1, 2, 4, 4))
            g[0, :, 1, 1] = g[0, :, 2, 2]  # tie
            frac = rng.choice([0.1, 0.25, 0.5, 0.9, 1.0])
            mask = pixel_budget_mask(g, frac)[0, 0].reshape(-1)
            k = int(np.ceil(frac * 16))
            mag = [float(np.sqrt(np.sum(g[0, :, i // 4, i % 4] ** 2))) for i in range(16)]
            want = sorted(range(16), key=lambda i: (-mag[i], i))[:k]
            assert sorted(np.flatnonzero(mask).tolist()) == sorted(want)

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            pixel_budget_mask(np.zeros((1, 1, 4, 4)), 1.5)


class TestRandomAndBudget:
    def test_uniform_moment(self):
        x = np.full(10_000, 0.5)
        d = random_baseline(x, AttackConfig(0.1, mode="random", seed=1)) - x
        assert abs(np.mean(np.abs(d)) - 0.05) <= 0.05 * 0.05
        assert np.max(np.abs(d)) <= 0.1

    def test_seeded(self):
        x = np.zeros(50)
        cfg = AttackConfig(1.0, mode="random", seed=7)
        assert np.array_equal(random_baseline(x, cfg), random_baseline(x, cfg))

    @given(arrays(np.float64, 20, elements=st.floats(-1e6, 1e6)),
           arrays(np.float64, 20, elements=st.floats(-1e6, 1e6)),
           st.floats(0, 100))
    def test_enforce_budget_exact(self, x, x_adv, eps):
        out = enforce_budget(x_adv, x, eps)
        assert np.all(np.abs(out - x) <= eps)


class TestPointAttack:
    @pytest.mark.parametrize("mode", ["fgm", "lgm"])
    def test_budget_and_shape(self, scene, mode):
        pts, lab, col = scene
        net = build_sparse3d_segmenter(seed=0)
        cfg = AttackConfig(0.05, alpha=0.01, iterations=3, mode=mode, lam=20.0)
        hist = []
        adv, rep = point_attack(pts, col, lab, net, cfg, history=hist)
        assert adv.shape == pts.shape and len(hist) == 3
        assert np.all(np.abs(adv - pts) <= 0.05) and rep.max_linf <= 0.05
        assert rep.iterations == 3 and rep.relation == "sigmoid_like"

    def test_zero_epsilon(self, scene):
        pts, lab, col = scene
        adv, _ = point_attack(pts, col, lab, build_sparse3d_segmenter(), AttackConfig(0.0, mode="lgm"),
                              report=False)
        assert np.array_equal(adv, pts)

    def test_degenerate_cloud(self):
        pts = np.ones((10, 3))
        with pytest.raises(ValueError):
            point_attack(pts, None, np.zeros(10, np.int64), build_sparse3d_segmenter(),
                         AttackConfig(0.05, mode="fgm"))

    def test_attack_clouds_report(self):
        ds = make_synthetic_clouds(n=2, seed=0, n_points=256, split="test")
        net = build_sparse3d_segmenter(seed=0)
        rep = attack_clouds(ds, net, AttackConfig(0.05, alpha=0.01, iterations=2, mode="lgm", lam=20.0))
        assert 0 <= rep.post_metric <= 1 and 0 <= rep.archi_change <= 1
        assert rep.max_linf <= 0.05 and len(rep.per_class_iou) == 2
