import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynattack import autodiff as ad
from dynattack.occupancy import (
    DEFAULT_RBF_BANDWIDTH,
    OR_CLAMP,
    build_extended_voxels,
    gather_or,
    gather_or_segments,
    half_height_distance,
    hard_sign_occupancy,
    relation,
    relation_bilinear,
    relation_distance,
    relation_rbf,
    relation_sigmoid_like,
    soft_sign_occupancy,
    soft_occupancy,
    soft_voxel_occupancy,
    voxelize,
)
from dynattack.verify import brute_extended, brute_voxelize, central_fd, rel_error

unit = st.floats(0, 1, allow_nan=False)


class TestSignGates:
    def test_hard_examples(self):
        assert hard_sign_occupancy(0.7) == 1
        assert hard_sign_occupancy(-0.3) == 0
        assert hard_sign_occupancy(0.0) == 0

    def test_hard_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            hard_sign_occupancy(float("nan"))

    def test_soft_examples(self):
        assert soft_sign_occupancy(0.0, 7.0) == 0.5
        assert soft_sign_occupancy(math.log(3), 1.0) == pytest.approx(0.75, abs=1e-15)
        assert soft_sign_occupancy(-math.log(3), 1.0) == pytest.approx(0.25, abs=1e-15)

    def test_soft_rejects_bad_slope(self):
        with pytest.raises(ValueError):
            soft_sign_occupancy(0.3, 0.0)

    @given(st.floats(-50, 50), st.floats(0.01, 100))
    def test_complement(self, q, lam):
        assert soft_sign_occupancy(q, lam) + soft_sign_occupancy(-q, lam) == pytest.approx(1.0, abs=1e-15)

    @given(st.floats(-5, 5), st.floats(1e-3, 1), st.floats(0.1, 50))
    def test_strictly_increasing(self, q, dq, lam):
        assume(lam * q < 30)
        assert soft_sign_occupancy(q + dq, lam) > soft_sign_occupancy(q, lam)

    @pytest.mark.parametrize("lam", [0.5, 1.0, 20.0, 40.0])
    def test_slope_at_zero_is_quarter_lambda(self, lam):
        q = ad.tensor(0.0, True)
        ad.backward(soft_sign_occupancy(q, lam), inputs=[q])
        assert q.grad == lam / 4


class TestVoxelize:
    def test_examples(self):
        g = voxelize([[0.12, 0.04, 0.33], [0.15, 0.05, 0.31]], 0.1)
        assert g.voxels.tolist() == [[1, 0, 3]] and g.n_voxels == 1
        assert voxelize([[-0.01, 0, 0]], 0.1).voxels.tolist() == [[-1, 0, 0]]

    def test_uniform_cube_count(self, rng):
        pts = rng.uniform(0, 1, (1000, 3))
        want, _ = brute_voxelize(pts, 0.25)
        assert voxelize(pts, 0.25).n_voxels == len(want)

    @pytest.mark.parametrize("pts,L", [(np.zeros((0, 3)), 0.1), (np.zeros((2, 3)), 0.0),
                                       (np.zeros((2, 3)), -1.0)])
    def test_errors(self, pts, L):
        with pytest.raises(ValueError):
            voxelize(pts, L)

    @given(arrays(np.float64, (30, 3), elements=st.floats(-2, 2)), st.sampled_from([0.05, 0.1, 0.3]))
    def test_matches_bruteforce(self, pts, L):
        grid = voxelize(pts, L)
        want, mapping = brute_voxelize(pts, L)
        assert {tuple(v) for v in grid.voxels.tolist()} == want
        assert [tuple(v) for v in grid.voxels[grid.point_to_voxel].tolist()] == mapping
        assert np.all(np.bincount(grid.point_to_voxel, minlength=grid.n_voxels) >= 1)


class TestRelations:
    def test_distance_examples(self):
        np.testing.assert_allclose(relation_distance([1, 0, 3], [0.15, 0.05, 0.31], 0.1),
                                   [0, 0, 0.4], atol=1e-12)
        np.testing.assert_array_equal(relation_distance([2, 2, 2], [0.25, 0.25, 0.25], 0.1), 0.0)
        assert relation_distance([0, 0, 0], [0.1, 0.05, 0.05], 0.1)[0] == 0.5

    def test_sigmoid_like_examples(self):
        assert relation_sigmoid_like([0.5, 0.5, 0.5], 20) == 0.125
        assert relation_sigmoid_like([0.5, 0, 0], 1e4) == pytest.approx(0.5, abs=1e-12)
        assert relation_sigmoid_like([0, 0, 0], 20) == pytest.approx(0.9998638125766988, rel=1e-14)

    def test_bilinear_examples(self):
        assert relation_bilinear([0, 0, 0]) == 1.0
        assert relation_bilinear([1, 0, 0]) == 0.0
        assert relation_bilinear([0.5, 0.5, 0.5]) == 0.125

    def test_rbf_examples(self):
        assert relation_rbf([0, 0, 0], 0.5) == 1.0
        r = half_height_distance(0.7)
        assert relation_rbf([r, 0, 0], 0.7) == pytest.approx(0.5, abs=1e-15)
        assert relation_rbf([0.5, 0, 0], 0.5) == pytest.approx(math.exp(-0.5), abs=1e-15)

    def test_rbf_default_half_height_on_face(self):
        assert relation_rbf([0.5, 0, 0], DEFAULT_RBF_BANDWIDTH) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("fn,bad", [(relation_sigmoid_like, 0.0), (relation_rbf, -1.0)])
    def test_bad_params(self, fn, bad):
        with pytest.raises(ValueError):
            fn([0, 0, 0], bad)

    @pytest.mark.parametrize("kind", ["sigmoid_like", "bilinear", "rbf"])
    @given(d=arrays(np.float64, (5, 3), elements=st.floats(0, 3)))
    def test_tensor_and_numpy_agree(self, kind, d):
        np.testing.assert_allclose(relation(kind, ad.tensor(d)).data, relation(kind, d), atol=1e-15)


class TestGatherOr:
    def test_examples(self):
        assert gather_or([]) == 0.0
        assert gather_or([1.0, 0.3]) == 1.0
        assert gather_or([0.5, 0.5]) == 0.75

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            gather_or([0.2, 1.5])

    @given(st.lists(unit, min_size=1, max_size=12), st.randoms())
    def test_permutation_invariant_and_bounded(self, r, rnd):
        v = gather_or(r)
        perm = list(r)
        rnd.shuffle(perm)
        assert gather_or(perm) == pytest.approx(v, abs=1e-15)
        assert max(r) - 1e-15 <= v <= 1.0

    @given(st.lists(st.floats(0, 0.999), min_size=1, max_size=8))
    def test_tape_matches_numpy(self, r):
        t = gather_or_segments(ad.tensor(r), np.zeros(len(r), np.int64), 1)
        assert t.data[0] == pytest.approx(gather_or(r), abs=1e-12)

    def test_clamp_keeps_gradient_finite(self):
        r = ad.tensor([1.0, 1.0 - 1e-15, 0.3], True)
        out = gather_or_segments(r, np.zeros(3, np.int64), 1)
        ad.backward(out[0], inputs=[r])
        assert np.all(np.isfinite(r.grad)) and OR_CLAMP == 1e-12


class TestExtended:
    def test_centre_point_stays_home(self):
        g = build_extended_voxels(voxelize([[0.15, 0.15, 0.15]], 0.1), 0.04)
        assert g.extended_voxels.tolist() == [[1, 1, 1]]
        assert g.candidate_points([1, 1, 1]).tolist() == [0]

    def test_point_near_face_reaches_neighbour(self):
        L = 0.1
        g = build_extended_voxels(voxelize([[0.2 - 0.01 * L, 0.15, 0.15]], L), 0.05 * L)
        assert [2, 1, 1] in g.extended_voxels.tolist()

    def test_bruteforce_200(self, rng):
        pts = rng.uniform(0, 0.5, (200, 3))
        g = build_extended_voxels(voxelize(pts, 0.05), 0.01)
        want_v, want_p = brute_extended(pts, 0.05, 0.01)
        assert {tuple(v) for v in g.extended_voxels.tolist()} == want_v
        ev = g.extended_voxels
        assert {(tuple(ev[v].tolist()), int(n)) for v, n in zip(g.cand_voxel, g.cand_point)} == want_p

    @given(arrays(np.float64, (20, 3), elements=st.floats(0, 1)), st.floats(0.001, 0.06))
    def test_superset_and_occupied_first(self, pts, s):
        g = build_extended_voxels(voxelize(pts, 0.1), s)
        np.testing.assert_array_equal(g.extended_voxels[: g.n_voxels], g.voxels)
        want_v, _ = brute_extended(pts, 0.1, s)
        assert {tuple(v) for v in g.extended_voxels.tolist()} == want_v

    def test_rejects_bad_budget(self):
        with pytest.raises(ValueError):
            build_extended_voxels(voxelize([[0, 0, 0]], 0.1), 0.0)


class TestSoftVoxelOccupancy:
    def test_single_centre_point(self):
        g = build_extended_voxels(voxelize([[0.15, 0.15, 0.15]], 0.1), 0.01)
        v = soft_voxel_occupancy([1, 1, 1], g, "sigmoid_like", 20)
        assert v.item() == pytest.approx(0.9998638125766988, rel=1e-13)

    def test_outside_extended_set(self):
        g = build_extended_voxels(voxelize([[0.15, 0.15, 0.15]], 0.1), 0.01)
        with pytest.raises(KeyError):
            soft_voxel_occupancy([5, 5, 5], g)

    def test_gradient_matches_fd(self, rng):
        pts = np.array([[0.17, 0.12, 0.13], [0.19, 0.16, 0.11], [0.23, 0.14, 0.18]])
        g = build_extended_voxels(voxelize(pts, 0.1), 0.02)

        def f(p):
            return soft_voxel_occupancy([1, 1, 1], g, "sigmoid_like", 20, points=p)

        t = ad.tensor(pts, True)
        ad.backward(f(t), inputs=[t])
        fd = central_fd(lambda z: f(ad.Tensor(z)).item(), pts, 1e-7)
        assert rel_error(t.grad, fd) < 1e-5

    def test_uniform_score_sample_mean_deviation(self):
        q = np.linspace(-1, 1, 200001)
        err = np.abs(soft_sign_occupancy(q, 20.0) - hard_sign_occupancy(q))
        assert np.mean(err) < 0.05

    def test_hard_soft_agreement_away_from_faces(self, rng):
        # every voxel whose points all sit more than 3/lambda (voxel units) from its faces
        L, lam = 0.1, 20.0
        pts = rng.uniform(0, 1, (3000, 3))
        g = build_extended_voxels(voxelize(pts, L), 1e-4)
        frac = pts / L - np.floor(pts / L)
        margin = np.min(np.minimum(frac, 1 - frac), axis=1)
        worst = np.full(g.n_voxels, np.inf)
        np.minimum.at(worst, g.point_to_voxel, margin)
        keep = worst > 3 / lam
        assert keep.sum() > 20
        soft = soft_occupancy(pts, g, "sigmoid_like", lam).data[: g.n_voxels]
        assert np.max(np.abs(soft[keep] - 1.0)) < 0.05

    @given(st.floats(0.02, 0.48), st.floats(0.05, 0.95))
    def test_monotone_toward_centre(self, start, t):
        L = 0.1
        p = np.array([[start, start, start]]) * L + 0.1
        g = build_extended_voxels(voxelize(p, L), 0.001)
        closer = p + t * (np.array([[0.15, 0.15, 0.15]]) - p)
        g2 = build_extended_voxels(voxelize(closer, L), 0.001)
        a = soft_voxel_occupancy([1, 1, 1], g, "sigmoid_like", 20).item()
        b = soft_voxel_occupancy([1, 1, 1], g2, "sigmoid_like", 20).item()
        assert b >= a - 1e-15
