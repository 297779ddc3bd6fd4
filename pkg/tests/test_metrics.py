import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynattack.data import make_synthetic_images
from dynattack.metrics import (
    CSV_COLUMNS,
    AttackReport,
    accuracy,
    architecture_change_counts,
    architecture_change_ratio,
    confusion_matrix,
    layer_execution_rates,
    load_reports,
    miou,
    reports_from_csv,
    reports_to_csv,
    serialize_report,
    write_curve,
)
from dynattack.models import build_layer_skip_classifier, build_sparse2d_classifier, build_sparse3d_segmenter


def _brute_miou(p, y, k):
    vals = []
    for c in range(k):
        inter = sum(1 for a, b in zip(p, y) if a == c and b == c)
        union = sum(1 for a, b in zip(p, y) if a == c or b == c)
        if union:
            vals.append(inter / union)
    return sum(vals) / len(vals)


def test_accuracy_examples():
    assert accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([0, 1], [0])


def test_miou_example():
    ious, m = miou(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
    assert ious == [0.5, 2 / 3] and m == pytest.approx(7 / 12)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_miou_matches_bruteforce(pairs):
    p, y = map(np.array, zip(*pairs))
    assert miou(p, y, 4)[1] == pytest.approx(_brute_miou(p.tolist(), y.tolist(), 4), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40), st.permutations([0, 1, 2]))
def test_miou_relabel_invariant(pairs, perm):
    p, y = map(np.array, zip(*pairs))
    perm = np.array(perm)
    assert miou(perm[p], perm[y], 3)[1] == pytest.approx(miou(p, y, 3)[1], abs=1e-12)


def test_confusion_orientation():
    cm = confusion_matrix([1, 1], [0, 1], 2)
    assert cm.tolist() == [[0, 1], [0, 1]]


@pytest.fixture(scope="module")
def x():
    return make_synthetic_images(n=6, seed=0).images


class TestArchitectureChange:
    @pytest.mark.parametrize("build", [build_layer_skip_classifier, build_sparse2d_classifier])
    def test_identity_zero_and_symmetric(self, x, build):
        net = build(seed=1)
        y = np.clip(x + np.random.default_rng(0).normal(0, 0.3, x.shape), 0, 1)
        assert architecture_change_ratio(net, x, x) == 0.0
        assert architecture_change_ratio(net, x, y) == architecture_change_ratio(net, y, x)
        assert 0 <= architecture_change_ratio(net, x, y) <= 1

    def test_census_variants(self, x):
        net = build_sparse2d_classifier(seed=1)
        y = np.clip(x + 0.2, 0, 1)
        c_all, n_all = architecture_change_counts(net, x, y)
        c_m, n_m = architecture_change_counts(net, x, y, include_input=False)
        assert c_all == c_m and n_all == n_m + 6 * 256

    def test_voxel_symmetric_difference(self):
        net = build_sparse3d_segmenter()
        a = np.array([[0.05, 0.05, 0.05], [0.15, 0.05, 0.05]])
        b = np.array([[0.05, 0.05, 0.05], [0.25, 0.05, 0.05]])
        assert architecture_change_counts(net, a, b) == (2, 3)

    def test_execution_rates(self, x):
        net = build_layer_skip_classifier(seed=2)
        r = layer_execution_rates(net, x)
        assert r.shape == (4,) and np.all((r >= 0) & (r <= 1))
        with pytest.raises(ValueError):
            layer_execution_rates(net, x[:0])


def _reports():
    return [AttackReport("lgm", 8.0, 1, "sparse2d", 1.0, 20.0, 10, "", 1.0, 0.9, 0.25, [0.1, None],
                         0.3, 0.2, [0.5], [0.25], 8.0, 7.5, {"a": [1, 2]}),
            AttackReport("fgm", 0.1 + 0.2, 2)]


def test_csv_header():
    assert reports_to_csv([]).strip() == ",".join(CSV_COLUMNS)
    with pytest.raises(ValueError):
        reports_from_csv("x,y\n1,2\n")


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_roundtrip_exact(tmp_path, fmt):
    path = serialize_report(_reports(), tmp_path / f"r.{fmt}", fmt)
    assert load_reports(path) == _reports()
    with pytest.raises(FileExistsError):
        serialize_report(_reports(), path, fmt)


def test_csv_byte_identical(tmp_path):
    a = serialize_report(_reports(), tmp_path / "a.csv", "csv").read_bytes()
    b = serialize_report(load_reports(tmp_path / "a.csv"), tmp_path / "b.csv", "csv").read_bytes()
    assert a == b


def test_json_is_plain(tmp_path):
    d = json.loads(serialize_report(_reports()[0], tmp_path / "x.json").read_text())
    assert d[0]["per_class_iou"] == [0.1, None]


def test_curve_file(tmp_path):
    reps = [AttackReport("fgm", e, s, post_metric=v) for e, s, v in [(2.0, 0, 0.5), (2.0, 1, 0.7), (4.0, 0, 0.1)]]
    text = write_curve(reps, tmp_path / "c.dat").read_text().splitlines()
    assert text[0] == "# fgm"
    e, m, s = map(float, text[1].split())
    assert (e, m) == (2.0, pytest.approx(0.6)) and s == pytest.approx(0.1)
