"""Attack metrics and report serialization.

JSON reports are a list of objects with the fields of :class:`AttackReport`.
CSV reports hold one row per (method, epsilon, seed) cell with columns in
:data:`CSV_COLUMNS` order; list- and dict-valued fields are JSON encoded
inside their cell. Floats are written with ``repr`` so both formats round-trip
exactly. See docs/formats.md.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np


# ---------------------------------------------------------------- accuracy / IoU

def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels are not aligned")
    if preds.size == 0:
        raise ValueError("empty input")
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts."""
    preds, labels = np.asarray(preds).reshape(-1), np.asarray(labels).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError("predictions and labels are not aligned")
    return np.bincount(labels * classes + preds, minlength=classes * classes).reshape(classes, classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[list, float]:
    """Per-class IoU (None where the class is absent from both sides) and their mean."""
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    ious = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
    present = [v for v in ious if v is not None]
    if not present:
        raise ValueError("empty input")
    return ious, float(np.mean(present))


def miou(preds, labels, classes: int) -> tuple[list, float]:
    if np.asarray(preds).size == 0:
        raise ValueError("empty input")
    return iou_from_confusion(confusion_matrix(preds, labels, classes))


# ---------------------------------------------------------------- architecture dynamics

def _gate_states(net, x) -> np.ndarray:
    if net.kind == "layer_skip":
        return net.gates(x)
    if net.kind == "sparse2d":
        return net.masks(x)
    raise ValueError(f"no gate states for {net.kind}")


def architecture_change_counts(net, x_clean, x_adv, include_input: bool = True) -> tuple[int, int]:
    """(# changed computation units, # changeable units) between two inputs."""
    if net.kind == "sparse3d":
        from .occupancy import voxelize

        a = {tuple(v) for v in voxelize(x_clean, net.voxel_size).voxels.tolist()}
        b = {tuple(v) for v in voxelize(x_adv, net.voxel_size).voxels.tolist()}
        return len(a ^ b), len(a | b)
    x_clean, x_adv = np.asarray(x_clean, float), np.asarray(x_adv, float)
    s_clean, s_adv = _gate_states(net, x_clean), _gate_states(net, x_adv)
    changed = int(np.sum(s_clean != s_adv))
    if net.kind == "layer_skip":
        return changed, net.census * x_clean.shape[0]
    census = net.census(x_clean.shape[2:], include_input) * x_clean.shape[0]
    return changed, census


def architecture_change_ratio(net, x_clean, x_adv, include_input: bool = True) -> float:
    changed, census = architecture_change_counts(net, x_clean, x_adv, include_input)
    if census == 0:
        raise ValueError("unit census is zero")
    return changed / census


def layer_execution_rates(net, images) -> np.ndarray:
    """Fraction of examples that execute each skippable layer."""
    images = np.asarray(images, float)
    if len(images) == 0:
        raise ValueError("empty dataset")
    return net.gates(images).mean(axis=0)


# ---------------------------------------------------------------- reports

@dataclass
class AttackReport:
    method: str
    epsilon: float
    seed: int
    victim: str = ""
    alpha: float = 0.0
    lam: float = 0.0
    iterations: int = 1
    relation: str = ""
    valid_fraction: float = 1.0
    pre_metric: float = 0.0
    post_metric: float = 0.0
    per_class_iou: list = field(default_factory=list)
    archi_change: float = 0.0
    archi_change_masks_only: float = 0.0
    layer_rates_clean: list = field(default_factory=list)
    layer_rates_adv: list = field(default_factory=list)
    max_linf: float = 0.0
    mean_linf: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


CSV_COLUMNS = [f.name for f in fields(AttackReport)]
_STRUCTURED = {"per_class_iou", "layer_rates_clean", "layer_rates_adv", "config"}
_INT_COLUMNS = {"seed", "iterations"}
_STR_COLUMNS = {"method", "victim", "relation"}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        d = r.to_dict()
        w.writerow([json.dumps(d[c], sort_keys=True) if c in _STRUCTURED else _fmt(d[c])
                    for c in CSV_COLUMNS])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[AttackReport]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_COLUMNS:
        raise ValueError("unexpected CSV header")
    out = []
    for row in rows[1:]:
        d = {}
        for c, v in zip(CSV_COLUMNS, row):
            if c in _STRUCTURED:
                d[c] = json.loads(v)
            elif c in _INT_COLUMNS:
                d[c] = int(v)
            elif c in _STR_COLUMNS:
                d[c] = v
            else:
                d[c] = float(v)
        out.append(AttackReport.from_dict(d))
    return out


def serialize_report(reports, path, format: str = "json") -> Path:
    """Write one report or a list of reports; refuses to overwrite."""
    if isinstance(reports, AttackReport):
        reports = [reports]
    path = Path(path)
    if format == "json":
        text = json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"
    elif format == "csv":
        text = reports_to_csv(reports)
    else:
        raise ValueError(f"unknown report format {format!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def load_reports(path) -> list[AttackReport]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        return reports_from_csv(text)
    return [AttackReport.from_dict(d) for d in json.loads(text)]


def write_curve(reports, path, metric: str = "post_metric") -> Path:
    """Whitespace-delimited ``epsilon value`` blocks per method (gnuplot ``index``)."""
    path = Path(path)
    by_method: dict[str, dict[float, list]] = {}
    for r in reports:
        by_method.setdefault(r.method, {}).setdefault(r.epsilon, []).append(getattr(r, metric))
    lines = []
    for method in sorted(by_method):
        lines.append(f"# {method}")
        for eps in sorted(by_method[method]):
            vals = by_method[method][eps]
            lines.append(f"{eps!r} {float(np.mean(vals))!r} {float(np.std(vals))!r}")
        lines += ["", ""]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path

