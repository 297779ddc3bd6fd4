"""FGSM, I-FGSM and the iterative point-coordinate attack under FGM or LGM
gradients, plus the uniform random baseline.

Image budgets are given on the 0-255 intensity scale and divided by 255
internally (victims see intensities in [0, 1]). Point budgets are in meters.
Every emitted example satisfies its L-infinity ball and valid range exactly
in float64 arithmetic, see :func:`enforce_budget`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import AttackReport, accuracy, architecture_change_counts, architecture_change_ratio, \
    confusion_matrix, iou_from_confusion, layer_execution_rates
from .occupancy import DEFAULT_LAMBDA_3D
from .units import INFERENCE, GradientMode

IMAGE_SCALE = 255.0
IMAGE_RANGE = (0.0, 1.0)
METHODS = ("fgm", "lgm", "random")


@dataclass
class AttackConfig:
    epsilon: float
    alpha: float | None = None
    iterations: int | None = None
    lam: float = 1.0
    mode: str = "fgm"
    forward: str = "soft"
    relation_kind: str = "sigmoid_like"
    valid_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in METHODS:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.alpha is not None and self.epsilon > 0 and self.alpha > self.epsilon:
            raise ValueError("alpha must not exceed epsilon")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.valid_fraction <= 1:
            raise ValueError("valid_fraction must lie in (0, 1]")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    def gradient_mode(self) -> GradientMode:
        if self.mode == "lgm":
            return GradientMode.lgm(self.lam, self.forward)
        return INFERENCE

    def as_dict(self) -> dict:
        return asdict(self)


def default_iterations(epsilon: float) -> int:
    """I-FGSM iteration rule ``min(eps + 4, 1.25 eps)`` on the 0-255 scale."""
    return max(1, int(round(min(epsilon + 4, 1.25 * epsilon))))


def enforce_budget(x_adv: np.ndarray, x: np.ndarray, eps: float, lo=None, hi=None) -> np.ndarray:
    """Clip to the valid range and the eps-ball, then nudge any coordinate whose
    float64 offset still exceeds eps back toward ``x`` one ulp at a time."""
    out = np.clip(x_adv, x - eps, x + eps)
    if lo is not None or hi is not None:
        out = np.clip(out, lo, hi)
    for _ in range(8):
        bad = np.abs(out - x) > eps
        if not bad.any():
            break
        out[bad] = np.nextafter(out[bad], x[bad])
    return out


# ---------------------------------------------------------------- images

def _image_grad(net, x: np.ndarray, labels, mode: GradientMode) -> np.ndarray:
    xt = ad.tensor(x, requires_grad=True)
    loss = ad.softmax_cross_entropy(net.forward(xt, mode), labels, reduction="sum")
    ad.backward(loss, inputs=[xt])
    return xt.grad


def pixel_budget_mask(grad: np.ndarray, valid_fraction: float) -> np.ndarray:
    """Top ``ceil(fraction * H * W)`` pixels by channel-L2 gradient magnitude.

    ``grad`` is (B, C, H, W); returns a boolean (B, 1, H, W) mask. Ties go to
    the lower flat pixel index.
    """
    if not 0 < valid_fraction <= 1:
        raise ValueError("valid_fraction must lie in (0, 1]")
    grad = np.asarray(grad, float)
    B, _, H, W = grad.shape
    k = min(H * W, math.ceil(round(valid_fraction * H * W, 9)))
    mag = np.sqrt((grad**2).sum(axis=1)).reshape(B, -1)
    mask = np.zeros((B, H * W), bool)
    for b in range(B):
        order = np.lexsort((np.arange(H * W), -mag[b]))
        mask[b, order[:k]] = True
    return mask.reshape(B, 1, H, W)


def _image_report(net, x, x_adv, labels, cfg: AttackConfig, method: str, iterations, alpha):
    from .models import predict_images

    rep = AttackReport(method=method, epsilon=float(cfg.epsilon), seed=int(cfg.seed),
                       victim=net.kind, alpha=float(alpha), lam=float(cfg.lam),
                       iterations=int(iterations), valid_fraction=float(cfg.valid_fraction),
                       config=cfg.as_dict())
    rep.pre_metric = accuracy(predict_images(net, x), labels)
    rep.post_metric = accuracy(predict_images(net, x_adv), labels)
    rep.archi_change = architecture_change_ratio(net, x, x_adv)
    if net.kind == "sparse2d":
        rep.archi_change_masks_only = architecture_change_ratio(net, x, x_adv, include_input=False)
    else:
        rep.archi_change_masks_only = rep.archi_change
        rep.layer_rates_clean = layer_execution_rates(net, x).tolist()
        rep.layer_rates_adv = layer_execution_rates(net, x_adv).tolist()
    d = np.abs(x_adv - x).reshape(len(x), -1).max(axis=1) * IMAGE_SCALE
    rep.max_linf, rep.mean_linf = float(d.max()), float(d.mean())
    return rep


def fgsm(x, labels, net, cfg: AttackConfig, report: bool = True):
    """Single signed-gradient step of size epsilon."""
    x = np.asarray(x, float)
    labels = np.asarray(labels)
    eps = cfg.epsilon / IMAGE_SCALE
    if cfg.mode == "random":
        x_adv = random_baseline(x, cfg, valid_range=IMAGE_RANGE, scale=IMAGE_SCALE)
    elif eps == 0:
        x_adv = x.copy()
    else:
        g = _image_grad(net, x, labels, cfg.gradient_mode())
        mask = pixel_budget_mask(g, cfg.valid_fraction) if cfg.valid_fraction < 1 else True
        x_adv = enforce_budget(x + eps * np.sign(g) * mask, x, eps, *IMAGE_RANGE)
        if cfg.valid_fraction < 1:
            x_adv = np.where(mask, x_adv, x)
    if not report:
        return x_adv, None
    return x_adv, _image_report(net, x, x_adv, labels, cfg, cfg.mode, 1, cfg.epsilon)


def ifgsm(x, labels, net, cfg: AttackConfig, report: bool = True, history: list | None = None):
    """Iterated signed steps of size alpha, projected to the eps-ball then
    clipped to [0, 1] each iteration. The pixel mask is chosen from the first
    iteration's gradient and kept fixed."""
    x = np.asarray(x, float)
    labels = np.asarray(labels)
    eps = cfg.epsilon / IMAGE_SCALE
    iters = cfg.iterations or default_iterations(cfg.epsilon)
    alpha = (cfg.alpha if cfg.alpha is not None else 1.0) / IMAGE_SCALE
    if cfg.mode == "random":
        x_adv = random_baseline(x, cfg, valid_range=IMAGE_RANGE, scale=IMAGE_SCALE)
        return x_adv, (_image_report(net, x, x_adv, labels, cfg, "random", 1, cfg.epsilon)
                       if report else None)
    mode = cfg.gradient_mode()
    x_t = x.copy()
    mask = None
    for _ in range(iters if eps > 0 else 0):
        g = _image_grad(net, x_t, labels, mode)
        if mask is None:
            mask = pixel_budget_mask(g, cfg.valid_fraction)
        x_t = enforce_budget(x_t + alpha * np.sign(g) * mask, x, eps, *IMAGE_RANGE)
        x_t = np.where(mask, x_t, x)
        if history is not None:
            history.append(x_t.copy())
    if not report:
        return x_t, None
    return x_t, _image_report(net, x, x_t, labels, cfg, cfg.mode, iters, alpha * IMAGE_SCALE)


# ---------------------------------------------------------------- random baseline

def random_baseline(x, cfg: AttackConfig, valid_range=None, scale: float = 1.0,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Uniform noise in [-eps, eps] per coordinate, clipped to ``valid_range``."""
    x = np.asarray(x, float)
    eps = cfg.epsilon / scale
    rng = rng or np.random.default_rng(cfg.seed)
    noise = rng.uniform(-eps, eps, x.shape)
    lo, hi = valid_range if valid_range is not None else (None, None)
    return enforce_budget(x + noise, x, eps, lo, hi)


# ---------------------------------------------------------------- point clouds

def point_gradient(net, points: np.ndarray, labels, cfg: AttackConfig, colors=None,
                   step_budget: float | None = None) -> np.ndarray:
    """d(summed cross-entropy)/d(points) under the configured gradient mode."""
    mode = cfg.gradient_mode()
    pts = ad.tensor(points, requires_grad=True)
    param = cfg.lam if cfg.relation_kind == "sigmoid_like" else None
    out = net.forward(pts, mode, colors, relation_kind=cfg.relation_kind, param=param,
                      step_budget=step_budget if step_budget is not None else cfg.alpha)
    loss = ad.softmax_cross_entropy(out.point_logits, labels, reduction="sum")
    ad.backward(loss, inputs=[pts])
    return pts.grad


def point_attack(points, colors, labels, net, cfg: AttackConfig, history: list | None = None,
                 report: bool = True):
    """Per-point normalized gradient ascent with per-point L-infinity projection.

    Each iteration re-voxelizes the current cloud (and rebuilds the extended
    voxel set with step budget alpha for LGM), moves every point by
    ``alpha * g / |g|`` and projects the offset to ``[-eps, eps]^3``.
    Returns ``(points_adv, report)``; with ``report=False`` the second item is
    the number of iterations run.
    """
    points = np.asarray(points, float)
    labels = np.asarray(labels)
    if np.all(points == points[0]):
        raise ValueError("degenerate cloud: all points coincide")
    eps = cfg.epsilon
    if cfg.mode == "random":
        adv = random_baseline(points, cfg)
        return adv, (cloud_report(net, points, adv, colors, labels, cfg, 1) if report else 1)
    alpha = cfg.alpha if cfg.alpha is not None else eps / 10
    iters = cfg.iterations or 20
    cur = points.copy()
    for _ in range(iters if eps > 0 else 0):
        g = point_gradient(net, cur, labels, cfg, colors, step_budget=alpha)
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        step = np.where(norm > 0, alpha * g / np.where(norm > 0, norm, 1.0), 0.0)
        cur = enforce_budget(cur + step, points, eps)
        if history is not None:
            history.append(cur.copy())
    if not report:
        return cur, iters
    return cur, cloud_report(net, points, cur, colors, labels, cfg, iters)


def attack_clouds(data, net, cfg: AttackConfig, limit: int | None = None) -> AttackReport:
    """Attack every scene of a cloud dataset; mIoU is computed from the
    confusion matrix accumulated over all scenes (clean and adversarial)."""
    classes = net.spec["classes"]
    n = len(data) if limit is None else min(limit, len(data))
    if n == 0:
        raise ValueError("empty dataset")
    cm_pre = np.zeros((classes, classes), np.int64)
    cm_post = np.zeros_like(cm_pre)
    changed = total = 0
    linf = []
    iters = 1
    for i in range(n):
        pts, lab, col = data.clouds[i], data.point_labels[i], data.colors[i]
        sub = AttackConfig(**{**cfg.as_dict(), "seed": cfg.seed * 100003 + i})
        if cfg.mode == "random":
            adv = random_baseline(pts, sub)
        else:
            adv, iters = point_attack(pts, col, lab, net, sub, report=False)
        cm_pre += confusion_matrix(net.predict(pts, col), lab, classes)
        cm_post += confusion_matrix(net.predict(adv, col), lab, classes)
        c, t = architecture_change_counts(net, pts, adv)
        changed, total = changed + c, total + t
        linf.append(np.abs(adv - pts).max(axis=1))
    _, pre_m = iou_from_confusion(cm_pre)
    ious, post_m = iou_from_confusion(cm_post)
    d = np.concatenate(linf)
    alpha = cfg.alpha if cfg.alpha is not None else cfg.epsilon / 10
    return AttackReport(method=cfg.mode, epsilon=float(cfg.epsilon), seed=int(cfg.seed),
                        victim=net.kind, alpha=float(alpha if cfg.mode != "random" else 0.0),
                        lam=float(cfg.lam), iterations=int(iters), relation=cfg.relation_kind,
                        pre_metric=pre_m, post_metric=post_m, per_class_iou=ious,
                        archi_change=changed / total if total else 0.0,
                        max_linf=float(d.max()), mean_linf=float(d.mean()),
                        config=cfg.as_dict())


def cloud_report(net, points, adv, colors, labels, cfg: AttackConfig, iterations: int) -> AttackReport:
    classes = net.spec["classes"]
    pre = net.predict(points, colors)
    post = net.predict(adv, colors)
    _, pre_m = iou_from_confusion(confusion_matrix(pre, labels, classes))
    ious, post_m = iou_from_confusion(confusion_matrix(post, labels, classes))
    d = np.abs(adv - points).max(axis=1)
    return AttackReport(method=cfg.mode, epsilon=float(cfg.epsilon), seed=int(cfg.seed),
                        victim=net.kind, alpha=float(cfg.alpha or 0.0), lam=float(cfg.lam),
                        iterations=int(iterations), relation=cfg.relation_kind,
                        pre_metric=pre_m, post_metric=post_m, per_class_iou=ious,
                        archi_change=architecture_change_ratio(net, points, adv),
                        max_linf=float(d.max()), mean_linf=float(d.mean()),
                        config=cfg.as_dict())


__all__ = [
    "AttackConfig", "attack_clouds", "default_iterations", "enforce_budget", "fgsm", "ifgsm",
    "pixel_budget_mask", "point_attack", "point_gradient", "random_baseline",
    "DEFAULT_LAMBDA_3D",
]
