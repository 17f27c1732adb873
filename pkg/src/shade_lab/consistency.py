"""Style consistency (JSD between posteriors), retrospection consistency
(feature distance to a teacher), and the weighted total objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, ShapeError
from .numerics import Tensor

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-6
LN2 = math.log(2.0)

# lambda_SC / lambda_RC per task
DEFAULT_WEIGHTS = {
    "segmentation": (10.0, 1.0),
    "classification": (10.0, 0.1),
}


@dataclass(frozen=True)
class LossWeights:
    lambda_sc: float = 10.0
    lambda_rc: float = 1.0

    def __post_init__(self):
        for name in ("lambda_sc", "lambda_rc"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")

    @classmethod
    def for_task(cls, task: str) -> "LossWeights":
        sc, rc = DEFAULT_WEIGHTS[task]
        return cls(sc, rc)


def _xlogx_ratio(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    return p * (np.log(np.maximum(p, PROB_FLOOR)) - np.log(np.maximum(m, PROB_FLOOR)))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats between two probability vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"jsd expects two equal-length vectors, got {p.shape}, {q.shape}")
    for v in (p, q):
        if np.any(v < -SIMPLEX_TOL) or abs(v.sum() - 1.0) > SIMPLEX_TOL:
            raise ContractError("jsd input is not a probability vector")
    m = 0.5 * (p + q)
    d = 0.5 * (float(_xlogx_ratio(p, m).sum()) + float(_xlogx_ratio(q, m).sum()))
    # rounding can push near-identical pairs a few ulp below zero
    return min(max(d, 0.0), LN2)


def jsd_map(p: np.ndarray, q: np.ndarray, axis: int = 1) -> np.ndarray:
    """Elementwise JSD along `axis` for stacked distributions."""
    m = 0.5 * (p + q)
    d = 0.5 * (_xlogx_ratio(p, m).sum(axis=axis) + _xlogx_ratio(q, m).sum(axis=axis))
    return np.clip(d, 0.0, LN2)


def _check_task(task: str) -> None:
    if task not in DEFAULT_WEIGHTS:
        raise ConfigError(f"unknown task {task!r}")


def sc_loss(p: Tensor, p_tilde: Tensor, task: str) -> Tensor:
    """Mean JSD over images (classification) or over every pixel (segmentation).

    Inputs are softmax posteriors with the class axis at position 1.
    """
    _check_task(task)
    if p.shape != p_tilde.shape:
        raise ShapeError(f"posterior shapes differ: {p.shape} vs {p_tilde.shape}")
    expected_ndim = 2 if task == "classification" else 4
    if p.ndim != expected_ndim:
        raise ShapeError(f"{task} posteriors must be {expected_ndim}-D, got {p.shape}")
    m = nx.scalar_affine(nx.add(p, p_tilde), 0.5)
    log_m = nx.log(m, floor=PROB_FLOOR)
    kl_p = nx.mul(p, nx.sub(nx.log(p, floor=PROB_FLOOR), log_m))
    kl_q = nx.mul(p_tilde, nx.sub(nx.log(p_tilde, floor=PROB_FLOOR), log_m))
    units = p.data.size // p.shape[1]
    return nx.scalar_affine(nx.sum(nx.add(kl_p, kl_q)), 0.5 / units)


def _msd(a: Tensor, b: Tensor, mask) -> Tensor:
    diff = nx.square(nx.sub(a, b))
    if mask is None:
        return nx.mean(diff)
    return nx.masked_mean(diff, np.asarray(mask, dtype=np.float64)[:, None])


def rc_loss(f_orig: Tensor, f_teacher, task: str, f_styl: Tensor | None = None,
            fg_mask=None, branches: str = "both") -> Tensor:
    """Mean squared distance between student and (detached) teacher features.

    The teacher only sees the original image. With branches="both" the loss
    averages the original-branch and stylized-branch distances; with
    "stylized" only the stylized branch is compared. Segmentation restricts
    the mean to foreground positions of `fg_mask` (N, h, w); a batch with no
    foreground contributes 0.
    """
    _check_task(task)
    teacher = Tensor(f_teacher.data if isinstance(f_teacher, Tensor) else f_teacher)
    if task == "segmentation":
        if fg_mask is None:
            raise ContractError("segmentation retrospection needs a foreground mask")
        fg_mask = np.asarray(fg_mask)
        if fg_mask.shape != (teacher.shape[0],) + teacher.shape[2:]:
            raise ShapeError(f"mask {fg_mask.shape} vs features {teacher.shape}")
    else:
        fg_mask = None
    for f in (f_orig, f_styl):
        if f is not None and f.shape != teacher.shape:
            raise ShapeError(f"student feature {f.shape} vs teacher {teacher.shape}")
    if branches == "stylized":
        if f_styl is None:
            raise ContractError("branches='stylized' needs stylized features")
        return _msd(f_styl, teacher, fg_mask)
    if branches != "both":
        raise ConfigError(f"unknown rc branches mode {branches!r}")
    orig = _msd(f_orig, teacher, fg_mask)
    if f_styl is None:
        return orig
    return nx.scalar_affine(nx.add(orig, _msd(f_styl, teacher, fg_mask)), 0.5)


def total_loss(task: Tensor, sc: Tensor | None, rc: Tensor | None, w: LossWeights) -> Tensor:
    """task + lambda_sc * sc + lambda_rc * rc; absent terms are skipped."""
    out = task
    if sc is not None:
        out = nx.add(out, nx.scalar_affine(sc, w.lambda_sc))
    if rc is not None:
        out = nx.add(out, nx.scalar_affine(rc, w.lambda_rc))
    return out
