"""Accuracy / mIoU evaluation, generalization gap, and style-space export."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, style
from .errors import ContractError, DegenerateProjectionError
from .numerics import downsample_nearest


@dataclass
class ConfusionMatrix:
    counts: np.ndarray   # (K, K), rows = ground truth

    @classmethod
    def empty(cls, k: int) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth, pred, k: int) -> "ConfusionMatrix":
        truth = np.asarray(truth).reshape(-1)
        pred = np.asarray(pred).reshape(-1)
        counts = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return cls(counts.astype(np.int64))

    def update(self, truth, pred) -> None:
        self.counts += ConfusionMatrix.from_labels(truth, pred, len(self.counts)).counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def iou(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, tp / denom, np.nan)

    def miou(self) -> float:
        """Mean IoU over classes that occur in the ground truth."""
        present = self.counts.sum(axis=1) > 0
        if not present.any():
            return 0.0
        return float(self.iou()[present].mean())


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=-2), factor, axis=-1)


def evaluate(params: nn.ModelParams, dataset, task: str, batch_size: int = 250) -> dict:
    """Top-1 accuracy (classification) or mIoU (segmentation) plus mean CE.

    Segmentation logits live at half resolution: the loss is taken against
    the nearest-downsampled mask, the confusion matrix against the full-size
    mask with predictions repeated back up.
    """
    if task not in nn.TASKS:
        raise ContractError(f"unknown task {task!r}")
    spec = params.spec
    k = spec.num_classes
    targets = dataset.targets(task)
    if task == "classification" and k != dataset.num_classes - 1:
        raise ContractError(f"model has {k} classes, dataset has {dataset.num_classes - 1} shapes")
    if task == "segmentation" and k != dataset.num_classes:
        raise ContractError(f"model has {k} classes, dataset has {dataset.num_classes}")
    frozen = params if params.role != "student" else params.frozen()
    cm = ConfusionMatrix.empty(k)
    loss_sum, loss_units = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        x = dataset.images[i:i + batch_size]
        y = targets[i:i + batch_size]
        logits = nn.forward(frozen, x)
        if task == "segmentation":
            scale = x.shape[-1] // logits.shape[-1]
            y_small = downsample_nearest(y, scale)
            units = y_small.size
            loss = nn.task_loss(logits, y_small, task).item()
            pred = upsample_nearest(logits.data.argmax(axis=1), scale)
        else:
            units = len(y)
            loss = nn.task_loss(logits, y, task).item()
            pred = logits.data.argmax(axis=1)
        cm.update(y, pred)
        loss_sum += loss * units
        loss_units += units
    metric = cm.accuracy() if task == "classification" else cm.miou()
    return {"metric": metric, "confusion": cm, "loss": loss_sum / max(loss_units, 1),
            "accuracy": cm.accuracy()}


def generalization_gap(source_metric: float, target_metrics) -> float:
    """Source metric minus the mean target metric."""
    targets = list(target_metrics)
    if not targets:
        raise ContractError("need at least one target metric")
    return float(source_metric - np.mean(targets))


# -- style space ------------------------------------------------------------

def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, top-2 principal axes (rows) and their variances.

    Each axis is signed so that its largest-magnitude entry is positive.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise DegenerateProjectionError(f"need at least 3 styles to project, got {len(pts)}")
    center = pts.mean(axis=0)
    cov = np.cov(pts - center, rowvar=False, bias=False)
    vals, vecs = np.linalg.eigh(np.atleast_2d(cov))
    order = np.argsort(vals)[::-1][:2]
    axes = vecs[:, order].T
    for i, a in enumerate(axes):
        if a[np.argmax(np.abs(a))] < 0:
            axes[i] = -a
    variances = np.maximum(vals[order], 0.0)
    if len(axes) < 2:
        axes = np.vstack([axes, np.zeros_like(axes)])
        variances = np.append(variances, 0.0)
    return center, axes, variances


def min_pairwise_distance(points: np.ndarray) -> float:
    d = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2))
    d[np.diag_indices(len(points))] = np.inf
    return float(d.min())


def export_style_space(params: nn.ModelParams, benchmark, insertion_point: int | None = None,
                       pool_size: int = 1024, n_generated: int = 200, seed: int = 0,
                       kmeans_iters: int = 50) -> dict:
    """2-D PCA view of source/target styles, both kinds of basis and
    hallucinated styles, with basis coverage diagnostics."""
    ins = params.spec.insertion_point if insertion_point is None else insertion_point
    rng = np.random.default_rng(seed)
    source_pool, _ = style.collect_styles(params, benchmark.source.images, ins, pool_size, rng)
    c = source_pool.shape[1] // 2
    target_pools = {t.name: style.collect_styles(params, t.images, ins, pool_size, rng)[0]
                    for t in benchmark.targets}
    union = np.concatenate([source_pool] + list(target_pools.values()))
    center, axes, variances = pca_2d(union)

    fps = style.fps_select(source_pool, c)
    km = style.kmeans_select(source_pool, c, seed=seed, iters=kmeans_iters)
    generated = {}
    for name, basis in (("fps", fps), ("kmeans", km)):
        w = style.sample_dirichlet(c, rng, size=n_generated)
        mu, sigma = style.hallucinate(basis, w)
        generated[name] = np.concatenate([mu, sigma], axis=1)

    def project(rows):
        return (rows - center) @ axes.T

    points = []

    def emit(rows, domain, kind, **extra):
        for j, (x, y) in enumerate(project(rows)):
            p = {"x": float(x), "y": float(y), "domain": domain, "kind": kind}
            for key, vals in extra.items():
                p[key] = int(vals[j])
            points.append(p)

    emit(source_pool, benchmark.source.name, "source")
    for name, pool in target_pools.items():
        emit(pool, name, "target")
    fps_rows = np.concatenate([fps.mu_base, fps.sigma_base], axis=1)
    km_rows = np.concatenate([km.mu_base, km.sigma_base], axis=1)
    emit(fps_rows, benchmark.source.name, "fps_basis", pool_index=fps.indices)
    emit(km_rows, benchmark.source.name, "kmeans_basis")
    for name, rows in generated.items():
        emit(rows, name, "generated")

    pool_set = {r.tobytes() for r in source_pool}
    diagnostics = {
        "channels": c,
        "pool_size": int(len(source_pool)),
        "fps": {
            "min_pairwise_distance": min_pairwise_distance(fps_rows),
            "coverage_radius": style.coverage_radius(source_pool, fps_rows),
            "subset_of_source_pool": all(r.tobytes() in pool_set for r in fps_rows),
        },
        "kmeans": {
            "min_pairwise_distance": min_pairwise_distance(km_rows),
            "coverage_radius": style.coverage_radius(source_pool, km_rows),
        },
        "target_coverage_radius": {
            name: {"fps": style.coverage_radius(pool, fps_rows),
                   "kmeans": style.coverage_radius(pool, km_rows)}
            for name, pool in target_pools.items()
        },
    }
    total_var = float(np.trace(np.atleast_2d(np.cov(union, rowvar=False))))
    return {
        "projection": "pca",
        "insertion_point": ins,
        "explained_variance": [float(v) for v in variances],
        "explained_variance_ratio": [float(v / total_var) if total_var > 0 else 0.0
                                     for v in variances],
        "points": points,
        "diagnostics": diagnostics,
    }
