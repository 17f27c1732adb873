"""Channel-statistics styles and the generators that produce new ones.

A style is the per-channel (mean, std) of a feature map, with std measured
as sqrt(var + eps). Styles are plain numpy arrays: a batch of N styles is a
pair of (N, C) arrays. Restyling never sends gradient into the statistics;
only the content path through the features is differentiable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, FormatError, InsufficientStylesError, ShapeError
from .numerics import DEFAULT_STD_EPS, Tensor

SELECTORS = ("fps", "kmeans")


@dataclass
class StyleVector:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ShapeError(f"style mu {self.mu.shape} and sigma {self.sigma.shape} must be 1-D and equal")
        if np.any(self.sigma < 0):
            raise ContractError("style sigma must be non-negative")

    @property
    def channels(self) -> int:
        return self.mu.size

    def concat(self) -> np.ndarray:
        return np.concatenate([self.mu, self.sigma])


@dataclass
class BasisStyles:
    mu_base: np.ndarray       # (C, C), row i = basis style i
    sigma_base: np.ndarray
    selector: str = "fps"
    selected_at: int = 0
    indices: np.ndarray | None = None   # pool rows, fps only

    @property
    def count(self) -> int:
        return self.mu_base.shape[0]

    def rows(self) -> list[StyleVector]:
        return [StyleVector(m, s) for m, s in zip(self.mu_base, self.sigma_base)]


def styles_to_array(styles) -> np.ndarray:
    """Stack StyleVectors into (N, 2C) rows of concatenated mu || sigma."""
    return np.stack([s.concat() for s in styles])


def _split(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c = points.shape[1] // 2
    return points[:, :c], points[:, c:]


# -- AdaIN pieces ---------------------------------------------------------------

def style_stats(features: np.ndarray, eps: float = DEFAULT_STD_EPS) -> tuple[np.ndarray, np.ndarray]:
    """(N, C, H, W) -> channel means and sqrt(var + eps), each (N, C)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) features, got {f.shape}")
    mu = f.mean(axis=(2, 3))
    var = f.var(axis=(2, 3))
    return mu, np.sqrt(var + eps)


def extract_style(features, eps: float = DEFAULT_STD_EPS) -> list[StyleVector]:
    data = features.data if isinstance(features, Tensor) else features
    mu, sigma = style_stats(data, eps)
    return [StyleVector(m, s) for m, s in zip(mu, sigma)]


def _as_target(target, n: int, c: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(target, StyleVector):
        mu, sigma = target.mu[None, :], target.sigma[None, :]
    elif isinstance(target, (list, tuple)) and target and isinstance(target[0], StyleVector):
        mu = np.stack([s.mu for s in target])
        sigma = np.stack([s.sigma for s in target])
    else:
        mu, sigma = (np.asarray(a, dtype=np.float64) for a in target)
    mu = np.broadcast_to(mu, (n, c)) if mu.shape in ((1, c), (c,)) else mu
    sigma = np.broadcast_to(sigma, (n, c)) if sigma.shape in ((1, c), (c,)) else sigma
    if mu.shape != (n, c) or sigma.shape != (n, c):
        raise ShapeError(f"target style {mu.shape} does not match features ({n}, {c})")
    if np.any(sigma < 0):
        raise ContractError("target sigma must be non-negative")
    return mu, sigma


def apply_style(features, target, eps: float = DEFAULT_STD_EPS) -> Tensor:
    """Re-normalize features to the target per-channel statistics (AdaIN).

    `target` is a StyleVector, a list with one StyleVector per sample, or a
    (mu, sigma) pair of (N, C) arrays. The output's extracted style equals
    the target whenever target sigma >= sqrt(eps): the centered content is
    scaled by sqrt(sigma_t^2 - eps) / sqrt(var_x), which is the plain
    sigma_t / sigma_x rule with the eps convention of `extract_style`
    accounted for on both sides. Channels whose variance is below eps^2 are
    treated as constant and mapped to the target mean.
    """
    x = nx.as_tensor(features)
    if x.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) features, got {x.shape}")
    n, c = x.shape[:2]
    mu_t, sigma_t = _as_target(target, n, c)
    mu_x = x.data.mean(axis=(2, 3))
    var_x = x.data.var(axis=(2, 3))
    live = var_x >= eps * eps
    num = np.sqrt(np.maximum(sigma_t * sigma_t - eps, 0.0))
    scale = np.where(live, num / np.sqrt(np.where(live, var_x, 1.0)), 0.0)
    shift = mu_t - scale * mu_x
    return nx.channel_affine(x, scale, shift)


# -- basis selection ------------------------------------------------------------

def _check_pool(n: int, count: int) -> None:
    if count < 1:
        raise ContractError("basis count must be >= 1")
    if n < count:
        raise InsufficientStylesError(f"need at least {count} styles, got {n}")


def fps_order(points: np.ndarray, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy farthest point sampling over the rows of `points`.

    The first pick is the point farthest from the centroid; each later pick
    maximizes the distance to its nearest already-picked point. Ties go to
    the lowest index. Returns the picked indices and, per step, the max-min
    distance achieved by the pick.
    """
    pts = np.asarray(points, dtype=np.float64)
    _check_pool(len(pts), count)
    d_centroid = np.sqrt(((pts - pts.mean(axis=0)) ** 2).sum(axis=1))
    first = int(np.argmax(d_centroid))
    picked = [first]
    gaps = [float(d_centroid[first])]
    mind = np.sqrt(((pts - pts[first]) ** 2).sum(axis=1))
    for _ in range(1, count):
        mind_masked = mind.copy()
        mind_masked[picked] = -np.inf
        nxt = int(np.argmax(mind_masked))
        picked.append(nxt)
        gaps.append(float(mind[nxt]))
        mind = np.minimum(mind, np.sqrt(((pts - pts[nxt]) ** 2).sum(axis=1)))
    return np.array(picked), np.array(gaps)


def fps_select(styles, count: int, selected_at: int = 0) -> BasisStyles:
    pts = styles if isinstance(styles, np.ndarray) else styles_to_array(styles)
    idx, _ = fps_order(pts, count)
    mu, sigma = _split(pts[idx])
    return BasisStyles(mu.copy(), sigma.copy(), "fps", selected_at, idx)


def coverage_radius(points: np.ndarray, centers: np.ndarray) -> float:
    """Largest distance from any point to its nearest center (k-center cost)."""
    d = np.sqrt(((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
    return float(d.min(axis=1).max())


def kmeans_fit(points: np.ndarray, count: int, seed: int, iters: int = 50
               ) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns the centroids and the within-cluster sum of squares after each
    iteration. An emptied cluster is re-seeded with the point lying farthest
    from its currently assigned centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    _check_pool(n, count)
    if iters < 1:
        raise ContractError("kmeans needs iters >= 1")
    rng = np.random.default_rng(seed)

    centers = np.empty((count, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, count):
        total = d2.sum()
        # All remaining points coincide with chosen centers: pick uniformly.
        probs = d2 / total if total > 0 else None
        centers[j] = pts[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))

    history = []
    for _ in range(iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = centers.copy()
        for j in range(count):
            members = labels == j
            if members.any():
                new[j] = pts[members].mean(axis=0)
            else:
                own = dist[np.arange(n), labels]
                far = int(np.argmax(own))
                new[j] = pts[far]
                labels[far] = j
                dist[far] = 0.0
        centers = new
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        history.append(float(dist.min(axis=1).sum()))
        if len(history) > 1 and history[-1] == history[-2]:
            break
    return centers, history


def kmeans_select(styles, count: int, seed: int, iters: int = 50, selected_at: int = 0
                  ) -> BasisStyles:
    pts = styles if isinstance(styles, np.ndarray) else styles_to_array(styles)
    centers, _ = kmeans_fit(pts, count, seed, iters)
    mu, sigma = _split(centers)
    return BasisStyles(mu, np.maximum(sigma, 0.0), "kmeans", selected_at)


# -- sampling ------------------------------------------------------------------

def sample_dirichlet(c: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Dirichlet(1/C, ..., 1/C) weights via normalized Gamma(1/C, 1) draws."""
    if c < 1:
        raise ContractError("Dirichlet dimension must be >= 1")
    shape = (c,) if size is None else (size, c)
    g = rng.gamma(1.0 / c, 1.0, size=shape)
    totals = g.sum(axis=-1, keepdims=True)
    while np.any(totals == 0):
        bad = (totals == 0).reshape(-1)
        if size is None:
            g = rng.gamma(1.0 / c, 1.0, size=shape)
        else:
            g[bad] = rng.gamma(1.0 / c, 1.0, size=(int(bad.sum()), c))
        totals = g.sum(axis=-1, keepdims=True)
    return g / totals


def hallucinate(basis: BasisStyles, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of basis rows; `w` is (C,) or (N, C)."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape[-1] != basis.count:
        raise ShapeError(f"weights of length {w.shape[-1]} for {basis.count} basis styles")
    return w @ basis.mu_base, w @ basis.sigma_base


def random_style(c: int, rng: np.random.Generator, size: int | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal means, absolute standard-normal stds."""
    shape = (c,) if size is None else (size, c)
    mu = rng.standard_normal(shape)
    sigma = np.abs(rng.standard_normal(shape))
    return mu, sigma


def _partners(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ContractError("batch style mixing needs at least 2 samples")
    return rng.permutation(n)


def mixstyle_batch(features, rng: np.random.Generator, alpha: float = 0.1,
                   eps: float = DEFAULT_STD_EPS, perm=None, lam=None) -> Tensor:
    """Mix each sample's style with a shuffled partner's, lambda ~ Beta(a, a)."""
    x = nx.as_tensor(features)
    n = x.shape[0]
    perm = _partners(n, rng) if perm is None else np.asarray(perm)
    lam = rng.beta(alpha, alpha, size=(n, 1)) if lam is None else np.asarray(lam).reshape(n, 1)
    mu, sigma = style_stats(x.data, eps)
    mixed_mu = lam * mu + (1 - lam) * mu[perm]
    mixed_sigma = lam * sigma + (1 - lam) * sigma[perm]
    return apply_style(x, (mixed_mu, mixed_sigma), eps)


def crossnorm_batch(features, rng: np.random.Generator, eps: float = DEFAULT_STD_EPS,
                    perm=None) -> Tensor:
    """Swap in a shuffled partner's style."""
    x = nx.as_tensor(features)
    perm = _partners(x.shape[0], rng) if perm is None else np.asarray(perm)
    mu, sigma = style_stats(x.data, eps)
    return apply_style(x, (mu[perm], sigma[perm]), eps)


# -- pools -------------------------------------------------------------------

def collect_styles(params, images: np.ndarray, insertion_point: int, max_samples: int,
                   rng: np.random.Generator | None, eps: float = DEFAULT_STD_EPS,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Styles at the insertion point for up to `max_samples` images.

    Returns the (M, 2C) pool and the image indices used (sorted). When the
    dataset is no larger than `max_samples` every image is used and `rng`
    is not touched.
    """
    from .nn import run_layers

    n = len(images)
    if n == 0:
        raise ContractError("cannot collect styles from an empty dataset")
    if n <= max_samples:
        idx = np.arange(n)
    else:
        idx = np.sort(rng.choice(n, size=max_samples, replace=False))
    frozen = params if params.role != "student" else params.frozen("frozen_teacher")
    rows = []
    for i in range(0, len(idx), batch_size):
        h = run_layers(frozen, images[idx[i:i + batch_size]], 0, insertion_point)
        mu, sigma = style_stats(h.data, eps)
        rows.append(np.concatenate([mu, sigma], axis=1))
    return np.concatenate(rows), idx


# -- JSON export -------------------------------------------------------------

def styles_to_json(mu: np.ndarray, sigma: np.ndarray, selector: str | None = None) -> dict:
    return {"channels": int(mu.shape[1]), "selector": selector,
            "rows": [{"mu": m.tolist(), "sigma": s.tolist()} for m, s in zip(mu, sigma)]}


def save_styles_json(path, mu, sigma, selector=None) -> None:
    Path(path).write_text(json.dumps(styles_to_json(mu, sigma, selector)))


def load_styles_json(path) -> tuple[np.ndarray, np.ndarray, str | None]:
    try:
        doc = json.loads(Path(path).read_text())
        mu = np.array([r["mu"] for r in doc["rows"]], dtype=np.float64)
        sigma = np.array([r["sigma"] for r in doc["rows"]], dtype=np.float64)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad style JSON {path}: {exc}") from exc
    if mu.ndim != 2 or mu.shape[1] != doc["channels"]:
        raise FormatError(f"style JSON {path}: channel count mismatch")
    return mu, sigma, doc.get("selector")
