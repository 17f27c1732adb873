"""Synthetic multi-domain shape benchmark with a style-only domain gap.

Every image holds one foreground shape on a textured background. Geometry
and texture ("content") come from one random stream per image, the style
(per-RGB-channel gain and bias drawn from a mixture of modes, plus pixel
noise) from a second stream, so two configs that differ only in their style
modes produce identical masks and labels.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, StorageError

SHAPES = ("rectangle", "ellipse", "triangle", "cross")
FG_MIN, FG_MAX = 0.05, 0.6

MAGIC = b"SHDDATA\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")


@dataclass
class StyleMode:
    weight: float
    gain_mean: tuple[float, float, float] = (1.0, 1.0, 1.0)
    gain_std: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bias_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bias_std: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.0


@dataclass
class DomainConfig:
    name: str
    n_samples: int
    style_modes: list[StyleMode]
    seed: int = 0
    image_size: int = 32
    num_classes: int = 5          # background + foreground shape kinds
    shape_scale: tuple[float, float] = (0.28, 0.62)

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("n_samples: must be >= 1")
        if not 2 <= self.num_classes <= len(SHAPES) + 1:
            raise ConfigError(f"num_classes: must lie in [2, {len(SHAPES) + 1}]")
        if self.image_size < 8:
            raise ConfigError("image_size: must be >= 8")
        lo, hi = self.shape_scale
        if not 0 < lo <= hi:
            raise ConfigError("shape_scale: need 0 < min <= max")
        if hi > 1.0:
            raise ConfigError(f"shape_scale: max {hi} makes shapes larger than the canvas")
        if not self.style_modes:
            raise ConfigError("style_modes: at least one mode required")
        total = sum(m.weight for m in self.style_modes)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"style_modes.weight: weights sum to {total}, expected 1")
        for i, m in enumerate(self.style_modes):
            if m.weight < 0:
                raise ConfigError(f"style_modes[{i}].weight: must be >= 0")
            if min(m.gain_mean) <= 0:
                raise ConfigError(f"style_modes[{i}].gain_mean: gains must be > 0")
            if min(m.gain_std) < 0 or min(m.bias_std) < 0 or m.noise_std < 0:
                raise ConfigError(f"style_modes[{i}]: standard deviations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainConfig":
        try:
            modes = [StyleMode(**{k: tuple(v) if isinstance(v, list) else v for k, v in m.items()})
                     for m in d["style_modes"]]
            rest = {k: v for k, v in d.items() if k != "style_modes"}
            if "shape_scale" in rest:
                rest["shape_scale"] = tuple(rest["shape_scale"])
            return cls(style_modes=modes, **rest)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"domain config: {exc}") from exc


@dataclass
class DomainDataset:
    images: np.ndarray          # (N, 3, H, W) float64
    class_labels: np.ndarray    # (N,) int32, 1..K-1 (mask convention)
    pixel_masks: np.ndarray     # (N, H, W) int32, 0 = background
    provenance: DomainConfig
    modes: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def name(self) -> str:
        return self.provenance.name

    @property
    def num_classes(self) -> int:
        return self.provenance.num_classes

    def targets(self, task: str) -> np.ndarray:
        """Classification targets are 0-based shape ids; segmentation uses masks."""
        return self.class_labels - 1 if task == "classification" else self.pixel_masks


# -- rendering ---------------------------------------------------------------

def _shape_mask(kind: str, size: int, rng: np.random.Generator, scale: tuple[float, float]
                ) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    lo, hi = scale[0] * size, scale[1] * size
    w, h = rng.uniform(lo, hi, size=2)
    cx = rng.uniform(w / 2, size - w / 2)
    cy = rng.uniform(h / 2, size - h / 2)
    dx, dy = xx - cx, yy - cy
    if kind == "rectangle":
        return (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)
    if kind == "ellipse":
        return (dx / (w / 2)) ** 2 + (dy / (h / 2)) ** 2 <= 1.0
    if kind == "triangle":
        # apex up, base at the bottom of the bounding box
        rel = (dy + h / 2) / h
        return (rel >= 0) & (rel <= 1) & (np.abs(dx) <= rel * w / 2)
    if kind == "cross":
        t = rng.uniform(0.22, 0.34) * min(w, h)
        inside = (np.abs(dx) <= w / 2) & (np.abs(dy) <= h / 2)
        return inside & ((np.abs(dx) <= t / 2) | (np.abs(dy) <= t / 2))
    raise ConfigError(f"unknown shape {kind!r}")


def _stripes(size: int, rng: np.random.Generator, angle: float, period: float,
             base: float, amp: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    phase = rng.uniform(0, 2 * math.pi)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    return base + amp * np.sin(2 * math.pi * u / period + phase)


def render_content(cfg: DomainConfig, index: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Unstyled RGB content in [0, 1], its mask, and the shape class (1-based)."""
    rng = np.random.default_rng([cfg.seed, index, 0])
    size = cfg.image_size
    cls = int(rng.integers(1, cfg.num_classes))
    kind = SHAPES[cls - 1]
    for _ in range(1000):
        mask = _shape_mask(kind, size, rng, cfg.shape_scale)
        if FG_MIN <= mask.mean() <= FG_MAX:
            break
    else:
        raise ConfigError(f"could not place a {kind} covering {FG_MIN}-{FG_MAX} of the canvas")
    tint = rng.uniform(-0.04, 0.04, size=(3, 1, 1))
    # Background: slow waves at any angle. Foreground: fine stripes whose
    # orientation is tied to the shape class, so a pixel's class is visible
    # within a small neighbourhood.
    bg = _stripes(size, rng, rng.uniform(0, math.pi), rng.uniform(14, 28),
                  rng.uniform(0.2, 0.35), 0.06)
    angle = (cls - 1) * math.pi / (cfg.num_classes - 1) + rng.uniform(-0.12, 0.12)
    fg = _stripes(size, rng, angle, rng.uniform(4.0, 5.5), rng.uniform(0.6, 0.75), 0.15)
    gray = np.where(mask, fg, bg)
    content = np.clip(gray[None] + tint + 0.02 * rng.standard_normal((3, size, size)), 0.0, 1.0)
    return content, mask.astype(np.int32) * cls, cls


def _draw_style(cfg: DomainConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index, 1])
    weights = np.array([m.weight for m in cfg.style_modes])
    k = int(rng.choice(len(weights), p=weights / weights.sum()))
    m = cfg.style_modes[k]
    gain = np.maximum(rng.normal(m.gain_mean, m.gain_std), 0.05)
    bias = rng.normal(m.bias_mean, m.bias_std)
    return k, gain, bias, m.noise_std, rng


def gen_domain(cfg: DomainConfig) -> DomainDataset:
    cfg.validate()
    n, size = cfg.n_samples, cfg.image_size
    images = np.empty((n, 3, size, size))
    masks = np.empty((n, size, size), dtype=np.int32)
    labels = np.empty(n, dtype=np.int32)
    modes = np.empty(n, dtype=np.int32)
    for i in range(n):
        content, mask, cls = render_content(cfg, i)
        k, gain, bias, noise, rng = _draw_style(cfg, i)
        img = gain[:, None, None] * content + bias[:, None, None]
        if noise > 0:
            img = img + noise * rng.standard_normal(img.shape)
        images[i] = np.maximum(img, 0.0)
        masks[i] = mask
        labels[i] = cls
        modes[i] = k
    return DomainDataset(images, labels, masks, cfg, modes)


# -- the default benchmark -----------------------------------------------------

def _mode(weight, gain, bias, gain_std=0.08, bias_std=0.04, noise=0.03) -> StyleMode:
    return StyleMode(weight, tuple(gain), (gain_std,) * 3, tuple(bias), (bias_std,) * 3, noise)


def source_modes() -> list[StyleMode]:
    """One dominant daylight-like mode and two rare tinted modes."""
    return [
        _mode(0.8, (1.0, 1.0, 1.0), (0.10, 0.10, 0.10)),
        _mode(0.1, (0.70, 0.85, 1.25), (0.25, 0.15, 0.00)),
        _mode(0.1, (1.25, 1.05, 0.70), (0.00, 0.10, 0.30)),
    ]


def target_modes() -> list[tuple[str, StyleMode]]:
    """Held-out modes, ordered by distance from the dominant source mode."""
    return [
        ("haze", _mode(1.0, (0.70, 0.72, 0.80), (0.45, 0.45, 0.40))),
        ("dusk", _mode(1.0, (0.45, 0.50, 0.65), (0.05, 0.05, 0.12))),
        ("neon", _mode(1.0, (1.60, 0.55, 1.45), (0.05, 0.45, 0.00))),
    ]


def derive_seed(master: int, tag: str) -> int:
    ss = np.random.SeedSequence([int(master), zlib.crc32(tag.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class Benchmark:
    source: DomainDataset
    source_val: DomainDataset
    targets: list[DomainDataset]
    seed: int = 0

    def domains(self) -> list[tuple[str, DomainDataset]]:
        return ([("source_train", self.source), ("source_val", self.source_val)]
                + [(f"target_{t.name}", t) for t in self.targets])


def benchmark_configs(seed: int = 0, image_size: int = 32, n_train: int = 2000,
                      n_val: int = 500, n_target: int = 500, num_classes: int = 5,
                      shape_scale: tuple[float, float] = (0.28, 0.62),
                      source: list[StyleMode] | None = None,
                      targets: list[tuple[str, StyleMode]] | None = None
                      ) -> dict[str, DomainConfig]:
    common = dict(image_size=image_size, num_classes=num_classes, shape_scale=tuple(shape_scale))
    src = source_modes() if source is None else source
    cfgs = {
        "source_train": DomainConfig("source", n_train, src,
                                     derive_seed(seed, "source_train"), **common),
        "source_val": DomainConfig("source", n_val, src,
                                   derive_seed(seed, "source_val"), **common),
    }
    for name, mode in (target_modes() if targets is None else targets):
        cfgs[f"target_{name}"] = DomainConfig(name, n_target, [mode],
                                              derive_seed(seed, f"target_{name}"), **common)
    return cfgs


def make_benchmark(seed: int = 0, **options) -> Benchmark:
    cfgs = benchmark_configs(seed, **options)
    targets = [gen_domain(c) for k, c in cfgs.items() if k.startswith("target_")]
    return Benchmark(gen_domain(cfgs["source_train"]), gen_domain(cfgs["source_val"]),
                     targets, seed)


BENCHMARK_KEYS = ("seed", "image_size", "n_train", "n_val", "n_target", "num_classes",
                  "shape_scale", "source_modes", "target_modes")


def _mode_from_dict(d: dict, where: str) -> StyleMode:
    known = {f.name for f in fields(StyleMode)}
    for key in d:
        if key not in known:
            raise ConfigError(f"{where}.{key}: unknown style mode field")
    if "weight" not in d:
        raise ConfigError(f"{where}.weight: required")
    vals = {}
    for key, v in d.items():
        if key in ("weight", "noise_std"):
            vals[key] = float(v)
        else:
            if len(v) != 3:
                raise ConfigError(f"{where}.{key}: expected 3 per-channel values")
            vals[key] = tuple(float(x) for x in v)
    return StyleMode(**vals)


def benchmark_options(doc: dict) -> dict:
    """Turn a flat JSON config into keyword arguments for `make_benchmark`.

    Keys outside BENCHMARK_KEYS are ignored (a file may carry training
    options too); `source_modes` is a list of style-mode objects and
    `target_modes` a list of objects with an extra "name". All generated
    domains are validated here, so errors name the offending key.
    """
    opts = {k: doc[k] for k in BENCHMARK_KEYS if k in doc and k not in
            ("source_modes", "target_modes")}
    for key in ("seed", "image_size", "n_train", "n_val", "n_target", "num_classes"):
        if key in opts and (not isinstance(opts[key], int) or isinstance(opts[key], bool)):
            raise ConfigError(f"{key}: expected an integer")
    if "source_modes" in doc:
        opts["source"] = [_mode_from_dict(m, f"source_modes[{i}]")
                          for i, m in enumerate(doc["source_modes"])]
    if "target_modes" in doc:
        targets = []
        for i, m in enumerate(doc["target_modes"]):
            m = dict(m)
            name = m.pop("name", None)
            if not name:
                raise ConfigError(f"target_modes[{i}].name: required")
            targets.append((str(name), replace(_mode_from_dict(m, f"target_modes[{i}]"),
                                               weight=1.0)))
        opts["targets"] = targets
    seed = opts.pop("seed", 0)
    for split, cfg in benchmark_configs(seed, **opts).items():
        try:
            cfg.validate()
        except ConfigError as exc:
            key = "source_modes" if split.startswith("source") else "target_modes"
            raise ConfigError(str(exc).replace("style_modes", key)) from None
    opts["seed"] = seed
    return opts


def broad_config(cfg: DomainConfig, n_samples: int | None = None, widen: float = 2.5,
                 seed: int | None = None) -> DomainConfig:
    """Equal-weight modes with widened gain/bias spread: the teacher's data."""
    k = len(cfg.style_modes)
    modes = [replace(m, weight=1.0 / k,
                     gain_std=tuple(widen * s + 0.1 for s in m.gain_std),
                     bias_std=tuple(widen * s + 0.05 for s in m.bias_std))
             for m in cfg.style_modes]
    # make the weights sum to exactly 1 in floating point
    modes[-1] = replace(modes[-1], weight=1.0 - sum(m.weight for m in modes[:-1]))
    return replace(cfg, name=f"{cfg.name}_broad", style_modes=modes,
                   n_samples=n_samples or cfg.n_samples,
                   seed=derive_seed(cfg.seed, "broad") if seed is None else seed)


# -- persistence ---------------------------------------------------------------

def save_dataset(ds: DomainDataset, path) -> None:
    path = Path(path)
    n, c, h, w = ds.images.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, h, w, ds.num_classes)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.class_labels, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(ds.pixel_masks, dtype="<i4").tobytes())
        sidecar = {"format_version": FORMAT_VERSION, "provenance": ds.provenance.to_dict()}
        if ds.modes is not None:
            sidecar["mode_counts"] = np.bincount(
                ds.modes, minlength=len(ds.provenance.style_modes)).tolist()
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=1))
    except OSError as exc:
        raise StorageError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path) -> DomainDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
        sidecar = json.loads(Path(str(path) + ".json").read_text())
    except OSError as exc:
        raise StorageError(f"cannot read dataset {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad provenance sidecar for {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise StorageError(f"{path}: truncated header")
    magic, version, n, h, w, k = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    n_img, n_mask = n * 3 * h * w, n * h * w
    expected = _HEADER.size + 8 * n_img + 4 * n + 4 * n_mask
    if len(raw) < expected:
        raise StorageError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes")
    off = _HEADER.size
    images = np.frombuffer(raw, "<f8", n_img, off).astype(np.float64).reshape(n, 3, h, w)
    off += 8 * n_img
    labels = np.frombuffer(raw, "<i4", n, off).astype(np.int32)
    off += 4 * n
    masks = np.frombuffer(raw, "<i4", n_mask, off).astype(np.int32).reshape(n, h, w)
    prov = DomainConfig.from_dict(sidecar["provenance"])
    if prov.num_classes != k:
        raise FormatError(f"{path}: header K={k} disagrees with provenance")
    return DomainDataset(images, labels, masks, prov)


def save_benchmark(bm: Benchmark, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {"seed": bm.seed, "domains": []}
    for split, ds in bm.domains():
        fname = f"{split}.bin"
        save_dataset(ds, out / fname)
        index["domains"].append({"split": split, "name": ds.name, "file": fname})
    (out / "benchmark.json").write_text(json.dumps(index, indent=1))
    return out


def load_benchmark(data_dir) -> Benchmark:
    d = Path(data_dir)
    try:
        index = json.loads((d / "benchmark.json").read_text())
    except OSError as exc:
        raise StorageError(f"cannot read benchmark index in {d}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad benchmark index in {d}: {exc}") from exc
    by_split = {e["split"]: load_dataset(d / e["file"]) for e in index["domains"]}
    targets = [ds for s, ds in by_split.items() if s.startswith("target_")]
    return Benchmark(by_split["source_train"], by_split["source_val"], targets,
                     index.get("seed", 0))


def export_png(ds: DomainDataset, out_dir, limit: int = 16) -> list[Path]:
    """8-bit previews (values clipped to [0, 2]) for eyeballing only."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(min(limit, len(ds))):
        arr = np.clip(ds.images[i].transpose(1, 2, 0) / 2.0, 0, 1)
        p = out / f"{ds.name}_{i:04d}.png"
        Image.fromarray((arr * 255).round().astype(np.uint8)).save(p)
        paths.append(p)
    return paths
