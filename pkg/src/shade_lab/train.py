"""Teacher pretraining and student training (ERM through full SHADE).

Randomness is split into independent streams so ablations stay aligned:

* the epoch shuffle and the style-pool subsample are pure functions of
  (seed, epoch), so any two configs with the same seed see the same batches;
* all style draws (Dirichlet weights, partners, Beta mixing weights, random
  styles) come from one Generator that advances whenever a style generator
  is configured, whatever the loss weights are.

Checkpoints capture that Generator, so resuming replays bit-exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import consistency, nn, style
from . import numerics as nx
from .data import Benchmark, broad_config, gen_domain
from .errors import ConfigError, FormatError, NumericError, StorageError
from .evaluation import ConfusionMatrix, evaluate, upsample_nearest
from .numerics import Tensor, downsample_nearest

GENERATORS = ("shm_fps", "shm_kmeans", "mixstyle", "crossnorm", "random")
METRIC_COLUMNS = ("epoch", "split", "domain", "task_loss", "sc_loss", "rc_loss",
                  "accuracy_or_miou", "lr", "basis_epoch")

# Rows of the component ablation, as TrainConfig overrides.
ABLATION_ROWS = {
    "erm": dict(use_shm=False, use_sc=False, use_rc=False, ce_on_stylized=False),
    "shm": dict(use_shm=True, use_sc=False, use_rc=False, ce_on_stylized=True),
    "shm_sc": dict(use_shm=True, use_sc=True, use_rc=False, ce_on_stylized=False),
    "shm_rc": dict(use_shm=True, use_sc=False, use_rc=True, rc_teacher="frozen",
                   ce_on_stylized=False),
    "shm_sc_ema": dict(use_shm=True, use_sc=True, use_rc=True, rc_teacher="ema",
                       ce_on_stylized=False),
    "shade": dict(use_shm=True, use_sc=True, use_rc=True, rc_teacher="frozen",
                  ce_on_stylized=False),
}


@dataclass(frozen=True)
class TrainConfig:
    task: str = "classification"
    use_shm: bool = True
    use_sc: bool = True
    use_rc: bool = True
    rc_teacher: str = "frozen"
    rc_branches: str = "both"
    ce_on_stylized: bool = False
    style_generator: str = "shm_fps"
    lambda_sc: float | None = None      # None -> task default
    lambda_rc: float | None = None
    insertion_point: int = 0
    interval_k: int | None = 3          # epochs between basis re-selections; None = once
    batch_size: int | None = None       # None -> 32 classification, 8 segmentation
    epochs: int = 6
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    power: float = 0.9
    ema_decay: float = 0.999
    pool_size: int = 1024
    kmeans_iters: int = 50
    init_from: str = "random"
    c0: int = 16
    c1: int = 32
    std_eps: float = nx.DEFAULT_STD_EPS
    seed: int = 0

    def __post_init__(self):
        if self.task not in nn.TASKS:
            raise ConfigError(f"task: must be one of {nn.TASKS}, got {self.task!r}")
        if self.style_generator not in GENERATORS:
            raise ConfigError(f"style_generator: must be one of {GENERATORS}")
        if self.rc_teacher not in ("frozen", "ema"):
            raise ConfigError("rc_teacher: must be 'frozen' or 'ema'")
        if self.rc_branches not in ("both", "stylized"):
            raise ConfigError("rc_branches: must be 'both' or 'stylized'")
        if self.init_from not in ("random", "teacher"):
            raise ConfigError("init_from: must be 'random' or 'teacher'")
        if (self.use_sc or self.use_rc or self.ce_on_stylized) and not self.use_shm:
            raise ConfigError("use_shm: SC, RC and ce_on_stylized need an active style generator")
        if self.interval_k is not None and self.interval_k < 1:
            raise ConfigError("interval_k: must be >= 1 (or null for a single selection)")
        if self.insertion_point not in (0, 1, 2):
            raise ConfigError("insertion_point: must be 0, 1 or 2")
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("batch_size: must be >= 2")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay: must lie in [0, 1)")
        for name in ("lambda_sc", "lambda_rc"):
            v = getattr(self, name)
            if v is not None and (not math.isfinite(v) or v < 0):
                raise ConfigError(f"{name}: must be finite and >= 0")

    # derived settings
    @property
    def batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if self.task == "classification" else 8

    @property
    def weights(self) -> consistency.LossWeights:
        d_sc, d_rc = consistency.DEFAULT_WEIGHTS[self.task]
        return consistency.LossWeights(d_sc if self.lambda_sc is None else self.lambda_sc,
                                       d_rc if self.lambda_rc is None else self.lambda_rc)

    @property
    def needs_frozen_teacher(self) -> bool:
        return (self.use_rc and self.rc_teacher == "frozen") or self.init_from == "teacher"

    def model_spec(self, num_classes: int) -> nn.ModelSpec:
        return nn.ModelSpec(self.task, num_classes, self.c0, self.c1, self.insertion_point)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown training option")
        d = dict(d)
        if d.get("interval_k") in ("inf", "none", "null"):
            d["interval_k"] = None
        return cls(**d)

    def with_row(self, row: str, **overrides) -> "TrainConfig":
        try:
            flags = ABLATION_ROWS[row]
        except KeyError:
            raise ConfigError(f"unknown ablation row {row!r}") from None
        return replace(self, **{**flags, **overrides})


def num_classes_for(task: str, benchmark: Benchmark) -> int:
    k = benchmark.source.num_classes
    return k - 1 if task == "classification" else k


# -- style generators ---------------------------------------------------------

class StyleGenerator:
    """Produces the stylized branch from insertion-point features.

    `draw` consumes the style Generator and must not look at features, so a
    step's randomness is fixed before its forward pass; `apply` is then a
    deterministic function of (features, draw).
    """

    def __init__(self, kind: str, channels: int, eps: float):
        self.kind = kind
        self.channels = channels
        self.eps = eps

    def draw(self, n: int, rng: np.random.Generator) -> dict:
        c = self.channels
        if self.kind in ("shm_fps", "shm_kmeans"):
            return {"w": style.sample_dirichlet(c, rng, size=n)}
        if self.kind == "mixstyle":
            return {"perm": rng.permutation(n), "lam": rng.beta(0.1, 0.1, size=n)}
        if self.kind == "crossnorm":
            return {"perm": rng.permutation(n)}
        mu, sigma = style.random_style(c, rng, size=n)
        return {"mu": mu, "sigma": sigma}

    def apply(self, h: Tensor, draw: dict, basis: style.BasisStyles | None) -> Tensor:
        if self.kind in ("shm_fps", "shm_kmeans"):
            return style.apply_style(h, style.hallucinate(basis, draw["w"]), self.eps)
        if self.kind == "mixstyle":
            return style.mixstyle_batch(h, None, eps=self.eps, perm=draw["perm"], lam=draw["lam"])
        if self.kind == "crossnorm":
            return style.crossnorm_batch(h, None, eps=self.eps, perm=draw["perm"])
        return style.apply_style(h, (draw["mu"], draw["sigma"]), self.eps)

    @property
    def uses_basis(self) -> bool:
        return self.kind in ("shm_fps", "shm_kmeans")


def reselect_basis(params: nn.ModelParams, images: np.ndarray, cfg: TrainConfig, epoch: int
                   ) -> style.BasisStyles:
    """Collect the current style pool and pick C basis styles from it."""
    rng = np.random.default_rng([cfg.seed, epoch, 11])
    pool, _ = style.collect_styles(params, images, cfg.insertion_point, cfg.pool_size, rng,
                                   eps=cfg.std_eps)
    c = params.spec.style_channels
    if cfg.style_generator == "shm_kmeans":
        seed = int(rng.integers(2**31))
        return style.kmeans_select(pool, c, seed, cfg.kmeans_iters, selected_at=epoch)
    return style.fps_select(pool, c, selected_at=epoch)


# -- training ---------------------------------------------------------------

@dataclass
class StepLosses:
    task: float
    sc: float | None
    rc: float | None
    total: float


class Trainer:
    """Owns one student run; `run()` advances it, possibly in several calls."""

    def __init__(self, benchmark: Benchmark, cfg: TrainConfig,
                 teacher: nn.ModelParams | None = None, train_images=None, train_targets=None,
                 log_metrics: bool = True):
        if cfg.needs_frozen_teacher and teacher is None:
            what = "rc_teacher=frozen" if cfg.use_rc and cfg.rc_teacher == "frozen" else "init_from=teacher"
            raise ConfigError(f"teacher: {what} needs a pretrained teacher")
        self.benchmark = benchmark
        self.cfg = cfg
        self.task = cfg.task
        k = num_classes_for(cfg.task, benchmark)
        self.spec = cfg.model_spec(k)
        if teacher is not None and teacher.spec.to_dict() | {"insertion_point": 0} != \
                self.spec.to_dict() | {"insertion_point": 0}:
            raise ConfigError("teacher: architecture does not match the student")
        self.teacher = teacher.frozen("frozen_teacher") if teacher is not None else None
        self.images = benchmark.source.images if train_images is None else train_images
        self.targets = (benchmark.source.targets(cfg.task) if train_targets is None
                        else train_targets)
        self.log_metrics = log_metrics

        if cfg.init_from == "teacher":
            self.params = nn.ModelParams(self.spec, {k_: Tensor(t.data.copy(), requires_grad=True)
                                                     for k_, t in self.teacher.tensors.items()},
                                         "student")
        else:
            self.params = nn.init_params(self.spec, cfg.seed)
        self.steps_per_epoch = len(self.images) // cfg.batch
        if self.steps_per_epoch < 1:
            raise ConfigError("batch_size: larger than the training set")
        self.max_iter = cfg.epochs * self.steps_per_epoch
        self.optim = nn.OptimState(cfg.base_lr, cfg.momentum, cfg.weight_decay, cfg.power,
                                   self.max_iter)
        self.ema = (self.params.copy("ema_teacher")
                    if cfg.use_rc and cfg.rc_teacher == "ema" else None)
        self.generator = (StyleGenerator(cfg.style_generator, self.spec.style_channels, cfg.std_eps)
                          if cfg.use_shm else None)
        self.style_rng = np.random.default_rng([cfg.seed, 3])
        self.basis: style.BasisStyles | None = None
        self.iteration = 0
        self.metrics: list[dict] = []
        self._reset_epoch_stats()
        self.step_log: list[StepLosses] = []
        self.on_step: Callable[[int, StepLosses], None] | None = None

    # -- bookkeeping
    def _reset_epoch_stats(self) -> None:
        self.epoch_stats = {"task": 0.0, "sc": 0.0, "rc": 0.0, "steps": 0,
                            "confusion": np.zeros((self.spec.num_classes,) * 2, dtype=np.int64),
                            "lr": None}

    @property
    def epoch(self) -> int:
        return self.iteration // self.steps_per_epoch

    @property
    def finished(self) -> bool:
        return self.iteration >= self.max_iter

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.cfg.seed, epoch, 7]).permutation(len(self.images))

    def _maybe_reselect(self, epoch: int) -> None:
        if self.generator is None or not self.generator.uses_basis:
            return
        k = self.cfg.interval_k
        due = self.basis is None or (k is not None and epoch % k == 0
                                     and self.basis.selected_at != epoch)
        if due:
            self.basis = reselect_basis(self.params, self.images, self.cfg, epoch)

    # -- one step
    def _forward(self, x, y, mask_small, draw):
        cfg, params = self.cfg, self.params
        ins = self.spec.insertion_point
        h = nn.run_layers(params, x, 0, ins)
        f_o = nn.run_layers(params, h, ins + 1, 2) if ins < 2 else h
        logits_o = nn.head(params, f_o)
        l_task = nn.task_loss(logits_o, y, self.task)
        sc = rc = None
        if self.generator is not None:
            h_s = self.generator.apply(h, draw, self.basis)
            f_s = nn.run_layers(params, h_s, ins + 1, 2) if ins < 2 else h_s
            logits_s = nn.head(params, f_s)
            if cfg.ce_on_stylized:
                l_task = nx.scalar_affine(nx.add(l_task, nn.task_loss(logits_s, y, self.task)), 0.5)
            if cfg.use_sc:
                sc = consistency.sc_loss(nx.softmax(logits_o), nx.softmax(logits_s), self.task)
            if cfg.use_rc:
                ref = self.teacher if cfg.rc_teacher == "frozen" else self.ema
                f_t = nn.retro_feature(ref, nn.backbone(ref, x))
                rc = consistency.rc_loss(nn.retro_feature(params, f_o), f_t, self.task,
                                         f_styl=nn.retro_feature(params, f_s),
                                         fg_mask=None if mask_small is None else mask_small > 0,
                                         branches=cfg.rc_branches)
        total = consistency.total_loss(l_task, sc, rc, cfg.weights)
        return total, l_task, sc, rc, logits_o

    def step(self) -> StepLosses:
        cfg = self.cfg
        epoch = self.epoch
        b = self.iteration % self.steps_per_epoch
        if b == 0:
            self._maybe_reselect(epoch)
        idx = self._permutation(epoch)[b * cfg.batch:(b + 1) * cfg.batch]
        x = self.images[idx]
        y = self.targets[idx]
        mask_small = None
        if self.task == "segmentation":
            y = downsample_nearest(y, 2)
            mask_small = y
        draw = self.generator.draw(len(idx), self.style_rng) if self.generator else None
        lr = nn.poly_lr(self.iteration, self.optim)

        self.params.zero_grad()
        total, l_task, sc, rc, logits = self._forward(x, y, mask_small, draw)
        if not np.isfinite(total.data).all():
            self._diagnose(x, y, mask_small, draw)
        nx.backward(total)
        nn.sgd_step(self.params, self.optim, lr)
        if self.ema is not None:
            nn.ema_update(self.ema, self.params, cfg.ema_decay)

        out = StepLosses(l_task.item(), None if sc is None else sc.item(),
                         None if rc is None else rc.item(), total.item())
        st = self.epoch_stats
        st["task"] += out.task
        st["sc"] += out.sc or 0.0
        st["rc"] += out.rc or 0.0
        st["steps"] += 1
        if st["lr"] is None:
            st["lr"] = lr
        pred = logits.data.argmax(axis=1)
        st["confusion"] += ConfusionMatrix.from_labels(y, pred, self.spec.num_classes).counts
        self.iteration += 1
        if self.on_step is not None:
            self.on_step(self.iteration, out)
        if self.iteration % self.steps_per_epoch == 0:
            self._end_epoch(epoch)
        return out

    def _diagnose(self, x, y, mask_small, draw):
        op = None
        try:
            with nx.debug_checks():
                self._forward(x, y, mask_small, draw)
        except NumericError as exc:
            op = exc.op
        raise NumericError("non-finite training loss", op=op or "total_loss",
                           iteration=self.iteration)

    def _end_epoch(self, epoch: int) -> None:
        if not self.log_metrics:
            self._reset_epoch_stats()
            return
        st = self.epoch_stats
        n = st["steps"]
        cm = ConfusionMatrix(st["confusion"])
        basis_epoch = "" if self.basis is None else self.basis.selected_at
        train_metric = cm.accuracy() if self.task == "classification" else cm.miou()
        self.metrics.append({
            "epoch": epoch, "split": "train", "domain": "source",
            "task_loss": st["task"] / n,
            "sc_loss": st["sc"] / n if self.cfg.use_sc else "",
            "rc_loss": st["rc"] / n if self.cfg.use_rc else "",
            "accuracy_or_miou": train_metric, "lr": st["lr"], "basis_epoch": basis_epoch,
        })
        evals = [("val", self.benchmark.source_val)]
        if epoch == self.cfg.epochs - 1:
            evals += [("test", t) for t in self.benchmark.targets]
        for split, ds in evals:
            r = evaluate(self.params, ds, self.task)
            self.metrics.append({
                "epoch": epoch, "split": split, "domain": ds.name, "task_loss": r["loss"],
                "sc_loss": "", "rc_loss": "", "accuracy_or_miou": r["metric"],
                "lr": st["lr"], "basis_epoch": basis_epoch,
            })
        self._reset_epoch_stats()

    def run(self, until: int | None = None) -> "Trainer":
        stop = self.max_iter if until is None else min(until, self.max_iter)
        while self.iteration < stop:
            self.step()
        return self

    # -- results
    def final_metrics(self) -> dict[str, float]:
        last = self.cfg.epochs - 1
        return {r["domain"] if r["split"] == "test" else f"source_{r['split']}": r["accuracy_or_miou"]
                for r in self.metrics if r["epoch"] == last and r["split"] in ("val", "test")}

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.metrics:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def write_metrics(self, path) -> None:
        _atomic_write(Path(path), self.metrics_csv().encode())

    # -- checkpointing
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"student/{k}": t.data for k, t in self.params.tensors.items()}
        arrays.update({f"momentum/{k}": v for k, v in self.optim.buffers.items()})
        if self.ema is not None:
            arrays.update({f"ema/{k}": t.data for k, t in self.ema.tensors.items()})
        basis_meta = None
        if self.basis is not None:
            arrays["basis/mu"] = self.basis.mu_base
            arrays["basis/sigma"] = self.basis.sigma_base
            basis_meta = {"selector": self.basis.selector, "selected_at": self.basis.selected_at,
                          "indices": None if self.basis.indices is None
                          else self.basis.indices.tolist()}
        arrays["epoch_stats/confusion"] = self.epoch_stats["confusion"].astype(np.float64)
        meta = {
            "config": self.cfg.to_dict(),
            "spec": self.spec.to_dict(),
            "iteration": self.iteration,
            "optim": {"base_lr": self.optim.base_lr, "momentum": self.optim.momentum,
                      "weight_decay": self.optim.weight_decay, "power": self.optim.power,
                      "max_iter": self.optim.max_iter},
            "style_rng": self.style_rng.bit_generator.state,
            "basis": basis_meta,
            "epoch_stats": {k: v for k, v in self.epoch_stats.items() if k != "confusion"},
            "metrics": self.metrics,
            "teacher_digest": None if self.teacher is None else self.teacher.digest(),
        }
        return meta, arrays

    def save_checkpoint(self, path) -> None:
        meta, arrays = self.state()
        write_blob(path, "checkpoint", meta, arrays)

    @classmethod
    def from_checkpoint(cls, path, benchmark: Benchmark, teacher: nn.ModelParams | None = None
                        ) -> "Trainer":
        kind, meta, arrays = read_blob(path)
        if kind != "checkpoint":
            raise FormatError(f"{path}: expected a training checkpoint, found {kind!r}")
        cfg = TrainConfig.from_dict(meta["config"])
        if teacher is not None and meta["teacher_digest"] not in (None, teacher.digest()):
            raise ConfigError("teacher: differs from the one the checkpoint was trained with")
        tr = cls(benchmark, cfg, teacher)
        for k, t in tr.params.tensors.items():
            t.data = arrays[f"student/{k}"]
        tr.optim.buffers = {k[len("momentum/"):]: v for k, v in arrays.items()
                            if k.startswith("momentum/")}
        if tr.ema is not None:
            for k, t in tr.ema.tensors.items():
                t.data = arrays[f"ema/{k}"]
        if meta["basis"] is not None:
            b = meta["basis"]
            tr.basis = style.BasisStyles(arrays["basis/mu"], arrays["basis/sigma"], b["selector"],
                                         b["selected_at"],
                                         None if b["indices"] is None else np.array(b["indices"]))
        tr.style_rng.bit_generator.state = meta["style_rng"]
        tr.iteration = meta["iteration"]
        tr.metrics = meta["metrics"]
        tr.epoch_stats = dict(meta["epoch_stats"])
        tr.epoch_stats["confusion"] = arrays["epoch_stats/confusion"].astype(np.int64)
        return tr


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train_student(benchmark: Benchmark, teacher: nn.ModelParams | None, cfg: TrainConfig
                  ) -> Trainer:
    return Trainer(benchmark, cfg, teacher).run()


def teacher_config(cfg: TrainConfig, epochs: int | None = None) -> TrainConfig:
    return replace(cfg.with_row("erm"), init_from="random", insertion_point=0,
                   epochs=epochs or cfg.epochs)


def pretrain_teacher(benchmark: Benchmark, cfg: TrainConfig, epochs: int | None = None,
                     n_samples: int | None = None) -> nn.ModelParams:
    """ERM on a broad-style variant of the source generator, then freeze."""
    tcfg = teacher_config(cfg, epochs)
    src = benchmark.source.provenance
    broad = gen_domain(broad_config(src, n_samples=n_samples or len(benchmark.source),
                                    seed=_teacher_seed(src.seed, cfg.seed)))
    trainer = Trainer(benchmark, tcfg, None, train_images=broad.images,
                      train_targets=broad.targets(cfg.task), log_metrics=False)
    trainer.run()
    return trainer.params.frozen("frozen_teacher")


def _teacher_seed(source_seed: int, seed: int) -> int:
    return int(np.random.SeedSequence([source_seed, seed, 5]).generate_state(1)[0])


# -- binary blobs (checkpoints and teacher weights) --------------------------

CKPT_MAGIC = b"SHDCKPT\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIII")   # magic, version, meta length, crc32


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def write_blob(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    meta_bytes = json.dumps({"kind": kind, "meta": meta, "arrays": manifest}).encode()
    body = meta_bytes + b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes()
                                 for v in arrays.values())
    header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(meta_bytes), zlib.crc32(body))
    _atomic_write(Path(path), header + body)


def read_blob(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, meta_len, crc = _CKPT_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    body = raw[_CKPT_HEADER.size:]
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    try:
        doc = json.loads(body[:meta_len])
        arrays, off = {}, meta_len
        for entry in doc["arrays"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arrays[entry["name"]] = np.frombuffer(body, "<f8", count, off).astype(
                np.float64).reshape(entry["shape"])
            off += 8 * count
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: malformed payload: {exc}") from exc
    return doc["kind"], doc["meta"], arrays


def save_params(params: nn.ModelParams, path) -> None:
    write_blob(path, "params", {"spec": params.spec.to_dict(), "role": params.role,
                                "digest": params.digest()},
               {k: t.data for k, t in params.tensors.items()})


def load_params(path) -> nn.ModelParams:
    kind, meta, arrays = read_blob(path)
    if kind != "params":
        raise FormatError(f"{path}: expected model parameters, found {kind!r}")
    spec = nn.ModelSpec(**meta["spec"])
    role = meta["role"]
    params = nn.ModelParams(spec, {k: Tensor(v, requires_grad=(role == "student"))
                                   for k, v in arrays.items()}, role)
    if params.digest() != meta["digest"]:
        raise FormatError(f"{path}: parameter digest mismatch")
    return params
