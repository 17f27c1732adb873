"""Component ablation and style-variation grids over several seeds.

Cells are keyed by their full TrainConfig, so a configuration that appears
in both tables (the ERM baseline, and full SHADE with the FPS basis) is
trained once per seed and reported identically in each.
"""
from __future__ import annotations

import csv
import io
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .errors import ContractError, ShadeLabError
from .evaluation import generalization_gap
from .train import TrainConfig, train_student

# (row id, label, TrainConfig overrides)
ABLATION_GRID = (
    ("1", "ERM", dict(row="erm")),
    ("2", "SHM", dict(row="shm")),
    ("3", "SHM+SC", dict(row="shm_sc")),
    ("4", "SHM+RC", dict(row="shm_rc")),
    ("5", "SHM+SC+EMA", dict(row="shm_sc_ema")),
    ("6", "SHADE", dict(row="shade")),
)
STYLE_GRID = (
    ("baseline", "Baseline", dict(row="erm")),
    ("random", "Random Style", dict(row="shade", style_generator="random")),
    ("mixstyle", "MixStyle", dict(row="shade", style_generator="mixstyle")),
    ("crossnorm", "CrossNorm", dict(row="shade", style_generator="crossnorm")),
    ("kmeans", "Kmeans Basis", dict(row="shade", style_generator="shm_kmeans")),
    ("fps", "FPS Basis", dict(row="shade", style_generator="shm_fps")),
)
TABLES = {"ablation": ABLATION_GRID, "style_variation": STYLE_GRID}


def cell_config(base: TrainConfig, spec: dict, seed: int) -> TrainConfig:
    spec = dict(spec)
    row = spec.pop("row")
    cfg = base.with_row(row, seed=seed, **spec)
    if row == "erm":
        # the generator is inert without SHM; pin it so ERM cells coincide
        cfg = replace(cfg, style_generator="shm_fps")
    return cfg


@dataclass
class AblationResult:
    table: str
    row_id: str
    label: str
    seed: int
    config: TrainConfig
    source: float | None = None
    targets: dict[str, float] | None = None
    error: str | None = None

    @property
    def target_mean(self) -> float | None:
        return None if self.targets is None else float(np.mean(list(self.targets.values())))

    @property
    def gap(self) -> float | None:
        if self.targets is None:
            return None
        return generalization_gap(self.source, self.targets.values())


def _run_cell(benchmark, teacher, cfg: TrainConfig):
    try:
        m = train_student(benchmark, teacher if cfg.needs_frozen_teacher else None,
                          cfg).final_metrics()
    except ShadeLabError as exc:
        return None, f"{exc.category}: {exc}"
    except Exception as exc:  # noqa: BLE001 - annotate the cell, keep the grid going
        return None, f"internal: {exc!r} " + traceback.format_exc(limit=1).splitlines()[-1]
    source = m.pop("source_val")
    return (source, m), None


def run_ablation(benchmark, base_cfg: TrainConfig, seeds, teacher: nn.ModelParams | None = None,
                 tables=("ablation", "style_variation"), jobs: int = 1, progress=None
                 ) -> dict[str, list[AblationResult]]:
    """Train every distinct cell once and assemble per-table results."""
    seeds = list(seeds)
    if not seeds:
        raise ContractError("run_ablation needs at least one seed")
    layout = {name: [(rid, label, cell_config(base_cfg, spec, s), s)
                     for rid, label, spec in TABLES[name] for s in seeds]
              for name in tables}
    unique = list(dict.fromkeys(cfg for rows in layout.values() for *_, cfg, _ in rows))

    outcomes = {}
    if jobs > 1 and len(unique) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {cfg: pool.submit(_run_cell, benchmark, teacher, cfg) for cfg in unique}
            for cfg, fut in futures.items():
                outcomes[cfg] = fut.result()
                if progress:
                    progress(cfg, outcomes[cfg])
    else:
        for cfg in unique:
            outcomes[cfg] = _run_cell(benchmark, teacher, cfg)
            if progress:
                progress(cfg, outcomes[cfg])

    out = {}
    for name, rows in layout.items():
        results = []
        for rid, label, cfg, s in rows:
            value, err = outcomes[cfg]
            r = AblationResult(name, rid, label, s, cfg, error=err)
            if value is not None:
                r.source, r.targets = value
            results.append(r)
        out[name] = results
    return out


def _mean_sd(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def summary_csv(results: list[AblationResult], target_names) -> str:
    """One row per table row: mean and sd over successful seeds per column."""
    cols = list(target_names) + ["target_mean", "source", "gap"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "method", "shm", "sc", "rc", "rc_teacher", "ce_on_stylized",
                "style_generator", "n_seeds", "n_failed"]
               + [f"{c}_{stat}" for c in cols for stat in ("mean", "sd")]
               + [f"{c}_fmt" for c in cols] + ["errors"])
    order = list(dict.fromkeys((r.row_id, r.label) for r in results))
    for rid, label in order:
        cell = [r for r in results if r.row_id == rid]
        ok = [r for r in cell if r.error is None]
        cfg = cell[0].config
        stats = []
        for c in cols:
            if c == "target_mean":
                vals = [r.target_mean for r in ok]
            elif c == "source":
                vals = [r.source for r in ok]
            elif c == "gap":
                vals = [r.gap for r in ok]
            else:
                vals = [r.targets[c] for r in ok]
            stats.append(_mean_sd(vals))
        w.writerow([rid, label, int(cfg.use_shm), int(cfg.use_sc), int(cfg.use_rc),
                    cfg.rc_teacher if cfg.use_rc else "", int(cfg.ce_on_stylized),
                    cfg.style_generator if cfg.use_shm else "", len(ok), len(cell) - len(ok)]
                   + [repr(x) for m, s in stats for x in (m, s)]
                   + [f"{100 * m:.2f} ± {100 * s:.2f}" for m, s in stats]
                   + ["; ".join(f"seed {r.seed}: {r.error}" for r in cell if r.error)])
    return buf.getvalue()


def per_seed_csv(results: list[AblationResult], target_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["table", "row", "method", "seed", "source"] + list(target_names)
               + ["target_mean", "gap", "error"])
    for r in results:
        if r.error is None:
            vals = [repr(r.source)] + [repr(r.targets[t]) for t in target_names] \
                   + [repr(r.target_mean), repr(r.gap), ""]
        else:
            vals = [""] * (len(target_names) + 3) + [r.error]
        w.writerow([r.table, r.row_id, r.label, r.seed] + vals)
    return buf.getvalue()
