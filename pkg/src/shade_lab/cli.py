"""Command-line entry point: shade-lab <command> [options].

Configuration is a flat JSON file whose keys mirror TrainConfig and the
benchmark options; explicit flags override the file, which overrides the
built-in defaults. Failures print one line ``shade-lab: error[<category>]:
<message>`` on stderr and exit with the category's code (2 config, 3 data or
format, 4 numeric, 5 I/O).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import ablation, data, evaluation, nn, train
from .errors import ConfigError, ShadeLabError, StorageError
from .numerics import Tensor

PROG = "shade-lab"
# options understood by the CLI itself rather than TrainConfig / benchmark
RUN_KEYS = ("teacher_epochs", "teacher_samples", "seeds", "jobs", "row")
TRAIN_KEYS = tuple(f.name for f in fields(train.TrainConfig))


# -- configuration --------------------------------------------------------------

def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path}: top level must be an object")
    known = set(TRAIN_KEYS) | set(data.BENCHMARK_KEYS) | set(RUN_KEYS)
    for key in doc:
        if key not in known:
            raise ConfigError(f"{key}: unknown configuration key")
    return doc


def _interval(v):
    if v is None:
        return None
    if isinstance(v, str) and v.lower() in ("inf", "none", "null"):
        return None
    return int(v)


# flag dest -> TrainConfig field
FLAG_FIELDS = {
    "task": "task", "lambda_sc": "lambda_sc", "lambda_rc": "lambda_rc",
    "interval_k": "interval_k", "insertion_point": "insertion_point",
    "style_generator": "style_generator", "rc_teacher": "rc_teacher",
    "epochs": "epochs", "batch_size": "batch_size", "init_from": "init_from",
    "base_lr": "base_lr", "rc_branches": "rc_branches", "seed": "seed",
}


def build_train_config(doc: dict, args) -> train.TrainConfig:
    """default < file < flags. A preset row (file key or --row) is applied
    on top of the file's method flags but below explicit per-field flags."""
    raw = {k: doc[k] for k in TRAIN_KEYS if k in doc}
    if "interval_k" in raw:
        raw["interval_k"] = _interval(raw["interval_k"])
    cfg = train.TrainConfig.from_dict(raw)
    row = getattr(args, "row", None) or doc.get("row")
    if row is not None:
        cfg = cfg.with_row(row)
    over = {}
    for dest, name in FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            over[name] = _interval(v) if name == "interval_k" else v
    for flag in ("use_shm", "use_sc", "use_rc", "ce_on_stylized"):
        v = getattr(args, flag, None)
        if v is not None:
            over[flag] = v
    return replace(cfg, **over) if over else cfg


# -- manifests -------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def build_id() -> str:
    try:
        from importlib.metadata import version
        ver = version("artifact")
    except Exception:  # noqa: BLE001 - not installed as a distribution
        ver = "unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{ver}+{rev}" if rev else ver


def write_json_atomic(path: Path, doc) -> None:
    train._atomic_write(Path(path), (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())


@dataclass
class RunManifest:
    """Snapshot of a run, written once before any compute starts.

    The manifest file is never rewritten; completion is recorded in a
    separate `<name>.done.json` next to it.
    """
    command: str
    config: dict
    seed: int | None
    build: str
    start_time: str
    outputs: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Path, name: str = "manifest.json") -> Path:
        path = Path(out_dir) / name
        write_json_atomic(path, asdict(self))
        return path

    @staticmethod
    def complete(manifest_path: Path, status: str = "ok") -> None:
        done = manifest_path.with_name(manifest_path.stem + ".done.json")
        write_json_atomic(done, {"end_time": _now(), "status": status})


def _start_manifest(command, config, seed, out: Path, outputs) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return RunManifest(command, config, seed, build_id(), _now(),
                       {k: str(v) for k, v in outputs.items()}).write(out)


def max_workers(requested: int | None) -> int:
    jobs = requested or 1
    cap = os.environ.get("SHADE_LAB_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"SHADE_LAB_THREADS: expected an integer, got {cap!r}") from None
    return max(1, jobs)


# -- commands ---------------------------------------------------------------

def _require_dir(path, what):
    if path is None:
        raise ConfigError(f"--{what}: required")
    return Path(path)


def cmd_gen_data(args) -> int:
    doc = load_config_file(args.config)
    if args.seed is not None:
        doc = {**doc, "seed": args.seed}
    opts = data.benchmark_options(doc)
    out = _require_dir(args.out, "out")
    manifest = _start_manifest("gen-data", {k: doc[k] for k in data.BENCHMARK_KEYS if k in doc},
                               opts["seed"], out, {"benchmark": out / "benchmark.json"})
    bm = data.make_benchmark(**opts)
    data.save_benchmark(bm, out)
    if args.png:
        for split, ds in bm.domains():
            data.export_png(ds, out / "png" / split, limit=args.png)
    RunManifest.complete(manifest)
    print(f"wrote {len(bm.domains())} domains to {out}")
    return 0


def _load_teacher(path):
    return None if path is None else train.load_params(path)


def cmd_pretrain(args) -> int:
    doc = load_config_file(args.config)
    cfg = build_train_config(doc, args)
    bm = data.load_benchmark(_require_dir(args.data, "data"))
    out = _require_dir(args.out, "out")
    epochs = args.teacher_epochs or doc.get("teacher_epochs")
    dest = out / "teacher.bin"
    manifest = _start_manifest("pretrain", {**cfg.to_dict(), "teacher_epochs": epochs},
                               cfg.seed, out, {"teacher": dest})
    teacher = train.pretrain_teacher(bm, cfg, epochs=epochs,
                                     n_samples=doc.get("teacher_samples"))
    train.save_params(teacher, dest)
    broad = evaluation.evaluate(teacher, bm.source_val, cfg.task)
    RunManifest.complete(manifest)
    print(f"teacher {teacher.digest()[:12]} source-val metric {broad['metric']:.4f} -> {dest}")
    return 0


def _check_resume_config(cfg: train.TrainConfig, ckpt_cfg: train.TrainConfig, explicit: bool):
    if explicit and cfg != ckpt_cfg:
        diff = [f.name for f in fields(cfg) if getattr(cfg, f.name) != getattr(ckpt_cfg, f.name)]
        raise ConfigError(f"{diff[0]}: differs from the checkpoint being resumed")


def cmd_train(args) -> int:
    doc = load_config_file(args.config)
    cfg = build_train_config(doc, args)
    out = _require_dir(args.out, "out")
    data_dir = _require_dir(args.data, "data")
    if cfg.needs_frozen_teacher and args.teacher is None:
        reason = "--rc-teacher frozen" if cfg.use_rc and cfg.rc_teacher == "frozen" \
            else "--init-from teacher"
        raise ConfigError(f"teacher: {reason} needs --teacher PATH (see `pretrain`)")
    teacher = _load_teacher(args.teacher) if cfg.needs_frozen_teacher else None
    bm = data.load_benchmark(data_dir)

    ckpt_path = out / "checkpoint.bin"
    metrics_path = out / "metrics.csv"
    if args.resume:
        trainer = train.Trainer.from_checkpoint(args.resume, bm, teacher)
        explicit = args.config is not None or any(
            getattr(args, d, None) is not None for d in list(FLAG_FIELDS) + ["row"])
        _check_resume_config(cfg, trainer.cfg, explicit)
        cfg = trainer.cfg
    else:
        trainer = train.Trainer(bm, cfg, teacher)
    manifest_name = "manifest.json" if not args.resume else \
        f"manifest.resume-{trainer.iteration}.json"
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed, build_id(), _now(),
                           {"checkpoint": str(ckpt_path), "metrics": str(metrics_path),
                            "resumed_from": str(args.resume or "")}).write(out, manifest_name)
    stop = trainer.max_iter if args.until_iter is None else min(args.until_iter, trainer.max_iter)
    while trainer.iteration < stop:
        next_epoch_end = (trainer.epoch + 1) * trainer.steps_per_epoch
        trainer.run(min(stop, next_epoch_end))
        trainer.save_checkpoint(ckpt_path)
        trainer.write_metrics(metrics_path)
    trainer.save_checkpoint(ckpt_path)
    trainer.write_metrics(metrics_path)
    if trainer.finished:
        train.save_params(trainer.params, out / "student.bin")
        final = trainer.final_metrics()
        write_json_atomic(out / "final.json", final)
        print(" ".join(f"{k}={v:.4f}" for k, v in final.items()))
    else:
        print(f"stopped at iteration {trainer.iteration}/{trainer.max_iter}; "
              f"resume with --resume {ckpt_path}")
    RunManifest.complete(manifest)
    return 0


def _load_model(path):
    """Frozen parameters from a parameter file or a training checkpoint."""
    kind, meta, arrays = train.read_blob(path)
    if kind != "checkpoint":
        return train.load_params(path).frozen()
    spec = nn.ModelSpec(**meta["spec"])
    return nn.ModelParams(spec, {k[len("student/"):]: Tensor(v) for k, v in arrays.items()
                                 if k.startswith("student/")}, "frozen_teacher")


EVAL_COLUMNS = ("split", "domain", "metric", "accuracy", "loss", "units")


def cmd_eval(args) -> int:
    if args.model is None:
        raise ConfigError("--model: required (a checkpoint or parameter file)")
    params = _load_model(args.model)
    bm = data.load_benchmark(_require_dir(args.data, "data"))
    out = _require_dir(args.out, "out")
    task = params.spec.head_kind
    manifest = _start_manifest("eval", {"model": str(args.model), "task": task}, None, out,
                               {"eval": out / "eval.csv", "summary": out / "eval.json"})
    rows, summary = [], {"task": task, "domains": {}}
    for split, ds in bm.domains():
        if split == "source_train":
            continue
        r = evaluation.evaluate(params, ds, task)
        rows.append((split, ds.name, repr(r["metric"]), repr(r["accuracy"]), repr(r["loss"]),
                     str(r["confusion"].total)))
        summary["domains"][split] = {"metric": r["metric"],
                                     "confusion": r["confusion"].counts.tolist()}
    targets = [v["metric"] for k, v in summary["domains"].items() if k.startswith("target_")]
    summary["generalization_gap"] = evaluation.generalization_gap(
        summary["domains"]["source_val"]["metric"], targets)
    text = ",".join(EVAL_COLUMNS) + "\n" + "".join(",".join(r) + "\n" for r in rows)
    train._atomic_write(out / "eval.csv", text.encode())
    write_json_atomic(out / "eval.json", summary)
    RunManifest.complete(manifest)
    print(text, end="")
    print(f"generalization gap {summary['generalization_gap']:.4f}")
    return 0


def _parse_seeds(text) -> list[int]:
    try:
        seeds = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds: at least one seed required")
    return seeds


def cmd_ablate(args) -> int:
    doc = load_config_file(args.config)
    cfg = build_train_config(doc, args)
    seeds = _parse_seeds(args.seeds if args.seeds is not None else doc.get("seeds", "0"))
    jobs = max_workers(args.jobs if args.jobs is not None else doc.get("jobs"))
    bm = data.load_benchmark(_require_dir(args.data, "data"))
    out = _require_dir(args.out, "out")
    outputs = {"ablation": out / "ablation.csv", "style_variation": out / "style_variation.csv",
               "per_seed": out / "ablation_per_seed.csv"}
    manifest = _start_manifest("ablate", {**cfg.to_dict(), "seeds": seeds, "jobs": jobs},
                               cfg.seed, out, outputs)
    if args.teacher:
        teacher = train.load_params(args.teacher)
    else:
        epochs = args.teacher_epochs or doc.get("teacher_epochs")
        teacher = train.pretrain_teacher(bm, cfg, epochs=epochs,
                                         n_samples=doc.get("teacher_samples"))
        train.save_params(teacher, out / "teacher.bin")

    def progress(c, outcome):
        value, err = outcome
        status = err or f"target mean {sum(value[1].values()) / len(value[1]):.4f}"
        print(f"  seed {c.seed} shm={int(c.use_shm)} sc={int(c.use_sc)} rc={int(c.use_rc)} "
              f"{c.rc_teacher if c.use_rc else '-'} {c.style_generator}: {status}", flush=True)

    results = ablation.run_ablation(bm, cfg, seeds, teacher, jobs=jobs, progress=progress)
    names = [t.name for t in bm.targets]
    for table, rows in results.items():
        train._atomic_write(outputs[table], ablation.summary_csv(rows, names).encode())
    train._atomic_write(outputs["per_seed"], ablation.per_seed_csv(
        [r for rows in results.values() for r in rows], names).encode())
    RunManifest.complete(manifest)
    for table in results:
        print(f"wrote {outputs[table]}")
    return 0


def cmd_viz(args) -> int:
    if args.model is None:
        raise ConfigError("--model: required (a checkpoint or parameter file)")
    params = _load_model(args.model)
    bm = data.load_benchmark(_require_dir(args.data, "data"))
    out = _require_dir(args.out, "out")
    seed = 0 if args.seed is None else args.seed
    dest = out / "style_space.json"
    manifest = _start_manifest("viz", {"model": str(args.model),
                                       "insertion_point": args.insertion_point},
                               seed, out, {"style_space": dest})
    doc = evaluation.export_style_space(params, bm, args.insertion_point, seed=seed)
    write_json_atomic(dest, doc)
    RunManifest.complete(manifest)
    d = doc["diagnostics"]
    print(f"fps: min pairwise {d['fps']['min_pairwise_distance']:.4f} coverage "
          f"{d['fps']['coverage_radius']:.4f}; kmeans: min pairwise "
          f"{d['kmeans']['min_pairwise_distance']:.4f} coverage "
          f"{d['kmeans']['coverage_radius']:.4f} -> {dest}")
    return 0


# -- parser --------------------------------------------------------------------

def _bool_flag(p, name, help_):
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action=argparse.BooleanOptionalAction,
                   default=None, help=help_)


def _train_flags(p):
    p.add_argument("--task", choices=nn.TASKS)
    p.add_argument("--row", choices=sorted(train.ABLATION_ROWS),
                   help="method preset (one ablation row); per-field flags still win")
    _bool_flag(p, "use-shm", "enable the style generator branch")
    _bool_flag(p, "use-sc", "style consistency loss")
    _bool_flag(p, "use-rc", "retrospection consistency loss")
    _bool_flag(p, "ce-on-stylized", "average the task loss over both branches")
    p.add_argument("--lambda-sc", type=float)
    p.add_argument("--lambda-rc", type=float)
    p.add_argument("--interval-k", help="epochs between basis re-selections, or 'inf'")
    p.add_argument("--insertion-point", type=int, choices=(0, 1, 2))
    p.add_argument("--style-generator", choices=train.GENERATORS)
    p.add_argument("--rc-teacher", choices=("frozen", "ema"))
    p.add_argument("--rc-branches", choices=("both", "stylized"))
    p.add_argument("--init-from", choices=("random", "teacher"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_=True):
        p.add_argument("--config", help="flat JSON config file")
        if data_:
            p.add_argument("--data", help="benchmark directory (from gen-data)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    common(p, data_=False)
    p.add_argument("--png", type=int, default=0, metavar="N",
                   help="also export N preview PNGs per domain")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain the retrospection teacher")
    common(p)
    _train_flags(p)
    p.add_argument("--teacher-epochs", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a student")
    common(p)
    _train_flags(p)
    p.add_argument("--teacher", help="teacher parameters (from pretrain)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--until-iter", type=int, help="stop after this iteration (checkpointed)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or parameter file")
    common(p)
    p.add_argument("--model", help="checkpoint.bin, student.bin or teacher.bin")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the component and style-variation grids")
    common(p)
    _train_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--jobs", type=int, help="parallel cells (capped by SHADE_LAB_THREADS)")
    p.add_argument("--teacher", help="reuse a pretrained teacher instead of training one")
    p.add_argument("--teacher-epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", help="export the 2-D style-space projection as JSON")
    common(p)
    p.add_argument("--model", help="checkpoint or parameter file")
    p.add_argument("--insertion-point", type=int, choices=(0, 1, 2))
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ShadeLabError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"{PROG}: error[{exc.category}]: {msg}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"{PROG}: error[io]: {exc}", file=sys.stderr)
        return StorageError.exit_code
    except ValueError as exc:
        # e.g. a non-integer --interval-k
        print(f"{PROG}: error[config]: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
