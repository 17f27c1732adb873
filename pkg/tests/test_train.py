from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from shade_lab import data, train
from shade_lab.errors import ConfigError, FormatError, InsufficientStylesError, NumericError
from shade_lab.evaluation import evaluate
from shade_lab.train import TrainConfig, Trainer


@pytest.fixture(scope="module")
def bm():
    return data.make_benchmark(0, n_train=64, n_val=16, n_target=16)


@pytest.fixture(scope="module")
def teachers(bm):
    base = TrainConfig(epochs=1)
    return {task: train.pretrain_teacher(bm, replace(base, task=task), epochs=1)
            for task in ("classification", "segmentation")}


def _cfg(task="classification", **kw):
    base = dict(task=task, epochs=2, pool_size=64, batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


def test_config_invariants():
    with pytest.raises(ConfigError, match="use_shm"):
        TrainConfig(use_shm=False, use_sc=True, use_rc=False)
    with pytest.raises(ConfigError, match="interval_k"):
        TrainConfig(interval_k=0)
    with pytest.raises(ConfigError, match="lambda_sc"):
        TrainConfig(lambda_sc=-1.0)
    with pytest.raises(ConfigError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict({"interval_k": "inf"}).interval_k is None
    assert TrainConfig(task="segmentation").batch == 8
    assert TrainConfig().weights.lambda_rc == 0.1


def test_ablation_rows_map_to_flags():
    base = TrainConfig()
    erm = base.with_row("erm")
    assert not (erm.use_shm or erm.use_sc or erm.use_rc)
    assert base.with_row("shm").ce_on_stylized
    ema = base.with_row("shm_sc_ema")
    assert ema.use_sc and ema.use_rc and ema.rc_teacher == "ema"
    full = base.with_row("shade")
    assert full.use_sc and full.use_rc and full.rc_teacher == "frozen"
    with pytest.raises(ConfigError):
        base.with_row("nope")


def test_missing_teacher_is_a_config_error(bm):
    with pytest.raises(ConfigError, match="teacher"):
        Trainer(bm, _cfg().with_row("shade"))
    Trainer(bm, _cfg().with_row("shm_sc_ema"))   # EMA needs no pretrained teacher


def test_erm_loss_is_task_loss(bm):
    seen = []
    tr = Trainer(bm, _cfg().with_row("erm"))
    tr.on_step = lambda i, s: seen.append(s)
    tr.run()
    assert seen and all(s.total == s.task and s.sc is None and s.rc is None for s in seen)


@pytest.mark.parametrize("task", ["classification", "segmentation"])
def test_zero_weight_shade_follows_erm_trajectory(bm, teachers, task):
    cfg = _cfg(task)
    erm = train.train_student(bm, None, cfg.with_row("erm"))
    zero = train.train_student(bm, teachers[task], cfg.with_row("shade", lambda_sc=0.0,
                                                                 lambda_rc=0.0))
    assert zero.params.digest() == erm.params.digest()


def test_zero_sc_weight_matches_sc_disabled(bm, teachers):
    cfg = _cfg()
    on = train.train_student(bm, teachers["classification"], cfg.with_row("shade", lambda_sc=0.0))
    off = train.train_student(bm, teachers["classification"],
                              replace(cfg.with_row("shade"), use_sc=False))
    assert on.params.digest() == off.params.digest()


def test_same_seed_same_metrics(bm, teachers):
    cfg = _cfg().with_row("shade")
    a = train.train_student(bm, teachers["classification"], cfg).metrics_csv()
    b = train.train_student(bm, teachers["classification"], cfg).metrics_csv()
    assert a == b
    c = train.train_student(bm, teachers["classification"], replace(cfg, seed=1)).metrics_csv()
    assert a != c


def test_metrics_csv_columns_and_rows(bm, teachers):
    tr = train.train_student(bm, teachers["classification"], _cfg().with_row("shade"))
    lines = tr.metrics_csv().splitlines()
    assert lines[0] == ",".join(train.METRIC_COLUMNS)
    rows = [l.split(",") for l in lines[1:]]
    assert [r[1] for r in rows if r[0] == "0"] == ["train", "val"]
    assert [r[2] for r in rows if r[0] == "1" and r[1] == "test"] == ["haze", "dusk", "neon"]


def test_interval_schedule(bm):
    cfg = _cfg(epochs=4).with_row("shm_sc_ema")
    once = Trainer(bm, replace(cfg, interval_k=None)).run()
    assert {r["basis_epoch"] for r in once.metrics} == {0}
    every2 = Trainer(bm, replace(cfg, interval_k=2)).run()
    assert [r["basis_epoch"] for r in every2.metrics if r["split"] == "train"] == [0, 0, 2, 2]


def test_reselect_basis_properties(bm):
    cfg = _cfg()
    tr = Trainer(bm, cfg.with_row("shm"))
    a = train.reselect_basis(tr.params, bm.source.images, cfg, 0)
    b = train.reselect_basis(tr.params, bm.source.images, cfg, 0)
    np.testing.assert_array_equal(a.mu_base, b.mu_base)
    pool, _ = __import__("shade_lab.style", fromlist=["x"]).collect_styles(
        tr.params, bm.source.images, 0, cfg.pool_size, np.random.default_rng([cfg.seed, 0, 11]))
    np.testing.assert_array_equal(np.concatenate([a.mu_base, a.sigma_base], 1), pool[a.indices])
    tr.run()
    c = train.reselect_basis(tr.params, bm.source.images, cfg, 0)
    assert not np.array_equal(a.mu_base, c.mu_base)
    with pytest.raises(InsufficientStylesError):
        train.reselect_basis(tr.params, bm.source.images[:4], cfg, 0)


def test_frozen_teacher_untouched_and_ema_moves(bm, teachers):
    t = teachers["classification"]
    before = t.digest()
    tr = train.train_student(bm, t, _cfg().with_row("shade"))
    assert t.digest() == before and tr.teacher.digest() == before
    ema = Trainer(bm, _cfg().with_row("shm_sc_ema"))
    start = ema.ema.digest()
    ema.run()
    assert ema.ema.digest() != start


@pytest.mark.parametrize("gen", train.GENERATORS)
def test_every_generator_trains(bm, teachers, gen):
    tr = train.train_student(bm, teachers["segmentation"],
                             _cfg("segmentation", epochs=1, batch_size=32).with_row(
                                 "shade", style_generator=gen))
    assert np.isfinite(tr.metrics[0]["task_loss"])


@pytest.mark.parametrize("row", ["shade", "shm_sc_ema"])
def test_resume_replays_bit_exactly(bm, teachers, tmp_path, row):
    cfg = _cfg(epochs=3, interval_k=2).with_row(row)
    t = teachers["classification"]
    full = Trainer(bm, cfg, t).run()
    part = Trainer(bm, cfg, t).run(5)          # mid-epoch
    part.save_checkpoint(tmp_path / "c.bin")
    resumed = Trainer.from_checkpoint(tmp_path / "c.bin", bm, t)
    # the style rng state is restored: next draws agree
    np.testing.assert_array_equal(resumed.style_rng.random(3), part.style_rng.random(3))
    resumed = Trainer.from_checkpoint(tmp_path / "c.bin", bm, t).run()
    assert resumed.metrics_csv() == full.metrics_csv()
    assert resumed.params.digest() == full.params.digest()


def test_corrupt_checkpoint(bm, tmp_path):
    tr = Trainer(bm, _cfg().with_row("erm")).run(1)
    path = tmp_path / "c.bin"
    tr.save_checkpoint(path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        Trainer.from_checkpoint(path, bm)
    good = bytearray(raw)
    good[-3] ^= 0xFF
    good[8] = 9                                   # version field
    path.write_bytes(bytes(good))
    with pytest.raises(FormatError, match="version"):
        Trainer.from_checkpoint(path, bm)
    path.write_bytes(b"garbage")
    with pytest.raises(FormatError):
        Trainer.from_checkpoint(path, bm)


def test_params_file_round_trip(teachers, tmp_path):
    t = teachers["segmentation"]
    train.save_params(t, tmp_path / "t.bin")
    back = train.load_params(tmp_path / "t.bin")
    assert back.digest() == t.digest() and back.role == "frozen_teacher"


def test_nan_aborts_with_iteration_and_op(bm):
    tr = Trainer(bm, _cfg().with_row("erm")).run(1)
    tr.params.tensors["body1.w"].data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError) as exc:
        tr.step()
    assert exc.value.iteration == 1 and exc.value.op == "conv2d"


def test_teacher_is_deterministic_and_beats_chance(bm):
    cfg = TrainConfig(task="classification")
    a = train.pretrain_teacher(bm, cfg, epochs=3, n_samples=480)
    b = train.pretrain_teacher(bm, cfg, epochs=3, n_samples=480)
    assert a.digest() == b.digest() and a.role == "frozen_teacher"
    held_out = data.gen_domain(data.broad_config(bm.source.provenance, n_samples=200, seed=123))
    assert evaluate(a, held_out, "classification")["metric"] > 1 / 4
