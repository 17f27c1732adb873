from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shade_lab import consistency as cs
from shade_lab import numerics as nx
from shade_lab.errors import ConfigError, ContractError, ShapeError
from shade_lab.numerics import Tensor


def _kl(p, q):
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / q[mask])).sum())


def _simplex(rng, k):
    return rng.dirichlet(np.ones(k))


def test_jsd_examples():
    assert abs(cs.jsd([1.0, 0.0], [0.0, 1.0]) - math.log(2)) < 1e-12
    assert cs.jsd([0.3, 0.7], [0.3, 0.7]) == 0.0
    p, q = np.array([0.2, 0.8]), np.array([0.6, 0.4])
    m = (p + q) / 2
    assert np.isclose(cs.jsd(p, q), 0.5 * _kl(p, m) + 0.5 * _kl(q, m), rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 8))
def test_jsd_symmetric_and_bounded(seed, k):
    rng = np.random.default_rng(seed)
    p, q = _simplex(rng, k), _simplex(rng, k)
    a, b = cs.jsd(p, q), cs.jsd(q, p)
    assert a == b
    assert 0.0 <= a <= math.log(2) + 1e-12


def test_jsd_zero_iff_equal():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = _simplex(rng, 4)
        q = _simplex(rng, 4)
        assert cs.jsd(p, p) == 0.0
        assert cs.jsd(p, q) > 0.0


def test_jsd_rejects_non_distributions():
    with pytest.raises(ContractError):
        cs.jsd([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ShapeError):
        cs.jsd([1.0], [0.5, 0.5])


def test_sc_loss_matches_mean_jsd():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(5), size=6)
    q = rng.dirichlet(np.ones(5), size=6)
    val = cs.sc_loss(Tensor(p), Tensor(q), "classification").item()
    assert np.isclose(val, np.mean([cs.jsd(a, b) for a, b in zip(p, q)]), rtol=1e-12)
    # segmentation averages over every pixel
    ps = np.moveaxis(rng.dirichlet(np.ones(3), size=(2, 4, 4)), -1, 1)
    qs = np.moveaxis(rng.dirichlet(np.ones(3), size=(2, 4, 4)), -1, 1)
    val = cs.sc_loss(Tensor(ps), Tensor(qs), "segmentation").item()
    assert np.isclose(val, cs.jsd_map(ps, qs).mean(), rtol=1e-12)
    with pytest.raises(ShapeError):
        cs.sc_loss(Tensor(ps), Tensor(qs[:, :2]), "segmentation")
    with pytest.raises(ShapeError):
        cs.sc_loss(Tensor(p), Tensor(q), "segmentation")


def test_rc_loss_values_and_masking():
    t = np.zeros((2, 1, 2, 2))
    o = np.ones((2, 1, 2, 2))
    s = 3 * np.ones((2, 1, 2, 2))
    mask = np.zeros((2, 2, 2), dtype=bool)
    mask[0, 0, 0] = True
    assert cs.rc_loss(Tensor(o), t, "segmentation", Tensor(s), mask).item() == 0.5 * (1 + 9)
    assert cs.rc_loss(Tensor(o), t, "segmentation", Tensor(s), mask, branches="stylized").item() == 9
    # empty foreground contributes nothing
    empty = np.zeros((2, 2, 2), dtype=bool)
    assert cs.rc_loss(Tensor(o), t, "segmentation", Tensor(s), empty).item() == 0.0
    with pytest.raises(ContractError):
        cs.rc_loss(Tensor(o), t, "segmentation", Tensor(s))
    with pytest.raises(ConfigError):
        cs.rc_loss(Tensor(o), t, "segmentation", Tensor(s), mask, branches="neither")


def test_rc_loss_never_moves_the_teacher():
    teacher = Tensor(np.zeros((3, 4)), requires_grad=True)
    student = Tensor(np.ones((3, 4)), requires_grad=True)
    nx.backward(cs.rc_loss(student, teacher, "classification"))
    assert teacher.grad is None
    np.testing.assert_allclose(student.grad, 2 * np.ones((3, 4)) / 12)


def test_total_loss_weights():
    task, sc, rc = Tensor(np.array(1.0)), Tensor(np.array(0.5)), Tensor(np.array(2.0))
    w = cs.LossWeights(10.0, 0.1)
    assert np.isclose(cs.total_loss(task, sc, rc, w).item(), 1 + 5 + 0.2)
    assert cs.total_loss(task, None, None, w).item() == 1.0
    assert cs.LossWeights.for_task("segmentation") == cs.LossWeights(10.0, 1.0)
    with pytest.raises(ConfigError):
        cs.LossWeights(-1.0, 0.0)
    with pytest.raises(ConfigError):
        cs.LossWeights(float("nan"), 0.0)
