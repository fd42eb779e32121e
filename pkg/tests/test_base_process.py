import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from branchsim import (BaseModel, ScalarField, SeededStream, apply_killed_semigroup,
                       apply_semigroup, sample_path)
from branchsim.base_process import path_exponential_average
from branchsim.config_space import DomainError

L2 = [[-1.0, 1.0], [1.0, -1.0]]
L3 = [[-1.0, 0.5, 0.5], [1.0, -2.0, 1.0], [0.3, 0.7, -1.0]]


def torus(n=64, c=0.0):
    return BaseModel.brownian_torus(0.5, 2 * math.pi, n, c)


def test_identity_at_zero_and_conservation():
    for model in (BaseModel.finite_chain(L3), torus()):
        f = model.field(np.linspace(0.1, 0.9, model.n_states))
        assert np.array_equal(apply_semigroup(model, 0.0, f).values, f.values)
        one = apply_semigroup(model, 0.7, model.field(1.0)).values
        assert np.max(np.abs(one - 1.0)) < 1e-12


def test_two_state_closed_form():
    model = BaseModel.finite_chain(L2)
    out = apply_semigroup(model, 1.0, model.field([1.0, 0.0])).values
    expected = [(1 + math.exp(-2)) / 2, (1 - math.exp(-2)) / 2]
    assert out == pytest.approx(expected, abs=1e-14)
    series = oracles.expm_series(L2, 1.0) @ np.array([1.0, 0.0])
    assert out == pytest.approx(series, abs=1e-13)
    assert out == pytest.approx([0.567668, 0.432332], abs=1e-6)


def test_killed_examples():
    single = BaseModel.single_site(1.0)
    for t in (0.3, 1.0, 2.5):
        assert apply_killed_semigroup(single, t, single.field(1.0)).values[0] == \
            pytest.approx(math.exp(-t), rel=1e-14)
    free = BaseModel.finite_chain(L3)
    f = free.field([0.2, 1.0, 0.5])
    assert np.array_equal(apply_killed_semigroup(free, 0.8, f).values,
                          apply_semigroup(free, 0.8, f).values)


def test_killed_two_state_matches_rk4():
    model = BaseModel.finite_chain(L2, [1.0, 0.0])
    out = apply_killed_semigroup(model, 1.0, model.field(1.0)).values
    A = np.array(L2) - np.diag([1.0, 0.0])
    ref = oracles.rk4(lambda _t, u: A @ u, [1.0, 1.0], 1.0, 2000)[-1]
    assert np.max(np.abs(out - ref)) < 1e-8


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.5), st.floats(0.0, 1.5),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_semigroup_law_chain(t, s, f):
    model = BaseModel.finite_chain(L3, [0.4, 1.0, 0.1])
    fh = model.field(f)
    lhs = apply_killed_semigroup(model, t + s, fh).values
    rhs = apply_killed_semigroup(model, t, apply_killed_semigroup(model, s, fh)).values
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_semigroup_law_torus():
    model = BaseModel.brownian_torus(0.5, 2 * math.pi, 64, cn_dt=1e-3)
    f = ScalarField.from_function(lambda x: 1 + np.sin(x) + 0.3 * np.cos(3 * x), 64, 2 * math.pi)
    lhs = apply_semigroup(model, 0.5, f).values
    rhs = apply_semigroup(model, 0.2, apply_semigroup(model, 0.3, f)).values
    assert np.max(np.abs(lhs - rhs)) < 1e-6
    # Fourier modes decay as exp(-D k^2 t) up to the grid's spectral error
    exact = 1 + math.exp(-0.25) * np.sin(f.grid) + 0.3 * math.exp(-2.25) * np.cos(3 * f.grid)
    assert np.max(np.abs(lhs - exact)) < 5e-3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 3), min_size=3, max_size=3), st.floats(0.0, 2.0))
def test_domination(f, t):
    model = BaseModel.finite_chain(L3, [0.5, 2.0, 1.0])
    fh = model.field(f)
    killed = apply_killed_semigroup(model, t, fh).values
    free = apply_semigroup(model, t, fh).values
    assert np.all(killed >= -1e-15)
    assert np.all(killed <= free + 1e-12)
    assert np.all(free <= fh.sup_norm + 1e-12)


def test_single_site_path_is_constant():
    assert np.all(sample_path(BaseModel.single_site(), 0, 0.1, 10, SeededStream(1)) == 0)


def test_two_state_stationary_occupation():
    model = BaseModel.finite_chain(L2)
    s = SeededStream(8)
    ends = np.array([sample_path(model, 0, 10.0, 1, s.child(i))[-1] for i in range(4000)])
    se = math.sqrt(0.25 / ends.size)
    assert abs(ends.mean() - 0.5) <= 3 * se


def test_brownian_variance():
    D, t = 0.5, 2.0
    model = BaseModel.brownian_torus(D, 1e6, 16)
    s = SeededStream(9)
    disp = np.array([sample_path(model, 5e5, t / 20, 20, s.child(i))[-1] - 5e5
                     for i in range(4000)])
    sq = disp ** 2
    se = sq.std(ddof=1) / math.sqrt(sq.size)
    assert abs(sq.mean() - 2 * D * t) <= 3 * se


def test_path_average_matches_killed_semigroup():
    model = BaseModel.finite_chain(L3, [1.0, 0.5, 2.0])
    f = model.field([0.3, 1.0, 0.6])
    t = 0.8
    exact = apply_killed_semigroup(model, t, f).values
    s = SeededStream(10)
    for x in range(3):
        est = path_exponential_average(model, x, t, f, model.field(-model.killing.values),
                                       100_000, s.child(x))
        assert abs(est.mean - exact[x]) <= 3 * est.stderr


def test_field_mismatch_rejected():
    with pytest.raises(DomainError):
        apply_semigroup(BaseModel.finite_chain(L3), 1.0, ScalarField([1.0, 2.0]))
    with pytest.raises(ValueError):
        BaseModel.finite_chain([[-1.0, 0.5], [1.0, -1.0]])
