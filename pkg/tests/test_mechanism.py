import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from branchsim import (Configuration, Displacement, OffspringLaw, ScalarField, SeededStream,
                       apply_to_linear, apply_to_multiplicative, constants, sample_offspring)
from branchsim.config_space import DomainError
from branchsim.mechanism import displacement_matrix


def const(v, n=3):
    return ScalarField(np.full(n, float(v)))


def test_apply_to_multiplicative_examples():
    assert np.allclose(apply_to_multiplicative(OffspringLaw([0, 0, 1]), const(0.5)).values, 0.25)
    law = OffspringLaw([0.1, 0.2, 0.3, 0.4])
    assert np.allclose(apply_to_multiplicative(law, const(1.0)).values, 1.0)
    ext = OffspringLaw([0.25, 0.0, 0.75])
    assert apply_to_multiplicative(ext, const(1 / 3)).values == pytest.approx(1 / 3, abs=1e-15)


def test_apply_to_linear_examples():
    assert np.allclose(apply_to_linear(OffspringLaw([0, 0, 1]), const(1.0)).values, 2.0)
    assert np.allclose(apply_to_linear(OffspringLaw([0.25, 0, 0.75]), const(1.0)).values, 1.5)
    assert np.all(apply_to_linear(OffspringLaw([0.3, 0.2, 0.5]), const(0.0)).values == 0)


def test_constants_examples():
    k = constants(OffspringLaw([0, 0, 1]), const(1.0))
    assert (k.beta1, k.beta0) == (2.0, 2.0) and k.moment_hypotheses
    k = constants(OffspringLaw([0, 1]), const(1.0))
    assert k.beta1 == 1.0 and not k.moment_hypotheses
    k = constants(OffspringLaw([0.5, 0, 0.5]), const(2.0))
    assert k.beta1 == 1.0 and not k.moment_hypotheses


def test_sample_offspring_deterministic_cases():
    s = SeededStream(1)
    for _ in range(20):
        assert sample_offspring(OffspringLaw([0, 1]), 2, s) == Configuration([2])
        assert sample_offspring(OffspringLaw([0, 0, 1]), 2, s) == Configuration([2, 2])


def test_sample_offspring_mean():
    law = OffspringLaw([0.25, 0.0, 0.75])
    s = SeededStream(5)
    counts = np.array([sample_offspring(law, 0, s).size for _ in range(100_000)])
    se = counts.std(ddof=1) / math.sqrt(counts.size)
    assert abs(counts.mean() - 1.5) <= 3 * se


def test_sample_offspring_chi_square():
    q = np.array([0.1, 0.25, 0.05, 0.4, 0.2])
    law = OffspringLaw(q)
    s = SeededStream(99)
    counts = np.bincount([sample_offspring(law, 0, s).size for _ in range(100_000)],
                         minlength=q.size)
    assert stats.chisquare(counts, 100_000 * q).pvalue > 1e-3


def test_displaced_children_land_on_torus():
    law = OffspringLaw([0, 0, 1], Displacement("gaussian", 0.3))
    s = SeededStream(3)
    kids = sample_offspring(law, 0.05, s, n=16, length=1.0)
    assert kids.size == 2 and np.all((kids.points >= 0) & (kids.points < 1.0))


def test_invalid_laws_rejected():
    with pytest.raises(ValueError):
        OffspringLaw([0.6, 0.6])
    with pytest.raises(ValueError):
        OffspringLaw([-0.1, 1.1])
    with pytest.raises(ValueError):
        Displacement("gaussian", 0.0)
    with pytest.raises(DomainError):
        displacement_matrix(Displacement("gaussian", 0.1), 4, None)
    with pytest.raises(ValueError):
        sample_offspring(OffspringLaw([0.2, 0.3]), 0, SeededStream(0))


def test_displacement_matrix_is_stochastic():
    D = displacement_matrix(Displacement("uniform_ball", 0.4), 32, 2 * math.pi)
    assert np.allclose(D.sum(axis=1), 1.0) and np.all(D >= 0)


laws = st.lists(st.floats(0, 1), min_size=2, max_size=6).map(
    lambda w: np.array(w) / max(1.0, sum(w)))


@settings(max_examples=200)
@given(laws, st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_multiplicative_maps_unit_ball(q, h):
    out = apply_to_multiplicative(OffspringLaw(q), ScalarField(h)).values
    assert np.all(out >= 0) and np.all(out <= 1 + 1e-15)


@settings(max_examples=200)
@given(laws, st.lists(st.floats(0, 1), min_size=3, max_size=3),
       st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_lipschitz_bound(q, h, g):
    law = OffspringLaw(q)
    beta1 = constants(law, const(1.0)).beta1
    d = np.max(np.abs(apply_to_multiplicative(law, ScalarField(h)).values
                      - apply_to_multiplicative(law, ScalarField(g)).values))
    assert d <= beta1 * np.max(np.abs(np.subtract(h, g))) + 1e-12


@given(laws)
def test_linear_on_one_has_norm_beta1(q):
    law = OffspringLaw(q)
    out = apply_to_linear(law, const(1.0))
    assert out.sup_norm == constants(law, const(1.0)).beta1
