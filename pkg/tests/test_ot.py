import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedalign.errors import ConvergenceError, NumericalError, ValidationError
from fedalign.ot import (
    DiscreteMeasure,
    SinkhornConfig,
    build_cost,
    exact_1d_wasserstein,
    merge_duplicates,
    sinkhorn,
    wasserstein_distance,
)

from conftest import random_measure


@st.composite
def measures(draw, max_n=32):
    n = draw(st.integers(1, max_n))
    pts = draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    w = draw(st.lists(st.floats(0.01, 1), min_size=n, max_size=n))
    return DiscreteMeasure.from_masses(pts, w)


# -- DiscreteMeasure ---------------------------------------------------------


def test_measure_rejects_bad_weights():
    with pytest.raises(ValidationError):
        DiscreteMeasure([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(ValidationError):
        DiscreteMeasure([0.0, 1.0], [1.5, -0.5])
    with pytest.raises(ValidationError):
        DiscreteMeasure([], [])
    with pytest.raises(ValidationError):
        DiscreteMeasure([0.0, np.nan], [0.5, 0.5])


def test_measure_floor_keeps_simplex():
    m = DiscreteMeasure([0.0, 0.5, 1.0], [0.0, 0.0, 1.0]).floored()
    assert m.weights.min() > 0
    assert abs(m.weights.sum() - 1.0) < 1e-12


def test_measure_text_roundtrip(rng):
    m = random_measure(rng, 17)
    back = DiscreteMeasure.from_text(m.to_text())
    assert back.equals(m)


def test_merge_duplicates():
    pts, w = merge_duplicates([0.5, 0.0, 0.5], [0.25, 0.5, 0.25])
    assert pts.tolist() == [0.0, 0.5]
    assert w.tolist() == [0.5, 0.5]


# -- build_cost --------------------------------------------------------------


def test_cost_single_pair():
    assert build_cost([0.0], [1.0], p=2).entries.tolist() == [[1.0]]


def test_cost_identity_symmetric():
    C = build_cost([0.0, 1.0], [0.0, 1.0], p=1)
    assert C.entries.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert C.metric_flag


def test_cost_arithmetic():
    assert np.allclose(build_cost([0.0, 0.5], [0.25], p=2).entries, [[0.0625], [0.0625]])


def test_cost_multidimensional():
    C = build_cost([[0.0, 0.0]], [[3.0, 4.0]], p=1)
    assert C.entries[0, 0] == pytest.approx(5.0)


def test_cost_rejects_bad_p():
    with pytest.raises(ValidationError):
        build_cost([0.0], [1.0], p=0)


# -- sinkhorn ----------------------------------------------------------------


def test_sinkhorn_identity_coupling():
    a = DiscreteMeasure([0.0, 1.0], [0.5, 0.5])
    plan, cost = sinkhorn(a, a, build_cost(a.support, a.support, 1), SinkhornConfig(1e-3))
    assert plan.converged
    assert np.allclose(plan.entries, np.diag([0.5, 0.5]), atol=1e-6)
    assert cost <= 1e-2


@pytest.mark.parametrize("eps", [1.0, 1e-1, 1e-2, 1e-3, 1e-4])
def test_sinkhorn_single_coupling(eps):
    a, b = DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0)
    plan, cost = sinkhorn(a, b, build_cost(a.support, b.support, 2), SinkhornConfig(eps))
    assert plan.entries.tolist() == [[1.0]]
    assert cost == 1.0


def test_sinkhorn_unit_shift():
    a = DiscreteMeasure.uniform([0.0, 1.0])
    b = DiscreteMeasure.uniform([1.0, 2.0])
    _, cost = sinkhorn(a, b, build_cost(a.support, b.support, 2), SinkhornConfig(1e-3))
    assert cost == pytest.approx(exact_1d_wasserstein(a, b, 2) ** 2, abs=0.02)
    assert cost == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_sinkhorn_marginals(rng, eps):
    for _ in range(10):
        a = random_measure(rng, int(rng.integers(1, 120)))
        b = random_measure(rng, int(rng.integers(1, 120)))
        plan, _ = sinkhorn(a, b, build_cost(a.support, b.support, 2), SinkhornConfig(eps))
        assert plan.converged
        assert np.abs(plan.row_sums() - a.floored().weights).max() <= 1e-6
        assert np.abs(plan.col_sums() - b.floored().weights).max() <= 1e-6
        assert plan.entries.min() >= 0


def test_sinkhorn_deterministic(rng):
    a, b = random_measure(rng, 50), random_measure(rng, 40)
    C = build_cost(a.support, b.support, 2)
    for eps in (1e-2, 1e-3):
        p1, c1 = sinkhorn(a, b, C, SinkhornConfig(eps))
        p2, c2 = sinkhorn(a, b, C, SinkhornConfig(eps))
        assert np.array_equal(p1.entries, p2.entries) and c1 == c2


def test_sinkhorn_cost_monotone_in_eps(rng):
    a, b = random_measure(rng, 30), random_measure(rng, 25)
    C = build_cost(a.support, b.support, 2)
    costs = [sinkhorn(a, b, C, SinkhornConfig(eps))[1] for eps in (1e-1, 1e-2, 1e-3)]
    assert costs[0] >= costs[1] >= costs[2]


def test_sinkhorn_zero_weights_are_floored():
    a = DiscreteMeasure([0.0, 0.5, 1.0], [0.5, 0.0, 0.5])
    b = DiscreteMeasure.uniform([0.0, 1.0])
    plan, cost = sinkhorn(a, b, build_cost(a.support, b.support, 2), SinkhornConfig(1e-2))
    assert plan.converged
    assert cost == pytest.approx(0.0, abs=1e-6)


def test_sinkhorn_shape_mismatch():
    a = DiscreteMeasure.uniform([0.0, 1.0])
    with pytest.raises(ValidationError):
        sinkhorn(a, a, build_cost([0.0], [1.0]), SinkhornConfig())


def test_sinkhorn_plain_underflow_raises():
    a = DiscreteMeasure.uniform([0.0, 1.0])
    b = DiscreteMeasure.uniform([50.0, 60.0])
    C = build_cost(a.support, b.support, 2)
    with pytest.raises(NumericalError, match="log_domain"):
        sinkhorn(a, b, C, SinkhornConfig(1e-2, log_domain=False))
    plan, _ = sinkhorn(a, b, C, SinkhornConfig(1e-2, log_domain=True))
    assert plan.converged


@pytest.mark.parametrize("seed, skip, swap", [(0, 0, False), (1, 132, True)])
def test_sinkhorn_split_plans_converge(seed, skip, swap):
    # At p=1, eps=1e-3 these plans fall apart into blocks with no
    # representable mass between them; the blocks must still be balanced.
    r = np.random.default_rng(seed)
    for _ in range(skip + 1):
        n, m = r.integers(1, 65, 2)
        a = DiscreteMeasure(r.random(n), r.dirichlet(np.ones(n)))
        b = DiscreteMeasure(r.random(m), r.dirichlet(np.ones(m)))
    if swap:
        a, b = b, a
    plan, _ = sinkhorn(a, b, build_cost(a.support, b.support, 1), SinkhornConfig(1e-3))
    assert plan.converged
    assert plan.marginal_violation <= 1e-6


def test_sinkhorn_nonconvergence_is_flagged(rng, caplog):
    a, b = random_measure(rng, 60), random_measure(rng, 60)
    with caplog.at_level(logging.WARNING):
        plan, _ = sinkhorn(a, b, build_cost(a.support, b.support, 1), SinkhornConfig(1e-3, max_iterations=2))
    assert not plan.converged
    assert plan.iterations <= 2
    assert plan.marginal_violation > 1e-6
    assert "did not converge" in caplog.text


def test_config_validation():
    with pytest.raises(ValidationError):
        SinkhornConfig(0.0)
    with pytest.raises(ValidationError):
        SinkhornConfig(1e-2, max_iterations=0)
    assert SinkhornConfig(1e-3).use_log_domain
    assert not SinkhornConfig(1e-2).use_log_domain


# -- distances ---------------------------------------------------------------


def test_distance_self_small(rng):
    a = random_measure(rng, 40)
    assert wasserstein_distance(a, a, 2, SinkhornConfig(1e-3)) <= 0.05


def test_distance_diracs():
    d = wasserstein_distance(DiscreteMeasure.dirac(0.2), DiscreteMeasure.dirac(0.7), 1)
    assert d == pytest.approx(0.5, abs=1e-6)


def test_distance_shifted_histogram():
    x = np.linspace(0.0, 0.75, 64)
    a, b = DiscreteMeasure.uniform(x), DiscreteMeasure.uniform(x + 0.25)
    assert wasserstein_distance(a, b, 1, SinkhornConfig(1e-3)) == pytest.approx(0.25, abs=0.01)


def test_distance_raises_on_nonconvergence(rng):
    a, b = random_measure(rng, 60), random_measure(rng, 60)
    with pytest.raises(ConvergenceError) as info:
        wasserstein_distance(a, b, 1, SinkhornConfig(1e-3, max_iterations=2))
    assert info.value.violation > 1e-6


@given(measures(), measures())
def test_distance_symmetric(a, b):
    cfg = SinkhornConfig(1e-2)
    assert abs(wasserstein_distance(a, b, 2, cfg) - wasserstein_distance(b, a, 2, cfg)) <= 1e-6


# -- exact 1D oracle ---------------------------------------------------------


def test_exact_identity(rng):
    a = random_measure(rng, 20)
    assert exact_1d_wasserstein(a, a, 1) == 0.0
    assert exact_1d_wasserstein(a, a, 2) == 0.0


def test_exact_diracs():
    assert exact_1d_wasserstein(DiscreteMeasure.dirac(0.0), DiscreteMeasure.dirac(1.0), 2) == 1.0


def test_exact_two_atoms():
    a = DiscreteMeasure.uniform([0.0, 0.5])
    b = DiscreteMeasure.uniform([0.5, 1.0])
    assert exact_1d_wasserstein(a, b, 1) == pytest.approx(0.5)


def test_exact_rejects_2d():
    m = DiscreteMeasure([[0.0, 0.0]], [1.0])
    with pytest.raises(ValidationError):
        exact_1d_wasserstein(m, m)


@given(measures(), measures(), measures())
def test_exact_triangle_inequality(a, b, c):
    for p in (1, 2):
        ab = exact_1d_wasserstein(a, b, p)
        bc = exact_1d_wasserstein(b, c, p)
        ac = exact_1d_wasserstein(a, c, p)
        assert ac <= ab + bc + 1e-9


@given(measures(), st.floats(-1, 1))
def test_exact_translation(a, t):
    shifted = DiscreteMeasure(a.support + t, a.weights)
    assert exact_1d_wasserstein(a, shifted, 2) == pytest.approx(abs(t), abs=1e-9)


def test_exact_matches_scipy(rng):
    from scipy.stats import wasserstein_distance as scipy_w1

    for _ in range(20):
        a, b = random_measure(rng, 15), random_measure(rng, 9)
        ref = scipy_w1(a.support, b.support, a.weights, b.weights)
        assert exact_1d_wasserstein(a, b, 1) == pytest.approx(ref, abs=1e-12)
