import math

import numpy as np
import pytest
from scipy.linalg import expm

from kproc.analysis import (
    DomainFunction,
    build_domain_function,
    chapman_kolmogorov_gap,
    correction_exponent,
    default_delta,
    domain_report,
    empirical_laplace,
    estimate_rate,
    estimate_semigroup,
    estimate_transition,
    exact_rate,
    extrapolate,
    generator_apply,
    laplace_phi,
    resolvent_residual,
    resolvent_solve,
    truncated_chain,
)
from kproc.errors import GridTooCoarse, PositiveC, StateOutsideCutoff
from kproc.params import INF, parse_family, split_weights, tail_mass, with_c

F0 = parse_family("poly:a=2,b=0;c=0")
F1 = with_c(F0, 1.0)


def _generator(fam, delta):
    """Hand-built generator of the truncated chain; infinity first when c > 0."""
    sites = fam.cutoff_set(delta)
    lam, gam = fam.lam_array(sites), fam.gam_array(sites)
    m = len(sites)
    if fam.c == 0:
        Q = np.zeros((m, m))
        for i in range(m):
            Q[i] = lam / lam.sum() / gam[i]
            Q[i, i] -= 1 / gam[i]
        return list(sites), Q
    Q = np.zeros((m + 1, m + 1))
    Q[0, 1:] = lam / fam.c
    Q[0, 0] = -lam.sum() / fam.c
    for i in range(m):
        Q[i + 1, 0] = 1 / gam[i]
        Q[i + 1, i + 1] = -1 / gam[i]
    return [INF] + list(sites), Q


def test_exact_rates():
    assert exact_rate(F0, 2, 2) == -4.0
    assert exact_rate(F0, 1, 2) == 0.0
    assert exact_rate(F0, INF, 1) == math.inf
    assert exact_rate(F0, 3, INF) == 0.0
    assert exact_rate(F1, INF, 1) == 1.0
    assert exact_rate(F1, 2, INF) == 4.0
    assert exact_rate(F1, INF, INF) == -math.inf


@pytest.mark.parametrize("fam", [F0, F1])
def test_truncated_chain_matches_matrix_exponential(fam):
    labels, Q = _generator(fam, 0.05)
    ch = truncated_chain(fam, 0.05)
    order = [list(ch.labels).index(x) for x in labels]
    for t in (0.0, 0.1, 1.0, 7.0):
        P = ch.matrix(t)[np.ix_(order, order)]
        assert np.allclose(P, expm(Q * t), atol=1e-12)
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)
    P = ch.matrix
    assert np.allclose(P(0.3) @ P(0.5), P(0.8), atol=1e-12)


def test_truncated_chain_stationary_law():
    ch = truncated_chain(F1, 0.05)
    P = ch.matrix(200.0)
    assert np.allclose(P, np.tile(ch.weights, (len(ch.labels), 1)), atol=1e-10)
    with pytest.raises(StateOutsideCutoff):
        ch.index(9)


@pytest.mark.parametrize("fam", [F0, F1])
@pytest.mark.parametrize("x", [INF, 1, 2])
def test_transition_estimate_agrees_with_exact_chain(fam, x):
    ch = truncated_chain(fam, 0.05)
    for y in (1, 3):
        e = estimate_transition(fam, 0.05, x, y, 0.3, 40000, 17)
        assert abs(e.value - ch.p(x, y, 0.3)) < 4 * e.se
    assert estimate_transition(fam, 0.05, 2, 2, 0.0, 10, 1).value == 1.0


def test_extrapolation_recovers_noiseless_intercept():
    ts = np.array([0.2, 0.1, 0.05, 0.025])
    vals = -1.0 + 0.7 * ts ** 0.5 - 2.0 * ts
    fit = extrapolate(ts, vals, np.full(4, 1e-3), 0.5)
    assert fit["intercept"] == pytest.approx(-1.0, abs=1e-10)
    line = extrapolate(ts, 3.0 - 2.0 * ts, np.full(4, 1e-3))
    assert line["intercept"] == pytest.approx(3.0, abs=1e-12)


def test_correction_exponent():
    assert correction_exponent(F0) == 0.5
    assert correction_exponent(F1) == 0.5
    g = parse_family("poly:a=3,b=1;c=1")
    assert correction_exponent(g) == pytest.approx(1 / 3)
    assert correction_exponent(with_c(g, 0)) == pytest.approx(2 / 3)


def test_default_delta_meets_tail_rule():
    for t in (0.2, 0.05):
        d = default_delta(F0, t)
        assert tail_mass(F0, d) <= t / 100
        # the next coarser base site would break the rule
        n = round(d ** -0.5)
        assert tail_mass(F0, (n - 1) ** -2.0) > t / 100


def test_rate_estimate_on_a_finite_chain():
    # at a coarse cutoff re-entry can land on 2 again: the chain's rate is
    # -(1/gam_2)(1 - lam_2/sum lam) = -3, and its quotients are analytic in t
    labels, Q = _generator(F0, 0.05)
    q22 = Q[labels.index(2), labels.index(2)]
    assert q22 == pytest.approx(-3.0)
    ch = truncated_chain(F0, 0.05)
    r = estimate_rate(F0, 2, 2, [0.08, 0.04, 0.02, 0.01], 200000, 5, delta_grid=0.05, kappa=None)
    fit = r["extrapolation"]
    assert abs(fit["intercept"] - q22) < 4 * fit["se"]
    for row in r["rows"]:
        exact_q = (ch.p(2, 2, row["t"]) - 1) / row["t"]
        assert abs(row["quotient"] - exact_q) < 4 * row["se"]


def test_rate_estimate_zero_and_divergent():
    r = estimate_rate(F1, 1, 2, [0.2, 0.1, 0.05, 0.025], 20000, 3, delta_grid=1e-2)
    assert r["exact"] == 0.0 and r["agrees"]
    r = estimate_rate(F1, INF, INF, [0.1, 0.05, 0.025, 0.0125, 0.00625], 20000, 3, delta_grid=1e-3)
    assert r["divergence"] == "-inf"
    # two replicas per t: SEs of order 1/t swamp |q_11| = 1 (seed chosen so
    # that no t has both replicas agree, which would give a zero SE)
    with pytest.raises(GridTooCoarse):
        estimate_rate(F0, 1, 1, [0.3, 0.25, 0.2], 2, 63, delta_grid=1e-2)


def test_domain_function_is_balanced():
    f = build_domain_function(F0, {1: 1.0})
    rep = domain_report(f)
    assert rep["balanced"] and rep["absolutely_summable"]
    assert f.support == [1, 2]
    assert f(2) == -1.0 and f(INF) == 0.0 and f(50) == 0.0
    g = build_domain_function(parse_family("poly:a=3,b=1;c=0"), {1: 1.0, 2: -0.5})
    assert g.support == [1, 2]  # already balanced: lam_1 * 1 + lam_2 * (-0.5) = 0
    big = build_domain_function(F0, {1: 1.0, 2: 1.0, 3: 1.0})
    assert domain_report(big)["balanced"]
    assert max(abs(v) for v in big.increments.values()) <= 1.5


def test_generator_matches_truncated_chain_on_balanced_functions():
    # a balanced f is annihilated by the entry step, so the truncated
    # generator acts exactly as -f(x)/gam(x) on any cutoff holding its support
    f = build_domain_function(F0, {1: 1.0, 3: -2.0})
    labels, Q = _generator(F0, 0.02)
    vec = np.array([f(x) for x in labels])
    Qf = Q @ vec
    for i, x in enumerate(labels):
        assert Qf[i] == pytest.approx(generator_apply(F0, f, x), abs=1e-12)
    assert generator_apply(F0, f, INF) == 0.0
    with pytest.raises(PositiveC):
        generator_apply(F1, f, 1)


def test_resolvent_identity_on_random_data():
    rng = np.random.default_rng(4)
    for _ in range(20):
        support = rng.choice(np.arange(1, 30), size=int(rng.integers(1, 6)), replace=False)
        g = {int(s): float(v) for s, v in zip(support, rng.uniform(-1, 1, len(support)))}
        g_inf = float(rng.uniform(-1, 1))
        f = resolvent_solve(F0, g, g_inf)
        assert resolvent_residual(F0, f, g, g_inf, range(1, 101)) <= 1e-12
        assert f.sup_norm() <= max([abs(v) for v in g.values()] + [abs(g_inf)]) + 1e-12
        # the far tail approaches the limit from the declared slope
        assert f.increment(10 ** 4) / F0.gam(10 ** 4) == pytest.approx(f.tail_slope, rel=1e-6)


def test_constant_resolvent():
    f = resolvent_solve(F0, {}, 2.5)
    assert f(INF) == 2.5 and f(7) == 2.5 and f.tail_slope == 0


def test_semigroup_on_split_family_projects():
    base = parse_family("poly:a=3,b=1;c=0")
    sf = split_weights(base)
    f = build_domain_function(base, {1: 1.0})
    a = estimate_semigroup(base, 1e-2, f, 1, 0.3, 20000, 2)
    b = estimate_semigroup(sf, 1e-2, f, sf.code(1, 0), 0.3, 20000, 3)
    assert abs(a.value - b.value) < 3 * math.hypot(a.se, b.se)
    assert estimate_semigroup(base, 1e-2, f, 1, 0.0, 10, 1).value == 1.0


def test_laplace_closed_form_properties():
    assert laplace_phi(F1, 1, 0.0) == 1.0
    vals = [laplace_phi(F1, 1, b) for b in (0.5, 1, 2, 5)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    # truncated form: the sum over the other retained sites, written out
    delta, beta = 1e-4, 2.0
    rest = math.fsum(x ** -2.0 / (1 + beta * x ** -2.0) for x in range(2, 101))
    assert laplace_phi(F1, 1, beta, delta=delta) == pytest.approx(1 / (1 + beta + beta * rest), rel=1e-13)
    assert laplace_phi(F1, 1, beta, delta=1e-10) == pytest.approx(laplace_phi(F1, 1, beta), rel=1e-5)


def test_laplace_empirical_small():
    ests = empirical_laplace(F1, 0.05, 1, [0.0, 1.0, 3.0], 20000, 8)
    assert ests[0].value == 1.0
    for e in ests[1:]:
        assert abs(e.value - e.extra["closed_form"]) < 3 * e.se


def test_chapman_kolmogorov_gap_small():
    assert chapman_kolmogorov_gap(F0, 0.05, 1, 1, 0.0, 0.3, 10, 1).value == 0.0
    for fam in (F0, F1):
        e = chapman_kolmogorov_gap(fam, 0.05, 1, 2, 0.2, 0.2, 20000, 6)
        assert abs(e.value) < 3 * e.se
        ch = truncated_chain(fam, 0.05)
        assert abs(e.extra["direct"] - ch.p(1, 2, 0.4)) < 4 * math.sqrt(0.25 / 20000)


def test_domain_function_tail_increment():
    f = DomainFunction(F0, 1.0, {1: 0.5}, tail_slope=2.0, tail_pole=1.0)
    g = F0.gam(10)
    assert f(10) == pytest.approx(1.0 + 2.0 * g / (1 + g))
    assert f.increment_array(np.array([INF, 1, 10])).tolist() == [0.0, 0.5, f.increment(10)]
