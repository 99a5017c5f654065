import math

import numpy as np
import pytest

from kproc.clock import (
    Tag,
    clock_eval,
    clock_inverse,
    initial_factor,
    replica_seeds,
    sample_mark_bank,
    sample_marks,
    uniforms,
)
from kproc.errors import BeyondWindow, NonPositiveWindow
from kproc.params import INF, parse_family, split_weights


@pytest.fixture
def fam():
    return parse_family("poly:a=2,b=0;c=0.5")


def _same_marks(p, q):
    return (np.array_equal(p.sites, q.sites) and np.array_equal(p.sigma, q.sigma)
            and np.array_equal(p.jump, q.jump) and np.array_equal(p.t_factor, q.t_factor))


def test_uniforms_are_deterministic_and_open():
    u = uniforms(5, Tag.MARKS, 3, np.arange(100000))
    assert np.array_equal(u, uniforms(5, Tag.MARKS, 3, np.arange(100000)))
    assert u.min() > 0 and u.max() < 1
    assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / len(u))
    # neighbouring keys give unrelated values
    v = uniforms(6, Tag.MARKS, 3, np.arange(100000))
    assert abs(np.corrcoef(u, v)[0, 1]) < 0.02
    assert not np.array_equal(uniforms(5, Tag.HOLDING, 3, np.arange(10)), u[:10])


def test_replica_seed_streams_are_disjoint():
    a = replica_seeds(1, 1000, stream=0)
    b = replica_seeds(1, 1000, stream=1)
    assert len(np.unique(np.r_[a, b])) == 2000
    assert np.array_equal(a[:10], replica_seeds(1, 10, stream=0))


def test_marks_are_reproducible(fam):
    p = sample_marks(fam, 1e-2, 20.0, 11)
    q = sample_marks(fam, 1e-2, 20.0, 11)
    assert _same_marks(p, q)
    assert not _same_marks(p, sample_marks(fam, 1e-2, 20.0, 12))


def test_wider_window_only_appends(fam):
    short = sample_marks(fam, 1e-2, 5.0, 3)
    long = sample_marks(fam, 1e-2, 40.0, 3)
    k = len(short.sigma)
    assert np.all(long.sigma[k:] > 5.0)
    assert np.array_equal(long.sigma[:k], short.sigma)
    assert np.array_equal(long.sites[:k], short.sites)
    assert np.array_equal(long.jump[:k], short.jump)


def test_coarser_cutoff_is_a_filter(fam):
    fine = sample_marks(fam, 1e-3, 10.0, 8)
    coarse = sample_marks(fam, 5e-2, 10.0, 8)
    keep = fam.gam_array(fine.sites) >= 5e-2
    assert np.array_equal(fine.sites[keep], coarse.sites)
    assert np.array_equal(fine.sigma[keep], coarse.sigma)
    assert np.array_equal(fine.jump[keep], coarse.jump)


def test_mark_fields_are_consistent(fam):
    p = sample_marks(fam, 1e-2, 30.0, 4)
    assert np.all(np.diff(p.sigma) >= 0)
    assert np.all(fam.gam_array(p.sites) >= 1e-2)
    assert np.allclose(p.jump, fam.gam_array(p.sites) * p.t_factor, rtol=0, atol=0)
    for x in np.unique(p.sites)[:5]:
        assert p.index[p.sites == x].tolist() == list(range(1, int(np.sum(p.sites == x)) + 1))


def test_site_counts_are_poisson(fam):
    s, n = 10.0, 400
    counts = np.array([np.sum(sample_marks(fam, 0.2, s, int(sd)).sites == 1)
                       for sd in replica_seeds(2, n)])
    # lam_1 = 1: Poisson(10) counts
    assert abs(counts.mean() - s) < 3 * math.sqrt(s / n)
    assert abs(counts.var(ddof=1) - s) < 3 * s * math.sqrt(2 / (n - 1)) + 3 * math.sqrt(s / n)


def test_holding_factors_are_unit_exponential():
    T0 = initial_factor(replica_seeds(9, 200000))
    assert abs(T0.mean() - 1) < 3 / math.sqrt(len(T0))
    assert abs(np.mean(T0 > 1) - math.exp(-1)) < 3 * math.sqrt(0.25 / len(T0))


def test_clock_eval_jumps_and_drift(fam):
    p = sample_marks(fam, 1e-2, 10.0, 21)
    off = fam.gam(3) * p.T0
    assert clock_eval(p, 3, 0.0) == (off, off)
    for k in (0, 5, len(p.sigma) - 1):
        s = float(p.sigma[k])
        right, left = clock_eval(p, INF, s)
        assert right - left == pytest.approx(p.jump[k], rel=1e-12)
        assert right == pytest.approx(fam.c * s + p.cumulative_jumps[k], rel=1e-12)
    with pytest.raises(BeyondWindow):
        clock_eval(p, INF, 10.5)
    with pytest.raises(NonPositiveWindow):
        sample_marks(fam, 1e-2, 0.0, 1)


def test_clock_inverse_is_right_continuous_inverse(fam):
    p = sample_marks(fam, 1e-2, 10.0, 22)
    total = clock_eval(p, INF, 10.0)[0]
    for v in np.linspace(0.0, 0.9 * total, 37):
        s = clock_inverse(p, INF, v)
        right, left = clock_eval(p, INF, s)
        assert left <= v + 1e-12
        assert right >= v - 1e-12


def test_bank_rows_match_single_paths(fam):
    seeds = replica_seeds(4, 40)
    bank = sample_mark_bank(fam, 1e-2, seeds, 3.0)
    assert np.all(bank.clock_total() > 3.0)
    for r in (0, 17, 39):
        p = sample_marks(fam, 1e-2, float(bank.s_max[r]), int(seeds[r]))
        k = int(bank.count[r])
        assert np.array_equal(bank.sigma[r, :k], p.sigma)
        assert np.array_equal(bank.site[r, :k], p.sites)
        assert np.array_equal(bank.jump[r, :k], p.jump)


def test_bank_restriction_matches_coarse_sampling(fam):
    seeds = replica_seeds(5, 20)
    bank = sample_mark_bank(fam, 1e-3, seeds, 2.0)
    coarse = bank.restrict(0.05)
    for r in (0, 11):
        p = sample_marks(fam, 0.05, float(bank.s_max[r]), int(seeds[r]))
        k = int(coarse.count[r])
        assert np.array_equal(coarse.sigma[r, :k], p.sigma)
        assert np.array_equal(coarse.site[r, :k], p.sites)


def test_split_marks_thin_base_marks():
    base = parse_family("poly:a=3,b=1;c=0")
    sf = split_weights(base)
    p = sample_marks(base, 1e-3, 5.0, 13)
    q = sample_marks(sf, 1e-3, 5.0, 13)
    assert np.array_equal(p.sigma, q.sigma)
    assert np.array_equal(p.sites, sf.project(q.sites))
    assert np.array_equal(p.jump, q.jump)
