import json
import math

import numpy as np
import pytest

from kproc.clock import clock_eval, replica_seeds
from kproc.errors import EmptyCutoff, OrderingViolation, OutOfHorizon, StateOutsideCutoff
from kproc.params import INF, parse_family, split_weights, with_c
from kproc.trajectory import (
    Trajectory,
    batch_states,
    batch_states_coupled,
    classify_visits,
    coupling_time_change,
    jump_chain_states,
    occupation_fractions,
    simulate_jump_chain,
    simulate_truncated,
    simulate_truncated_with_path,
    state_at,
    visited_count,
)

F0 = parse_family("poly:a=2,b=0;c=0")
F1 = with_c(F0, 1.0)


def _check_cadlag(traj):
    assert traj.times[0] == 0.0
    assert np.all(np.diff(traj.times) > 0)
    assert traj.times[-1] < traj.horizon
    assert np.all(traj.states[1:] != traj.states[:-1])


@pytest.mark.parametrize("fam", [F0, F1])
@pytest.mark.parametrize("y", [INF, 1, 4])
def test_segment_structure(fam, y):
    for seed in range(5):
        traj = simulate_truncated(fam, 1e-2, y, 20.0, seed)
        _check_cadlag(traj)
        assert traj.states[0] == y or (y == INF and fam.c == 0)
        assert np.all(fam.gam_array(traj.states[traj.states != INF]) >= 1e-2)
        if fam.c == 0:
            assert INF not in traj.states
        else:
            # site and infinity segments alternate
            is_inf = traj.states == INF
            assert np.all(is_inf[1:] != is_inf[:-1])


def test_jump_chain_structure():
    for fam in (F0, F1):
        traj = simulate_jump_chain(fam, 1e-2, 2, 20.0, 3)
        _check_cadlag(traj)
        if fam.c > 0:
            is_inf = traj.states == INF
            assert np.all(is_inf[1:] != is_inf[:-1])


def test_infinity_occupation_equals_drift_time():
    # time at infinity up to Gamma(s) is c * s, by brute-force gap summation
    for seed in range(4):
        traj, path = simulate_truncated_with_path(F1, 1e-2, INF, 30.0, seed)
        for s in (1.0, 5.0, 0.5 * float(path.sigma[-1])):
            v = clock_eval(path, INF, s)[0]
            if v > traj.horizon:
                continue
            ends = np.minimum(traj.ends, v)
            inf_time = math.fsum(np.clip(ends - traj.times, 0, None)[traj.states == INF])
            assert inf_time == pytest.approx(F1.c * s, rel=1e-9, abs=1e-12)


def test_restart_identity():
    for fam in (F0, F1):
        for seed in range(5):
            a = simulate_truncated(fam, 1e-2, INF, 15.0, seed)
            b, path = simulate_truncated_with_path(fam, 1e-2, 3, 15.0, seed)
            off = fam.gam(3) * path.T0
            # hold at 3 for gam_3 * T0, then follow the path started at infinity
            times = np.r_[0.0, a.times + off]
            states = np.r_[3, a.states]
            keep = np.r_[True, states[1:] != states[:-1]] & (times < 15.0)
            assert np.array_equal(b.states, states[keep])
            assert np.allclose(b.times, times[keep], rtol=1e-13, atol=1e-13)


def test_state_at_matches_linear_scan():
    traj = simulate_truncated(F1, 1e-2, 2, 10.0, 5)
    rng = np.random.default_rng(0)
    for t in rng.uniform(0, 10.0, 1000):
        i = max(j for j in range(len(traj)) if traj.times[j] <= t)
        assert state_at(traj, t) == traj.states[i]
    assert state_at(traj, 0.0) == 2
    assert state_at(traj, float(traj.times[3])) == traj.states[3]
    with pytest.raises(OutOfHorizon):
        state_at(traj, 10.5)


def test_start_validation():
    with pytest.raises(StateOutsideCutoff):
        simulate_truncated(F0, 0.1, 5, 1.0, 1)
    with pytest.raises(EmptyCutoff):
        simulate_truncated(F0, 2.0, INF, 1.0, 1)
    # with c > 0 an empty cutoff leaves the process at infinity
    traj = simulate_truncated(F1, 2.0, INF, 1.0, 1)
    assert traj.states.tolist() == [INF]


def test_occupation_fractions_sum_to_one():
    traj = simulate_truncated(F1, 1e-2, INF, 50.0, 2)
    occ = occupation_fractions(traj)
    assert math.fsum(occ.values()) == pytest.approx(1.0, abs=1e-12)
    assert occupation_fractions(Trajectory(3.0, 1, np.array([0.0]), np.array([1]))) == {1: 1.0}
    assert INF not in occupation_fractions(simulate_truncated(F0, 1e-2, INF, 50.0, 2))


def test_visited_count_is_monotone():
    traj = simulate_truncated(F0, 1e-3, INF, 20.0, 4)
    counts = [visited_count(traj, e) for e in (0.5, 0.1, 0.02, 1e-4)]
    assert counts == sorted(counts)
    assert counts[0] == 1  # only site 1 has gam > 0.5
    assert counts[-1] == len(np.unique(traj.states))


def test_visit_classification():
    traj = simulate_truncated(F0, 1e-2, 1, 30.0, 6)
    vc = classify_visits(traj, 1)
    ivs = vc.intervals
    assert len(ivs) >= 2
    for (h, l), (h2, _) in zip(ivs, ivs[1:]):
        assert h < l <= h2
    assert vc.query(0.5 * (ivs[0][0] + ivs[0][1])) == "first"
    assert vc.query(0.5 * (ivs[1][0] + ivs[1][1])) == "not-first"
    assert vc.query(0.5 * (ivs[0][1] + ivs[1][0])) is None
    assert classify_visits(traj, 10 ** 6).intervals == []


def test_export_formats(tmp_path):
    traj = simulate_truncated(F1, 1e-2, INF, 3.0, 1)
    traj.to_jsonl(tmp_path / "t.jsonl")
    recs = [json.loads(line) for line in open(tmp_path / "t.jsonl")]
    assert recs[0] == {"t": 0.0, "state": "inf"}
    assert [r["t"] for r in recs] == traj.times.tolist()
    traj.to_csv(tmp_path / "t.csv")
    lines = open(tmp_path / "t.csv").read().splitlines()
    assert lines[0] == "t,state" and len(lines) == len(traj) + 1


@pytest.mark.parametrize("fam", [F0, F1])
@pytest.mark.parametrize("y", [INF, 1, 3])
def test_batch_states_match_single_paths(fam, y):
    seeds = replica_seeds(7, 200)
    t = 0.4
    states, first = batch_states(fam, 1e-2, y, t, seeds, first_visit=True)
    for r, sd in enumerate(seeds):
        traj = simulate_truncated(fam, 1e-2, y, t * 1.5, int(sd))
        assert states[r] == state_at(traj, t)
        if states[r] != INF:
            assert first[r] == classify_visits(traj, int(states[r])).is_first(t)


def test_coupled_batch_matches_separate_batches():
    seeds = replica_seeds(8, 300)
    deltas = [0.1, 1e-2, 1e-3]
    coupled, _ = batch_states_coupled(F0, deltas, 1, 0.3, seeds)
    for d, st in zip(deltas, coupled):
        alone, _ = batch_states(F0, d, 1, 0.3, seeds)
        assert np.array_equal(st, alone)


def test_jump_chain_batch_matches_single_paths():
    seeds = replica_seeds(9, 200)
    states = jump_chain_states(F1, 1e-2, 2, 0.5, seeds)
    for r, sd in enumerate(seeds):
        assert states[r] == state_at(simulate_jump_chain(F1, 1e-2, 2, 1.0, int(sd)), 0.5)


def test_jump_chain_holding_and_entry_laws():
    delta = 0.02
    sites = F1.cutoff_set(delta)
    lam_total = F1.total_rate(delta)
    trajs = [simulate_jump_chain(F1, delta, INF, 200.0, s) for s in range(20)]
    inf_hold, hold1, entries = [], [], []
    for tr in trajs:
        d = tr.durations[:-1]
        st = tr.states[:-1]
        inf_hold += d[st == INF].tolist()
        hold1 += d[st == 1].tolist()
        entries += tr.states[1:][tr.states[:-1] == INF].tolist()
    inf_hold, hold1 = np.array(inf_hold), np.array(hold1)
    # exponential holding: mean c / sum(lam) at infinity, gam_x at a site
    mu = F1.c / lam_total
    assert abs(inf_hold.mean() - mu) < 3 * mu / math.sqrt(len(inf_hold))
    assert abs(hold1.mean() - 1.0) < 3 / math.sqrt(len(hold1))
    entries = np.array(entries)
    p1 = 1.0 / lam_total
    assert abs(np.mean(entries == 1) - p1) < 3 * math.sqrt(p1 * (1 - p1) / len(entries))
    assert np.isin(entries, sites).all()


def test_split_trajectory_projects_onto_base():
    base = parse_family("poly:a=3,b=1;c=0")
    sf = split_weights(base)
    for seed in range(5):
        a = simulate_truncated(base, 1e-2, INF, 10.0, seed)
        b = simulate_truncated(sf, 1e-2, INF, 10.0, seed).project()
        assert np.array_equal(a.times, b.times)
        assert np.array_equal(a.states, b.states)


def test_coupling_bounds_hold():
    done = 0
    for seed in range(30):
        try:
            r = coupling_time_change(F0, 0.1, 0.01, 0.01 / 8, 5.0, seed)
        except OrderingViolation:
            continue
        done += 1
        assert r["sup_distance"] <= 0.2
        assert r["sup_time_shift"] <= r["time_shift_bound"] + 1e-12
    assert done > 0


@pytest.mark.parametrize("fam", [F0, F1])
def test_shared_bank_matches_per_start_batches(fam):
    from kproc.trajectory import batch_states_many_starts
    seeds = replica_seeds(10, 500)
    starts = [INF, 1, 2, 5]
    shared = batch_states_many_starts(fam, 1e-2, starts, 0.3, seeds)
    for y in starts:
        alone, _ = batch_states(fam, 1e-2, y, 0.3, seeds)
        assert np.array_equal(shared[y], alone)
