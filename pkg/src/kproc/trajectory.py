"""Paths of the truncated process, a jump-chain oracle and the time-change coupling."""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .clock import (
    Tag,
    MarkPath,
    initial_factor,
    sample_mark_bank,
    sample_marks,
    stream_prefix,
    uniforms_from_prefix,
    _as_seed,
)
from .errors import (
    EmptyCutoff,
    OrderingViolation,
    OutOfHorizon,
    StateOutsideCutoff,
    ValidationError,
)
from .params import INF, format_state, tail_mass

# rows per chunk are chosen so a chunk holds about this many padded cells
_CELLS_PER_CHUNK = 2_000_000


@dataclass(frozen=True)
class Trajectory:
    """Right-continuous step function on ``[0, horizon)``.

    ``times[i]`` is the start of the segment spent in ``states[i]``; the
    first segment starts at 0 and consecutive states differ.
    """

    horizon: float
    start: int
    times: np.ndarray
    states: np.ndarray
    family: object = field(repr=False, default=None)
    delta: float = None
    seed: int = None
    construction: str = "clock"

    def __len__(self) -> int:
        return len(self.times)

    @property
    def ends(self) -> np.ndarray:
        return np.r_[self.times[1:], self.horizon]

    @property
    def durations(self) -> np.ndarray:
        return self.ends - self.times

    def segments(self) -> list:
        return list(zip(self.times.tolist(), self.states.tolist()))

    def state_at(self, t: float) -> int:
        return state_at(self, t)

    def project(self) -> "Trajectory":
        """Map split-site codes to base sites and merge repeated states."""
        states = np.asarray(self.family.project(self.states), dtype=np.int64)
        keep = np.r_[True, states[1:] != states[:-1]]
        base = getattr(self.family, "base", self.family)
        start = int(self.family.project(np.array([self.start]))[0])
        return Trajectory(self.horizon, start, self.times[keep], states[keep], base,
                          self.delta, self.seed, self.construction + "+projected")

    def records(self) -> list:
        return [{"t": float(t), "state": _state_json(s)} for t, s in zip(self.times, self.states)]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "state"])
            for t, s in zip(self.times, self.states):
                w.writerow([repr(float(t)), format_state(s)])


def _state_json(s):
    return "inf" if int(s) == INF else int(s)


def _check_start(family, delta, y):
    y = int(y)
    if y == INF:
        if family.c == 0 and len(family.cutoff_set(delta)) == 0:
            raise EmptyCutoff("c = 0 and no site survives the cutoff: nothing to enter from infinity")
        return y
    if family.gam(y) < delta:
        raise StateOutsideCutoff(f"start {y} has gam < delta = {delta}")
    return y


def _path_clock(path: MarkPath, y):
    """Clock values just before and just after each mark of ``path``."""
    off = path.family.gam(y) * path.T0 if int(y) != INF else 0.0
    cum = path.cumulative_jumps
    prev = np.r_[0.0, cum[:-1]] if len(cum) else cum
    drift = path.family.c * path.sigma
    return off, off + drift + prev, off + drift + cum


def _covering_path(family, delta, y, horizon, seed) -> MarkPath:
    rate = family.c + family.cutoff_mass(delta)
    s = 2.0 * horizon / rate if rate > 0 else 1.0
    while True:
        path = sample_marks(family, delta, s, seed)
        off, _, _ = _path_clock(path, y)
        cum = path.cumulative_jumps
        if off + family.c * s + (cum[-1] if len(cum) else 0.0) > horizon:
            return path
        s *= 2.0


def _segments_from_path(path: MarkPath, y, horizon: float):
    off, before, after = _path_clock(path, y)
    starts, states = [], []
    if int(y) != INF and off > 0:
        starts.append(0.0)
        states.append(int(y))
    c = path.family.c
    keep = after > before
    if c > 0:
        # infinity fills the drift between consecutive mark intervals
        prev_after = np.r_[off, after[:-1]]
        gap = before > prev_after
        st = np.empty(2 * len(before))
        sv = np.empty(2 * len(before), dtype=np.int64)
        st[0::2], sv[0::2] = prev_after, INF
        st[1::2], sv[1::2] = before, path.sites
        mask = np.empty(2 * len(before), dtype=bool)
        mask[0::2], mask[1::2] = gap, keep
        st, sv = st[mask], sv[mask]
        # trailing drift after the last mark
        last = after[-1] if len(after) else off
        st, sv = np.r_[st, last], np.r_[sv, INF]
    else:
        st, sv = before[keep], path.sites[keep]
    times = np.r_[starts, st]
    vals = np.r_[np.asarray(states, dtype=np.int64), sv].astype(np.int64)
    inside = times < horizon
    times, vals = times[inside], vals[inside]
    if len(times) == 0 or times[0] > 0:
        # only possible with c > 0 and a start at infinity, where st[0] == 0
        raise AssertionError("trajectory does not start at time 0")
    new = np.r_[True, vals[1:] != vals[:-1]]
    return times[new], vals[new]


def simulate_truncated(family, delta: float, y, horizon: float, seed) -> Trajectory:
    """Path of the truncated process started at ``y`` on ``[0, horizon)``."""
    if not horizon > 0:
        raise ValidationError("horizon must be positive")
    y = _check_start(family, delta, y)
    path = _covering_path(family, delta, y, horizon, seed)
    times, states = _segments_from_path(path, y, horizon)
    return Trajectory(float(horizon), y, times, states, family, float(delta),
                      int(_as_seed(seed)), "clock")


def simulate_truncated_with_path(family, delta, y, horizon, seed):
    y = _check_start(family, delta, y)
    path = _covering_path(family, delta, y, horizon, seed)
    times, states = _segments_from_path(path, y, horizon)
    return Trajectory(float(horizon), y, times, states, family, float(delta),
                      int(_as_seed(seed)), "clock"), path


def state_at(traj: Trajectory, t: float) -> int:
    if not (0 <= t <= traj.horizon):
        raise OutOfHorizon(f"t={t} outside [0, {traj.horizon}]")
    i = int(np.searchsorted(traj.times, t, side="right")) - 1
    return int(traj.states[i])


# -- jump chain oracle ---------------------------------------------------------------

_HOLD, _PICK, _INF_HOLD, _ENTRY = 0, 1, 2, 3


def _chain_tables(family, delta):
    sites = family.cutoff_set(delta)
    lam = family.lam_array(sites)
    cum = np.cumsum(lam)
    return sites, family.gam_array(sites), cum


def _pick(sites, cum, u):
    return sites[np.minimum(np.searchsorted(cum, u * cum[-1], side="right"), len(cum) - 1)]


def simulate_jump_chain(family, delta: float, y, horizon: float, seed) -> Trajectory:
    """Path built by exponential holding times and weight-proportional entries."""
    y = _check_start(family, delta, y)
    seeds = np.atleast_1d(_as_seed(seed))
    times, states = _jump_chain_rows(family, delta, y, horizon, seeds, record=True)
    t, s = times[0], states[0]
    new = np.r_[True, s[1:] != s[:-1]]
    return Trajectory(float(horizon), y, t[new], s[new], family, float(delta),
                      int(seeds[0]), "jumpchain")


def jump_chain_states(family, delta: float, y, t: float, seeds) -> np.ndarray:
    """State at time ``t`` of the jump-chain construction for each seed."""
    y = _check_start(family, delta, y)
    return _jump_chain_rows(family, delta, y, t, np.asarray(seeds, dtype=np.uint64), record=False)


def _jump_chain_rows(family, delta, y, horizon, seeds, record):
    sites, gam, cum = _chain_tables(family, delta)
    lam_total = float(cum[-1]) if len(cum) else 0.0
    c = family.c
    n = len(seeds)
    prefix = stream_prefix(seeds, Tag.JUMPCHAIN, 0)
    state = np.full(n, y, dtype=np.int64)
    if y == INF and c == 0:
        state = _pick(sites, cum, uniforms_from_prefix(prefix, 0, _ENTRY))
    clock = np.zeros(n)
    rec_t = [[0.0] for _ in range(n)] if record else None
    rec_s = [[int(s)] for s in state] if record else None
    active = np.arange(n)
    step = 0
    while len(active):
        st = state[active]
        at_inf = st == INF
        g = np.zeros(len(active))
        if (~at_inf).any():
            g[~at_inf] = _lookup(sites, gam, st[~at_inf])
        pre = prefix[active]
        inf_mean = c / lam_total if lam_total else 0.0
        hold = np.where(at_inf,
                        -np.log(uniforms_from_prefix(pre, step, _INF_HOLD)) * inf_mean,
                        -np.log(uniforms_from_prefix(pre, step, _HOLD)) * g)
        clock[active] += hold
        nxt = _pick(sites, cum, uniforms_from_prefix(pre, step, _PICK))
        if c > 0:
            nxt = np.where(at_inf, nxt, INF)
        alive = clock[active] < horizon
        if record:
            for j in np.nonzero(alive)[0]:
                r = active[j]
                rec_t[r].append(float(clock[r]))
                rec_s[r].append(int(nxt[j]))
        state[active[alive]] = nxt[alive]
        active = active[alive]
        step += 1
    if record:
        return [np.array(t) for t in rec_t], [np.array(s, dtype=np.int64) for s in rec_s]
    return state


def _lookup(sites, values, query):
    return values[np.searchsorted(sites, query)]


# -- batched clock construction -----------------------------------------------------


def _bank_query(bank, tau, first_visit=False, start=INF):
    """State of the path from infinity at times ``tau`` (one per row)."""
    after = bank.clock_after()
    prev = np.concatenate([np.zeros((bank.n, 1)), np.cumsum(bank.jump, axis=1)[:, :-1]], axis=1)
    sig = np.where(np.isfinite(bank.sigma), bank.sigma, 0.0)
    k = (after <= tau[:, None]).sum(axis=1)
    valid = k < bank.count
    kk = np.minimum(k, bank.sigma.shape[1] - 1)
    rows = np.arange(bank.n)
    before = bank.family.c * sig[rows, kk] + prev[rows, kk]
    site = bank.site[rows, kk]
    states = np.where(valid & (before <= tau), site, INF)
    if not first_visit:
        return states, None
    cols = np.arange(bank.sigma.shape[1])[None, :]
    same = (bank.site == site[:, None]) & (cols <= kk[:, None])
    earlier = (same & (cols < kk[:, None])).sum(axis=1)
    first_pos = np.argmax(same, axis=1)
    if bank.family.c > 0:
        first = earlier == 0
    else:
        first = earlier == kk - first_pos
    if start != INF:
        # the initial holding interval at ``start`` is its first visit
        if bank.family.c > 0:
            first &= site != start
        else:
            first &= (site != start) | (first_pos == 0)
    return states, np.where(states == INF, True, first)


def batch_states(family, delta: float, y, t: float, seeds, first_visit: bool = False):
    """States at time ``t`` of the clock construction started at ``y``, one per seed.

    Returns ``(states, first)`` where ``first`` flags whether a site state
    is occupied during its first visit (``None`` unless requested).
    """
    (states,), first = batch_states_coupled(family, [delta], y, t, seeds, first_visit)
    return states, first


def batch_states_coupled(family, deltas, y, t: float, seeds, first_visit: bool = False):
    """Like :func:`batch_states` for several cutoffs driven by the same marks.

    One bank is drawn at the finest cutoff and restricted to the others,
    so the estimates differ only through the marks the coarser cutoffs drop.
    First-visit flags refer to the first cutoff in ``deltas``.
    """
    deltas = [float(d) for d in deltas]
    finest = min(deltas)
    for d in deltas:
        y = _check_start(family, d, y)
    seeds = np.asarray(seeds, dtype=np.uint64)
    n = len(seeds)
    off = family.gam(y) * initial_factor(seeds) if y != INF else np.zeros(n)
    tau = t - off
    out = [np.full(n, y, dtype=np.int64) for _ in deltas]
    first = np.ones(n, dtype=bool)
    todo = np.nonzero(tau >= 0)[0]
    coarse = [d for d in deltas if d > finest]
    chunk = _chunk_rows(family, finest, float(np.max(tau[todo])) if len(todo) else 0.0)
    parts = [todo[lo:lo + chunk] for lo in range(0, len(todo), chunk)]
    jobs = [(family, finest, coarse, deltas, seeds[idx], tau[idx], first_visit, y) for idx in parts]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_coupled_chunk, *zip(*jobs)))
    else:
        results = [_coupled_chunk(*job) for job in jobs]
    for idx, (states, fv) in zip(parts, results):
        for j in range(len(deltas)):
            out[j][idx] = states[j]
        if first_visit:
            first[idx] = fv
    return out, (first if first_visit else None)


def _coupled_chunk(family, finest, coarse, deltas, seeds, tau, first_visit, y):
    def need(part, rows):
        short = np.zeros(part.n, dtype=bool)
        for d in coarse:
            short |= part.restrict(d).clock_total() <= tau[rows]
        return short

    bank = sample_mark_bank(family, finest, seeds, tau, need if coarse else None)
    states, first = [], None
    for j, d in enumerate(deltas):
        b = bank if d == finest else bank.restrict(d)
        st, fv = _bank_query(b, tau, first_visit and j == 0, y)
        states.append(st)
        if first_visit and j == 0:
            first = fv
    return states, first


def worker_count() -> int:
    """Process count for replica fan-out, from ``KPROC_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("KPROC_WORKERS", "1")))
    except ValueError:
        return 1


def batch_states_many_starts(family, delta: float, starts, t: float, seeds) -> dict:
    """``{y: states}`` as from :func:`batch_states` for each start ``y``, sharing one bank.

    Paths from different starts use the same marks and differ only in the
    initial holding time, so a bank covering horizon ``t`` serves them all.
    """
    starts = [_check_start(family, delta, y) for y in starts]
    seeds = np.asarray(seeds, dtype=np.uint64)
    T0 = initial_factor(seeds)
    out = {y: np.full(len(seeds), y, dtype=np.int64) for y in starts}
    chunk = _chunk_rows(family, delta, t)
    for lo in range(0, len(seeds), chunk):
        sl = slice(lo, lo + chunk)
        bank = sample_mark_bank(family, delta, seeds[sl], t)
        for y in starts:
            tau = t - family.gam(y) * T0[sl] if y != INF else np.full(bank.n, float(t))
            st, _ = _bank_query(bank, np.maximum(tau, 0.0))
            out[y][sl] = np.where(tau >= 0, st, y)
    return out


def _chunk_rows(family, delta, horizon) -> int:
    rate = family.c + family.cutoff_mass(delta)
    lam_total = family.total_rate(delta)
    expected = lam_total * (horizon / rate if rate > 0 else 1.0)
    # the clock with c = 0 is much smaller than its mean at short times
    per_row = max(8.0, 8.0 * expected)
    return max(256, int(_CELLS_PER_CHUNK / per_row))


# -- time-change coupling -----------------------------------------------------------


def _restrict_path(path: MarkPath, delta: float) -> MarkPath:
    keep = path.family.gam_array(path.sites) >= delta
    jump = path.jump[keep]
    return MarkPath(path.family, float(delta), path.s_max, path.seed, path.T0,
                    path.sites[keep], path.sigma[keep], path.t_factor[keep], jump,
                    path.index[keep], np.cumsum(jump))


def _lookup_state(before, after, sites, u):
    j = int(np.searchsorted(after, u, side="right"))
    if j < len(after) and before[j] <= u:
        return int(sites[j])
    return INF


def coupling_time_change(family, delta: float, eps: float, delta_ref: float,
                         horizon: float, seed) -> dict:
    """Piecewise-linear time change matching ``delta``-marks of two truncations.

    The path truncated at ``eps`` is compared with the finer path at
    ``delta_ref`` built from the same marks.  Returns the sup over
    ``[0, horizon]`` of ``|lam(t) - t|`` and of the distance between
    ``X_ref(lam(t))`` and ``X_eps(t)``.
    """
    if not (delta_ref < eps < delta):
        raise ValidationError("need delta_ref < eps < delta")
    if len(family.cutoff_set(delta)) == 0:
        raise EmptyCutoff(f"no site has gam >= {delta}")
    rate = family.c + family.cutoff_mass(eps)
    s = 2.0 * horizon / rate
    while True:
        ref = sample_marks(family, delta_ref, s, seed)
        fine = _restrict_path(ref, eps)
        _, eb, ea = _path_clock(fine, INF)
        top = family.gam_array(fine.sites) >= delta
        if np.any(ea[top] >= horizon):
            break
        s *= 2.0
    _, rb, ra = _path_clock(ref, INF)
    ref_top = np.nonzero(family.gam_array(ref.sites) >= delta)[0]
    eps_top = np.nonzero(top)[0]
    L = int(np.argmax(ea[eps_top] >= horizon))  # zero-based index of the last node mark
    e_idx, r_idx = eps_top[:L + 1], ref_top[:L + 1]
    xb, xa = eb[e_idx], ea[e_idx]
    yb, ya = rb[r_idx], ra[r_idx]
    prev_x = np.r_[0.0, xa[:-1]]
    prev_y = np.r_[0.0, ya[:-1]]
    bad = xb <= prev_x
    # a node at 0 that maps to 0 is the origin itself, not a collision
    if bad[0] and xb[0] == 0.0 and yb[0] == 0.0:
        bad[0] = False
    if bad.any():
        i = int(np.argmax(bad))
        raise OrderingViolation(
            f"eps={eps}: no eps-level mark separates delta-marks {i} and {i + 1}")
    nodes_x = np.r_[0.0, np.column_stack([xb, xa]).ravel()]
    nodes_y = np.r_[0.0, np.column_stack([yb, ya]).ravel()]
    if xb[0] == 0.0:
        nodes_x, nodes_y = nodes_x[1:], nodes_y[1:]

    def lam(t):
        t = np.asarray(t, dtype=float)
        inside = np.interp(t, nodes_x, nodes_y)
        return np.where(t > nodes_x[-1], t + (nodes_y[-1] - nodes_x[-1]), inside)

    shift_pts = np.r_[nodes_x[nodes_x <= horizon], horizon]
    sup_shift = float(np.max(np.abs(lam(shift_pts) - shift_pts)))
    bound = float(np.max(ya - xa))

    sup_d = 0.0
    e_lo, r_lo = -1, -1
    for i in range(L + 1):
        A, B = (prev_x[i], xb[i])
        A2, B2 = (prev_y[i], yb[i])
        e_hi, r_hi = e_idx[i], r_idx[i]
        if B > A and A < horizon:
            es = slice(e_lo + 1, e_hi)
            rs = slice(r_lo + 1, r_hi)
            scale = (B2 - A2) / (B - A)
            pts = np.r_[A, eb[es], ea[es], A + (rb[rs] - A2) / scale, A + (ra[rs] - A2) / scale]
            pts = pts[(pts >= A) & (pts < min(B, horizon))]
            for p in np.unique(pts):
                se = _lookup_state(eb[es], ea[es], fine.sites[es], p)
                sr = _lookup_state(rb[rs], ra[rs], ref.sites[rs], A2 + (p - A) * scale)
                if se != sr:
                    d = (family.gam(se) if se != INF else 0.0) + (family.gam(sr) if sr != INF else 0.0)
                    sup_d = max(sup_d, d)
        e_lo, r_lo = e_hi, r_hi
    return {
        "delta": float(delta),
        "eps": float(eps),
        "delta_ref": float(delta_ref),
        "horizon": float(horizon),
        "seed": int(_as_seed(seed)),
        "nodes": int(L + 1),
        "sup_time_shift": sup_shift,
        "time_shift_bound": bound,
        "sup_distance": float(sup_d),
        "distance_bound": 2.0 * float(delta),
        "tail_mass_ref": tail_mass(family, delta_ref),
    }


def coupling_with_halving(family, delta: float, eps: float, horizon: float, seed,
                          ref_ratio: float = 8.0, max_halvings: int = 40) -> dict:
    """Retry :func:`coupling_time_change` with ``eps`` halved until the marks separate."""
    e = float(eps)
    for k in range(max_halvings + 1):
        try:
            rep = coupling_time_change(family, delta, e, e / ref_ratio, horizon, seed)
        except OrderingViolation:
            e /= 2.0
            continue
        rep["eps_requested"] = float(eps)
        rep["halvings"] = k
        return rep
    raise OrderingViolation(f"no separation after {max_halvings} halvings of eps={eps}")


# -- path statistics -------------------------------------------------------------------


def occupation_fractions(traj: Trajectory) -> dict:
    """Fraction of ``[0, horizon)`` spent in each state."""
    dur = traj.durations
    out: dict = {}
    order = np.argsort(traj.states, kind="stable")
    states, dur = traj.states[order], dur[order]
    cuts = np.r_[0, np.nonzero(np.diff(states))[0] + 1, len(states)]
    for a, b in zip(cuts[:-1], cuts[1:]):
        out[int(states[a])] = math.fsum(dur[a:b]) / traj.horizon
    return out


def visited_count(traj: Trajectory, eps: float) -> int:
    """Distinct sites with ``gam > eps`` visited before the horizon."""
    sites = np.unique(traj.states[traj.states != INF])
    return int(np.sum(traj.family.gam_array(sites) > eps))


@dataclass(frozen=True)
class VisitClassification:
    site: int
    intervals: list  # [(H_i, L_i), ...]

    def query(self, t: float):
        """``"first"``, ``"not-first"`` or ``None`` when the path is elsewhere at ``t``."""
        for i, (h, l) in enumerate(self.intervals):
            if h <= t < l:
                return "first" if i == 0 else "not-first"
        return None

    def is_first(self, t: float) -> bool:
        return self.query(t) == "first"


def classify_visits(traj: Trajectory, x) -> VisitClassification:
    x = int(x)
    hit = np.nonzero(traj.states == x)[0]
    ends = traj.ends
    return VisitClassification(x, [(float(traj.times[i]), float(ends[i])) for i in hit])
