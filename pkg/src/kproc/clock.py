"""Keyed random streams, Poisson marks and the clock process.

Randomness is stateless: every uniform is a hash of ``(seed, tag, block,
index, lane)``.  Marks are generated per block of sites (see
:class:`kproc.params.Block`); a block's marks form one Poisson stream of
rate ``sum(lam)`` whose points are assigned to sites by independent
categorical draws.  Because blocks never depend on the truncation level,
filtering by ``gam >= delta`` leaves every surviving mark untouched, and
because gaps are accumulated sequentially, widening the window only appends
marks.  Both couplings used elsewhere rest on these two facts.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import BeyondWindow, NonPositiveDelta, NonPositiveWindow
from .params import INF

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK = (1 << 64) - 1
_LANES = 4


class Tag(IntEnum):
    MARKS = 1
    HOLDING = 2
    INITIAL = 3
    JUMPCHAIN = 4
    SELECT = 5
    REPLICA = 6


def mix64(z) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (a bijection of 64-bit words)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _absorb(h, v) -> np.ndarray:
    with np.errstate(over="ignore"):
        return mix64(np.asarray(h, dtype=np.uint64)
                     + _GOLDEN * (np.asarray(v, dtype=np.uint64) + np.uint64(1)))


def _as_seed(seed) -> np.ndarray:
    if isinstance(seed, np.ndarray):
        return seed.astype(np.uint64)
    return np.uint64(int(seed) & _MASK)


def stream_prefix(seed, tag: int, block: int) -> np.ndarray:
    """Hash of the leading key fields; broadcast over an array of seeds."""
    h = mix64(_as_seed(seed) ^ _GOLDEN)
    h = _absorb(h, int(tag))
    return _absorb(h, int(block))


def uniforms_from_prefix(prefix, index, lane: int = 0) -> np.ndarray:
    h = _absorb(prefix, np.asarray(index, dtype=np.uint64) * np.uint64(_LANES) + np.uint64(lane))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def uniforms(seed, tag: int, block: int, index, lane: int = 0) -> np.ndarray:
    """Uniforms in the open interval (0, 1), one per broadcast key."""
    return uniforms_from_prefix(stream_prefix(seed, tag, block), index, lane)


@dataclass(frozen=True)
class StreamKey:
    seed: int
    tag: int
    block: int
    index: int
    lane: int = 0


def draw_uniform(key: StreamKey) -> float:
    return float(uniforms(key.seed, key.tag, key.block, key.index, key.lane))


def replica_seeds(seed, n: int, stream: int = 0) -> np.ndarray:
    """``n`` derived 64-bit seeds; ``stream`` separates independent banks."""
    prefix = stream_prefix(seed, Tag.REPLICA, stream)
    return _absorb(prefix, np.arange(n, dtype=np.uint64))


def initial_factor(seeds) -> np.ndarray:
    """The unit exponential ``T0`` shared by every starting state."""
    return -np.log(uniforms(seeds, Tag.INITIAL, 0, 0))


# -- mark generation -----------------------------------------------------------


def _block_gaps(prefix, rate, start_index, count, offset):
    idx = np.arange(start_index, start_index + count, dtype=np.uint64)
    gaps = -np.log(uniforms_from_prefix(prefix, idx[None, :], 0)) / rate
    return np.cumsum(np.concatenate([offset[:, None], gaps], axis=1), axis=1)[:, 1:]


def _block_marks(blk, seeds, s_max, delta):
    """Padded ``(sigma, site, jump, tfac)`` of one block, shape ``(n, k)``.

    Unused cells hold ``sigma = inf``; that includes marks of sites below
    the cutoff, which are generated and then dropped so that the survivors
    keep their stream indices.
    """
    rate = blk.rate
    n = len(seeds)
    prefix = stream_prefix(seeds, Tag.MARKS, blk.key)[:, None]
    m = rate * float(np.max(s_max))
    k = int(math.ceil(m + 2.0 * math.sqrt(m) + 1.0))
    chunks = []
    active = np.arange(n)
    offset = np.zeros(n)
    start = 0
    # rows whose window outlasts the generated gaps get another batch
    while len(active):
        sig = _block_gaps(prefix[active], rate, start, k, offset)
        chunks.append((active, sig))
        more = sig[:, -1] <= s_max[active]
        offset = sig[more, -1]
        active = active[more]
        start += k
    sigma = np.full((n, k * len(chunks)), np.inf)
    for j, (rows, sig) in enumerate(chunks):
        sigma[rows, j * k:(j + 1) * k] = sig
    sigma[sigma > s_max[:, None]] = np.inf
    width = int(np.isfinite(sigma).sum(axis=1).max()) if n else 0
    sigma = sigma[:, :width]
    site = np.full(sigma.shape, -1, dtype=np.int64)
    jump = np.zeros(sigma.shape)
    tfac = np.zeros(sigma.shape)
    rows, cols = np.nonzero(np.isfinite(sigma))
    if len(rows) == 0:
        return sigma, site, jump, tfac
    index = cols.astype(np.uint64)
    sel_u = uniforms_from_prefix(stream_prefix(seeds, Tag.SELECT, blk.key)[rows], index, 0)
    pick = np.minimum(np.searchsorted(blk.cum, sel_u * rate, side="right"), len(blk.cum) - 1)
    keep = blk.gam[pick] >= delta
    sigma[rows[~keep], cols[~keep]] = np.inf
    rows, cols, index, pick = rows[keep], cols[keep], index[keep], pick[keep]
    t = -np.log(uniforms_from_prefix(stream_prefix(seeds, Tag.HOLDING, blk.key)[rows], index, 0))
    site[rows, cols] = blk.ids[pick]
    tfac[rows, cols] = t
    jump[rows, cols] = blk.gam[pick] * t
    return sigma, site, jump, tfac


def _sample_padded(family, delta, seeds, s_max, with_factors=True):
    """Merged marks of all blocks, sorted by sigma per row, padded with inf.

    Equal sigmas (a floating coincidence) keep block order, then stream order.
    """
    if not delta > 0:
        raise NonPositiveDelta(f"delta must be positive, got {delta}")
    if np.any(~(s_max > 0)):
        raise NonPositiveWindow("sigma window must be positive")
    n = len(seeds)
    parts = [_block_marks(family.block(key), seeds, s_max, delta)
             for key in family.block_keys(delta)]
    parts = [p for p in parts if p[0].shape[1]]
    if not parts:
        z = np.zeros((n, 0))
        return z, np.zeros((n, 0), dtype=np.int64), z, z, np.zeros(n, dtype=np.int64)
    sigma = np.concatenate([p[0] for p in parts], axis=1)
    order = np.argsort(sigma, axis=1, kind="stable")
    count = np.isfinite(sigma).sum(axis=1)
    order = order[:, :int(count.max())]
    take = lambda j: np.take_along_axis(np.concatenate([p[j] for p in parts], axis=1), order, axis=1)
    tfac = take(3) if with_factors else None
    return np.take_along_axis(sigma, order, axis=1), take(1), take(2), tfac, count


# -- single paths ------------------------------------------------------------------


@dataclass(frozen=True)
class Mark:
    site: int
    sigma: float
    t_factor: float
    index: int  # 1-based ordinal among the marks of this site


@dataclass(frozen=True)
class MarkPath:
    """All marks of sites in the cutoff set with ``sigma <= s_max``."""

    family: object
    delta: float
    s_max: float
    seed: int
    T0: float
    sites: np.ndarray
    sigma: np.ndarray
    t_factor: np.ndarray
    jump: np.ndarray
    index: np.ndarray
    _cum: np.ndarray = field(repr=False, default=None)

    @property
    def marks(self) -> list:
        return [Mark(int(s), float(g), float(t), int(i))
                for s, g, t, i in zip(self.sites, self.sigma, self.t_factor, self.index)]

    def __len__(self) -> int:
        return len(self.sigma)

    @property
    def cumulative_jumps(self) -> np.ndarray:
        """Running sum of jumps, sequential in sigma order."""
        return self._cum

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["site", "index", "sigma", "t_factor"])
            for s, i, g, t in zip(self.sites, self.index, self.sigma, self.t_factor):
                w.writerow([int(s), int(i), repr(float(g)), repr(float(t))])


def sample_marks(family, delta: float, s_max: float, seed) -> MarkPath:
    """Marks of every site with ``gam >= delta`` on the sigma window ``[0, s_max]``."""
    if not s_max > 0:
        raise NonPositiveWindow(f"s_max must be positive, got {s_max}")
    seeds = np.atleast_1d(_as_seed(seed))
    sigma, site, jump, tfac, count = _sample_padded(family, delta, seeds, np.array([float(s_max)]))
    k = int(count[0])
    sigma, site, jump, tfac = sigma[0, :k], site[0, :k], jump[0, :k], tfac[0, :k]
    index = _site_ordinals(site)
    return MarkPath(family, float(delta), float(s_max), int(seeds[0]),
                    float(initial_factor(seeds)[0]), site, sigma, tfac, jump, index,
                    np.cumsum(jump))


def _site_ordinals(site: np.ndarray) -> np.ndarray:
    order = np.argsort(site, kind="stable")
    s = site[order]
    first = np.r_[0, np.nonzero(np.diff(s))[0] + 1] if len(s) else np.zeros(0, dtype=int)
    runs = np.diff(np.r_[first, len(s)])
    ords = np.arange(len(s)) - np.repeat(first, runs) + 1
    out = np.empty(len(s), dtype=np.int64)
    out[order] = ords
    return out


def sample_path_covering(family, delta: float, horizon: float, seed, y=INF) -> MarkPath:
    """Double the sigma window until the clock started at ``y`` exceeds ``horizon``."""
    rate = family.c + family.cutoff_mass(delta)
    s = 2.0 * horizon / rate if rate > 0 else 1.0
    while True:
        path = sample_marks(family, delta, s, seed)
        if clock_eval(path, y, s)[0] > horizon:
            return path
        s *= 2.0


def _start_offset(path: MarkPath, y) -> float:
    return path.family.gam(y) * path.T0 if int(y) != INF else 0.0


def clock_eval(path: MarkPath, y, t: float) -> tuple:
    """``(Gamma(t), Gamma(t-))`` for the clock started at ``y``."""
    if t > path.s_max or t < 0:
        raise BeyondWindow(f"t={t} outside [0, {path.s_max}]")
    base = _start_offset(path, y) + path.family.c * t
    cum = path.cumulative_jumps
    k_right = int(np.searchsorted(path.sigma, t, side="right"))
    k_left = int(np.searchsorted(path.sigma, t, side="left"))
    if t == 0:
        k_left = k_right
    right = base + (cum[k_right - 1] if k_right else 0.0)
    left = base + (cum[k_left - 1] if k_left else 0.0)
    return right, left


def clock_inverse(path: MarkPath, y, v: float) -> float:
    """Right-continuous inverse ``inf{s: Gamma(s) > v}``."""
    off = _start_offset(path, y)
    c = path.family.c
    if v < off:
        return 0.0
    cum = path.cumulative_jumps
    after = off + c * path.sigma + cum
    k = int(np.searchsorted(after, v, side="right"))
    if k == len(after):
        if c > 0:
            s = (v - off - (cum[-1] if len(cum) else 0.0)) / c
            if s < path.s_max:
                return s
        raise BeyondWindow(f"v={v} beyond the clock value at s_max")
    before = after[k] - path.jump[k]
    if before <= v:
        return float(path.sigma[k])
    return (v - off - (cum[k - 1] if k else 0.0)) / c


# -- replica banks --------------------------------------------------------------------


@dataclass
class MarkBank:
    """Marks for many replicas in a padded row layout, sorted by sigma per row.

    Row ``r`` holds exactly the marks :func:`sample_marks` would return for
    ``seeds[r]`` over the window ``s_max[r]``.
    """

    family: object
    delta: float
    seeds: np.ndarray
    s_max: np.ndarray
    T0: np.ndarray
    sigma: np.ndarray  # (n, K), +inf padding
    site: np.ndarray  # (n, K), -1 padding
    jump: np.ndarray  # (n, K), 0 padding
    count: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return len(self.seeds)

    def clock_after(self) -> np.ndarray:
        """Clock from infinity just after each mark; padding holds the window total."""
        c = self.family.c
        sig = np.where(np.isfinite(self.sigma), self.sigma, self.s_max[:, None])
        return c * sig + np.cumsum(self.jump, axis=1)

    def clock_total(self) -> np.ndarray:
        return self.family.c * self.s_max + self.jump.sum(axis=1)

    def restrict(self, delta: float) -> "MarkBank":
        """The bank a coarser cutoff would have produced from the same seeds."""
        if delta < self.delta:
            raise ValueError("can only restrict to a coarser cutoff")
        keep = (self.site >= 0) & (self.family.gam_array(np.maximum(self.site, 0)) >= delta)
        return _repack(self, keep, delta)


def _repack(bank: MarkBank, keep: np.ndarray, delta: float) -> MarkBank:
    n = bank.n
    count = keep.sum(axis=1)
    width = max(int(count.max()) if n else 0, 1)
    pos = np.cumsum(keep, axis=1) - 1
    r, k = np.nonzero(keep)
    sigma = np.full((n, width), np.inf)
    site = np.full((n, width), -1, dtype=np.int64)
    jump = np.zeros((n, width))
    sigma[r, pos[r, k]] = bank.sigma[r, k]
    site[r, pos[r, k]] = bank.site[r, k]
    jump[r, pos[r, k]] = bank.jump[r, k]
    return MarkBank(bank.family, delta, bank.seeds, bank.s_max, bank.T0, sigma, site, jump, count)


def _pack(family, delta, seeds, s_max) -> MarkBank:
    sigma, site, jump, _, count = _sample_padded(family, delta, seeds, s_max, with_factors=False)
    if sigma.shape[1] == 0:
        n = len(seeds)
        sigma, site, jump = np.full((n, 1), np.inf), np.full((n, 1), -1), np.zeros((n, 1))
    return MarkBank(family, float(delta), seeds, s_max, initial_factor(seeds),
                    sigma, site, jump, count)


def _initial_window(family, delta, seeds, horizon, need) -> float:
    """Window covering most of a pilot subset of rows, found by doubling."""
    rate = family.c + family.cutoff_mass(delta)
    s = float(np.max(horizon[:64])) / rate if rate > 0 else 1.0
    # a zero horizon still needs room for the marks ``need`` may ask for
    s = max(s, 1.0 / family.total_rate(delta))
    pilot = seeds[:64]
    while True:
        part = _pack(family, delta, pilot, np.full(len(pilot), s))
        short = part.clock_total() <= horizon[:64]
        if need is not None:
            short |= need(part, np.arange(len(pilot)))
        if short.mean() <= 0.05:
            return s
        s *= 2.0


def sample_mark_bank(family, delta: float, seeds, horizon, need=None) -> MarkBank:
    """Bank whose row ``r`` has ``Gamma_inf(s_max[r]) > horizon[r]``.

    ``horizon`` is a scalar or one value per row.  ``need(part, rows)`` may
    flag further rows whose window must grow (for example rows still lacking
    a mark of some site); ``rows`` gives the position of each row of the
    partial bank ``part`` in ``seeds``.  Windows double until no row is
    flagged.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    n = len(seeds)
    horizon = np.broadcast_to(np.asarray(horizon, dtype=float), (n,))
    if n == 0:
        return _pack(family, delta, seeds, np.ones(0))
    s = np.full(n, _initial_window(family, delta, seeds, horizon, need))
    pending = np.arange(n)
    finished = []
    while len(pending):
        part = _pack(family, delta, seeds[pending], s[pending])
        short = part.clock_total() <= horizon[pending]
        if need is not None:
            short |= need(part, pending)
        if not finished and not short.any():
            return part
        finished.append((part, np.nonzero(~short)[0], pending[~short]))
        s[pending[short]] *= 2.0
        pending = pending[short]
    # rows finished in different rounds: merge into one padded layout
    width = max(max(int(p.count.max()) for p, _, _ in finished), 1)
    S = np.full((n, width), np.inf)
    I = np.full((n, width), -1, dtype=np.int64)
    J = np.zeros((n, width))
    count = np.zeros(n, dtype=np.int64)
    for part, loc, glob in finished:
        w = min(part.sigma.shape[1], width)
        S[glob, :w] = part.sigma[loc, :w]
        I[glob, :w] = part.site[loc, :w]
        J[glob, :w] = part.jump[loc, :w]
        count[glob] = part.count[loc]
    return MarkBank(family, float(delta), seeds, s, initial_factor(seeds), S, I, J, count)
