"""Parameter families for weighted K processes.

A family assigns to every site ``x = 1, 2, ...`` a weight ``lam(x) > 0`` and a
mean waiting time ``gam(x) > 0`` and carries the constant ``c >= 0`` that sets
how much time the process spends at the point at infinity.  The weights must
not be summable while ``lam * gam`` must be, which is what makes the extra
point instantaneous.

States are plain integers: sites are ``1, 2, ...`` and ``INF == 0`` is the
point at infinity.  Split families (see :func:`split_weights`) use integer
codes ``x * SPLIT_RADIX + n`` for the copy ``n`` of site ``x``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import integrate

from .errors import (
    DivergentMass,
    LambdaOfInfinity,
    NegativeC,
    NonPositiveDelta,
    NonPositiveParameter,
    SummableWeights,
    ValidationError,
)

INF = 0
SPLIT_RADIX = 1 << 32
OVERRIDE_BLOCK = 1 << 40

# exact prefix length used before switching to integral tails
_PREFIX = 100_000


def is_site(x) -> bool:
    return int(x) != INF


def format_state(x) -> str:
    return "inf" if int(x) == INF else str(int(x))


def parse_state(text) -> int:
    if isinstance(text, (int, np.integer)):
        return int(text)
    s = str(text).strip().lower()
    if s in ("inf", "infinity", "oo"):
        return INF
    value = int(s)
    if value < 1:
        raise ValidationError(f"site indices start at 1, got {value}")
    return value


@dataclass(frozen=True)
class Series:
    """A series value with a certified enclosure ``lower <= true <= upper``."""

    value: float
    lower: float
    upper: float

    @property
    def rel_error(self) -> float:
        if self.value == 0:
            return self.upper - self.lower
        return (self.upper - self.lower) / abs(self.value)


@dataclass(frozen=True)
class Block:
    """A fixed group of sites sharing one Poisson mark stream.

    Blocks never depend on the truncation level, so the marks of a site are
    the same whatever cutoff is applied afterwards.
    """

    key: int
    ids: np.ndarray
    lam: np.ndarray
    gam: np.ndarray
    cum: np.ndarray  # right boundaries of the categorical selection, cum[-1] == rate

    @property
    def rate(self) -> float:
        return float(self.cum[-1]) if len(self.cum) else 0.0


@dataclass(frozen=True)
class ParameterFamily:
    """``poly(a, b)``: ``lam(x) = x**b``, ``gam(x) = x**-a``, plus finite overrides.

    Use :func:`validate_family` or :func:`parse_family` to build one; the
    constructor does not check the summability conditions.
    """

    a: float
    b: float
    c: float = 0.0
    overrides: tuple = ()  # sorted tuple of (site, lam, gam)
    kind: str = "poly"
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    # -- pointwise parameters -------------------------------------------------

    @property
    def override_map(self) -> dict:
        cached = self._cache.get("ovmap")
        if cached is None:
            cached = {int(s): (float(l), float(g)) for s, l, g in self.overrides}
            self._cache["ovmap"] = cached
        return cached

    def base_lam(self, x) -> np.ndarray:
        return np.power(np.asarray(x, dtype=float), self.b)

    def base_gam(self, x) -> np.ndarray:
        return np.power(np.asarray(x, dtype=float), -self.a)

    def lam(self, x) -> float:
        x = int(x)
        if x == INF:
            raise LambdaOfInfinity("the point at infinity carries no weight")
        if x in self.override_map:
            return self.override_map[x][0]
        return float(self.base_lam(np.array([x]))[0])

    def gam(self, x) -> float:
        x = int(x)
        if x == INF:
            return 0.0
        if x in self.override_map:
            return self.override_map[x][1]
        return float(self.base_gam(np.array([x]))[0])

    def lam_array(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.int64)
        if np.any(xs == INF):
            raise LambdaOfInfinity("the point at infinity carries no weight")
        out = self.base_lam(xs)
        for s, (l, _) in self.override_map.items():
            out[xs == s] = l
        return out

    def gam_array(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.int64)
        out = self.base_gam(np.where(xs == INF, 1, xs))
        for s, (_, g) in self.override_map.items():
            out[xs == s] = g
        out[xs == INF] = 0.0
        return out

    def project(self, states):
        return states

    @property
    def base(self) -> "ParameterFamily":
        return self

    @property
    def stable_index(self) -> float:
        """Index of the clock subordinator: ``#{x: gam(x) > u}``-weighted tail ~ u**-index."""
        return (self.b + 1.0) / self.a

    # -- blocks and cutoffs ---------------------------------------------------

    def _base_count(self, delta: float) -> int:
        """Largest base index with ``gam >= delta`` (0 if none)."""
        n = int(math.floor(delta ** (-1.0 / self.a)))
        n = max(n, 0)
        while n >= 1 and self.base_gam(np.array([n]))[0] < delta:
            n -= 1
        while self.base_gam(np.array([n + 1]))[0] >= delta:
            n += 1
        return n

    def block_keys(self, delta: float) -> list:
        """Keys of every block holding at least one site of ``cutoff_set(delta)``."""
        _check_delta(delta)
        keys = []
        n = self._base_count(delta)
        if n >= 1:
            keys.extend(range(int(math.floor(math.log2(n))) + 1))
            # guard against log2 rounding at exact powers of two
            while (1 << (keys[-1] + 1)) <= n:
                keys.append(keys[-1] + 1)
        for s, (_, g) in sorted(self.override_map.items()):
            if g >= delta:
                keys.append(OVERRIDE_BLOCK + s)
        return keys

    def block(self, key: int) -> Block:
        cache = self._cache.setdefault("blocks", {})
        blk = cache.get(key)
        if blk is None:
            if key >= OVERRIDE_BLOCK:
                s = key - OVERRIDE_BLOCK
                l, g = self.override_map[s]
                ids = np.array([s], dtype=np.int64)
                lam = np.array([l])
                gam = np.array([g])
            else:
                ids = np.arange(1 << key, 1 << (key + 1), dtype=np.int64)
                if self.override_map:
                    ids = ids[~np.isin(ids, list(self.override_map))]
                lam = self.base_lam(ids)
                gam = self.base_gam(ids)
            blk = Block(key, ids, lam, gam, np.cumsum(lam))
            cache[key] = blk
        return blk

    def cutoff_set(self, delta: float) -> np.ndarray:
        """Sites with ``gam >= delta`` in ascending order."""
        parts = []
        for key in self.block_keys(delta):
            blk = self.block(key)
            parts.append(blk.ids[blk.gam >= delta])
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    # -- series ---------------------------------------------------------------

    def _base_terms(self, x: np.ndarray, beta: float) -> np.ndarray:
        g = self.base_gam(x)
        return self.base_lam(x) * g / (1.0 + beta * g)

    def _base_tail(self, start: int, beta: float) -> Series:
        """Sum of base terms over ``x >= start`` with a certified enclosure."""
        start = max(int(start), 1)
        # the terms decrease once x**a > b*beta/(a-b)
        mono = (max(self.b, 0.0) * beta / (self.a - self.b)) ** (1.0 / self.a) + 2.0
        m = max(start, _PREFIX, int(math.ceil(mono)))
        head = _fsum_range(lambda x: self._base_terms(x, beta), start, m - 1)
        term = lambda x: float(self._base_terms(np.array([x]), beta)[0])
        lower_int = self._tail_integral(m, beta)
        mid_int = self._tail_integral(m - 0.5, beta)
        lower = head + lower_int
        upper = head + lower_int + term(m)
        return Series(head + mid_int, lower, upper)

    def _tail_integral(self, m: float, beta: float) -> float:
        p = self.a - self.b
        if beta == 0.0:
            return m ** (1.0 - p) / (p - 1.0)
        f = lambda x: x ** self.b / (x ** self.a + beta)
        # substitute x = m / u**(1/(p-1)) so the integrand is smooth on (0, 1]
        k = 1.0 / (p - 1.0)

        def g(u):
            if u <= 0.0:
                return m ** (1.0 - p) * k
            x = m * u ** (-k)
            return f(x) * m * k * u ** (-k - 1.0)

        val, _ = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=1e-13, limit=200)
        return val

    def weighted_mass(self, beta: float = 0.0) -> Series:
        """``sum_x lam(x) gam(x) / (1 + beta gam(x))`` over every site."""
        tail = self._base_tail(1, beta)
        corr = 0.0
        for s, (l, g) in self.override_map.items():
            corr += l * g / (1.0 + beta * g) - float(self._base_terms(np.array([s]), beta)[0])
        return Series(tail.value + corr, tail.lower + corr, tail.upper + corr)

    def cutoff_mass(self, delta: float, beta: float = 0.0, exclude: Iterable = ()) -> float:
        """Finite sum of ``lam gam / (1 + beta gam)`` over ``cutoff_set(delta)``."""
        sites = self.cutoff_set(delta)
        ex = list(exclude)
        if ex:
            sites = sites[~np.isin(sites, ex)]
        g = self.gam_array(sites)
        return math.fsum(self.lam_array(sites) * g / (1.0 + beta * g))

    def total_rate(self, delta: float) -> float:
        return math.fsum(self.lam_array(self.cutoff_set(delta)))

    def spec_string(self) -> str:
        s = f"{self.kind}:a={_fmt(self.a)},b={_fmt(self.b)};c={_fmt(self.c)}"
        if self.overrides:
            s += ";override:" + ",".join(
                f"{site}={_fmt(l)},{_fmt(g)}" for site, l, g in self.overrides)
        return s


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def _fsum_range(fn, lo: int, hi: int, chunk: int = 1 << 18) -> float:
    if hi < lo:
        return 0.0
    parts = []
    for start in range(lo, hi + 1, chunk):
        x = np.arange(start, min(hi, start + chunk - 1) + 1, dtype=float)
        parts.append(math.fsum(fn(x)))
    return math.fsum(parts)


def _check_delta(delta: float) -> None:
    if not delta > 0:
        raise NonPositiveDelta(f"delta must be positive, got {delta}")


# -- construction ---------------------------------------------------------------


def validate_family(a: float, b: float, c: float = 0.0,
                    overrides: Mapping[int, tuple] | None = None,
                    kind: str = "poly") -> ParameterFamily:
    """Build a family and certify ``sum lam = inf`` and ``sum lam*gam < inf``.

    ``overrides`` maps a site to a ``(lam, gam)`` pair; either entry may be
    ``None`` to keep the base value.
    """
    if kind != "poly":
        raise ValidationError(f"unknown family kind {kind!r}")
    a, b, c = float(a), float(b), float(c)
    base = ParameterFamily(a, b, 0.0)
    ovs = []
    for site, (l, g) in sorted((overrides or {}).items()):
        site = int(site)
        if site < 1:
            raise ValidationError(f"override site must be >= 1, got {site}")
        l = base.lam(site) if l is None else float(l)
        g = base.gam(site) if g is None else float(g)
        if not (l > 0 and g > 0):
            raise NonPositiveParameter(f"override at site {site}: lam={l}, gam={g}")
        ovs.append((site, l, g))
    if not (a > 0):
        raise NonPositiveParameter(f"gam(x) = x**-a needs a > 0, got a={a}")
    if c < 0:
        raise NegativeC(f"c must be nonnegative, got {c}")
    if b < -1:
        raise SummableWeights(
            f"sum of x**{b} is finite; that is the pure-jump regime, not a K process")
    if not (a - b > 1):
        raise DivergentMass(f"sum of x**({b}-{a}) diverges (need a - b > 1)")
    return ParameterFamily(a, b, c, tuple(ovs))


_SPEC_RE = re.compile(r"^\s*(\w+)\s*:\s*(.*)$")


def parse_family(spec: str) -> ParameterFamily:
    """Parse ``poly:a=2,b=0;c=0[;override:3=1,0.5;...]``.

    An override entry is ``site=lam,gam``; several may follow one
    ``override:`` prefix separated by ``;`` or appear as separate fields.
    """
    parts = [p.strip() for p in spec.split(";") if p.strip()]
    if not parts:
        raise ValidationError("empty family spec")
    m = _SPEC_RE.match(parts[0])
    if not m:
        raise ValidationError(f"cannot parse family kind in {parts[0]!r}")
    kind, body = m.group(1), m.group(2)
    params = _keyvals(body)
    c = 0.0
    overrides: dict = {}
    in_override = False
    for p in parts[1:]:
        if p.startswith("override:"):
            in_override = True
            p = p[len("override:"):]
        if p.startswith("c="):
            c = _num(p[2:])
            in_override = False
            continue
        if in_override:
            site, _, vals = p.partition("=")
            pieces = [v for v in re.split(r"[,/]", vals) if v]
            if len(pieces) != 2:
                raise ValidationError(f"override needs site=lam,gam: {p!r}")
            overrides[int(site)] = (_num(pieces[0]), _num(pieces[1]))
            continue
        raise ValidationError(f"unrecognized family field {p!r}")
    missing = {"a", "b"} - set(params)
    if missing:
        raise ValidationError(f"family spec lacks {sorted(missing)}")
    return validate_family(params["a"], params["b"], c, overrides, kind=kind)


def _keyvals(body: str) -> dict:
    out = {}
    for item in body.split(","):
        if not item.strip():
            continue
        k, _, v = item.partition("=")
        out[k.strip()] = _num(v)
    return out


def _num(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"not a number: {text!r}") from None


def with_c(family: ParameterFamily, c: float) -> ParameterFamily:
    """Same weights and waiting times, different ``c``."""
    if c < 0:
        raise NegativeC(f"c must be nonnegative, got {c}")
    return ParameterFamily(family.a, family.b, float(c), family.overrides, family.kind)


# -- closed forms -----------------------------------------------------------------


def lam(family, x) -> float:
    return family.lam(x)


def gam(family, x) -> float:
    return family.gam(x)


def cutoff_set(family, delta: float) -> np.ndarray:
    return family.cutoff_set(delta)


def tail_mass(family: ParameterFamily, delta: float) -> float:
    """Certified upper bound on ``sum_{x not in S_delta} lam(x) gam(x)``."""
    _check_delta(delta)
    n = family._base_count(delta)
    tail = family._base_tail(n + 1, 0.0).upper
    for s, (l, g) in family.override_map.items():
        if s > n:
            tail -= float(family._base_terms(np.array([s]), 0.0)[0])
        if g < delta:
            tail += l * g
    return max(tail, 0.0)


def metric(family, x, y) -> float:
    if int(x) == int(y):
        return 0.0
    return family.gam(x) + family.gam(y)


@dataclass(frozen=True)
class Stationary:
    family: ParameterFamily
    mass: Series  # sum of lam * gam
    Z: float

    def __call__(self, x) -> float:
        if int(x) == INF:
            return self.family.c / self.Z
        return self.family.lam(x) * self.family.gam(x) / self.Z

    def array(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.int64)
        fam = self.family
        out = fam.lam_array(np.where(xs == INF, 1, xs)) * fam.gam_array(xs) / self.Z
        out[xs == INF] = fam.c / self.Z
        return out


def stationary(family: ParameterFamily) -> Stationary:
    mass = family.weighted_mass(0.0)
    return Stationary(family, mass, family.c + mass.value)


# -- weight splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitFamily:
    """Each site ``x`` replaced by ``ceil(lam(x))`` copies of weight ``lam(x)/ceil(lam(x))``.

    Copies share their base site's block and carve its selection interval
    into equal pieces, so a split process driven by the same seed projects
    exactly onto the base process.
    """

    base: ParameterFamily
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def c(self) -> float:
        return self.base.c

    @property
    def stable_index(self) -> float:
        return self.base.stable_index

    def copies(self, x) -> int:
        return int(math.ceil(self.base.lam(x)))

    @staticmethod
    def code(x, n) -> int:
        return int(x) * SPLIT_RADIX + int(n)

    @staticmethod
    def decode(code) -> tuple:
        return int(code) // SPLIT_RADIX, int(code) % SPLIT_RADIX

    def project(self, states):
        states = np.asarray(states, dtype=np.int64)
        return states // SPLIT_RADIX

    def lam(self, code) -> float:
        code = int(code)
        if code == INF:
            raise LambdaOfInfinity("the point at infinity carries no weight")
        x, n = self.decode(code)
        k = self.copies(x)
        if n >= k:
            raise ValidationError(f"site {x} has only {k} copies")
        return self.base.lam(x) / k

    def gam(self, code) -> float:
        code = int(code)
        if code == INF:
            return 0.0
        return self.base.gam(self.decode(code)[0])

    def lam_array(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        xs = codes // SPLIT_RADIX
        lam = self.base.lam_array(xs)
        return lam / np.ceil(lam)

    def gam_array(self, codes) -> np.ndarray:
        return self.base.gam_array(self.project(codes))

    def block_keys(self, delta: float) -> list:
        return self.base.block_keys(delta)

    def block(self, key: int) -> Block:
        cache = self._cache.setdefault("blocks", {})
        blk = cache.get(key)
        if blk is None:
            b = self.base.block(key)
            k = np.ceil(b.lam).astype(np.int64)
            reps = np.repeat(np.arange(len(b.ids)), k)
            offs = np.arange(len(reps)) - np.repeat(np.cumsum(k) - k, k)
            ids = b.ids[reps] * SPLIT_RADIX + offs
            lam = b.lam[reps] / k[reps]
            prev = np.concatenate([[0.0], b.cum[:-1]])[reps]
            cum = prev + b.lam[reps] * (offs + 1) / k[reps]
            last = offs == k[reps] - 1
            cum[last] = b.cum[reps][last]
            blk = Block(key, ids, lam, b.gam[reps], cum)
            cache[key] = blk
        return blk

    def cutoff_set(self, delta: float) -> np.ndarray:
        parts = []
        for key in self.block_keys(delta):
            blk = self.block(key)
            parts.append(blk.ids[blk.gam >= delta])
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def total_rate(self, delta: float) -> float:
        return self.base.total_rate(delta)

    def cutoff_mass(self, delta: float, beta: float = 0.0, exclude: Iterable = ()) -> float:
        sites = self.cutoff_set(delta)
        ex = list(exclude)
        if ex:
            sites = sites[~np.isin(sites, ex)]
        g = self.gam_array(sites)
        return math.fsum(self.lam_array(sites) * g / (1.0 + beta * g))

    def weighted_mass(self, beta: float = 0.0) -> Series:
        return self.base.weighted_mass(beta)

    def spec_string(self) -> str:
        return "split(" + self.base.spec_string() + ")"


def split_weights(family: ParameterFamily) -> SplitFamily:
    return SplitFamily(family)
