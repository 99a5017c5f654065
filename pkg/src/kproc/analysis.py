"""Estimators and closed forms: transition functions, rates, generator, resolvent, Laplace.

Monte Carlo estimates use replica seeds derived from one master seed, so
every number here is reproducible from its report.  Quantities that the
process determines in closed form (rates, stationary law, Laplace
transform, generator and resolvent on the domain) are computed exactly and
used as targets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .clock import replica_seeds, sample_mark_bank
from .errors import (
    GridTooCoarse,
    OrderingViolation,
    PositiveC,
    StateOutsideCutoff,
    UnbalanceableSupport,
    ValidationError,
)
from .params import INF, format_state, stationary, tail_mass
from .trajectory import (
    _chunk_rows,
    batch_states,
    batch_states_coupled,
    batch_states_many_starts,
    coupling_time_change,
    jump_chain_states,
    occupation_fractions,
    simulate_truncated,
)


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    n: int
    delta: float = None
    t: float = None
    seed: int = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def _mean_se(values: np.ndarray) -> tuple:
    n = len(values)
    mean = float(np.mean(values))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(n))


def _binomial(hits: int, n: int) -> tuple:
    p = hits / n
    return p, math.sqrt(p * (1.0 - p) / n)


def _base(family):
    return getattr(family, "base", family)


def _project(family, states):
    return np.asarray(family.project(states), dtype=np.int64)


# -- transition functions -----------------------------------------------------------


def estimate_transition(family, delta: float, x, y, t: float, n: int, seed) -> Estimate:
    """Fraction of ``n`` replicas started at ``x`` that sit at ``y`` at time ``t``."""
    x, y = int(x), int(y)
    if x != INF and family.gam(x) < delta:
        raise StateOutsideCutoff(f"start {x} has gam < delta")
    if t == 0:
        return Estimate(float(x == y), 0.0, n, delta, t, seed)
    states, _ = batch_states(family, delta, x, t, replica_seeds(seed, n))
    p, se = _binomial(int(np.sum(states == y)), n)
    return Estimate(p, se, n, delta, t, seed)


def transition_row(family, delta: float, x, t: float, n: int, seed, jump_chain=False,
                   stream: int = 0) -> tuple:
    """Empirical law of the state at ``t`` from ``x``: (states, probabilities, SEs)."""
    seeds = replica_seeds(seed, n, stream)
    if jump_chain:
        states = jump_chain_states(family, delta, x, t, seeds)
    else:
        states, _ = batch_states(family, delta, x, t, seeds)
    labels, counts = np.unique(states, return_counts=True)
    p = counts / n
    return labels, p, np.sqrt(p * (1.0 - p) / n)


def exact_rate(family, x, y) -> float:
    """Closed-form transition rate ``q_xy`` (possibly infinite)."""
    x, y = int(x), int(y)
    c = family.c
    if x != INF and y != INF:
        return -1.0 / family.gam(x) if x == y else 0.0
    if x != INF:
        return 1.0 / family.gam(x) if c > 0 else 0.0
    if y != INF:
        return family.lam(y) / c if c > 0 else math.inf
    return -math.inf


def default_delta(family, t: float, ratio: float = 100.0) -> float:
    """Coarsest cutoff ``gam(N)`` on the base sequence with ``tail_mass <= t / ratio``."""
    base = _base(family)
    target = t / ratio
    lo, hi = 1, 2
    while tail_mass(base, float(base.base_gam(np.array([hi]))[0])) > target:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if tail_mass(base, float(base.base_gam(np.array([mid]))[0])) > target:
            lo = mid
        else:
            hi = mid
    return float(base.base_gam(np.array([hi]))[0])


def correction_exponent(family) -> float:
    """Leading power of ``t`` in the finite-``t`` bias of rate quotients.

    With ``c = 0`` returns to a site start through the clock, whose small-time
    behaviour is stable with index ``(b+1)/a``; with ``c > 0`` the drift
    dominates and the first correction has exponent one minus that index.
    """
    alpha = _base(family).stable_index
    k = alpha if family.c == 0 else 1.0 - alpha
    return k if 0.0 < k < 1.0 else 0.5


def extrapolate(ts, values, ses, kappa: float = None) -> dict:
    """Weighted least squares of quotients on ``{1, t**kappa, t}``; returns the intercept.

    With fewer than four points or ``kappa=None`` this is the straight line
    in ``t``.
    """
    ts, values, ses = (np.asarray(a, dtype=float) for a in (ts, values, ses))
    cols = [np.ones_like(ts)]
    if kappa is not None and len(ts) >= 4:
        cols.append(ts ** kappa)
    cols.append(ts)
    X = np.column_stack(cols)
    if np.all(ses == 0):
        w = np.ones_like(ts)
    else:
        w = 1.0 / np.maximum(ses, float(np.max(ses)) * 1e-6) ** 2
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ (XtW @ values)
    resid = values - X @ beta
    dof = len(ts) - X.shape[1]
    # inflate by the residual scatter when it exceeds the quoted errors
    chi2 = float(np.sum(w * resid ** 2) / dof) if dof > 0 else 1.0
    se = math.sqrt(cov[0, 0] * max(chi2, 1.0)) if not np.all(ses == 0) else 0.0
    return {"intercept": float(beta[0]), "se": se, "coef": beta.tolist(),
            "basis_exponent": kappa if X.shape[1] == 3 else 1.0, "chi2_per_dof": chi2}


def _n_for(n, t, i):
    if callable(n):
        return int(n(t))
    if isinstance(n, (list, tuple, np.ndarray)):
        return int(n[i])
    return int(n)


def _delta_for(family, delta_grid, t, i):
    if delta_grid is None:
        return default_delta(family, t)
    if np.ndim(delta_grid) == 0:
        return float(delta_grid)
    return float(delta_grid[i])


def _check_grid(t_grid):
    t_grid = [float(t) for t in t_grid]
    if any(t <= 0 for t in t_grid) or any(b >= a for a, b in zip(t_grid, t_grid[1:])):
        raise ValidationError("t grid must be positive and strictly decreasing")
    return t_grid


def estimate_rate(family, x, y, t_grid, n, seed, delta_grid=None, rel_tol: float = 0.1,
                  zero_tol: float = 0.05, threshold: float = 10.0, kappa="auto") -> dict:
    """Finite-difference quotients ``(p(t) - 1{x=y}) / t`` and their limit.

    ``n`` is a count, a sequence aligned with ``t_grid`` or a function of
    ``t``.  Each quotient is re-estimated at half the cutoff from the same
    marks.  For finite rates the report compares the two extrapolated limits
    (``halved_agrees``: within one SE of the fit); per-row differences are
    listed for inspection.
    """
    x, y = int(x), int(y)
    t_grid = _check_grid(t_grid)
    exact = exact_rate(_base(family), x, y)
    rows = []
    for i, t in enumerate(t_grid):
        d = _delta_for(family, delta_grid, t, i)
        m = _n_for(n, t, i)
        seeds = replica_seeds(seed, m, stream=i)
        (s1, s2), _ = batch_states_coupled(family, [d, d / 2.0], x, t, seeds)
        ind = float(x == y)
        p1, e1 = _binomial(int(np.sum(s1 == y)), m)
        p2, e2 = _binomial(int(np.sum(s2 == y)), m)
        rows.append({"t": t, "delta": d, "n": m, "p": p1, "quotient": (p1 - ind) / t,
                     "se": e1 / t, "quotient_half_delta": (p2 - ind) / t,
                     "se_half_delta": e2 / t,
                     "delta_rule_met": bool(tail_mass(_base(family), d) <= t / 100.0)})
    q = np.array([r["quotient"] for r in rows])
    se = np.array([r["se"] for r in rows])
    report = {"x": format_state(x), "y": format_state(y), "exact": _json_num(exact),
              "rows": rows, "seed": int(seed)}
    if math.isinf(exact):
        sign = 1.0 if exact > 0 else -1.0
        steps = np.diff(q) * sign
        monotone = bool(np.all(steps > 0))
        escaped = bool(sign * q[-1] > threshold)
        verdict = ("+inf" if sign > 0 else "-inf") if (monotone and escaped) else None
        report.update(divergence=verdict, monotone=monotone, beyond_threshold=escaped,
                      threshold=threshold, agrees=verdict is not None)
        return report
    if exact == 0.0:
        ok = bool(abs(q[-1]) < zero_tol and abs(q[-1]) < abs(q[0]))
        report.update(last_quotient=float(q[-1]), agrees=ok, zero_tol=zero_tol)
        return report
    if np.all(se > abs(exact)):
        raise GridTooCoarse("standard error exceeds the exact rate at every t")
    k = correction_exponent(family) if kappa == "auto" else kappa
    fit = extrapolate(t_grid, q, se, k)
    half = extrapolate(t_grid, [r["quotient_half_delta"] for r in rows],
                       [r["se_half_delta"] for r in rows], k)
    err = abs(fit["intercept"] - exact)
    report.update(extrapolation=fit, rel_error=err / abs(exact),
                  agrees=bool(err <= rel_tol * abs(exact)), rel_tol=rel_tol,
                  intercept_half_delta=half["intercept"],
                  halved_agrees=bool(abs(half["intercept"] - fit["intercept"]) <= fit["se"]))
    return report


def _json_num(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


# -- exact finite-state oracle ------------------------------------------------------


@dataclass(frozen=True)
class TruncatedChain:
    """The truncated process as a finite reversible chain, solved by eigendecomposition."""

    labels: np.ndarray
    weights: np.ndarray  # normalized stationary law on labels
    evals: np.ndarray
    evecs: np.ndarray
    entry: np.ndarray  # law of the state at time 0 when started at infinity

    def matrix(self, t: float) -> np.ndarray:
        r = np.sqrt(self.weights)
        core = (self.evecs * np.exp(self.evals * t)) @ self.evecs.T
        return core / r[:, None] * r[None, :]

    def index(self, x) -> int:
        j = np.searchsorted(self.labels, int(x))
        if j >= len(self.labels) or self.labels[j] != int(x):
            raise StateOutsideCutoff(f"{x} is not a state of the truncated chain")
        return int(j)

    def row(self, x, t: float) -> np.ndarray:
        P = self.matrix(t)
        if int(x) == INF and INF not in self.labels:
            return self.entry @ P
        return P[self.index(x)]

    def p(self, x, y, t: float) -> float:
        row = self.row(x, t)
        if int(y) == INF and INF not in self.labels:
            return 0.0
        return float(row[self.index(y)])


def truncated_chain(family, delta: float) -> TruncatedChain:
    """Generator of the truncated chain and its spectral decomposition."""
    sites = family.cutoff_set(delta)
    lam = family.lam_array(sites)
    gam = family.gam_array(sites)
    big = lam.sum()
    c = family.c
    if c == 0:
        Q = np.outer(1.0 / gam, lam / big)
        Q[np.diag_indices_from(Q)] -= 1.0 / gam
        labels, w = sites, lam * gam
    else:
        m = len(sites)
        Q = np.zeros((m + 1, m + 1))
        Q[0, 1:] = lam / c
        Q[0, 0] = -big / c
        Q[1:, 0] = 1.0 / gam
        Q[np.arange(1, m + 1), np.arange(1, m + 1)] = -1.0 / gam
        labels, w = np.r_[INF, sites], np.r_[c, lam * gam]
    w = w / w.sum()
    r = np.sqrt(w)
    S = Q * r[:, None] / r[None, :]
    evals, evecs = np.linalg.eigh(0.5 * (S + S.T))
    entry = lam / big if c == 0 else np.eye(len(labels))[0]
    return TruncatedChain(np.asarray(labels, dtype=np.int64), w, evals, evecs, entry)


# -- domain functions ---------------------------------------------------------------


@dataclass(frozen=True)
class DomainFunction:
    """``f = f_inf + h`` with ``h`` given on a finite support and analytically elsewhere.

    Off the support ``h(x) = tail_slope * gam(x) / (1 + tail_pole * gam(x))``,
    so ``(f(x) - f_inf) / gam(x)`` tends to ``tail_slope``.  Storing
    increments rather than values keeps ``h / gam`` accurate at small ``gam``.
    """

    family: object
    f_inf: float
    increments: dict
    tail_slope: float = 0.0
    tail_pole: float = 0.0

    @property
    def support(self) -> list:
        return sorted(self.increments)

    @property
    def declared_limit(self) -> float:
        return self.tail_slope

    def increment(self, x) -> float:
        x = int(x)
        if x == INF:
            return 0.0
        if x in self.increments:
            return self.increments[x]
        g = self.family.gam(x)
        return self.tail_slope * g / (1.0 + self.tail_pole * g)

    def __call__(self, x) -> float:
        return self.f_inf + self.increment(x)

    def increment_array(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        out = np.zeros(len(states))
        site = states != INF
        if self.tail_slope != 0.0:
            g = self.family.gam_array(states)
            out = np.where(site, self.tail_slope * g / (1.0 + self.tail_pole * g), 0.0)
        for x, h in self.increments.items():
            out[states == x] = h
        return out

    def values(self, states) -> np.ndarray:
        return self.f_inf + self.increment_array(states)

    def balance(self) -> float:
        """``sum_x lam(x) (f(x) - f_inf)`` over all sites."""
        fam = self.family
        parts = [fam.lam(x) * h for x, h in self.increments.items()]
        if self.tail_slope != 0.0:
            p = self.tail_pole
            on = sum(fam.lam(x) * fam.gam(x) / (1.0 + p * fam.gam(x)) for x in self.increments)
            parts.append(self.tail_slope * (fam.weighted_mass(p).value - on))
        return math.fsum(parts)

    def balance_scale(self) -> float:
        fam = self.family
        s = math.fsum(abs(fam.lam(x) * h) for x, h in self.increments.items())
        if self.tail_slope != 0.0:
            s += abs(self.tail_slope) * fam.weighted_mass(self.tail_pole).value
        return s

    def sup_norm(self) -> float:
        """``sup |f|`` over all sites and infinity."""
        fam = self.family
        vals = [abs(self.f_inf)] + [abs(self.f_inf + h) for h in self.increments.values()]
        if self.tail_slope != 0.0:
            # off the support f is monotone in gam: check the largest gam off the support
            k = 1
            while k in self.increments:
                k += 1
            cand = [k] + [s for s in fam.override_map if s not in self.increments]
            vals += [abs(self(x)) for x in cand]
        return max(vals)


def domain_report(f: DomainFunction) -> dict:
    """Machine check of the domain conditions."""
    fam = f.family
    bal = f.balance()
    scale = f.balance_scale()
    x_far = max(f.support + [1]) * 1000
    limit_gap = abs(f.increment(x_far) / fam.gam(x_far) - f.tail_slope)
    return {
        "balance": bal,
        "balance_scale": scale,
        "balanced": bool(abs(bal) <= 1e-10 * max(scale, 1.0)),
        "absolutely_summable": bool(math.isfinite(scale)),
        "declared_limit": f.tail_slope,
        "limit_gap_far": limit_gap,
    }


def build_domain_function(family, raw: dict, f_inf: float = 0.0) -> DomainFunction:
    """Extend ``raw`` (site -> value) by at most two correction sites to balance it."""
    fam = _base(family)
    inc = {int(x): float(v) - f_inf for x, v in raw.items()}
    inc = {x: h for x, h in inc.items() if h != 0.0}
    if not inc:
        return DomainFunction(fam, float(f_inf), {})
    B = math.fsum(fam.lam(x) * h for x, h in inc.items())
    scale = math.fsum(abs(fam.lam(x) * h) for x, h in inc.items())
    if abs(B) <= 1e-15 * scale:
        return DomainFunction(fam, float(f_inf), inc)
    z1 = max(inc) + 1
    z2 = z1 + 1
    lam1, lam2 = fam.lam(z1), fam.lam(z2)
    if not (lam1 > 0 and lam2 > 0):
        raise UnbalanceableSupport("correction sites carry no weight")
    size = max(abs(h) for h in inc.values())
    if abs(B / lam1) <= size:
        inc[z1] = -B / lam1
    else:
        # share the correction so the extra values stay small
        h = -B / (lam1 + lam2)
        inc[z1] = h
        inc[z2] = (-B - lam1 * h) / lam2
    return DomainFunction(fam, float(f_inf), inc)


def generator_apply(family, f: DomainFunction, x) -> float:
    """``A f(x) = (f(inf) - f(x)) / gam(x)`` at sites; minus the declared limit at infinity."""
    if family.c > 0:
        raise PositiveC("generator formulas here assume c = 0")
    x = int(x)
    if x == INF:
        return -f.tail_slope if f.tail_slope != 0.0 else 0.0
    return -f.increment(x) / _base(family).gam(x)


def resolvent_solve(family, g_support: dict, g_inf: float) -> DomainFunction:
    """Solve ``f - A f = g`` for ``g`` given on a finite support and equal to ``g_inf`` elsewhere."""
    if family.c > 0:
        raise PositiveC("resolvent formula here assumes c = 0")
    fam = _base(family)
    norm = fam.weighted_mass(1.0).value
    terms = {}
    for x, v in g_support.items():
        x = int(x)
        g = fam.gam(x)
        terms[x] = (fam.lam(x) * g / (1.0 + g), float(v) - g_inf)
    L = math.fsum(w * d for w, d in terms.values()) / norm
    inc = {}
    for x, (_, d) in terms.items():
        g = fam.gam(x)
        inc[x] = (d - L) * g / (1.0 + g)
    return DomainFunction(fam, float(g_inf) + L, inc, tail_slope=-L, tail_pole=1.0)


def resolvent_residual(family, f: DomainFunction, g_support: dict, g_inf: float, sites) -> float:
    """``max |f - A f - g|`` over ``sites``, the support of ``g`` and infinity."""
    pts = set(int(s) for s in sites) | set(int(s) for s in g_support) | {INF}
    worst = 0.0
    for x in pts:
        g = g_support.get(x, g_inf) if x != INF else g_inf
        worst = max(worst, abs(f(x) - generator_apply(family, f, x) - g))
    return worst


# -- semigroup, generator limits and first visits -----------------------------------


def estimate_semigroup(family, delta: float, f: DomainFunction, x, t: float, n: int, seed) -> Estimate:
    """Replica mean of ``f(X(t))`` started at ``x``."""
    x = int(x)
    if t == 0:
        return Estimate(float(f(int(_project(family, [x])[0]))), 0.0, n, delta, t, seed)
    states, _ = batch_states(family, delta, x, t, replica_seeds(seed, n))
    h = f.increment_array(_project(family, states))
    m, se = _mean_se(h)
    return Estimate(f.f_inf + m, se, n, delta, t, seed)


def generator_limit_check(family, delta, f: DomainFunction, x, t_grid, n, seed,
                          rel_tol: float = 0.1, abs_tol: float = 0.0, kappa="auto") -> dict:
    """Quotients ``(Psi_t f(x) - f(x)) / t`` against ``A f(x)``.

    ``delta`` is one cutoff, a sequence aligned with ``t_grid``, or ``None``
    for the tail-mass rule.  Passes iff the extrapolated quotient lies within
    ``max(3 SE, rel_tol |A f(x)|, abs_tol)`` of the target.
    """
    if family.c > 0:
        raise PositiveC("generator checks assume c = 0")
    x = int(x)
    t_grid = _check_grid(t_grid)
    fx = f(int(_project(family, [x])[0])) if x != INF else f.f_inf
    target = generator_apply(_base(family), f, int(_project(family, [x])[0]) if x != INF else INF)
    rows = []
    for i, t in enumerate(t_grid):
        d = _delta_for(family, delta, t, i)
        m = _n_for(n, t, i)
        states, _ = batch_states(family, d, x, t, replica_seeds(seed, m, stream=i))
        vals = f.increment_array(_project(family, states))
        mean, se = _mean_se(vals)
        rows.append({"t": t, "delta": d, "n": m,
                     "quotient": (f.f_inf + mean - fx) / t if x != INF else mean / t,
                     "se": se / t})
    q = np.array([r["quotient"] for r in rows])
    se = np.array([r["se"] for r in rows])
    if target != 0 and np.all(se > abs(target)):
        raise GridTooCoarse("standard error exceeds |A f(x)| at every t")
    k = correction_exponent(family) if kappa == "auto" else kappa
    fit = extrapolate(t_grid, q, se, k)
    tol = max(3.0 * fit["se"], rel_tol * abs(target), abs_tol)
    return {"x": format_state(x), "target": target, "rows": rows, "extrapolation": fit,
            "tolerance": tol, "passed": bool(abs(fit["intercept"] - target) <= tol),
            "seed": int(seed)}


def not_first_visit_mass(family, delta: float, f: DomainFunction, t: float, n: int, seed) -> Estimate:
    """``(1/t) E[|f(X(t)) - f_inf|; X(t) is a site not on its first visit]`` from infinity."""
    if family.c > 0:
        raise PositiveC("first-visit decomposition assumes c = 0")
    states, first = batch_states(family, delta, INF, t, replica_seeds(seed, n), first_visit=True)
    w = np.abs(f.increment_array(_project(family, states))) * (~first)
    m, se = _mean_se(w)
    return Estimate(m / t, se / t, n, delta, t, seed)


# -- Chapman-Kolmogorov ---------------------------------------------------------------


def chapman_kolmogorov_gap(family, delta: float, x, y, s: float, t: float, n: int, seed) -> Estimate:
    """``p(s+t)_xy - sum_z p(s)_xz p(t)_zy`` from three independent replica banks.

    The direct leg, the ``s`` leg and the ``t`` leg use separate seed
    streams.  The ``t`` leg serves every intermediate state ``z`` from one
    bank, since paths from different starts share their marks.  The
    returned value is the signed gap; its SE combines the three legs.
    """
    x, y = int(x), int(y)
    if s == 0 or t == 0:
        # one leg is the identity, so the composition is the direct estimate
        return Estimate(0.0, 0.0, n, delta, s + t, seed, {"s": s, "direct": None})
    direct, _ = batch_states(family, delta, x, s + t, replica_seeds(seed, n, stream=0))
    p_direct, se_direct = _binomial(int(np.sum(direct == y)), n)
    mid, _ = batch_states(family, delta, x, s, replica_seeds(seed, n, stream=1))
    zs, counts = np.unique(mid, return_counts=True)
    a = counts / n
    ends = batch_states_many_starts(family, delta, [int(z) for z in zs], t,
                                    replica_seeds(seed, n, stream=2))
    W = np.zeros(n)
    b = np.zeros(len(zs))
    for j, z in enumerate(zs):
        hit = (ends[int(z)] == y).astype(float)
        b[j] = hit.mean()
        W += a[j] * hit
    comp = float(a @ b)
    var_a = (float(a @ b ** 2) - comp ** 2) / n
    var_b = float(np.var(W, ddof=1)) / n if n > 1 else 0.0
    se = math.sqrt(se_direct ** 2 + max(var_a, 0.0) + var_b)
    return Estimate(p_direct - comp, se, n, delta, s + t, seed,
                    {"s": s, "direct": p_direct, "composed": comp,
                     "intermediate_states": len(zs)})


# -- Laplace transform -----------------------------------------------------------------


def laplace_phi(family, x, beta: float, delta: float = None) -> float:
    """``E exp(-beta Gamma(sigma_1^x -))`` in closed form, optionally for the truncated process."""
    x = int(x)
    lam_x = family.lam(x)
    if beta == 0:
        return 1.0
    if delta is None:
        g = family.gam(x)
        rest = family.weighted_mass(beta).value - lam_x * g / (1.0 + beta * g)
    else:
        rest = family.cutoff_mass(delta, beta, exclude=[x])
    return float(lam_x / (lam_x + beta * family.c + beta * rest))


def empirical_laplace(family, delta: float, x, beta, n: int, seed) -> list:
    """Monte Carlo ``E exp(-beta Gamma(sigma_1^x -))`` for each ``beta``.

    Each replica grows its window until site ``x`` has a mark; the clock
    just before that first mark excludes the mark itself.
    """
    x = int(x)
    if family.gam(x) < delta:
        raise StateOutsideCutoff(f"site {x} has gam < delta")
    betas = np.atleast_1d(np.asarray(beta, dtype=float))
    seeds = replica_seeds(seed, n)
    values = np.zeros(n)
    per_row = family.total_rate(delta) * 4.0 / family.lam(x)
    chunk = max(256, int(2_000_000 / max(per_row, 8.0)))

    def need(part, rows):
        return ~(part.site == x).any(axis=1)

    for lo in range(0, n, chunk):
        bank = sample_mark_bank(family, delta, seeds[lo:lo + chunk], 0.0, need)
        k = np.argmax(bank.site == x, axis=1)
        rows = np.arange(bank.n)
        before = np.cumsum(bank.jump, axis=1) - bank.jump
        values[lo:lo + chunk] = family.c * bank.sigma[rows, k] + before[rows, k]
    out = []
    for b in betas:
        if b == 0:
            out.append(Estimate(1.0, 0.0, n, delta, None, seed, {"beta": 0.0}))
            continue
        m, se = _mean_se(np.exp(-b * values))
        out.append(Estimate(m, se, n, delta, None, seed,
                            {"beta": float(b), "closed_form": laplace_phi(family, x, b, delta)}))
    return out


# -- stationary and structural checks -------------------------------------------------------


def stationary_check(family, delta: float, horizon: float, seed, sites=(1, 2, 3),
                     tol: float = 0.015, start=INF) -> dict:
    """Occupation fractions of one long path against the stationary law."""
    traj = simulate_truncated(family, delta, start, horizon, seed)
    occ = occupation_fractions(traj)
    pi = stationary(_base(family))
    rows = []
    for x in list(sites) + [INF]:
        if x == INF and family.c == 0:
            continue
        got = occ.get(int(x), 0.0)
        want = pi(x)
        rows.append({"state": format_state(x), "occupation": got, "stationary": want,
                     "error": got - want, "passed": bool(abs(got - want) <= tol)})
    return {"delta": delta, "horizon": horizon, "seed": int(seed), "tolerance": tol,
            "segments": len(traj), "rows": rows, "passed": all(r["passed"] for r in rows)}


def oracle_equivalence(family, delta: float, starts, t_grid, n: int, seed) -> dict:
    """Clock construction against the jump chain: every pair must overlap at 3 SE."""
    rows = []
    for i, t in enumerate(t_grid):
        for j, x in enumerate(starts):
            # the two constructions read differently tagged streams, so sharing
            # replica seeds keeps them independent
            k = 100 * i + j
            la, pa, ea = transition_row(family, delta, x, t, n, seed, stream=k)
            lb, pb, eb = transition_row(family, delta, x, t, n, seed, jump_chain=True, stream=k)
            for y in starts:
                va, sa = _lookup_p(la, pa, ea, y)
                vb, sb = _lookup_p(lb, pb, eb, y)
                rows.append({"t": t, "x": format_state(x), "y": format_state(y),
                             "clock": va, "clock_se": sa, "jump_chain": vb, "jump_chain_se": sb,
                             "passed": bool(abs(va - vb) <= 3.0 * (sa + sb) or va == vb)})
    return {"delta": delta, "n": n, "seed": int(seed), "rows": rows,
            "passed": all(r["passed"] for r in rows)}


def _lookup_p(labels, p, se, y):
    j = np.searchsorted(labels, int(y))
    if j < len(labels) and labels[j] == int(y):
        return float(p[j]), float(se[j])
    return 0.0, 0.0


def truncation_study(family, x, y, t: float, delta_grid, n: int, seed) -> dict:
    """One coupled set of replicas evaluated at several cutoffs."""
    deltas = sorted((float(d) for d in delta_grid), reverse=True)
    states, _ = batch_states_coupled(family, deltas, int(x), t, replica_seeds(seed, n))
    rows = []
    for d, st in zip(deltas, states):
        p, se = _binomial(int(np.sum(st == int(y))), n)
        rows.append({"delta": d, "tail_mass": tail_mass(_base(family), d), "p": p, "se": se})
    a, b = rows[-2:] if len(rows) > 1 else (rows[-1], rows[-1])
    ok = abs(a["p"] - b["p"]) <= 3.0 * math.hypot(a["se"], b["se"]) or a["p"] == b["p"]
    return {"x": format_state(x), "y": format_state(y), "t": t, "n": n, "seed": int(seed),
            "rows": rows, "passed": bool(ok)}


def coupling_study(family, delta: float, eps_grid, horizon: float, n_seeds: int, seed,
                   ref_ratio: float = 8.0, max_halvings: int = 40) -> dict:
    """Time-change coupling against finer references for several ``eps`` per seed.

    With ``c = 0`` two consecutive ``delta``-marks often have no ``eps``-level
    mark between them, and no time change can then align the paths.  For
    each seed the whole grid is scaled by the smallest common power of two
    ``2**-k`` at which every level separates its marks, so the levels keep
    their ratios.  Passes when every distance respects its bound and the
    median time shift does not grow along ``eps_grid``.
    """
    eps_grid = [float(e) for e in eps_grid]
    base = replica_seeds(seed, n_seeds, stream=7)
    runs, scales = [], []
    for sd in base:
        for k in range(max_halvings + 1):
            try:
                per = [coupling_time_change(family, delta, e * 2.0 ** -k, e * 2.0 ** -k / ref_ratio,
                                            horizon, int(sd)) for e in eps_grid]
                break
            except OrderingViolation:
                continue
        else:
            raise OrderingViolation(f"seed {int(sd)}: no separation after {max_halvings} halvings")
        for r, e in zip(per, eps_grid):
            r["eps_requested"] = e
            r["halvings"] = k
        runs.append(per)
        scales.append(k)
    medians = [float(np.median([per[i]["sup_time_shift"] for per in runs]))
               for i in range(len(eps_grid))]
    bound_ok = all(r["sup_distance"] <= r["distance_bound"] for per in runs for r in per)
    monotone = all(b <= a for a, b in zip(medians, medians[1:]))
    return {"delta": float(delta), "eps": eps_grid, "horizon": float(horizon),
            "seeds": [int(v) for v in base], "halvings": scales,
            "median_sup_time_shift": medians,
            "max_sup_distance": max(r["sup_distance"] for per in runs for r in per),
            "distance_bound_ok": bool(bound_ok), "median_monotone": bool(monotone),
            "runs": runs, "passed": bool(bound_ok and monotone)}
