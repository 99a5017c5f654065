"""Command-line driver: ``kproc <subcommand> --family SPEC ...``.

Exit status is 0 when every check passes, 2 when a statistical check fails
and 1 for usage or validation errors.  Reports are JSON (``--format json``,
the default) or CSV; JSON reports carry ``"schema": "kproc/1"`` and keep the
timestamp in a header separate from the deterministic body.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys

import numpy as np

from . import analysis as an
from .errors import KProcError
from .params import INF, format_state, parse_family, parse_state, split_weights, tail_mass
from .trajectory import (
    worker_count,
    simulate_jump_chain,
    simulate_truncated,
)

SCHEMA = "kproc/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text: str) -> list:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _states(text: str) -> list:
    return [parse_state(v) for v in str(text).split(",") if v.strip()]


def _pairs(text: str) -> list:
    out = []
    for item in str(text).split(","):
        if not item.strip():
            continue
        a, _, b = item.partition(":")
        if not b:
            raise UsageError(f"pair {item!r} must look like x:y")
        out.append((parse_state(a), parse_state(b)))
    return out


def _raw_map(text: str) -> dict:
    out = {}
    for item in str(text).split(","):
        if not item.strip():
            continue
        k, _, v = item.partition(":")
        out[int(k)] = float(v)
    return out


def read_config(path: str) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"config line without '=': {line!r}")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _common(p):
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    p.add_argument("--family", help='e.g. "poly:a=2,b=0;c=0"')
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="report path (stdout when omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--summary", action="store_true", help="print one PASS/FAIL line per check")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kproc", description="Simulate and verify weighted K processes.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="one path of the truncated process")
    _common(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--start", default="inf")
    p.add_argument("--horizon", type=float)
    p.add_argument("--construction", choices=("clock", "jumpchain"), default="clock")

    p = sub.add_parser("stationary", help="occupation fractions of one long path against the stationary law")
    _common(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--start", default="inf")
    p.add_argument("--sites", default="1,2,3")
    p.add_argument("--tol", type=float, default=0.015)

    p = sub.add_parser("rates", help="finite-difference rate estimates against closed forms")
    _common(p)
    p.add_argument("--pairs", default="1:1")
    p.add_argument("--tgrid", default="0.2,0.1,0.05,0.025")
    p.add_argument("--n", type=float, default=1e5)
    p.add_argument("--n-per-t", action="store_true", help="use n/t replicas at each t")
    p.add_argument("--delta", type=float, help="fixed cutoff (default: tail mass <= t/100)")
    p.add_argument("--rel-tol", type=float, default=0.1)
    p.add_argument("--threshold", type=float, default=10.0)

    p = sub.add_parser("generator-check", help="generator limit at one state for a balanced test function")
    _common(p)
    p.add_argument("--raw", default="1:1", help="site:value list before balancing")
    p.add_argument("--f-inf", type=float, default=0.0)
    p.add_argument("--start", default="1")
    p.add_argument("--tgrid", default="0.2,0.1,0.05,0.025")
    p.add_argument("--n", type=float, default=1e5)
    p.add_argument("--n-per-t", action="store_true")
    p.add_argument("--delta", type=float)
    p.add_argument("--split", action="store_true", help="run on the split family")
    p.add_argument("--rel-tol", type=float, default=0.1)
    p.add_argument("--abs-tol", type=float, default=0.0)

    p = sub.add_parser("resolvent-check", help="f - Af = g for random finitely supported g")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--sites", type=int, default=100, help="check sites 1..SITES besides the support")
    p.add_argument("--tol", type=float, default=1e-12)

    p = sub.add_parser("laplace-check", help="empirical Laplace transform against the closed form")
    _common(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--site", type=int, default=1)
    p.add_argument("--betas", default="0.5,1,2,5")
    p.add_argument("--n", type=float, default=1e5)

    p = sub.add_parser("truncation-study", help="one coupled bank evaluated at several cutoffs")
    _common(p)
    p.add_argument("--start", default="inf")
    p.add_argument("--target", default="inf")
    p.add_argument("--t", type=float, default=0.1)
    p.add_argument("--deltas", default="0.1,0.01,0.001,0.0001")
    p.add_argument("--n", type=float, default=1e5)
    p.add_argument("--coupling", action="store_true",
                   help="also run the time-change coupling at --delta-coupling")
    p.add_argument("--delta-coupling", type=float, default=0.1)
    p.add_argument("--eps", default="0.05,0.025,0.0125")
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--seeds", type=int, default=50)

    p = sub.add_parser("split-check", help="weight splitting: pathwise and distributional agreement")
    _common(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--start", default="inf")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--n", type=float, default=1e5)
    p.add_argument("--sites", default="1,2,3")

    p = sub.add_parser("ck-check", help="Chapman-Kolmogorov gap with independent banks")
    _common(p)
    p.add_argument("--delta", type=float)
    p.add_argument("--pairs", default="1:1")
    p.add_argument("--s", type=float, default=0.25)
    p.add_argument("--t", type=float, default=0.25)
    p.add_argument("--n", type=float, default=1e5)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required")
    if args.config:
        conf = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in conf.items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"config key {key!r} is not an option of {args.command}")
            act = known[key]
            if act.const is True:  # store_true
                defaults[key] = value.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = act.type(value) if act.type else value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    # seeds are always explicit so that every report can be re-run
    _require(args, "family", "seed")
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def _positive(args, *names):
    for name in names:
        v = getattr(args, name, None)
        if v is not None and not v > 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")


# -- subcommands -----------------------------------------------------------------------


def _provenance(args, family, **extra) -> dict:
    d = {"family": family.spec_string(), "seed": args.seed}
    d.update(extra)
    return d


def cmd_simulate(args, family):
    _require(args, "delta", "horizon")
    _positive(args, "delta", "horizon")
    y = parse_state(args.start)
    build = simulate_truncated if args.construction == "clock" else simulate_jump_chain
    traj = build(family, args.delta, y, args.horizon, args.seed)
    body = {"provenance": _provenance(args, family, delta=args.delta, horizon=args.horizon,
                                      start=format_state(y), construction=args.construction),
            "segments": traj.records()}
    return body, [], [{"t": r["t"], "state": r["state"]} for r in traj.records()], "trajectory"


def cmd_stationary(args, family):
    _require(args, "delta", "horizon")
    _positive(args, "delta", "horizon")
    rep = an.stationary_check(family, args.delta, args.horizon, args.seed,
                              sites=_states(args.sites), tol=args.tol, start=parse_state(args.start))
    prov = _provenance(args, family, delta=args.delta, horizon=args.horizon)
    checks = [(f"occupation[{r['state']}]", r["passed"]) for r in rep["rows"]]
    rows = [dict(prov, **r) for r in rep["rows"]]
    return {"provenance": prov, "report": rep}, checks, rows, "stationary"


def _n_arg(args):
    base = float(args.n)
    if getattr(args, "n_per_t", False):
        return lambda t: int(round(base / t))
    return int(base)


def cmd_rates(args, family):
    tgrid = _floats(args.tgrid)
    reports, checks, rows = [], [], []
    for x, y in _pairs(args.pairs):
        rep = an.estimate_rate(family, x, y, tgrid, _n_arg(args), args.seed,
                               delta_grid=args.delta, rel_tol=args.rel_tol,
                               threshold=args.threshold)
        reports.append(rep)
        name = f"rate[{format_state(x)},{format_state(y)}]"
        checks.append((name, rep["agrees"]))
        for r in rep["rows"]:
            rows.append(dict(_provenance(args, family), x=rep["x"], y=rep["y"],
                             exact=rep["exact"], **r))
    return {"provenance": _provenance(args, family, tgrid=tgrid), "pairs": reports}, checks, rows, "rates"


def cmd_generator(args, family):
    tgrid = _floats(args.tgrid)
    f = an.build_domain_function(family, _raw_map(args.raw), args.f_inf)
    fam = split_weights(family) if args.split else family
    x = parse_state(args.start)
    if args.split and x != INF:
        x = fam.code(x, 0)
    rep = an.generator_limit_check(fam, args.delta, f, x, tgrid, _n_arg(args), args.seed,
                                   rel_tol=args.rel_tol, abs_tol=args.abs_tol)
    rep["function"] = {"f_inf": f.f_inf, "increments": {str(k): v for k, v in f.increments.items()}}
    rep["domain"] = an.domain_report(f)
    prov = _provenance(args, family, raw=args.raw, f_inf=args.f_inf, split=args.split)
    rows = [dict(prov, x=rep["x"], target=rep["target"], **r) for r in rep["rows"]]
    return ({"provenance": _provenance(args, family, split=args.split), "report": rep},
            [(f"generator[{rep['x']}]", rep["passed"])], rows, "generator")


def cmd_resolvent(args, family):
    rng = np.random.default_rng(args.seed)
    worst, contract = 0.0, True
    rows = []
    for k in range(args.trials):
        size = int(rng.integers(1, 8))
        support = rng.choice(np.arange(1, 40), size=size, replace=False)
        g = {int(s): float(v) for s, v in zip(support, rng.uniform(-1, 1, size))}
        g_inf = float(rng.uniform(-1, 1))
        f = an.resolvent_solve(family, g, g_inf)
        res = an.resolvent_residual(family, f, g, g_inf, range(1, args.sites + 1))
        g_norm = max([abs(v) for v in g.values()] + [abs(g_inf)])
        ok = f.sup_norm() <= g_norm * (1 + 1e-12)
        worst = max(worst, res)
        contract &= ok
        rows.append({"trial": k, "family": family.spec_string(), "seed": args.seed,
                     "residual": res, "f_norm": f.sup_norm(), "g_norm": g_norm, "contraction": ok})
    body = {"provenance": _provenance(args, family, trials=args.trials),
            "max_residual": worst, "tolerance": args.tol, "contraction_all": bool(contract)}
    checks = [("resolvent_residual", worst <= args.tol), ("contraction", bool(contract))]
    return body, checks, rows, "resolvent"


def cmd_laplace(args, family):
    _require(args, "delta")
    ests = an.empirical_laplace(family, args.delta, args.site, _floats(args.betas), int(args.n), args.seed)
    rows, checks = [], []
    for e in ests:
        cf = e.extra.get("closed_form", 1.0)
        ok = abs(e.value - cf) < 3 * e.se if e.se > 0 else e.value == cf
        rows.append(dict(_provenance(args, family, delta=args.delta, n=e.n, site=args.site),
                         beta=e.extra["beta"], empirical=e.value, se=e.se, closed_form=cf, passed=ok))
        checks.append((f"laplace[beta={e.extra['beta']}]", ok))
    return {"provenance": _provenance(args, family, delta=args.delta), "rows": rows}, checks, rows, "laplace"


def cmd_truncation(args, family):
    rep = an.truncation_study(family, parse_state(args.start), parse_state(args.target), args.t,
                              _floats(args.deltas), int(args.n), args.seed)
    checks = [("finest_cutoffs_agree", rep["passed"])]
    prov = _provenance(args, family, start=args.start, target=args.target, t=args.t, n=int(args.n))
    rows = [dict(prov, **r) for r in rep["rows"]]
    body = {"provenance": _provenance(args, family), "study": rep}
    if args.coupling:
        cs = an.coupling_study(family, args.delta_coupling, _floats(args.eps), args.horizon,
                               args.seeds, args.seed)
        body["coupling"] = cs
        checks += [("coupling_distance_bound", cs["distance_bound_ok"]),
                   ("coupling_median_monotone", cs["median_monotone"])]
    return body, checks, rows, "truncation"


def cmd_split(args, family):
    _require(args, "delta")
    sf = split_weights(family)
    y = parse_state(args.start)
    ys = sf.code(y, 0) if y != INF else INF
    base = simulate_truncated(family, args.delta, y, args.horizon, args.seed)
    proj = simulate_truncated(sf, args.delta, ys, args.horizon, args.seed).project()
    same = bool(np.array_equal(base.times, proj.times) and np.array_equal(base.states, proj.states))
    n = int(args.n)
    labels_a, pa, ea = an.transition_row(family, args.delta, y, args.t, n, args.seed, stream=1)
    st_b, _ = an.batch_states(sf, args.delta, ys, args.t, an.replica_seeds(args.seed, n, 2))
    rows, ok_all = [], True
    for z in _states(args.sites):
        va, sa = an._lookup_p(labels_a, pa, ea, z)
        vb = float(np.mean(sf.project(st_b) == z))
        sb = math.sqrt(vb * (1 - vb) / n)
        ok = abs(va - vb) <= 3 * math.hypot(sa, sb)
        ok_all &= ok
        rows.append(dict(_provenance(args, family, delta=args.delta, t=args.t, n=n),
                         state=format_state(z), base=va, base_se=sa, split=vb, split_se=sb, passed=ok))
    body = {"provenance": _provenance(args, family, delta=args.delta),
            "thinning_identical": same, "segments": len(base), "rows": rows}
    return body, [("split_pathwise", same), ("split_distribution", bool(ok_all))], rows, "split"


def cmd_ck(args, family):
    _require(args, "delta")
    rows, checks = [], []
    for x, y in _pairs(args.pairs):
        e = an.chapman_kolmogorov_gap(family, args.delta, x, y, args.s, args.t, int(args.n), args.seed)
        ok = abs(e.value) < 3 * e.se if e.se > 0 else e.value == 0
        rows.append(dict(_provenance(args, family, delta=args.delta, n=e.n, s=args.s, t=args.t),
                         x=format_state(x), y=format_state(y), gap=e.value, se=e.se, passed=ok,
                         direct=e.extra.get("direct"), composed=e.extra.get("composed")))
        checks.append((f"ck[{format_state(x)},{format_state(y)}]", ok))
    return {"provenance": _provenance(args, family, delta=args.delta), "rows": rows}, checks, rows, "ck"


COMMANDS = {
    "simulate": cmd_simulate,
    "stationary": cmd_stationary,
    "rates": cmd_rates,
    "generator-check": cmd_generator,
    "resolvent-check": cmd_resolvent,
    "laplace-check": cmd_laplace,
    "truncation-study": cmd_truncation,
    "split-check": cmd_split,
    "ck-check": cmd_ck,
}


# -- output --------------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return None if math.isnan(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def render(command, body, checks, rows, fmt, argv) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        if rows:
            cols = list(dict.fromkeys(k for r in rows for k in r))
            w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _csv_cell(r.get(k)) for k in cols})
        return buf.getvalue()
    doc = {
        "schema": SCHEMA,
        "header": {"generated": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
                   "argv": list(argv), "workers": worker_count()},
        "command": command,
        "checks": [{"name": n, "passed": bool(p)} for n, p in checks],
        "body": _jsonable(body),
    }
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def _csv_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (dict, list)):
        return json.dumps(_jsonable(v))
    return v


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        family = parse_family(args.family)
        body, checks, rows, _ = COMMANDS[args.command](args, family)
    except (UsageError, KProcError, ValueError) as exc:
        print(f"kproc: error: {exc}", file=sys.stderr)
        return 1
    text = render(args.command, body, checks, rows, args.format, argv)
    if args.command == "simulate" and args.out and args.out.endswith(".jsonl"):
        text = "".join(json.dumps(r) + "\n" for r in body["segments"])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.summary:
        for name, passed in checks:
            print(f"{'PASS' if passed else 'FAIL'} {name}", file=sys.stdout if args.out else sys.stderr)
    return 0 if all(p for _, p in checks) else 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
