"""Long-run occupation of one truncated path against the stationary law.

Writes plot-ready CSV (state, occupation, stationary) to stdout.
"""
import sys

from kproc import INF, format_state, occupation_fractions, parse_family, simulate_truncated, stationary

spec = sys.argv[1] if len(sys.argv) > 1 else "poly:a=2,b=0;c=1"
family = parse_family(spec)
traj = simulate_truncated(family, 1e-3, INF, 2000.0, seed=1)
occ = occupation_fractions(traj)
pi = stationary(family)

print("state,occupation,stationary")
for x in [INF, 1, 2, 3, 4, 5]:
    if x == INF and family.c == 0:
        continue
    print(f"{format_state(x)},{occ.get(x, 0.0):.5f},{pi(x):.5f}")
print(f"# {len(traj)} segments, {spec}", file=sys.stderr)
