"""Difference quotients (p_xx(t) - 1)/t shrinking toward the holding rate -1/gam_x.

The quotients approach the limit like t**(1/2) for poly(2,0) with c = 0, which
is why the fit uses {1, t**kappa, t} rather than a straight line.
"""
from kproc import estimate_rate, parse_family

family = parse_family("poly:a=2,b=0;c=0")
t_grid = [0.2, 0.1, 0.05, 0.025]
r = estimate_rate(family, 1, 1, t_grid, lambda t: int(2e4 / t), seed=3, delta_grid=1e-3)

print("t,quotient,se")
for row in r["rows"]:
    print(f"{row['t']},{row['quotient']:.4f},{row['se']:.4f}")
fit = r["extrapolation"]
print(f"# intercept {fit['intercept']:.4f} +- {fit['se']:.4f}, exact {r['exact']}")
