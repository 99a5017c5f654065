"""Simulation and verification toolkit for weighted K processes."""
from .params import (
    INF,
    ParameterFamily,
    SplitFamily,
    cutoff_set,
    format_state,
    gam,
    lam,
    metric,
    parse_family,
    parse_state,
    split_weights,
    stationary,
    tail_mass,
    validate_family,
    with_c,
)
from .clock import MarkBank, MarkPath, clock_eval, clock_inverse, replica_seeds, sample_mark_bank, sample_marks
from .trajectory import (
    Trajectory,
    batch_states,
    classify_visits,
    coupling_time_change,
    coupling_with_halving,
    occupation_fractions,
    simulate_jump_chain,
    simulate_truncated,
    state_at,
)
from .analysis import (
    build_domain_function,
    chapman_kolmogorov_gap,
    empirical_laplace,
    estimate_rate,
    estimate_semigroup,
    estimate_transition,
    exact_rate,
    generator_apply,
    generator_limit_check,
    laplace_phi,
    resolvent_solve,
    truncated_chain,
)

__version__ = "0.1.0"
