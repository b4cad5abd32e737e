"""Numerical tolerances shared by the tabular machinery and its checks."""

# probability rows must sum to one within this
NORMALIZATION_TOL = 1e-12

# algebraic identities on exact tabular quantities
ALGEBRA_TOL = 1e-10

# monotone-improvement and constraint slack allowed on exact J values
IMPROVEMENT_TOL = 1e-9

# surrogate cost bound slack
BOUND_TOL = 1e-8

# floor applied to tabular policy rows before any KL is taken
POLICY_FLOOR = 1e-9

# |c^2/s - delta| below this counts as an intersecting (feasible) constraint plane
LQCLP_BORDER_TOL = 1e-10

# desk-scale guard on the joint action count of generated games
MAX_JOINT_ACTIONS = 10_000
