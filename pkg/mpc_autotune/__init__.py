"""Bayesian-optimization auto-tuning of a torque-level nonlinear MPC.

Run ``mpc-autotune --help`` (or ``python -m mpc_autotune``) for the commands:

  tune      LHS + SAASBO/vanilla BO campaign over 12 cost weights and gains
  eval      one closed-loop episode at a preset or a theta file
  compare   best-so-far traces of two campaign journals
"""

__version__ = "1.0.0"
