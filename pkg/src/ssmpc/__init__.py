"""Reduced-order model predictive control of a simulated cable-driven manipulator.

Modules: ``plant`` (ground-truth simulator), ``datagen`` (trajectories, delay
embedding, SVD basis), ``ssm`` (reduced polynomial model), ``baselines``
(lifted-linear and constant-curvature models), ``mpc`` (multiple-shooting SQP
controller and closed loop), ``bench`` (reference, benchmark, reports) and
``cli``.
"""
__version__ = "0.1.0"
