"""Smooth domain-adversarial training on desk-scale problems.

Reverse-mode autodiff with exact Hessian-vector products, small
feature/classifier/discriminator networks, sharpness-aware wrappers for the
task and adversarial losses, curvature diagnostics, and checks of the
underlying optimization results on quadratic games.
"""
__version__ = "0.1.0"
