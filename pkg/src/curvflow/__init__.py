"""Numerical laboratory for concave, inverse-concave curvature speeds and pinching."""

__version__ = "0.1.0"
