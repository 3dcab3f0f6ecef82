"""Differentiable streamline chemistry: Diff-Chem ODE integration, sensitivities and calibration."""

__version__ = "0.1.0"
