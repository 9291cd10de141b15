"""Scenario perturbation toolkit: criticality-ranked adversary candidates,
skill-based reactive adversaries, and distributional realism metrics for
closed-loop evaluation of driving policies."""

__version__ = "0.1.0"
