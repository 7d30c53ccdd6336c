"""Scenario-based forecasting and optimization for online inventory routing."""

__version__ = "0.1.0"

from .core import CostBreakdown, Instance, Plan, State, transition, validate_plan

__all__ = [
    "CostBreakdown",
    "Instance",
    "Plan",
    "State",
    "transition",
    "validate_plan",
]
