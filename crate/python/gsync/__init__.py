"""Gradient synchronization planner, simulator and ring collectives."""

from ._gsync import (
    Cluster,
    Profile,
    collective,
    estimate_collective_time,
    estimate_iteration_time,
    select_plan,
    simulate,
    sweep,
    validate,
)

__all__ = [
    "Cluster",
    "Profile",
    "collective",
    "estimate_collective_time",
    "estimate_iteration_time",
    "select_plan",
    "simulate",
    "sweep",
    "validate",
]
