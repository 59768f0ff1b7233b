"""Kinetic theory of age-structured populations: simulators, solvers and closed forms."""

from __future__ import annotations

__version__ = "0.1.0"
