"""Numerical and exact tools for SLE, its Virasoro null vectors and multiple-SLE martingales."""
from __future__ import annotations

__version__ = "0.1.0"
__all__ = ["kac", "virasoro", "loewner", "montecarlo", "multi", "cli"]
