"""Closed-form quantum predictions for two-photon polarization experiments.

Angles are analyzer (polarizer) angles in radians, so correlations carry the
doubled angle ``2(a - b)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

PHYSICALITY_TOL = 1e-12


class NonPhysicalStateError(ValueError):
    pass


def singlet_E(a: float, b: float) -> float:
    return -math.cos(2.0 * (a - b))


def product_E1(a: float, alpha1: float) -> float:
    return math.cos(2.0 * (a - alpha1))


def product_E(a: float, b: float, alpha1: float, alpha2: float) -> float:
    return math.cos(2.0 * (a - alpha1)) * math.cos(2.0 * (b - alpha2))


@dataclass(frozen=True)
class QuantumState:
    """Single-particle expectations and the two-particle correlation of a state."""

    E1_hat: Callable[[float], float]
    E2_hat: Callable[[float], float]
    E_hat: Callable[[float, float], float]
    label: str = "custom"

    @classmethod
    def singlet(cls) -> QuantumState:
        return cls(lambda a: 0.0, lambda b: 0.0, singlet_E, "singlet")

    @classmethod
    def product(cls, alpha1: float, alpha2: float) -> QuantumState:
        return cls(
            lambda a: product_E1(a, alpha1),
            lambda b: product_E1(b, alpha2),
            lambda a, b: product_E(a, b, alpha1, alpha2),
            f"product({alpha1!r},{alpha2!r})",
        )

    @classmethod
    def from_table(cls, e1: dict, e2: dict, e: dict, label: str = "table") -> QuantumState:
        """State given by finite tables ``{a: E1}``, ``{b: E2}``, ``{(a, b): E}``."""
        return cls(e1.__getitem__, e2.__getitem__, lambda a, b: e[(a, b)], label)


def probability_xy(x: int, y: int, a: float, b: float, state: QuantumState) -> float:
    """Joint probability of outcomes ``(x, y)`` for analyzer angles ``(a, b)``."""
    if x not in (1, -1) or y not in (1, -1):
        raise ValueError("outcomes must be +1 or -1")
    p = (1.0 + x * state.E1_hat(a) + y * state.E2_hat(b) + x * y * state.E_hat(a, b)) / 4.0
    if p < -PHYSICALITY_TOL or p > 1.0 + PHYSICALITY_TOL:
        raise NonPhysicalStateError(f"non-physical state table: P({x},{y}|{a},{b}) = {p}")
    return p


def chsh(E: Callable[[float, float], float], a: float, a2: float, b: float, b2: float) -> float:
    return E(a, b) - E(a, b2) + E(a2, b) + E(a2, b2)
