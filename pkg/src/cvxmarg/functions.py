"""Convex scalar functions of a single belief.

Each member carries its value and first two derivatives. ``positive``
marks functions whose weights must stay strictly positive for the
objective to remain convex; those weights are learned through an
exponential reparametrization ``w = exp(rho)``.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class ConvexFunction:
    name: str
    value: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    positive: bool


LINEAR = ConvexFunction(
    name="linear",
    value=lambda b: b,
    d1=np.ones_like,
    d2=np.zeros_like,
    positive=False,
)

ENTROPY = ConvexFunction(
    name="entropy",
    value=lambda b: b * np.log(b),
    d1=lambda b: np.log(b) + 1.0,
    d2=lambda b: 1.0 / b,
    positive=True,
)

FAMILY = (LINEAR, ENTROPY)
