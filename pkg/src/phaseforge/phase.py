"""Wrapped-phase retrieval from 3-step fringe stacks, wrapping arithmetic and validity masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .errors import DimensionMismatch, OutOfRange

TWO_PI = 2.0 * np.pi
SQRT3 = np.sqrt(3.0)

#: Minimum modulation (normalized intensity) for a pixel to count as valid.
DEFAULT_THRESHOLD = 0.08


@dataclass
class PhaseMap:
    """Per-pixel phase in radians.

    ``kind="wrapped"`` values lie in (-pi, pi]; ``kind="absolute"`` values are
    unwrapped phase for ``frequency`` fringe periods, nominally in [0, 2*pi*f).
    """

    values: np.ndarray
    kind: Literal["wrapped", "absolute"]
    frequency: int

    def __post_init__(self):
        if self.kind not in ("wrapped", "absolute"):
            raise ValueError(f"unknown phase kind {self.kind!r}")
        if int(self.frequency) < 1:
            raise ValueError("frequency must be >= 1")
        self.frequency = int(self.frequency)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class ModulationMap:
    A: np.ndarray
    B: np.ndarray
    mask: np.ndarray


def _stack_images(stack) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images: Sequence[np.ndarray] = getattr(stack, "images", stack)
    if len(images) != 3:
        raise DimensionMismatch(f"3-step phase shifting needs exactly 3 images, got {len(images)}")
    i0, i1, i2 = (np.asarray(im, dtype=np.float64) for im in images)
    if not (i0.shape == i1.shape == i2.shape):
        raise DimensionMismatch("fringe images differ in shape")
    return i0, i1, i2


def _stack_frequency(stack, frequency: int | None) -> int:
    if frequency is not None:
        return int(frequency)
    acq = getattr(stack, "acquisition", None)
    return int(acq.frequency) if acq is not None else 1


def wrap(phi):
    """Fold phase into (-pi, pi]; the result differs from ``phi`` by a multiple of 2*pi."""
    phi = np.asarray(phi, dtype=np.float64)
    out = phi - TWO_PI * np.ceil((phi - np.pi) / TWO_PI)
    return out if out.ndim else float(out)


def retrieve_phase(stack, frequency: int | None = None) -> PhaseMap:
    """Least-squares 3-step phase (shifts 0, 2pi/3, 4pi/3) with full quadrant resolution.

    Pixels without any fringe signal come out as 0; use :func:`modulation` to
    mask them.
    """
    i0, i1, i2 = _stack_images(stack)
    num = SQRT3 * (i1 - i2)
    den = 2.0 * i0 - i1 - i2
    phi = np.arctan2(num, den)
    phi[phi <= -np.pi] = np.pi
    return PhaseMap(phi, "wrapped", _stack_frequency(stack, frequency))


def modulation(stack, threshold: float = DEFAULT_THRESHOLD) -> ModulationMap:
    i0, i1, i2 = _stack_images(stack)
    A = (i0 + i1 + i2) / 3.0
    B = np.sqrt(3.0 * (i1 - i2) ** 2 + (2.0 * i0 - i1 - i2) ** 2) / 3.0
    return ModulationMap(A=A, B=B, mask=B >= threshold)


def fringe_order_of(Phi, f: int):
    """Fringe order k with ``Phi == wrap(Phi) + 2*pi*k``.

    Raises
    ------
    OutOfRange
        If any value lies outside [0, 2*pi*f).
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    if np.any(~np.isfinite(Phi)) or np.any(Phi < 0) or np.any(Phi >= TWO_PI * f):
        raise OutOfRange(f"absolute phase outside [0, 2*pi*{f})")
    k = np.ceil((Phi - np.pi) / TWO_PI).astype(np.int64)
    return k if k.ndim else int(k)


def unit_absolute(phi_1: PhaseMap) -> PhaseMap:
    """Absolute phase of a unit-frequency map: wrapped values shifted into [0, 2*pi)."""
    if phi_1.frequency != 1:
        raise ValueError("unit_absolute needs a frequency-1 phase map")
    if phi_1.kind == "absolute":
        return phi_1
    vals = np.where(phi_1.values < 0, phi_1.values + TWO_PI, phi_1.values)
    # guards against -0.0 + 2pi rounding up to exactly 2pi
    vals = np.where(vals >= TWO_PI, 0.0, vals)
    return PhaseMap(vals, "absolute", 1)
