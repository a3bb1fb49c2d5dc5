"""Multi-frequency temporal phase unwrapping and its error budget."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, FrequencyOrder
from .phase import TWO_PI, PhaseMap

DEFAULT_MID_FREQUENCY = 8


@dataclass
class FringeOrderMap:
    k: np.ndarray
    frequency: int
    mask: np.ndarray
    n_clamped: int = 0

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.k.shape:
            raise DimensionMismatch("fringe-order map and mask differ in shape")


@dataclass(frozen=True)
class ErrorBudget:
    """Largest per-map phase error that rounding still tolerates, and the order deviation it causes."""

    f_h: int
    f_l: int
    dphi_max: float
    dk_max: float


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_freqs(f_h: int, f_l: int) -> None:
    if f_l < 1 or f_h < f_l:
        raise FrequencyOrder(f"need f_h >= f_l >= 1, got f_h={f_h}, f_l={f_l}")


def unwrap_two_freq(Phi_l: PhaseMap, phi_h: PhaseMap, mask: np.ndarray | None = None):
    """Unwrap ``phi_h`` with the absolute low-frequency phase ``Phi_l``.

    Returns the absolute high-frequency phase and the fringe-order map.  Orders
    are clamped into [0, f_h-1]; the number of masked pixels that needed
    clamping is kept in ``FringeOrderMap.n_clamped``.
    """
    f_l, f_h = Phi_l.frequency, phi_h.frequency
    _check_freqs(f_h, f_l)
    if Phi_l.shape != phi_h.shape:
        raise DimensionMismatch(f"phase maps differ in shape: {Phi_l.shape} vs {phi_h.shape}")
    mask = np.ones(phi_h.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != phi_h.shape:
        raise DimensionMismatch("mask shape differs from phase maps")
    raw = round_half_away(((f_h / f_l) * Phi_l.values - phi_h.values) / TWO_PI)
    k = np.clip(raw, 0, f_h - 1)
    n_clamped = int(np.count_nonzero((raw != k) & mask))
    Phi_h = phi_h.values + TWO_PI * k
    return PhaseMap(Phi_h, "absolute", f_h), FringeOrderMap(k, f_h, mask, n_clamped)


def unwrap_hierarchical(Phi_1: PhaseMap, phi_mid: PhaseMap, phi_h: PhaseMap,
                        mask: np.ndarray | None = None):
    """Three-frequency ladder 1 -> f_mid -> f_h; the clamp count sums both stages."""
    if Phi_1.frequency != 1:
        raise FrequencyOrder("hierarchical unwrapping starts from the unit frequency")
    Phi_mid, k_mid = unwrap_two_freq(Phi_1, phi_mid, mask)
    Phi_h, k_h = unwrap_two_freq(Phi_mid, phi_h, mask)
    k_h.n_clamped += k_mid.n_clamped
    return Phi_h, k_h


def error_budget(f_h: int, f_l: int = 1, dphi: float | None = None) -> ErrorBudget:
    """Phase-error bound ``pi*f_l/(f_h+f_l)`` for two-frequency unwrapping.

    ``dk_max`` is the worst-case order deviation for a phase error of ``dphi``
    (defaults to the bound itself, where it equals 0.5).
    """
    _check_freqs(f_h, f_l)
    dphi_max = np.pi * f_l / (f_h + f_l)
    dphi = dphi_max if dphi is None else abs(dphi)
    return ErrorBudget(f_h, f_l, float(dphi_max), float(dphi * (f_h + f_l) / (TWO_PI * f_l)))


def predicted_dk(dphi_l, dphi_h, f_h: int, f_l: int = 1):
    return ((f_h / f_l) * np.asarray(dphi_l) - np.asarray(dphi_h)) / TWO_PI


def is_safe(dk) -> bool | np.ndarray:
    return np.abs(dk) < 0.5


_NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def compensate_orders(orders: FringeOrderMap, min_votes: int = 5) -> FringeOrderMap:
    """Single-pass majority filter over the 8 masked neighbours of every masked pixel.

    A pixel takes the most common neighbouring order when at least
    ``min_votes`` neighbours agree on it; otherwise it keeps its own value.
    The input map is not modified.
    """
    k, mask = orders.k, orders.mask
    H, W = k.shape
    kp = np.pad(k, 1)
    mp = np.pad(mask, 1)
    vals = np.stack([kp[1 + dy:1 + dy + H, 1 + dx:1 + dx + W] for dy, dx in _NEIGHBOURS])
    valid = np.stack([mp[1 + dy:1 + dy + H, 1 + dx:1 + dx + W] for dy, dx in _NEIGHBOURS])
    counts = np.zeros(vals.shape, dtype=np.int64)
    for j in range(len(_NEIGHBOURS)):
        counts[j] = np.sum((vals == vals[j]) & valid, axis=0) * valid[j]
    best = np.argmax(counts, axis=0)
    best_count = np.take_along_axis(counts, best[None], 0)[0]
    best_val = np.take_along_axis(vals, best[None], 0)[0]
    replace = mask & (best_count >= min_votes)
    out = np.where(replace, best_val, k)
    return FringeOrderMap(out, orders.frequency, mask.copy(), orders.n_clamped)
