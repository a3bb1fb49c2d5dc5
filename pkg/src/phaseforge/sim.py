"""Deterministic forward model for a fringe-projection measurement.

A scene is a height map seen through a linear projector-camera disparity
model: the absolute phase of frequency ``f`` at column ``x`` is
``2*pi*f*(x + kappa*h)/width``.  Rendering applies projector gamma, surface
reflectivity, ambient light, exposure scaling, additive sensor noise and
optional 8-bit quantization, in that order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, PhaseOutOfRange
from .phase import TWO_PI, PhaseMap

SHIFTS = TWO_PI * np.arange(3) / 3.0


@dataclass
class SceneSpec:
    height_map: np.ndarray
    reflectivity: np.ndarray
    ambient: np.ndarray
    kappa: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.height_map = np.asarray(self.height_map, dtype=np.float64)
        shape = self.height_map.shape
        self.reflectivity = np.broadcast_to(np.asarray(self.reflectivity, dtype=np.float64), shape)
        self.ambient = np.broadcast_to(np.asarray(self.ambient, dtype=np.float64), shape)
        if self.height_map.ndim != 2 or min(shape) < 1:
            raise ConfigError(f"height map must be a non-empty 2-D grid, got {shape}")
        if not np.all(np.isfinite(self.height_map)):
            raise ConfigError("height map has non-finite values")
        if np.any((self.reflectivity < 0) | (self.reflectivity > 1)):
            raise ConfigError("reflectivity must lie in [0, 1]")
        if np.any((self.ambient < 0) | (self.ambient >= 1)):
            raise ConfigError("ambient must lie in [0, 1)")

    @property
    def height(self) -> int:
        return self.height_map.shape[0]

    @property
    def width(self) -> int:
        return self.height_map.shape[1]

    @classmethod
    def flat(cls, height: int, width: int, *, h: float = 0.0, reflectivity: float = 1.0,
             ambient: float = 0.0, kappa: float = 1.0, seed: int = 0) -> "SceneSpec":
        return cls(np.full((height, width), h), reflectivity, ambient, kappa, seed)


@dataclass(frozen=True)
class AcquisitionSpec:
    frequency: int
    gamma: float = 1.0
    exposure: float = 1.0
    noise_sigma: float = 0.0
    quantize_bits: int = 8
    seed: int = 0

    def __post_init__(self):
        if int(self.frequency) != self.frequency or self.frequency < 1:
            raise ConfigError(f"frequency must be an integer >= 1, got {self.frequency}")
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0")
        if not 0 < self.exposure <= 1:
            raise ConfigError("exposure must lie in (0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.quantize_bits not in (0, 8):
            raise ConfigError("quantize_bits must be 0 or 8")

    def replace(self, **changes) -> "AcquisitionSpec":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return AcquisitionSpec(**values)


@dataclass
class FringeStack:
    images: tuple[np.ndarray, np.ndarray, np.ndarray]
    acquisition: AcquisitionSpec


def absolute_phase(scene: SceneSpec, f: int) -> PhaseMap:
    """Ground-truth absolute phase for ``f`` fringe periods across the image width.

    Raises
    ------
    PhaseOutOfRange
        If any pixel leaves [0, 2*pi*f).
    """
    x = np.arange(scene.width, dtype=np.float64)[None, :]
    Phi = TWO_PI * f * (x + scene.kappa * scene.height_map) / scene.width
    if np.any(Phi < 0) or np.any(Phi >= TWO_PI * f):
        raise PhaseOutOfRange(f"scene induces phase outside [0, 2*pi*{f})")
    return PhaseMap(Phi, "absolute", f)


def noise_field(seed: int, scene_seed: int, f: int, n: int, shape: tuple[int, int]) -> np.ndarray:
    """Standard-normal field for image ``n``; element (y, x) is fixed by the key alone."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, scene_seed, f, n])))
    return rng.standard_normal(shape)


def render_stack(scene: SceneSpec, acq: AcquisitionSpec) -> FringeStack:
    Phi = absolute_phase(scene, acq.frequency).values
    images = []
    for n, shift in enumerate(SHIFTS):
        fringe = np.clip(0.5 + 0.5 * np.cos(Phi - shift), 0.0, 1.0)
        if acq.gamma != 1.0:
            fringe = fringe ** acq.gamma
        img = acq.exposure * (scene.ambient + scene.reflectivity * fringe)
        if acq.noise_sigma > 0:
            img = img + acq.noise_sigma * noise_field(acq.seed, scene.seed, acq.frequency, n, Phi.shape)
        if acq.quantize_bits == 8:
            img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        images.append(img)
    return FringeStack(tuple(images), acq)


@dataclass
class SceneParams:
    """Distribution of random scenes.

    Heights are a sum of Gaussian bumps plus smoothed uniform texture, scaled so
    the peak disparity ``kappa*h`` is ``max_disparity*width`` pixels, on top of a
    background plane tilted so that ``x + kappa*h`` spans the pattern minus half
    a period of ``min_high_frequency`` at each end.  At the right end this keeps
    every frequency from ``min_high_frequency`` up at fringe order <= f-1 (the
    last half period of a full-width ramp would otherwise wrap to order f); at
    the left end it keeps noise from wrapping the unit-frequency phase below 0.
    The sum is clamped into that range.
    """

    width: int = 128
    height: int = 128
    kappa: float = 1.0
    max_disparity: float = 0.15
    n_bumps: tuple[int, int] = (3, 8)
    bump_sigma: tuple[float, float] = (0.05, 0.25)
    texture_amplitude: float = 0.05
    texture_smoothing: float = 3.0
    reflectivity: tuple[float, float] = (0.2, 0.9)
    ambient: tuple[float, float] = (0.0, 0.08)
    dark_patches: tuple[int, int] = (0, 3)
    dark_patch_size: tuple[float, float] = (0.05, 0.2)
    min_high_frequency: int = 8


def representable_limit(width: int, f: int) -> float:
    """Largest ``x + kappa*h`` whose frequency-``f`` phase still has order <= f-1."""
    return width * (1.0 - 0.5 / f)


def representable(Phi: np.ndarray, f: int) -> np.ndarray:
    """Pixels whose absolute phase has a fringe order in [0, f-1] under (-pi, pi] wrapping."""
    return (Phi >= 0) & (Phi <= TWO_PI * f - np.pi)


def random_scene(params: SceneParams, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    H, W = params.height, params.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    h = np.zeros((H, W))
    for _ in range(rng.integers(params.n_bumps[0], params.n_bumps[1] + 1)):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sy = rng.uniform(*params.bump_sigma) * H
        sx = rng.uniform(*params.bump_sigma) * W
        h += rng.uniform(0.2, 1.0) * np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
    texture = ndimage.gaussian_filter(rng.uniform(-1, 1, (H, W)), params.texture_smoothing, mode="reflect")
    texture /= max(np.abs(texture).max(), 1e-12)
    h += params.texture_amplitude * texture
    if h.max() > 0:
        h *= params.max_disparity * W / (params.kappa * h.max())
    # keep x + kappa*h inside [lo, top]: half a period of the lowest high
    # frequency clear of both ends of the unit-frequency range
    lo = 0.5 * W / params.min_high_frequency
    top = representable_limit(W, params.min_high_frequency) - 0.5
    h += (lo + ((top - lo) / (W - 1) - 1.0) * xx) / params.kappa
    h = np.clip(h, (lo - xx) / params.kappa, (top - xx) / params.kappa)

    r_field = ndimage.gaussian_filter(rng.uniform(0, 1, (H, W)), 0.1 * min(H, W), mode="reflect")
    span = r_field.max() - r_field.min()
    r_field = (r_field - r_field.min()) / (span if span > 0 else 1.0)
    lo, hi = params.reflectivity
    r = lo + (hi - lo) * r_field
    for _ in range(rng.integers(params.dark_patches[0], params.dark_patches[1] + 1)):
        ph = max(1, int(rng.uniform(*params.dark_patch_size) * H))
        pw = max(1, int(rng.uniform(*params.dark_patch_size) * W))
        y0, x0 = rng.integers(0, H - ph + 1), rng.integers(0, W - pw + 1)
        r[y0:y0 + ph, x0:x0 + pw] = rng.uniform(0.0, 0.05)
    a = np.full((H, W), rng.uniform(*params.ambient))
    a = np.minimum(a, 1.0 - r)
    a = np.clip(a, 0.0, None)
    return SceneSpec(h, r, a, params.kappa, int(seed))


@dataclass
class DatasetSummary:
    root: Path
    n_scenes: int
    n_train: int
    n_test: int
    frequencies: list[int] = field(default_factory=list)
    n_files: int = 0


def scene_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_dataset(n_scenes: int, scene_params: SceneParams, acq_list: Sequence[AcquisitionSpec],
                     out_path, *, seed: int = 0, train_fraction: float = 0.8,
                     threshold: float | None = None, force: bool = False) -> DatasetSummary:
    """Render ``n_scenes`` random scenes under every acquisition and write a PUD1 dataset.

    Scene ``i`` goes to the training split when ``i < round(train_fraction*n_scenes)``.
    Each scene directory holds the fringe images, ground-truth absolute phases,
    fringe-order labels, the validity mask and the scene's own maps.
    """
    from .dataset import write_dataset

    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    freqs = [a.frequency for a in acq_list]
    if 1 not in freqs:
        raise ConfigError("acquisition list must include the unit frequency f=1")
    if not any(f > 1 for f in freqs):
        raise ConfigError("acquisition list needs at least one frequency above 1")
    if len(set(freqs)) != len(freqs):
        raise ConfigError("acquisition frequencies must be distinct")
    return write_dataset(n_scenes, scene_params, list(acq_list), Path(out_path), seed=seed,
                         train_fraction=train_fraction, threshold=threshold, force=force)
