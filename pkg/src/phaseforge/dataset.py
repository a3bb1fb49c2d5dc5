"""On-disk dataset layout: ``<root>/<split>/<scene_idx>/<name>.pud`` plus ``manifest.txt``."""
from __future__ import annotations

import shutil
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetIOError, DatasetMissingFrequency, MissingData
from .formats import read_pud, write_pud
from .phase import DEFAULT_THRESHOLD, TWO_PI, modulation, retrieve_phase
from .sim import (AcquisitionSpec, DatasetSummary, FringeStack, SceneParams, SceneSpec,
                  absolute_phase, random_scene, render_stack, representable, scene_seed)

MANIFEST = "manifest.txt"
SPLITS = ("train", "test")


def measured_orders(Phi_true: np.ndarray, phi_wrapped: np.ndarray, f: int) -> np.ndarray:
    """Fringe order that brings a measured wrapped phase closest to the true absolute phase."""
    k = np.floor((Phi_true - phi_wrapped) / TWO_PI + 0.5)
    return np.clip(k, 0, f - 1).astype(np.int32)


def _format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_manifest(path: Path, entries: list[tuple[str, object]]) -> None:
    text = "".join(f"{k}={_format_value(v)}\n" for k, v in entries)
    try:
        path.write_text(text)
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def read_manifest(path: Path) -> dict[str, str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise MissingData(f"cannot read manifest {path}: {exc}") from exc
    out = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetIOError(f"malformed manifest line: {line!r}")
        out[key.strip()] = value.strip()
    return out


def write_dataset(n_scenes: int, params: SceneParams, acq_list: list[AcquisitionSpec], root: Path, *,
                  seed: int, train_fraction: float, threshold: float | None,
                  force: bool) -> DatasetSummary:
    threshold = DEFAULT_THRESHOLD if threshold is None else float(threshold)
    if not 0 <= train_fraction <= 1:
        raise ConfigError("train_fraction must lie in [0, 1]")
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetIOError(f"{root} exists and is not empty (use force to overwrite)")
        shutil.rmtree(root)
    high = [a.frequency for a in acq_list if a.frequency > 1]
    if min(high) < params.min_high_frequency:
        params = replace(params, min_high_frequency=min(high))
    n_train = int(round(train_fraction * n_scenes))
    entries: list[tuple[str, object]] = [
        ("format", "PUD1"),
        ("master_seed", seed),
        ("n_scenes", n_scenes),
        ("n_train", n_train),
        ("n_test", n_scenes - n_train),
        ("threshold", threshold),
    ]
    entries += [(f"scene_params.{f.name}", getattr(params, f.name)) for f in fields(params)]
    for i, acq in enumerate(acq_list):
        entries += [(f"acq.{i}.{f.name}", getattr(acq, f.name)) for f in fields(acq)]

    n_files = 0
    for idx in range(n_scenes):
        split = "train" if idx < n_train else "test"
        s_seed = scene_seed(seed, idx)
        scene = random_scene(params, s_seed)
        sdir = root / split / str(idx)
        mask = np.ones((scene.height, scene.width), dtype=bool)
        for acq in acq_list:
            f = acq.frequency
            stack = render_stack(scene, acq)
            for n, img in enumerate(stack.images):
                write_pud(sdir / f"I_f{f}_n{n}.pud", img.astype(np.float32))
            Phi = absolute_phase(scene, f).values
            phi = retrieve_phase(stack).values
            write_pud(sdir / f"phi_abs_f{f}.pud", Phi.astype(np.float32))
            write_pud(sdir / f"k_f{f}.pud", measured_orders(Phi, phi, f))
            mask &= modulation(stack, threshold).mask
            if f > 1:
                mask &= representable(Phi, f)
            n_files += 5
        write_pud(sdir / "mask.pud", mask.astype(np.uint8))
        write_pud(sdir / "height.pud", scene.height_map.astype(np.float32))
        write_pud(sdir / "reflectivity.pud", scene.reflectivity.astype(np.float32))
        write_pud(sdir / "ambient.pud", scene.ambient.astype(np.float32))
        n_files += 4
        entries += [(f"scene.{idx}.split", split), (f"scene.{idx}.seed", s_seed)]
    write_manifest(root / MANIFEST, entries)
    return DatasetSummary(root, n_scenes, n_train, n_scenes - n_train,
                          [a.frequency for a in acq_list], n_files + 1)


def _parse_acq(manifest: dict[str, str], i: int) -> AcquisitionSpec:
    prefix = f"acq.{i}."
    return AcquisitionSpec(
        frequency=int(manifest[prefix + "frequency"]),
        gamma=float(manifest[prefix + "gamma"]),
        exposure=float(manifest[prefix + "exposure"]),
        noise_sigma=float(manifest[prefix + "noise_sigma"]),
        quantize_bits=int(manifest[prefix + "quantize_bits"]),
        seed=int(manifest[prefix + "seed"]),
    )


@dataclass
class Sample:
    index: int
    split: str
    path: Path
    seed: int
    kappa: float
    acquisitions: dict[int, AcquisitionSpec]

    def _read(self, name: str) -> np.ndarray:
        p = self.path / f"{name}.pud"
        if not p.exists():
            raise MissingData(f"missing array {p}")
        return read_pud(p)

    def _check(self, f: int) -> None:
        if f not in self.acquisitions:
            raise DatasetMissingFrequency(f"dataset has no f={f} acquisition")

    def stack(self, f: int) -> FringeStack:
        self._check(f)
        imgs = tuple(self._read(f"I_f{f}_n{n}").astype(np.float64) for n in range(3))
        return FringeStack(imgs, self.acquisitions[f])

    def phi_abs(self, f: int) -> np.ndarray:
        self._check(f)
        return self._read(f"phi_abs_f{f}").astype(np.float64)

    def orders(self, f: int) -> np.ndarray:
        self._check(f)
        return self._read(f"k_f{f}").astype(np.int64)

    @cached_property
    def mask(self) -> np.ndarray:
        return self._read("mask").astype(bool)

    def scene(self) -> SceneSpec:
        return SceneSpec(self._read("height").astype(np.float64),
                         self._read("reflectivity").astype(np.float64),
                         self._read("ambient").astype(np.float64),
                         self.kappa, self.seed)


class Dataset:
    """Read-only view of a dataset written by :func:`phaseforge.sim.generate_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = read_manifest(self.root / MANIFEST)
        m = self.manifest
        try:
            self.threshold = float(m["threshold"])
            self.kappa = float(m["scene_params.kappa"])
            n_acq = len({k.split(".")[1] for k in m if k.startswith("acq.")})
            acqs = [_parse_acq(m, i) for i in range(n_acq)]
            self.acquisitions = {a.frequency: a for a in acqs}
            self.samples = []
            for idx in range(int(m["n_scenes"])):
                split = m[f"scene.{idx}.split"]
                self.samples.append(Sample(idx, split, self.root / split / str(idx),
                                           int(m[f"scene.{idx}.seed"]), self.kappa, self.acquisitions))
        except KeyError as exc:
            raise MissingData(f"manifest lacks key {exc}") from exc

    @property
    def frequencies(self) -> list[int]:
        return sorted(self.acquisitions)

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def base_acquisition(self) -> AcquisitionSpec:
        """The unit-frequency acquisition; its settings are reused when re-rendering sweeps."""
        return self.acquisitions[1]

    def __len__(self) -> int:
        return len(self.samples)
