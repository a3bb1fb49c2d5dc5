"""Error metrics and parameter sweeps comparing classical and learned unwrapping."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import Dataset, measured_orders
from .errors import (ConfigError, DatasetIOError, DimensionMismatch, EmptyMask,
                     FrequencyMismatch, MissingCheckpoint, MissingData)
from .phase import PhaseMap, modulation, retrieve_phase, unit_absolute
from .sim import AcquisitionSpec, absolute_phase, render_stack, representable
from .tpu import DEFAULT_MID_FREQUENCY, FringeOrderMap, unwrap_hierarchical, unwrap_two_freq

METHODS = ("mftpu", "mftpu3f", "dltpu")
SWEEP_VALUES = {
    "frequency": (8, 16, 32, 48, 64),
    "gamma": tuple(np.round(np.arange(5, 16) * 0.1, 1).tolist()),
    "exposure": (1.0, 0.5, 0.375, 0.25),
    "noise": (0.0, 0.005, 0.01, 0.015, 0.02),
}
DEFAULT_SWEEP_FH = 32
CSV_HEADER = ("method", "f_h", "sweep_kind", "sweep_value", "error_rate", "sigma_dphi", "n_valid")


@dataclass(frozen=True)
class MetricsRecord:
    method: str
    f_h: int
    sweep_kind: str
    sweep_value: float
    error_rate: float
    sigma_dphi: float
    n_valid: int

    def __post_init__(self):
        if self.n_valid < 0:
            raise ValueError("n_valid must be non-negative")
        if not (0.0 <= self.error_rate <= 1.0) and not np.isnan(self.error_rate):
            raise ValueError(f"error_rate {self.error_rate} outside [0, 1]")


def _orders(k) -> tuple[np.ndarray, int | None]:
    if isinstance(k, FringeOrderMap):
        return k.k, k.frequency
    return np.asarray(k), None


def _mask_for(shape, mask) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise DimensionMismatch(f"mask shape {mask.shape} differs from map shape {shape}")
    return mask


def error_rate(k_pred, k_ref, mask=None) -> float:
    """Fraction of masked pixels whose fringe orders disagree.

    Accepts :class:`FringeOrderMap` or plain integer arrays.  When ``mask`` is
    omitted the mask of ``k_pred`` is used if it is a FringeOrderMap, otherwise
    every pixel counts.  An empty mask gives 0.
    """
    a, fa = _orders(k_pred)
    b, fb = _orders(k_ref)
    if a.shape != b.shape:
        raise DimensionMismatch(f"order maps differ in shape: {a.shape} vs {b.shape}")
    if fa is not None and fb is not None and fa != fb:
        raise FrequencyMismatch(f"order maps are for f={fa} and f={fb}")
    if mask is None and isinstance(k_pred, FringeOrderMap):
        mask = k_pred.mask
    m = _mask_for(a.shape, mask)
    n = int(m.sum())
    return float(np.count_nonzero((a != b) & m)) / n if n else 0.0


def phase_error_rate(Phi_pred, Phi_ref, mask=None) -> float:
    """Fraction of masked pixels where the absolute phases differ by at least pi."""
    a, b = np.asarray(Phi_pred, dtype=np.float64), np.asarray(Phi_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"phase maps differ in shape: {a.shape} vs {b.shape}")
    m = _mask_for(a.shape, mask)
    n = int(m.sum())
    return float(np.count_nonzero((np.abs(a - b) >= np.pi) & m)) / n if n else 0.0


def _values(Phi) -> np.ndarray:
    return np.asarray(Phi.values if isinstance(Phi, PhaseMap) else Phi, dtype=np.float64)


def phase_differences(Phi_pred, Phi_ref, mask=None) -> np.ndarray:
    """Phase differences on masked pixels whose orders agree (|difference| < pi)."""
    a, b = _values(Phi_pred), _values(Phi_ref)
    if a.shape != b.shape:
        raise DimensionMismatch(f"phase maps differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    keep = _mask_for(a.shape, mask) & (np.abs(d) < np.pi)
    return d[keep]


def sigma_dphi(Phi_pred, Phi_ref, mask=None) -> float:
    """Standard deviation of the phase error over masked, correctly unwrapped pixels."""
    d = phase_differences(Phi_pred, Phi_ref, mask)
    if d.size == 0:
        raise EmptyMask("no correctly unwrapped pixels inside the mask")
    return float(np.std(d))


def checkpoint_path(directory, f_h: int) -> Path:
    """Conventional checkpoint file name for a DL-TPU model of frequency ``f_h``."""
    return Path(directory) / f"dltpu_f{f_h}.puw"


def _cells(kind: str, values, f_h: int):
    if kind not in SWEEP_VALUES:
        raise ConfigError(f"unknown sweep kind {kind!r}; expected one of {sorted(SWEEP_VALUES)}")
    values = SWEEP_VALUES[kind] if values is None else tuple(values)
    if kind == "frequency":
        return [(v, int(v)) for v in values]
    return [(v, f_h) for v in values]


def _acquisition(dataset: Dataset, f: int, kind: str, value) -> AcquisitionSpec:
    acq = dataset.acquisitions.get(f) or dataset.base_acquisition().replace(frequency=f)
    if kind == "gamma":
        return acq.replace(gamma=float(value))
    if kind == "exposure":
        return acq.replace(exposure=float(value))
    if kind == "noise":
        return acq.replace(noise_sigma=float(value))
    return acq


def _evaluate_cell(dataset: Dataset, kind: str, value, f_h: int, methods, checkpoints,
                   threshold: float, mid: int) -> list[MetricsRecord]:
    from .dltpu import infer, load_checkpoint

    model = None
    if "dltpu" in methods:
        model = load_checkpoint(checkpoints[f_h])
        if model.f_h != f_h:
            raise FrequencyMismatch(f"checkpoint {checkpoints[f_h]} is for f_h={model.f_h}, not {f_h}")
    need_mid = "mftpu3f" in methods and mid < f_h
    wrong = {m: 0 for m in methods}
    diffs = {m: [] for m in methods}
    n_valid = 0
    for sample in dataset.split("test"):
        try:
            scene = sample.scene()
        except (OSError, KeyError) as exc:
            raise MissingData(f"scene maps for sample {sample.index} unavailable: {exc}") from exc
        st1 = render_stack(scene, _acquisition(dataset, 1, kind, value))
        sth = render_stack(scene, _acquisition(dataset, f_h, kind, value))
        Phi_1 = unit_absolute(retrieve_phase(st1, 1))
        phi_h = retrieve_phase(sth, f_h)
        Phi_ref = absolute_phase(scene, f_h).values
        mask = (modulation(st1, threshold).mask & modulation(sth, threshold).mask
                & representable(Phi_ref, f_h))
        n_valid += int(mask.sum())
        k_ref = measured_orders(Phi_ref, phi_h.values, f_h)
        for m in methods:
            if m == "mftpu" or (m == "mftpu3f" and not need_mid):
                Phi_h, k = unwrap_two_freq(Phi_1, phi_h, mask)
            elif m == "mftpu3f":
                phi_m = retrieve_phase(render_stack(scene, _acquisition(dataset, mid, kind, value)), mid)
                Phi_h, k = unwrap_hierarchical(Phi_1, phi_m, phi_h, mask)
            else:
                k, Phi_h = infer(model, Phi_1, phi_h, mask)
            wrong[m] += int(np.count_nonzero((k.k != k_ref) & mask))
            diffs[m].append(phase_differences(Phi_h, Phi_ref, mask))
    records = []
    for m in methods:
        d = np.concatenate(diffs[m]) if diffs[m] else np.empty(0)
        records.append(MetricsRecord(
            method=m, f_h=f_h, sweep_kind=kind, sweep_value=value,
            error_rate=wrong[m] / n_valid if n_valid else 0.0,
            sigma_dphi=float(np.std(d)) if d.size else float("nan"),
            n_valid=n_valid))
    return records


def run_sweep(kind: str, methods, dataset, out_csv=None, *, checkpoints=None, f_h: int = DEFAULT_SWEEP_FH,
              values=None, threshold: float | None = None, mid_frequency: int = DEFAULT_MID_FREQUENCY,
              threads: int = 1) -> list[MetricsRecord]:
    """Evaluate each method over the test split for every value of one swept variable.

    Scenes are re-rendered from the stored height, reflectivity and ambient maps
    using the dataset's acquisitions with the swept setting replaced, so every
    cell sees the same scenes and noise keys.  The frequency sweep varies
    ``f_h``; the other sweeps hold ``f_h`` fixed.  Valid pixels pass the
    modulation threshold at both frequencies and carry a representable order.

    Parameters
    ----------
    kind : {"frequency", "exposure", "gamma", "noise"}
    methods : sequence of {"mftpu", "mftpu3f", "dltpu"}
    dataset : Dataset or path
    out_csv : path, optional
        Written with one row per (sweep value, method), in sweep order.
    checkpoints : mapping f_h -> path, or a directory holding ``dltpu_f{f_h}.puw``
        Required when "dltpu" is among the methods.
    threads : int
        Cells evaluated concurrently; results are assembled in sweep order.
    """
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    if 1 not in dataset.acquisitions:
        raise MissingData(f"dataset {dataset.root} lacks the unit frequency")
    cells = _cells(kind, values, f_h)
    threshold = dataset.threshold if threshold is None else float(threshold)
    paths = {}
    if "dltpu" in methods:
        for _, fh in cells:
            if isinstance(checkpoints, dict):
                p = Path(checkpoints[fh]) if fh in checkpoints else None
            else:
                p = None if checkpoints is None else checkpoint_path(checkpoints, fh)
            if p is None or not p.is_file():
                raise MissingCheckpoint(f"no DL-TPU checkpoint for f_h={fh}")
            paths[fh] = p

    def work(cell):
        value, fh = cell
        return _evaluate_cell(dataset, kind, value, fh, methods, paths, threshold, mid_frequency)

    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_cell = list(pool.map(work, cells))
    else:
        per_cell = [work(c) for c in cells]
    records = [r for cell in per_cell for r in cell]
    if out_csv is not None:
        write_records(out_csv, records)
    return records


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow([_fmt(v) for v in astuple(r)])
    return buf.getvalue()


def write_records(path, records) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(records_csv(records))
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def read_records(path) -> list[MetricsRecord]:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    conv = {"str": str, "int": int, "float": float}
    with Path(path).open(newline="") as fh:
        return [MetricsRecord(**{k: conv[types[k]](v) for k, v in row.items()})
                for row in csv.DictReader(fh)]
