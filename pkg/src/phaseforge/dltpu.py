"""Learned temporal phase unwrapping: a two-path residual CNN that classifies each
pixel's fringe order from the unit-frequency absolute phase and the wrapped
high-frequency phase.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import DatasetIOError, DatasetMissingFrequency, DimensionMismatch, FrequencyMismatch
from .formats import read_puw, write_puw
from .phase import TWO_PI, PhaseMap, modulation, retrieve_phase, unit_absolute
from .tpu import FringeOrderMap

log = logging.getLogger(__name__)

STANDARD_FREQUENCIES = (8, 16, 32, 48, 64)
ARCH_VERSION = 1
WIDTH = 16


def head_width(f_h: int) -> int:
    return max(2 * WIDTH, int(f_h))


class DlTpuModel:
    """Two resolution paths merged by concatenation.

    Full resolution: conv3x3(2->16) and two residual blocks.  Half resolution:
    maxpool2, conv3x3(2->16), two residual blocks, upsample2.  Head:
    concat -> conv3x3(32->H) -> relu -> conv1x1(H->f_h) with H = max(32, f_h),
    so the last hidden layer is never narrower than the class count.
    """

    def __init__(self, f_h: int, seed: int = 0, dtype=np.float32):
        if f_h not in STANDARD_FREQUENCIES:
            warnings.warn(f"f_h={f_h} is outside the standard set {STANDARD_FREQUENCIES}", stacklevel=2)
        self.f_h = int(f_h)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.a_stem = nn.Conv2d(2, WIDTH, 3, rng, "a.stem", dtype)
        self.a_blocks = [nn.ResidualBlock(WIDTH, rng, f"a.res{i}", dtype) for i in range(2)]
        self.b_stem = nn.Conv2d(2, WIDTH, 3, rng, "b.stem", dtype)
        self.b_blocks = [nn.ResidualBlock(WIDTH, rng, f"b.res{i}", dtype) for i in range(2)]
        self.head_width = head_width(self.f_h)
        self.head = nn.Conv2d(2 * WIDTH, self.head_width, 3, rng, "head.conv", dtype)
        self.out = nn.Conv2d(self.head_width, self.f_h, 1, rng, "head.out", dtype)
        self._cache = None

    # parameters -------------------------------------------------------------
    def params(self) -> dict[str, nn.Tensor]:
        out: dict[str, nn.Tensor] = {}
        for layer in [self.a_stem, *self.a_blocks, self.b_stem, *self.b_blocks, self.head, self.out]:
            out.update(layer.params())
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params().values())

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        meta = {"meta.arch_version": np.array([ARCH_VERSION]), "meta.f_h": np.array([self.f_h]),
                "meta.width": np.array([WIDTH]), "meta.head_width": np.array([self.head_width]),
                "meta.seed": np.array([self.seed])}
        return {**meta, **{k: v.data for k, v in self.params().items()}}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) - set(state)
        if missing:
            raise DatasetIOError(f"checkpoint lacks tensors: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.data.shape:
                raise DatasetIOError(f"tensor {name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]

    def astype(self, dtype) -> "DlTpuModel":
        clone = DlTpuModel.__new__(DlTpuModel)
        clone.__init__(self.f_h, self.seed, dtype)
        clone.load_state_dict(self.state_dict())
        return clone

    # forward / backward -------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[0] != 2:
            raise DimensionMismatch(f"model input must be (2, H, W), got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        a = self.a_stem.forward(x)
        for blk in self.a_blocks:
            a = blk.forward(a)
        b, pool_idx = nn.maxpool2_forward(x)
        b = self.b_stem.forward(b)
        for blk in self.b_blocks:
            b = blk.forward(b)
        b = nn.upsample2_forward(b)
        h = self.head.forward(nn.concat_forward(a, b))
        self._cache = (pool_idx, h)
        return self.out.forward(nn.relu_forward(h))

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients for the last forward pass."""
        pool_idx, h = self._cache
        dh = nn.relu_backward(self.out.backward(dlogits.astype(self.dtype, copy=False)), h)
        da, db = nn.concat_backward(self.head.backward(dh), (WIDTH, WIDTH))
        db = nn.upsample2_backward(db)
        for blk in reversed(self.b_blocks):
            db = blk.backward(db)
        self.b_stem.backward(db)
        for blk in reversed(self.a_blocks):
            da = blk.backward(da)
        self.a_stem.backward(da)

    def loss_and_grad(self, x: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
        loss, dlogits = nn.softmax_cross_entropy(self.forward(x), target, mask)
        self.backward(dlogits)
        return loss


def build_model(f_h: int, seed: int = 0) -> DlTpuModel:
    return DlTpuModel(f_h, seed)


def save_checkpoint(model: DlTpuModel, path) -> None:
    write_puw(path, model.state_dict())


def load_checkpoint(path) -> DlTpuModel:
    from .errors import MissingCheckpoint

    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(f"checkpoint {path} not found")
    state = read_puw(path)
    try:
        f_h = int(state["meta.f_h"][0])
        seed = int(state["meta.seed"][0])
    except KeyError as exc:
        raise DatasetIOError(f"checkpoint {path} lacks architecture descriptor {exc}") from exc
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = DlTpuModel(f_h, seed)
    model.load_state_dict(state)
    return model


def make_input(Phi_l: PhaseMap, phi_h: PhaseMap, mask: np.ndarray | None = None) -> np.ndarray:
    """Stack the two phases into a ``(2, H, W)`` float32 tensor scaled to [0, 1].

    Channel 0 is ``Phi_l/(2*pi)`` (or ``(Phi_l+pi)/(2*pi)`` if ``Phi_l`` is still
    wrapped), channel 1 is ``(phi_h+pi)/(2*pi)``.  Pixels outside ``mask`` are 0.
    """
    if Phi_l.shape != phi_h.shape:
        raise DimensionMismatch(f"phase maps differ in shape: {Phi_l.shape} vs {phi_h.shape}")
    if Phi_l.kind == "wrapped":
        c0 = (Phi_l.values + np.pi) / TWO_PI
    else:
        c0 = Phi_l.values / TWO_PI
    c1 = (phi_h.values + np.pi) / TWO_PI
    x = np.stack([c0, c1]).astype(np.float32)
    if mask is not None:
        if mask.shape != phi_h.shape:
            raise DimensionMismatch("mask shape differs from phase maps")
        x *= mask[None]
    return x


@dataclass
class TrainConfig:
    f_h: int
    epochs: int = 30
    lr: float = 3e-3
    seed: int = 0
    patch_size: int = 64
    batch_size: int = 4
    patches_per_scene: int = 4
    threshold: float | None = None
    dataset_path: str | None = None
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        from .errors import ConfigError

        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.patch_size < 2 or self.patch_size % 2:
            raise ConfigError("patch_size must be even")
        if self.batch_size < 1 or self.patches_per_scene < 1:
            raise ConfigError("batch_size and patches_per_scene must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")


@dataclass
class TrainingExample:
    x: np.ndarray
    k: np.ndarray
    mask: np.ndarray


@dataclass
class TrainResult:
    model: DlTpuModel
    losses: list[float] = field(default_factory=list)
    test_error_rates: list[float] = field(default_factory=list)


def phases_from_stacks(stack_1, stack_h, threshold: float | None = None):
    """Unit-frequency absolute phase, wrapped high-frequency phase and their joint validity mask."""
    from .phase import DEFAULT_THRESHOLD

    threshold = DEFAULT_THRESHOLD if threshold is None else threshold
    Phi_l = unit_absolute(retrieve_phase(stack_1, 1))
    phi_h = retrieve_phase(stack_h)
    mask = modulation(stack_1, threshold).mask & modulation(stack_h, threshold).mask
    return Phi_l, phi_h, mask


def examples_from(samples, f_h: int, threshold: float | None = None) -> list[TrainingExample]:
    """Network inputs, order labels and masks; ``threshold`` overrides the dataset's stored mask."""
    from .sim import representable

    out = []
    for s in samples:
        Phi_l, phi_h, mask = phases_from_stacks(s.stack(1), s.stack(f_h), threshold)
        if threshold is None:
            mask = s.mask
        else:
            mask &= representable(s.phi_abs(f_h), f_h)
        out.append(TrainingExample(make_input(Phi_l, phi_h, mask), s.orders(f_h), mask))
    return out


def predict_orders(model: DlTpuModel, x: np.ndarray) -> np.ndarray:
    """Argmax fringe order per pixel; odd image sizes are zero-padded for pooling."""
    _, H, W = x.shape
    if H % 2 or W % 2:
        x = np.pad(x, ((0, 0), (0, H % 2), (0, W % 2)))
    return np.argmax(model.forward(x), axis=0)[:H, :W]


def error_rate_on(model: DlTpuModel, examples: list[TrainingExample]) -> float:
    wrong = total = 0
    for ex in examples:
        pred = predict_orders(model, ex.x)
        wrong += int(np.count_nonzero((pred != ex.k) & ex.mask))
        total += int(ex.mask.sum())
    return wrong / total if total else float("nan")


def _check_dataset(dataset, f_h: int) -> None:
    for f in (1, f_h):
        if f not in dataset.acquisitions:
            raise DatasetMissingFrequency(f"dataset {dataset.root} has no f={f} acquisition")


def train(model: DlTpuModel, dataset, cfg: TrainConfig, progress=None) -> TrainResult:
    """Minimize masked per-pixel cross-entropy against the dataset's fringe-order labels.

    Each epoch draws ``patches_per_scene`` random crops of every training
    scene (crop corners on even coordinates so pooling stays aligned), in an
    order fixed by ``cfg.seed``.  Gradients of ``batch_size`` crops are
    averaged per Adam step; the learning rate follows a cosine decay to zero
    over all epochs.  After each epoch the error rate over the full test
    images is recorded.
    """
    if cfg.f_h != model.f_h:
        raise FrequencyMismatch(f"config f_h={cfg.f_h} but model f_h={model.f_h}")
    _check_dataset(dataset, model.f_h)
    train_ex = examples_from(dataset.split("train"), model.f_h, cfg.threshold)
    test_ex = examples_from(dataset.split("test"), model.f_h, cfg.threshold)
    if not train_ex:
        raise DatasetIOError(f"dataset {dataset.root} has no training scenes")

    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    opt = nn.Adam(params, lr=cfg.lr)
    jobs_per_epoch = len(train_ex) * cfg.patches_per_scene
    steps_per_epoch = -(-jobs_per_epoch // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    result = TrainResult(model)
    step = 0
    for epoch in range(cfg.epochs):
        jobs = np.repeat(np.arange(len(train_ex)), cfg.patches_per_scene)
        rng.shuffle(jobs)
        losses = []
        for start in range(0, len(jobs), cfg.batch_size):
            batch = jobs[start:start + cfg.batch_size]
            opt.zero_grad()
            for j in batch:
                ex = train_ex[j]
                x, k, m = _crop(ex, cfg.patch_size, rng)
                losses.append(model.loss_and_grad(x, k, m))
            opt.lr = 0.5 * cfg.lr * (1 + np.cos(np.pi * step / total_steps))
            opt.step(1.0 / len(batch))
            step += 1
        mean_loss = float(np.mean(np.asarray(losses, dtype=np.float64)))
        err = error_rate_on(model, test_ex) if test_ex else float("nan")
        result.losses.append(mean_loss)
        result.test_error_rates.append(err)
        log.info("epoch %d loss %.5f test error %.5f", epoch, mean_loss, err)
        if progress is not None:
            progress(epoch, mean_loss, err)
    if cfg.checkpoint_path:
        save_checkpoint(model, cfg.checkpoint_path)
    if cfg.log_path:
        write_training_log(cfg.log_path, result)
    return result


def _crop(ex: TrainingExample, size: int, rng: np.random.Generator):
    _, H, W = ex.x.shape
    ch, cw = min(size, H - H % 2), min(size, W - W % 2)
    y0 = 2 * rng.integers(0, (H - ch) // 2 + 1)
    x0 = 2 * rng.integers(0, (W - cw) // 2 + 1)
    return (ex.x[:, y0:y0 + ch, x0:x0 + cw], ex.k[y0:y0 + ch, x0:x0 + cw],
            ex.mask[y0:y0 + ch, x0:x0 + cw])


def write_training_log(path, result: TrainResult) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "test_error_rate"])
            for i, (loss, err) in enumerate(zip(result.losses, result.test_error_rates)):
                w.writerow([i, repr(float(loss)), repr(float(err))])
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def infer(model: DlTpuModel, Phi_l: PhaseMap, phi_h: PhaseMap, mask: np.ndarray | None = None):
    """Predicted fringe orders and the absolute phase ``phi_h + 2*pi*k``."""
    if phi_h.frequency != model.f_h:
        raise FrequencyMismatch(f"model trained for f_h={model.f_h}, phase has f={phi_h.frequency}")
    if Phi_l.frequency != 1:
        raise FrequencyMismatch("the low-frequency input must be the unit frequency")
    mask = np.ones(phi_h.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    k = predict_orders(model, make_input(Phi_l, phi_h, mask))
    Phi_h = phi_h.values + TWO_PI * k
    return FringeOrderMap(k, model.f_h, mask), PhaseMap(Phi_h, "absolute", model.f_h)
