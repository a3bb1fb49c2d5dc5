import numpy as np
import pytest

from phaseforge.dataset import Dataset
from phaseforge.dltpu import TrainConfig, build_model, save_checkpoint, train
from phaseforge.errors import ConfigError, DimensionMismatch, EmptyMask, FrequencyMismatch, MissingCheckpoint, MissingData
from phaseforge.evaluate import (CSV_HEADER, MetricsRecord, SWEEP_VALUES, checkpoint_path, error_rate,
                                 phase_error_rate, read_records, records_csv, run_sweep, sigma_dphi)
from phaseforge.phase import TWO_PI, wrap
from phaseforge.sim import AcquisitionSpec, SceneParams, generate_dataset
from phaseforge.tpu import FringeOrderMap


def make_dataset(root, sigma, bits=8, n=5, size=48, freqs=(1, 8, 32)):
    acqs = [AcquisitionSpec(f, noise_sigma=sigma, quantize_bits=bits, seed=2) for f in freqs]
    generate_dataset(n, SceneParams(width=size, height=size), acqs, root, seed=5, train_fraction=0.4)
    return Dataset(root)


@pytest.fixture(scope="module")
def noisy(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("noisy") / "d", sigma=0.02)


@pytest.fixture(scope="module")
def clean(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("clean") / "d", sigma=0.0, bits=0)


# error_rate -------------------------------------------------------------------

def test_error_rate_identical_is_zero(rng):
    k = rng.integers(0, 8, (10, 10))
    assert error_rate(k, k) == 0.0


def test_error_rate_one_in_hundred(rng):
    k = rng.integers(0, 8, (10, 10))
    j = k.copy()
    j[3, 4] = (j[3, 4] + 1) % 8
    assert error_rate(j, k, np.ones((10, 10), bool)) == pytest.approx(0.01)


def test_error_rate_ignores_unmasked_pixels(rng):
    k = rng.integers(0, 8, (10, 10))
    mask = np.ones((10, 10), bool)
    mask[0] = False
    j = k.copy()
    j[0] += 1
    assert error_rate(j, k, mask) == 0.0


def test_error_rate_symmetric(rng):
    a, b = rng.integers(0, 4, (20, 20)), rng.integers(0, 4, (20, 20))
    m = rng.random((20, 20)) < 0.7
    assert error_rate(a, b, m) == error_rate(b, a, m)


def test_error_rate_uses_map_mask_and_checks_frequency():
    k = np.zeros((2, 2), int)
    m = np.array([[True, False], [False, False]])
    pred = FringeOrderMap(np.array([[0, 1], [1, 1]]), 8, m)
    assert error_rate(pred, FringeOrderMap(k, 8, m)) == 0.0
    with pytest.raises(FrequencyMismatch):
        error_rate(pred, FringeOrderMap(k, 16, m))


def test_error_rate_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        error_rate(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        error_rate(np.zeros((2, 2)), np.zeros((2, 2)), np.ones((3, 3), bool))


def test_error_rate_matches_phase_test(rng):
    Phi_ref = rng.uniform(0, TWO_PI * 32, (40, 40))
    phi = wrap(Phi_ref + rng.normal(0, 0.1, Phi_ref.shape))
    k_ref = np.round((Phi_ref - phi) / TWO_PI).astype(int)
    k_pred = k_ref + (rng.random(k_ref.shape) < 0.1) * rng.choice([-2, -1, 1], k_ref.shape)
    m = rng.random(k_ref.shape) < 0.8
    assert error_rate(k_pred, k_ref, m) == phase_error_rate(phi + TWO_PI * k_pred, phi + TWO_PI * k_ref, m)


# sigma_dphi ---------------------------------------------------------------------

def test_sigma_zero_for_identical_and_offset(rng):
    Phi = rng.uniform(0, 100, (30, 30))
    assert sigma_dphi(Phi, Phi) == 0.0
    assert sigma_dphi(Phi + 0.01, Phi) == pytest.approx(0.0, abs=1e-12)


def test_sigma_monte_carlo(rng):
    Phi = rng.uniform(0, 100, (150, 150))
    est = sigma_dphi(Phi + rng.normal(0, 0.05, Phi.shape), Phi)
    assert abs(est - 0.05) < 0.005


def test_sigma_excludes_order_errors(rng):
    Phi = rng.uniform(0, 100, (50, 50))
    pred = Phi + rng.normal(0, 0.05, Phi.shape)
    jumped = pred.copy()
    jumped[:5] += TWO_PI
    ok = np.ones(Phi.shape, bool)
    ok[:5] = False
    assert sigma_dphi(jumped, Phi) == pytest.approx(sigma_dphi(pred, Phi, ok))


def test_sigma_empty_mask():
    with pytest.raises(EmptyMask):
        sigma_dphi(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(EmptyMask):
        sigma_dphi(np.full((2, 2), 4.0), np.zeros((2, 2)))


def test_metrics_record_invariants():
    with pytest.raises(ValueError):
        MetricsRecord("mftpu", 8, "frequency", 8, 1.5, 0.0, 10)
    with pytest.raises(ValueError):
        MetricsRecord("mftpu", 8, "frequency", 8, 0.5, 0.0, -1)


# sweeps -----------------------------------------------------------------------

def test_sweep_values():
    assert SWEEP_VALUES["frequency"] == (8, 16, 32, 48, 64)
    assert SWEEP_VALUES["gamma"] == (0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5)
    assert SWEEP_VALUES["exposure"] == (1.0, 0.5, 0.375, 0.25)


def test_noiseless_mftpu_is_exact(clean, tmp_path):
    recs = run_sweep("frequency", ["mftpu", "mftpu3f"], clean, tmp_path / "f.csv")
    assert len(recs) == 10
    assert all(r.error_rate == 0.0 and r.n_valid > 0 for r in recs)
    assert all(r.sigma_dphi < 1e-6 for r in recs)


def test_mftpu_error_non_decreasing_in_frequency(noisy):
    recs = run_sweep("frequency", ["mftpu"], noisy)
    rates = [r.error_rate for r in recs]
    assert rates == sorted(rates)
    assert rates[-1] > rates[0]


def test_gamma_one_matches_baseline(noisy):
    base = run_sweep("frequency", ["mftpu"], noisy, values=[32])[0]
    g = [r for r in run_sweep("gamma", ["mftpu"], noisy) if r.sweep_value == 1.0][0]
    assert (g.error_rate, g.sigma_dphi, g.n_valid) == (base.error_rate, base.sigma_dphi, base.n_valid)
    n = [r for r in run_sweep("noise", ["mftpu"], noisy, values=[0.02])][0]
    assert (n.error_rate, n.sigma_dphi, n.n_valid) == (base.error_rate, base.sigma_dphi, base.n_valid)


def test_gamma_sweep_has_eleven_points(noisy):
    recs = run_sweep("gamma", ["mftpu"], noisy)
    assert [r.sweep_value for r in recs] == list(SWEEP_VALUES["gamma"])
    assert all(r.f_h == 32 and r.sweep_kind == "gamma" for r in recs)


def test_exposure_lowers_snr(noisy):
    recs = run_sweep("exposure", ["mftpu"], noisy)
    assert recs[-1].error_rate > recs[0].error_rate
    assert recs[-1].sigma_dphi > recs[0].sigma_dphi


def test_sweep_csv_deterministic_and_threads_agree(noisy, tmp_path):
    run_sweep("exposure", ["mftpu", "mftpu3f"], noisy, tmp_path / "a.csv")
    run_sweep("exposure", ["mftpu", "mftpu3f"], noisy, tmp_path / "b.csv", threads=3)
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 1 + 2 * 4
    back = read_records(tmp_path / "a.csv")
    assert records_csv(back).encode() == a


def test_sweep_with_dltpu(noisy, tmp_path):
    model = build_model(8, seed=0)
    train(model, noisy, TrainConfig(f_h=8, epochs=1, patch_size=16, patches_per_scene=1))
    save_checkpoint(model, checkpoint_path(tmp_path, 8))
    recs = run_sweep("frequency", ["mftpu", "dltpu"], noisy, values=[8], checkpoints=tmp_path)
    assert [r.method for r in recs] == ["mftpu", "dltpu"]
    assert recs[0].n_valid == recs[1].n_valid
    recs2 = run_sweep("frequency", ["dltpu"], noisy, values=[8], checkpoints={8: checkpoint_path(tmp_path, 8)})
    assert recs2[0] == recs[1]


def test_sweep_missing_checkpoint(noisy, tmp_path):
    with pytest.raises(MissingCheckpoint):
        run_sweep("frequency", ["dltpu"], noisy, values=[8])
    with pytest.raises(MissingCheckpoint):
        run_sweep("frequency", ["dltpu"], noisy, values=[8], checkpoints=tmp_path)


def test_sweep_missing_scene_maps(tmp_path):
    ds = make_dataset(tmp_path / "d", sigma=0.01, n=2, size=16, freqs=(1, 8))
    (ds.split("test")[0].path / "height.pud").unlink()
    with pytest.raises(MissingData):
        run_sweep("noise", ["mftpu"], ds, values=[0.0])


def test_sweep_rejects_unknown_kind_and_method(noisy):
    with pytest.raises(ConfigError):
        run_sweep("blur", ["mftpu"], noisy)
    with pytest.raises(ConfigError):
        run_sweep("gamma", ["magic"], noisy)
