"""Command-line entry point: ``phaseforge {generate,unwrap,train,eval,sweep}``.

Every option can also be given in a flat ``key=value`` config file passed with
``--config``; command-line flags win over the file.  The fully resolved
configuration is echoed before the command runs.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 frequency
mismatch, 5 missing checkpoint.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (ConfigError, DatasetIOError, DatasetMissingFrequency, FrequencyMismatch,
                     FrequencyOrder, MissingCheckpoint, PhaseForgeError)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_FREQ, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in str(text).split(",") if t.strip()]


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Option:
    type: object
    default: object = None
    help: str = ""
    required: bool = False


COMMON = {
    "seed": Option(int, 0, "master seed"),
    "threads": Option(int, None, "worker cap (falls back to PHASEFORGE_THREADS, then 1)"),
    "force": Option(_bool, False, "overwrite existing outputs"),
}

COMMANDS: dict[str, dict[str, Option]] = {
    "generate": {
        "out": Option(str, None, "dataset directory", required=True),
        "scenes": Option(int, 10, "number of scenes"),
        "freqs": Option(_int_list, [1, 8, 32, 64], "comma-separated fringe frequencies (must include 1)"),
        "width": Option(int, 128, "image width"),
        "height": Option(int, 128, "image height"),
        "kappa": Option(float, 1.0, "height-to-phase scale"),
        "noise_sigma": Option(float, 0.01, "intensity noise standard deviation"),
        "gamma": Option(float, 1.0, "projector gamma"),
        "exposure": Option(float, 1.0, "relative exposure"),
        "quantize_bits": Option(int, 8, "camera bit depth (0 disables quantization)"),
        "train_fraction": Option(float, 0.8, "fraction of scenes in the training split"),
        "threshold": Option(float, 0.08, "modulation threshold for the validity mask"),
    },
    "unwrap": {
        "dataset": Option(str, None, "dataset directory", required=True),
        "sample": Option(int, 0, "scene index"),
        "fh": Option(int, None, "high frequency (defaults to the checkpoint's for dltpu)"),
        "method": Option(str, "mftpu", "mftpu, mftpu3f or dltpu"),
        "mid": Option(int, 8, "mid frequency for mftpu3f"),
        "checkpoint": Option(str, None, "DL-TPU checkpoint (dltpu only)"),
        "compensate": Option(_bool, False, "apply the majority-vote order compensation"),
        "out": Option(str, None, "output directory", required=True),
    },
    "train": {
        "dataset": Option(str, None, "dataset directory", required=True),
        "fh": Option(int, None, "high frequency", required=True),
        "out": Option(str, None, "checkpoint path", required=True),
        "log": Option(str, None, "training log CSV (defaults to the checkpoint path with .csv)"),
        "epochs": Option(int, 30, "training epochs"),
        "lr": Option(float, 3e-3, "peak learning rate"),
        "patch_size": Option(int, 64, "training crop size (even)"),
        "batch_size": Option(int, 4, "crops per optimizer step"),
        "patches_per_scene": Option(int, 4, "crops per scene per epoch"),
    },
    "eval": {
        "dataset": Option(str, None, "dataset directory", required=True),
        "fh": Option(int, 32, "high frequency"),
        "methods": Option(_str_list, ["mftpu"], "comma-separated methods"),
        "checkpoints": Option(str, None, "directory holding dltpu_f<fh>.puw"),
        "mid": Option(int, 8, "mid frequency for mftpu3f"),
        "out": Option(str, None, "metrics CSV"),
    },
    "sweep": {
        "dataset": Option(str, None, "dataset directory", required=True),
        "kind": Option(str, None, "frequency, exposure, gamma or noise", required=True),
        "methods": Option(_str_list, ["mftpu"], "comma-separated methods"),
        "fh": Option(int, 32, "high frequency for non-frequency sweeps"),
        "values": Option(_float_list, None, "override the default sweep values"),
        "checkpoints": Option(str, None, "directory holding dltpu_f<fh>.puw"),
        "mid": Option(int, 8, "mid frequency for mftpu3f"),
        "out": Option(str, None, "metrics CSV", required=True),
    },
}


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DatasetIOError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phaseforge", description="Temporal phase unwrapping for fringe projection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, opt in {**options, **COMMON}.items():
            flag = "--" + key.replace("_", "-")
            if opt.type is _bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=opt.help)
            else:
                p.add_argument(flag, dest=key, default=None, help=opt.help)
    return parser


def resolve(args: argparse.Namespace, parser_for_cmd: argparse.ArgumentParser) -> dict:
    """Merge defaults, config file and flags; convert types; enforce required keys."""
    options = {**COMMANDS[args.command], **COMMON}
    raw = {k: opt.default for k, opt in options.items()}
    if args.config:
        file_values = read_config(args.config)
        unknown = sorted(set(file_values) - set(options))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        raw.update(file_values)
    for key in options:
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    if raw["threads"] is None:
        raw["threads"] = os.environ.get("PHASEFORGE_THREADS", 1)
    cfg = {}
    for key, value in raw.items():
        if value is None or not isinstance(value, str):
            cfg[key] = value
            continue
        try:
            cfg[key] = options[key].type(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    missing = [k for k, opt in options.items() if opt.required and cfg[k] is None]
    if missing:
        parser_for_cmd.error("missing required option(s): "
                             + ", ".join("--" + k.replace("_", "-") for k in missing))
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be >= 1")
    cfg["threads"] = int(cfg["threads"])
    return cfg


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return "" if value is None else str(value)


def echo_config(command: str, cfg: dict) -> None:
    print(f"# phaseforge {command}")
    for key in sorted(cfg):
        print(f"{key}={_fmt(cfg[key])}")
    sys.stdout.flush()


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise DatasetIOError(f"{path} exists; pass --force to overwrite")


def cmd_generate(cfg: dict) -> int:
    from .sim import AcquisitionSpec, SceneParams, generate_dataset

    params = SceneParams(width=cfg["width"], height=cfg["height"], kappa=cfg["kappa"])
    acqs = [AcquisitionSpec(f, gamma=cfg["gamma"], exposure=cfg["exposure"], noise_sigma=cfg["noise_sigma"],
                            quantize_bits=cfg["quantize_bits"], seed=cfg["seed"]) for f in cfg["freqs"]]
    summary = generate_dataset(cfg["scenes"], params, acqs, cfg["out"], seed=cfg["seed"],
                               train_fraction=cfg["train_fraction"], threshold=cfg["threshold"],
                               force=cfg["force"])
    print(f"wrote {summary.n_scenes} scenes to {cfg['out']}")
    return EXIT_OK


def cmd_unwrap(cfg: dict) -> int:
    from .dataset import Dataset
    from .dltpu import infer, load_checkpoint
    from .formats import write_pud
    from .phase import retrieve_phase, unit_absolute
    from .tpu import compensate_orders, unwrap_hierarchical, unwrap_two_freq

    if cfg["method"] not in ("mftpu", "mftpu3f", "dltpu"):
        raise ConfigError(f"unknown method {cfg['method']!r}")
    ds = Dataset(cfg["dataset"])
    if not 0 <= cfg["sample"] < len(ds):
        raise ConfigError(f"sample {cfg['sample']} outside 0..{len(ds) - 1}")
    sample = ds.samples[cfg["sample"]]
    model = None
    if cfg["method"] == "dltpu":
        if not cfg["checkpoint"]:
            raise MissingCheckpoint("dltpu needs --checkpoint")
        model = load_checkpoint(cfg["checkpoint"])
        if cfg["fh"] is None:
            cfg["fh"] = model.f_h
        elif model.f_h != cfg["fh"]:
            raise FrequencyMismatch(f"checkpoint is for f_h={model.f_h}, requested f_h={cfg['fh']}")
    if cfg["fh"] is None:
        raise ConfigError("--fh is required for classical methods")
    f_h = cfg["fh"]
    out = Path(cfg["out"])
    for name in ("k.pud", "phi_abs.pud", "diagnostics.txt"):
        _guard(out / name, cfg["force"])

    Phi_1 = unit_absolute(retrieve_phase(sample.stack(1)))
    phi_h = retrieve_phase(sample.stack(f_h))
    mask = sample.mask
    if cfg["method"] == "mftpu":
        Phi_h, k = unwrap_two_freq(Phi_1, phi_h, mask)
    elif cfg["method"] == "mftpu3f":
        phi_m = retrieve_phase(sample.stack(cfg["mid"]))
        Phi_h, k = unwrap_hierarchical(Phi_1, phi_m, phi_h, mask)
    else:
        k, Phi_h = infer(model, Phi_1, phi_h, mask)
    if cfg["compensate"]:
        k = compensate_orders(k)
        Phi_h = type(Phi_h)(phi_h.values + 2 * np.pi * k.k, "absolute", f_h)
    labels = sample.orders(f_h)
    n_valid = int(mask.sum())
    n_wrong = int(np.count_nonzero((k.k != labels) & mask))
    out.mkdir(parents=True, exist_ok=True)
    write_pud(out / "k.pud", k.k.astype(np.int32))
    write_pud(out / "phi_abs.pud", Phi_h.values.astype(np.float32))
    diag = {
        "method": cfg["method"], "f_h": f_h, "mid": cfg["mid"] if cfg["method"] == "mftpu3f" else "",
        "sample": sample.index, "split": sample.split, "n_valid": n_valid, "n_clamped": k.n_clamped,
        "n_order_errors": n_wrong, "error_rate": repr(n_wrong / n_valid if n_valid else 0.0),
    }
    (out / "diagnostics.txt").write_text("".join(f"{key}={v}\n" for key, v in diag.items()))
    print(f"error_rate={diag['error_rate']} n_valid={n_valid}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    from .dataset import Dataset
    from .dltpu import TrainConfig, build_model, train

    out = Path(cfg["out"])
    log_path = Path(cfg["log"]) if cfg["log"] else out.with_suffix(".csv")
    _guard(out, cfg["force"])
    _guard(log_path, cfg["force"])
    tc = TrainConfig(f_h=cfg["fh"], epochs=cfg["epochs"], lr=cfg["lr"], seed=cfg["seed"],
                     patch_size=cfg["patch_size"], batch_size=cfg["batch_size"],
                     patches_per_scene=cfg["patches_per_scene"], dataset_path=cfg["dataset"],
                     checkpoint_path=str(out), log_path=str(log_path))
    ds = Dataset(cfg["dataset"])
    model = build_model(cfg["fh"], seed=cfg["seed"])

    def progress(epoch, loss, err):
        print(f"epoch={epoch} train_loss={loss:.6f} test_error_rate={err:.6f}", flush=True)

    train(model, ds, tc, progress=progress)
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def _print_records(records) -> None:
    for r in records:
        print(f"{r.method} f_h={r.f_h} {r.sweep_kind}={r.sweep_value} error_rate={r.error_rate:.6f} "
              f"sigma_dphi={r.sigma_dphi:.6f} n_valid={r.n_valid}", flush=True)


def cmd_eval(cfg: dict) -> int:
    from .evaluate import run_sweep

    if cfg["out"]:
        _guard(Path(cfg["out"]), cfg["force"])
    records = run_sweep("frequency", cfg["methods"], cfg["dataset"], cfg["out"], values=[cfg["fh"]],
                        checkpoints=cfg["checkpoints"], mid_frequency=cfg["mid"], threads=cfg["threads"])
    _print_records(records)
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    from .evaluate import run_sweep

    _guard(Path(cfg["out"]), cfg["force"])
    values = cfg["values"]
    if values is not None and cfg["kind"] == "frequency":
        values = [int(v) for v in values]
    records = run_sweep(cfg["kind"], cfg["methods"], cfg["dataset"], cfg["out"], f_h=cfg["fh"],
                        values=values, checkpoints=cfg["checkpoints"], mid_frequency=cfg["mid"],
                        threads=cfg["threads"])
    _print_records(records)
    return EXIT_OK


HANDLERS = {"generate": cmd_generate, "unwrap": cmd_unwrap, "train": cmd_train,
            "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        cfg = resolve(args, sub)
        echo_config(args.command, cfg)
        return HANDLERS[args.command](cfg)
    except MissingCheckpoint as exc:
        code, msg = EXIT_CHECKPOINT, exc
    except (FrequencyMismatch, DatasetMissingFrequency, FrequencyOrder) as exc:
        code, msg = EXIT_FREQ, exc
    except (DatasetIOError, OSError) as exc:
        code, msg = EXIT_IO, exc
    except (ConfigError, PhaseForgeError, ValueError) as exc:
        code, msg = EXIT_CONFIG, exc
    print(f"phaseforge {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
