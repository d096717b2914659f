"""Command-line front end: theory sweeps, simulations, MLP sweeps, decomposition.

Subcommands
-----------
theory      evaluate the closed-form decomposition on a (lambda0, gamma) grid
simulate    Monte Carlo the two-layer network on a (lambda0, p) grid
mlp-sweep   train MLP ensembles across widths and decompose their test loss
decompose   decompose a dumped prediction ensemble (JSON file)

Every run is described by a flat ``key = value`` config file; command-line
flags override config values (``--set key=value`` works for any key).
Results are emitted as CSV (header below, floats at 9 significant digits)
or as a JSON array with the same keys:

    mode,lambda0,gamma,width,d,n,p,noise_p,trials,seed,risk,bias_sq,variance,wall_time_s

Unused columns stay empty.  The wall_time_s column is filled only when
``--timings`` (or ``timings = on``) is set, so default reruns of one config
produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

from . import estimators, mlp, theory, twolayer

__all__ = ["ConfigError", "SweepConfig", "SweepRecord", "run_config", "emit", "main"]

CSV_HEADER = "mode,lambda0,gamma,width,d,n,p,noise_p,trials,seed,risk,bias_sq,variance,wall_time_s"

MODES = ("theory", "simulate", "mlp-sweep", "decompose")


class ConfigError(ValueError):
    """A sweep configuration is missing or malformed; names the field."""


@dataclass
class SweepRecord:
    """One output row; ``None`` fields render as empty CSV cells."""

    mode: str
    lambda0: Optional[float] = None
    gamma: Optional[float] = None
    width: Optional[int] = None
    d: Optional[int] = None
    n: Optional[int] = None
    p: Optional[int] = None
    noise_p: Optional[float] = None
    trials: Optional[int] = None
    seed: Optional[int] = None
    risk: Optional[float] = None
    bias_sq: Optional[float] = None
    variance: Optional[float] = None
    wall_time_s: Optional[float] = None


@dataclass
class SweepConfig:
    """Validated description of one run; see the module docstring for keys."""

    mode: str
    lambda0_grid: Optional[list[float]] = None
    gamma_grid: Optional[list[float]] = None
    widths: Optional[list[int]] = None
    d: Optional[int] = None
    n: Optional[int] = None
    p_grid: Optional[list[int]] = None
    trials: Optional[int] = None
    seed: int = 0
    d_in: Optional[int] = None
    classes: Optional[int] = None
    pool_size: Optional[int] = None
    test_size: Optional[int] = None
    margin: Optional[float] = None
    noise_p: float = 0.0
    parts: Optional[int] = None
    repeats: Optional[int] = None
    epochs: Optional[int] = None
    initial_lr: Optional[float] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: Optional[int] = None
    batch_size: int = 128
    input_path: Optional[str] = None
    out_path: Optional[str] = None
    emit_format: str = "csv"
    threads: int = 1
    timings: bool = False

    def _require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise ConfigError(f"mode {self.mode!r} requires config field {name!r}")

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r} (choose from {MODES})")
        if self.emit_format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.emit_format!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.mode == "theory":
            self._require("lambda0_grid", "gamma_grid")
            if any(v <= 0 for v in self.lambda0_grid + self.gamma_grid):
                raise ConfigError("lambda0 and gamma values must be positive")
        elif self.mode == "simulate":
            self._require("lambda0_grid", "d", "n", "p_grid", "trials")
            if self.trials < 2:
                raise ConfigError(f"trials must be >= 2, got {self.trials}")
            if min(self.p_grid) < 1 or self.d < 1 or self.n < 1:
                raise ConfigError("d, n and all p values must be positive")
        elif self.mode == "mlp-sweep":
            self._require(
                "widths", "d_in", "classes", "pool_size", "test_size",
                "margin", "parts", "repeats", "epochs", "initial_lr",
                "lr_decay_every",
            )
            if not 0.0 <= self.noise_p <= 1.0:
                raise ConfigError(f"noise_p must lie in [0, 1], got {self.noise_p}")
        elif self.mode == "decompose":
            self._require("input_path")


def _parse_scalar_list(text: str, name: str) -> list[float]:
    values: list[float] = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if ":" in token:
            pieces = token.split(":")
            if len(pieces) != 3:
                raise ConfigError(f"{name}: range syntax is start:stop:step, got {token!r}")
            start, stop, step = (float(x) for x in pieces)
            if step <= 0:
                raise ConfigError(f"{name}: range step must be positive")
            count = int(round((stop - start) / step))
            values.extend(start + k * step for k in range(count + 1))
        else:
            try:
                values.append(float(token))
            except ValueError as exc:
                raise ConfigError(f"{name}: not a number: {token!r}") from exc
    if not values:
        raise ConfigError(f"{name}: empty list")
    return values


def _parse_int_list(text: str, name: str) -> list[int]:
    return [int(round(v)) for v in _parse_scalar_list(text, name)]


def _parse_bool(text: str, name: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "on", "yes"):
        return True
    if lowered in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"{name}: expected a boolean, got {text!r}")


def parse_config_file(path: str) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            pairs[key.strip()] = value.strip()
    return pairs


_INT_KEYS = {
    "d", "n", "trials", "seed", "d_in", "classes", "pool_size", "test_size",
    "parts", "repeats", "epochs", "lr_decay_every", "batch_size", "threads",
}
_FLOAT_KEYS = {
    "margin", "noise_p", "initial_lr", "momentum", "weight_decay",
    "lr_decay_factor",
}
_KEY_ALIASES = {
    "lambda0": "lambda0_grid",
    "gamma": "gamma_grid",
    "p": "p_grid",
    "input": "input_path",
    "out": "out_path",
    "format": "emit_format",
}


def build_config(mode: str, pairs: dict[str, str]) -> SweepConfig:
    """Turn raw key/value strings into a validated :class:`SweepConfig`."""
    cfg = SweepConfig(mode=mode)
    known = {f.name for f in fields(SweepConfig)}
    for raw_key, raw_value in pairs.items():
        key = _KEY_ALIASES.get(raw_key, raw_key)
        if key == "mode":
            if raw_value != mode:
                raise ConfigError(
                    f"config file says mode={raw_value!r} but the {mode!r} "
                    "subcommand was invoked"
                )
            continue
        if key not in known:
            raise ConfigError(f"unknown config field {raw_key!r}")
        if key in ("lambda0_grid", "gamma_grid"):
            value = _parse_scalar_list(raw_value, raw_key)
        elif key in ("p_grid", "widths"):
            value = _parse_int_list(raw_value, raw_key)
        elif key in _INT_KEYS:
            try:
                value = int(raw_value)
            except ValueError as exc:
                raise ConfigError(f"{raw_key}: not an integer: {raw_value!r}") from exc
        elif key in _FLOAT_KEYS:
            try:
                value = float(raw_value)
            except ValueError as exc:
                raise ConfigError(f"{raw_key}: not a number: {raw_value!r}") from exc
        elif key == "timings":
            value = _parse_bool(raw_value, raw_key)
        else:
            value = raw_value
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def _clock(cfg: SweepConfig, started: float) -> Optional[float]:
    return round(time.perf_counter() - started, 6) if cfg.timings else None


def _run_theory(cfg: SweepConfig) -> list[SweepRecord]:
    records = []
    for lam0 in cfg.lambda0_grid:
        for gamma in cfg.gamma_grid:
            started = time.perf_counter()
            point = theory.theory_point(lam0, gamma)
            records.append(
                SweepRecord(
                    mode="theory",
                    lambda0=lam0,
                    gamma=gamma,
                    risk=point.risk,
                    bias_sq=point.bias_sq,
                    variance=point.variance,
                    wall_time_s=_clock(cfg, started),
                )
            )
    return records


def _run_simulate(cfg: SweepConfig) -> list[SweepRecord]:
    records = []
    for lam0 in cfg.lambda0_grid:
        for p in cfg.p_grid:
            started = time.perf_counter()
            dims = twolayer.ModelDims(d=cfg.d, n=cfg.n, p=p, lambda0=lam0)
            stats = twolayer.mc_bias_variance(dims, cfg.trials, cfg.seed)
            records.append(
                SweepRecord(
                    mode="simulate",
                    lambda0=lam0,
                    gamma=dims.gamma,
                    d=cfg.d,
                    n=cfg.n,
                    p=p,
                    trials=cfg.trials,
                    seed=cfg.seed,
                    risk=stats.risk,
                    bias_sq=stats.bias_sq,
                    variance=stats.variance,
                    wall_time_s=_clock(cfg, started),
                )
            )
    return records


def _run_mlp_sweep(cfg: SweepConfig) -> list[SweepRecord]:
    pool = mlp.synth_dataset(
        cfg.d_in, cfg.pool_size, cfg.classes, cfg.margin, cfg.seed * 2 + 1
    )
    test = mlp.synth_dataset(
        cfg.d_in, cfg.test_size, cfg.classes, cfg.margin, cfg.seed * 2 + 2
    )
    if cfg.noise_p > 0.0:
        noisy = mlp.inject_label_noise(
            pool.labels, cfg.noise_p, cfg.classes, cfg.seed * 2 + 3
        )
        pool = mlp.LabeledDataset(pool.inputs, noisy, pool.provenance)
    plan = estimators.plan_splits(len(pool), cfg.parts, cfg.repeats, cfg.seed)
    train_cfg = mlp.TrainConfig(
        epochs=cfg.epochs,
        initial_lr=cfg.initial_lr,
        lr_decay_every=cfg.lr_decay_every,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        lr_decay_factor=cfg.lr_decay_factor,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
    )
    records = []
    for width in cfg.widths:
        started = time.perf_counter()
        (_, result), = mlp.width_sweep(
            [width], pool, test, plan, train_cfg, max_workers=cfg.threads
        )
        records.append(
            SweepRecord(
                mode="mlp-sweep",
                width=width,
                d=cfg.d_in,
                n=plan.part_size,
                noise_p=cfg.noise_p,
                trials=plan.model_count,
                seed=cfg.seed,
                risk=result.risk,
                bias_sq=result.bias_sq,
                variance=result.variance,
                wall_time_s=_clock(cfg, started),
            )
        )
    return records


def _load_dump(path: str) -> tuple[np.ndarray, np.ndarray, str]:
    with open(path, "r", encoding="utf-8") as fh:
        dump = json.load(fh)
    for field_name in ("test_count", "k", "N", "c", "outputs", "labels", "kind"):
        if field_name not in dump:
            raise ConfigError(f"prediction dump is missing field {field_name!r}")
    kind = dump["kind"]
    if kind not in ("real", "simplex"):
        raise ConfigError(f"dump kind must be 'real' or 'simplex', got {kind!r}")
    shape = (dump["test_count"], dump["k"], dump["N"], dump["c"])
    outputs = np.asarray(dump["outputs"], dtype=np.float64)
    if outputs.shape != shape:
        raise ConfigError(
            f"dump outputs have shape {outputs.shape}, expected {shape}"
        )
    labels = np.asarray(dump["labels"], dtype=np.float64)
    if labels.shape != (dump["test_count"], dump["c"]):
        raise ConfigError(
            f"dump labels have shape {labels.shape}, expected "
            f"({dump['test_count']}, {dump['c']})"
        )
    return outputs, labels, kind


def _run_decompose(cfg: SweepConfig) -> list[SweepRecord]:
    started = time.perf_counter()
    outputs, labels, kind = _load_dump(cfg.input_path)
    if kind == "real":
        result = estimators.estimate_mse_decomposition(
            estimators.PredictionMatrix(outputs), labels
        )
    else:
        ensemble = estimators.ProbabilityEnsemble.from_predictions(outputs)
        result = estimators.estimate_kl_decomposition(ensemble, labels)
    return [
        SweepRecord(
            mode="decompose",
            n=outputs.shape[0],
            trials=outputs.shape[1] * outputs.shape[2],
            risk=result.risk,
            bias_sq=result.bias_sq,
            variance=result.variance,
            wall_time_s=_clock(cfg, started),
        )
    ]


_RUNNERS = {
    "theory": _run_theory,
    "simulate": _run_simulate,
    "mlp-sweep": _run_mlp_sweep,
    "decompose": _run_decompose,
}


def run_config(config: SweepConfig) -> list[SweepRecord]:
    """Dispatch a validated config to its runner; records come back in
    deterministic grid order."""
    config.validate()
    return _RUNNERS[config.mode](config)


def _render_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def emit(records: Sequence[SweepRecord], path: str, emit_format: str) -> None:
    """Write records to ``path`` as CSV (9-significant-digit floats) or JSON.

    The CSV header is byte-stable across runs and modes; JSON is an array of
    objects with the same keys at full float precision, so a JSON round-trip
    reproduces the records exactly.
    """
    if not records:
        raise ValueError("no records to emit")
    if emit_format == "csv":
        lines = [CSV_HEADER]
        for record in records:
            lines.append(
                ",".join(_render_cell(getattr(record, f.name)) for f in fields(SweepRecord))
            )
        payload = "\n".join(lines) + "\n"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(payload)
    elif emit_format == "json":
        rows = [
            {f.name: getattr(record, f.name) for f in fields(SweepRecord)}
            for record in records
        ]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"format must be csv or json, got {emit_format!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bvlab",
        description="bias-variance decomposition laboratory",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        mode_parser = sub.add_parser(mode)
        mode_parser.add_argument("--config", help="flat key=value config file")
        mode_parser.add_argument("--out", help="output path (default: stdout)")
        mode_parser.add_argument("--format", choices=("csv", "json"), dest="emit_format")
        mode_parser.add_argument("--seed", type=int)
        mode_parser.add_argument("--threads", type=int)
        mode_parser.add_argument(
            "--timings", action="store_true", default=None,
            help="fill the wall_time_s column (breaks byte-identical reruns)",
        )
        mode_parser.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override any config field (repeatable; flags win)",
        )
        if mode == "decompose":
            mode_parser.add_argument("--input", dest="input_path",
                                     help="prediction dump (JSON)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        pairs = parse_config_file(args.config) if args.config else {}
        for override in args.set:
            if "=" not in override:
                raise ConfigError(f"--set expects KEY=VALUE, got {override!r}")
            key, value = override.split("=", 1)
            pairs[key.strip()] = value.strip()
        for flag in ("out_path", "emit_format", "seed", "threads", "timings", "input_path"):
            value = getattr(args, flag if flag != "out_path" else "out", None)
            if value is not None:
                pairs[_KEY_ALIASES.get(flag, flag)] = str(value)
        config = build_config(args.mode, pairs)
    except (ConfigError, OSError) as exc:
        print(f"bvlab: config error: {exc}", file=sys.stderr)
        return 2
    try:
        records = run_config(config)
        if config.out_path:
            emit(records, config.out_path, config.emit_format)
        else:
            print(CSV_HEADER)
            for record in records:
                print(",".join(
                    _render_cell(getattr(record, f.name)) for f in fields(SweepRecord)
                ))
    except ConfigError as exc:
        print(f"bvlab: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- downstream module errors carry context
        print(f"bvlab: [{config.mode}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
