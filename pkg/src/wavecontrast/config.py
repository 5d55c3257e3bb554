"""Run configuration: defaults, JSON config files, and flag overrides.

Precedence is flags > file > defaults. Every run directory receives the
fully resolved configuration so the run can be reproduced exactly; all
randomness flows from the single seed field.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

OUTPUT_ROOT_ENV = "WAVECONTRAST_OUT"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: Optional[str] = None  # output root; falls back to $WAVECONTRAST_OUT or ./runs
    name: Optional[str] = None  # run directory name; defaults to the command
    quiet: bool = False

    # dataset source: an existing manifest, or the synthetic spec below
    manifest: Optional[str] = None
    synth_classes: int = 4
    synth_subjects: int = 12
    synth_segments: int = 20
    synth_window: int = 128
    synth_channels: int = 2
    synth_noise: float = 0.35
    overlap: float = 0.5

    # scalogram construction
    wavelet_w0: float = 6.0
    n_scales: int = 32
    scalogram_width: int = 32
    cwt_method: str = "fft"

    # optimizer and pretext objective
    lr: float = 1e-4
    l2: float = 1e-4
    alpha: float = 1.0
    dropout: float = 0.1
    loss_kind: str = "contrastive"
    epochs: int = 30
    batch: int = 24

    # training mode
    mode: str = "central"  # or "federated"
    clients: int = 12
    clients_per_round: int = 10
    rounds: int = 40
    local_epochs: int = 5
    local_batch: int = 12

    # evaluation protocol selection
    protocol: str = "linear-probe"  # linear-probe | low-data | transfer | cross-validate
    checkpoint: Optional[str] = None
    random_init: bool = False
    tap: str = "encoder"
    probe_lr: float = 0.01
    probe_epochs: int = 200
    probe_patience: int = 20
    probe_batch: int = 64
    ks: Tuple[int, ...] = (5, 10, 20, 40)
    repetitions: int = 20
    fine_tune_epochs: int = 15
    transfer_mode: str = "frozen-probe"
    scheme: str = "loso"
    folds: int = 10
    pipeline: str = "sscl"
    cv_epochs: int = 10

    # gradient verification
    gc_seeds: int = 1
    gc_tolerance: float = 1e-4
    gc_corrupt: bool = False

    def output_root(self) -> Path:
        if self.out:
            return Path(self.out)
        env = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(env) if env else Path("runs")

    def run_dir(self, command: str) -> Path:
        return self.output_root() / (self.name or command)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


class ConfigError(ValueError):
    pass


def _coerce(name: str, value):
    if name == "ks":
        if isinstance(value, str):
            value = [part for part in value.replace(",", " ").split() if part]
        try:
            ks = tuple(int(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"ks must be a list of integers, got {value!r}")
        if not ks or any(k < 1 for k in ks):
            raise ConfigError(f"ks must be positive, got {ks}")
        return ks
    return value


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    """Merge defaults, an optional JSON file, and explicit overrides."""
    merged: Dict[str, object] = {}
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {file_path}")
        try:
            data = json.loads(file_path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {file_path} is not valid JSON: {exc}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {file_path} must hold a JSON object")
        unknown = set(data) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(data)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key: {key}")
        if value is not None:
            merged[key] = value
    merged = {k: _coerce(k, v) for k, v in merged.items()}
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc))


def resolved_dict(cfg: ExperimentConfig) -> Dict[str, object]:
    out = dataclasses.asdict(cfg)
    out["ks"] = list(cfg.ks)
    return out


def write_resolved(cfg: ExperimentConfig, run_dir: Path) -> Path:
    """Persist the fully expanded config next to the run's artifacts."""
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path
