"""Command-line entry point: synth, pretrain, evaluate, gradcheck.

Each command resolves its configuration (flags > config file > defaults),
writes the expanded config into the run directory, and emits progress as
line-delimited JSON unless --quiet is set. Exit codes: 0 success, 2 usage
or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, write_resolved
from .data import (
    BlobFormatError,
    SegmentArrays,
    SyntheticConfig,
    build_arrays,
    load_dataset,
    partition_clients,
    segment_dataset,
    split_by_subject,
    write_synthetic,
)
from .engine import set_gradient_corruption
from .federated import FederatedConfig, run_federated_training
from .gradcheck import run_battery
from .protocols import (
    LowDataConfig,
    ProbeConfig,
    cross_validate,
    linear_probe,
    low_data_protocol,
    make_pipeline,
    transfer_eval,
)
from .reporting import write_loss_history, write_protocol_report, write_round_logs
from .scn import ScnModel, build_scn
from .training import TrainSettings, model_spec_from_arrays, pretrain_sscl
from .wavelet import WaveletConfig


def _emit(cfg: ExperimentConfig, record: Dict[str, object]) -> None:
    if not cfg.quiet:
        print(json.dumps(record, sort_keys=True))


def _settings(cfg: ExperimentConfig) -> TrainSettings:
    return TrainSettings(lr=cfg.lr, l2=cfg.l2, alpha=cfg.alpha, dropout=cfg.dropout, loss_kind=cfg.loss_kind)


def _probe_config(cfg: ExperimentConfig) -> ProbeConfig:
    return ProbeConfig(
        lr=cfg.probe_lr,
        l2=cfg.l2,
        max_epochs=cfg.probe_epochs,
        patience=cfg.probe_patience,
        batch=cfg.probe_batch,
        tap=cfg.tap,
        seed=cfg.seed,
    )


def _load_arrays(cfg: ExperimentConfig) -> SegmentArrays:
    if not cfg.manifest:
        raise ConfigError("a dataset manifest is required; run `synth` first or pass --manifest")
    recordings, manifest = load_dataset(cfg.manifest)
    segments = segment_dataset(recordings, manifest)
    wavelet = WaveletConfig(w0=cfg.wavelet_w0, n_scales=cfg.n_scales, method=cfg.cwt_method)
    return build_arrays(segments, wavelet, cfg.scalogram_width)


def _split_arrays(cfg: ExperimentConfig, arrays: SegmentArrays):
    train_ids, val_ids, test_ids = split_by_subject(np.unique(arrays.subjects).tolist(), seed=cfg.seed)
    parts = []
    for ids in (train_ids, val_ids, test_ids):
        parts.append(arrays.take(np.flatnonzero(np.isin(arrays.subjects, ids))))
    return parts[0], parts[1], parts[2], (train_ids, val_ids, test_ids)


def _encoder_from_state(arrays: SegmentArrays, settings: TrainSettings, state, seed: int) -> ScnModel:
    # Keep the projection head so both probe taps stay available; extra
    # checkpoint entries (the scalogram tower) are ignored by load_state.
    channels, window, _ = model_spec_from_arrays(arrays)
    encoder = ScnModel(channels, window, arch=settings.resolved_arch(), with_signal_head=True, seed=seed)
    encoder.load_state(state)
    return encoder


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig) -> int:
    run_dir = cfg.run_dir("synth")
    write_resolved(cfg, run_dir)
    spec = SyntheticConfig(
        n_classes=cfg.synth_classes,
        n_subjects=cfg.synth_subjects,
        segments_per_subject=cfg.synth_segments,
        window=cfg.synth_window,
        channels=cfg.synth_channels,
        noise_std=cfg.synth_noise,
        seed=cfg.seed,
    )
    manifest_path = write_synthetic(spec, run_dir / "dataset")
    _emit(cfg, {
        "event": "synth",
        "manifest": str(manifest_path),
        "classes": spec.n_classes,
        "subjects": spec.n_subjects,
    })
    print(str(manifest_path))
    return 0


def cmd_pretrain(cfg: ExperimentConfig) -> int:
    if cfg.mode not in ("central", "federated"):
        raise ConfigError(f"mode must be central or federated, got {cfg.mode!r}")
    run_dir = cfg.run_dir("pretrain")
    write_resolved(cfg, run_dir)
    arrays = _load_arrays(cfg)
    train, val, _, (train_ids, val_ids, test_ids) = _split_arrays(cfg, arrays)
    # Pretraining is label-free, so it may see train and validation
    # subjects; test subjects stay untouched.
    pool = arrays.take(np.flatnonzero(np.isin(arrays.subjects, train_ids + val_ids)))
    settings = _settings(cfg)
    ckpt_path = run_dir / "checkpoint.ckpt"

    if cfg.mode == "central":
        model, history = pretrain_sscl(
            pool, settings, epochs=cfg.epochs, batch=cfg.batch, seed=cfg.seed,
            progress=lambda e, loss: _emit(cfg, {"event": "epoch", "epoch": e, "loss": loss}),
        )
        save_checkpoint(ckpt_path, model.state_dict(), model.architecture_hash(), step=cfg.epochs)
        write_loss_history(run_dir, history, stem="pretrain_loss")
    else:
        shards = partition_clients(pool.n, cfg.clients, seed=cfg.seed)
        fed = FederatedConfig(
            n_clients=cfg.clients,
            clients_per_round=cfg.clients_per_round,
            rounds=cfg.rounds,
            local_epochs=cfg.local_epochs,
            local_batch=cfg.local_batch,
            seed=cfg.seed,
        )
        state, logs, model = run_federated_training(
            "sscl", pool, shards, fed, settings,
            progress=lambda log: _emit(cfg, {"event": "round", **log.to_record()}),
        )
        save_checkpoint(ckpt_path, state, model.architecture_hash(), step=cfg.rounds)
        write_round_logs(run_dir, logs)
    _emit(cfg, {"event": "pretrain", "mode": cfg.mode, "checkpoint": str(ckpt_path), "segments": pool.n})
    print(str(ckpt_path))
    return 0


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    protocols = ("linear-probe", "low-data", "transfer", "cross-validate")
    if cfg.protocol not in protocols:
        raise ConfigError(f"protocol must be one of {protocols}, got {cfg.protocol!r}")
    run_dir = cfg.run_dir("evaluate")
    write_resolved(cfg, run_dir)
    arrays = _load_arrays(cfg)
    n_classes = int(arrays.labels.max()) + 1
    settings = _settings(cfg)
    probe_cfg = _probe_config(cfg)
    train, val, test, _ = _split_arrays(cfg, arrays)

    channels, window, scal_shape = model_spec_from_arrays(arrays)
    reference = build_scn(channels, window, scal_shape, seed=cfg.seed, arch=settings.resolved_arch())
    if cfg.random_init:
        state, arch_hash = reference.state_dict(), reference.architecture_hash()
    else:
        if not cfg.checkpoint:
            raise ConfigError("pass --checkpoint or --random-init")
        state, arch_hash, _step = load_checkpoint(cfg.checkpoint)
        if arch_hash != reference.architecture_hash():
            print(
                f"error: checkpoint architecture hash {arch_hash} does not match "
                f"the configured model ({reference.architecture_hash()}); refusing to evaluate",
                file=sys.stderr,
            )
            return 1

    if cfg.protocol == "linear-probe":
        encoder = _encoder_from_state(arrays, settings, state, cfg.seed)
        report = linear_probe(encoder, train, val, test, n_classes, probe_cfg)
        if cfg.random_init:
            report.config["baseline"] = "random-init"
    elif cfg.protocol == "low-data":
        low_cfg = LowDataConfig(
            ks=cfg.ks, repetitions=cfg.repetitions, epochs=cfg.fine_tune_epochs, batch=cfg.batch, seed=cfg.seed
        )
        report = low_data_protocol(state, train, test, n_classes, low_cfg, settings)
    elif cfg.protocol == "transfer":
        low_cfg = LowDataConfig(
            ks=cfg.ks, repetitions=cfg.repetitions, epochs=cfg.fine_tune_epochs, batch=cfg.batch, seed=cfg.seed
        )
        report = transfer_eval(
            state, arch_hash, train, val, test, n_classes,
            mode=cfg.transfer_mode, probe_cfg=probe_cfg, low_data_cfg=low_cfg, settings=settings,
        )
    else:
        if cfg.scheme not in ("loso", "stratified"):
            raise ConfigError(f"scheme must be loso or stratified, got {cfg.scheme!r}")
        pipeline = make_pipeline(
            cfg.pipeline, n_classes, settings,
            pretrain_epochs=cfg.cv_epochs, pretrain_batch=cfg.batch,
            probe_cfg=probe_cfg, supervised_epochs=cfg.cv_epochs,
        )
        report = cross_validate(arrays, cfg.scheme, pipeline, seed=cfg.seed, k=cfg.folds)

    paths = write_protocol_report(run_dir, report)
    for row in report.summary_rows():
        _emit(cfg, {"event": "summary", **row})
    _emit(cfg, {"event": "evaluate", "protocol": cfg.protocol, **{k: str(v) for k, v in paths.items()}})
    print(str(paths["summary"]))
    return 0


def cmd_gradcheck(cfg: ExperimentConfig) -> int:
    run_dir = cfg.run_dir("gradcheck")
    write_resolved(cfg, run_dir)
    seeds = range(cfg.gc_seeds)
    set_gradient_corruption(cfg.gc_corrupt)
    try:
        lines, passed = run_battery(seeds=seeds, tolerance=cfg.gc_tolerance)
    finally:
        set_gradient_corruption(False)
    (run_dir / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override its values")
    sub.add_argument("--seed", type=int, help="master seed for every derived stream")
    sub.add_argument("--out", help="output root (default $WAVECONTRAST_OUT or ./runs)")
    sub.add_argument("--name", help="run directory name under the output root")
    sub.add_argument("--quiet", action="store_true", default=None, help="suppress progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavecontrast",
        description="Self-supervised scalogram-signal correspondence training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a labeled synthetic multi-sensor dataset")
    _add_common(synth)
    synth.add_argument("--classes", dest="synth_classes", type=int)
    synth.add_argument("--subjects", dest="synth_subjects", type=int)
    synth.add_argument("--segments", dest="synth_segments", type=int, help="segments per subject")
    synth.add_argument("--window", dest="synth_window", type=int)
    synth.add_argument("--channels", dest="synth_channels", type=int)
    synth.add_argument("--noise", dest="synth_noise", type=float)
    synth.set_defaults(func=cmd_synth)

    pre = sub.add_parser("pretrain", help="contrastive pretraining, central or federated")
    _add_common(pre)
    pre.add_argument("--manifest", help="dataset manifest path")
    pre.add_argument("--mode", choices=("central", "federated"))
    pre.add_argument("--epochs", type=int)
    pre.add_argument("--batch", type=int)
    pre.add_argument("--lr", type=float)
    pre.add_argument("--l2", type=float)
    pre.add_argument("--alpha", type=float)
    pre.add_argument("--dropout", type=float)
    pre.add_argument("--loss-kind", choices=("contrastive", "bce"))
    pre.add_argument("--w0", dest="wavelet_w0", type=float)
    pre.add_argument("--n-scales", type=int)
    pre.add_argument("--scalogram-width", type=int)
    pre.add_argument("--cwt-method", choices=("fft", "direct"))
    pre.add_argument("--clients", type=int)
    pre.add_argument("--clients-per-round", type=int)
    pre.add_argument("--rounds", type=int)
    pre.add_argument("--local-epochs", type=int)
    pre.add_argument("--local-batch", type=int)
    pre.set_defaults(func=cmd_pretrain)

    ev = sub.add_parser("evaluate", help="run an evaluation protocol against a checkpoint")
    _add_common(ev)
    ev.add_argument("--manifest", help="dataset manifest path")
    ev.add_argument("--checkpoint", help="pretrained checkpoint path")
    ev.add_argument("--random-init", action="store_true", default=None, help="probe an untrained encoder baseline")
    ev.add_argument("--protocol", choices=("linear-probe", "low-data", "transfer", "cross-validate"))
    ev.add_argument("--tap", choices=("encoder", "projection"))
    ev.add_argument("--probe-lr", type=float)
    ev.add_argument("--probe-epochs", type=int)
    ev.add_argument("--probe-patience", type=int)
    ev.add_argument("--probe-batch", type=int)
    ev.add_argument("--ks", help="comma-separated labeled-instances-per-class list")
    ev.add_argument("--repetitions", type=int)
    ev.add_argument("--fine-tune-epochs", type=int)
    ev.add_argument("--transfer-mode", choices=("frozen-probe", "fine-tune"))
    ev.add_argument("--scheme", choices=("loso", "stratified"))
    ev.add_argument("--folds", type=int)
    ev.add_argument("--pipeline", choices=("sscl", "random", "supervised"))
    ev.add_argument("--cv-epochs", type=int)
    ev.add_argument("--batch", type=int)
    ev.add_argument("--lr", type=float)
    ev.add_argument("--l2", type=float)
    ev.add_argument("--w0", dest="wavelet_w0", type=float)
    ev.add_argument("--n-scales", type=int)
    ev.add_argument("--scalogram-width", type=int)
    ev.add_argument("--cwt-method", choices=("fft", "direct"))
    ev.set_defaults(func=cmd_evaluate)

    gc = sub.add_parser("gradcheck", help="finite-difference verification of every primitive")
    _add_common(gc)
    gc.add_argument("--gc-seeds", type=int, help="number of seeds to sweep")
    gc.add_argument("--gc-tolerance", type=float, help="max relative error allowed")
    gc.add_argument(
        "--gc-corrupt", action="store_true", default=None,
        help="debug: corrupt backward gradients; the battery must then fail",
    )
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    overrides = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "config", "func") and v is not None
    }
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, BlobFormatError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
