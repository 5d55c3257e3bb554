"""Evaluation protocols over frozen or fine-tuned encoders.

Four protocols share the report shape: a frozen-feature linear probe,
low-data fine-tuning against a from-scratch control, transfer of a
source-pretrained encoder to a target dataset, and cross-validation
(leave-one-subject-out or stratified k-fold). Every run records weighted
F1 and Cohen's kappa; reports aggregate mean +/- std per group.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .data import SegmentArrays, few_shot_sample
from .engine import Parameter, Tensor
from .metrics import cohen_kappa, confusion_matrix, weighted_f1
from .optim import AdamConfig, AdamState
from .scn import ScnModel, encoder_features
from .seeds import derive_rng
from .training import (
    LinearProbe,
    TrainSettings,
    model_spec_from_arrays,
    pretrain_sscl,
    probe_loss_fn,
    train_epochs,
    train_supervised,
)

# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class RunResult:
    """One repetition or fold: tag identifies the run, group the series."""

    group: str
    tag: str
    f1: float
    kappa: float


@dataclass
class ProtocolReport:
    protocol: str
    results: List[RunResult] = field(default_factory=list)
    config: Dict[str, object] = field(default_factory=dict)

    def add(self, group: str, tag: str, f1: float, kappa: float) -> None:
        self.results.append(RunResult(group, tag, float(f1), float(kappa)))

    def groups(self) -> List[str]:
        seen: List[str] = []
        for r in self.results:
            if r.group not in seen:
                seen.append(r.group)
        return seen

    def values(self, group: str, metric: str = "f1") -> np.ndarray:
        vals = [getattr(r, metric) for r in self.results if r.group == group]
        if not vals:
            raise KeyError(f"no runs in group {group!r}")
        return np.asarray(vals, dtype=np.float64)

    def mean_std(self, group: str, metric: str = "f1") -> Tuple[float, float]:
        vals = self.values(group, metric)
        return float(vals.mean()), float(vals.std())

    def run_rows(self) -> List[Dict[str, object]]:
        return [{"group": r.group, "run": r.tag, "f1": r.f1, "kappa": r.kappa} for r in self.results]

    def summary_rows(self) -> List[Dict[str, object]]:
        rows = []
        for group in self.groups():
            row: Dict[str, object] = {"group": group, "n": int(len(self.values(group)))}
            for metric in ("f1", "kappa"):
                mean, std = self.mean_std(group, metric)
                row[f"{metric}_mean"] = mean
                row[f"{metric}_std"] = std
            rows.append(row)
        return rows


def state_checksum(state: Dict[str, np.ndarray]) -> str:
    """Order-independent digest of named arrays, for freeze assertions."""
    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state[name]).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# frozen-feature probe


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.01  # 0.02 is the documented alternative
    l2: float = 1e-4
    max_epochs: int = 200
    patience: int = 20
    batch: int = 64
    tap: str = "encoder"
    seed: int = 0


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    n_classes: int,
    cfg: ProbeConfig = ProbeConfig(),
) -> Tuple[LinearProbe, Dict[str, float]]:
    """Logistic regression with early stopping on validation weighted F1."""
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature rows vs {len(labels)} labels")
    if len(val_features) != len(val_labels):
        raise ValueError(f"{len(val_features)} validation rows vs {len(val_labels)} labels")
    if (np.asarray(labels) < 0).any() or (np.asarray(val_labels) < 0).any():
        raise ValueError("probe training requires labels on every segment")
    probe = LinearProbe(features.shape[1], n_classes, seed=cfg.seed)
    opt = AdamState(probe.params)
    fn = probe_loss_fn(probe, features, labels, cfg.l2)
    best_f1, best_state, best_epoch = -1.0, probe.state_dict(), -1
    stale = 0
    epochs_run = 0
    for epoch in range(cfg.max_epochs):
        train_epochs(
            fn, probe.params, opt, AdamConfig(lr=cfg.lr), len(labels), 1, cfg.batch, cfg.seed, epoch_base=epoch
        )
        epochs_run = epoch + 1
        val_f1 = weighted_f1(confusion_matrix(val_labels, probe.predict(val_features), n_classes))
        if val_f1 > best_f1:
            best_f1, best_state, best_epoch = val_f1, probe.state_dict(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    probe.load_state(best_state)
    return probe, {"best_val_f1": best_f1, "best_epoch": best_epoch, "epochs_run": epochs_run}


def score_predictions(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> Tuple[float, float]:
    cm = confusion_matrix(y_true, y_pred, n_classes)
    return weighted_f1(cm), cohen_kappa(cm)


def linear_probe(
    encoder: ScnModel,
    train: SegmentArrays,
    val: SegmentArrays,
    test: SegmentArrays,
    n_classes: int,
    cfg: ProbeConfig = ProbeConfig(),
) -> ProtocolReport:
    """Train a linear head on frozen encoder features, score the test split."""
    before = state_checksum(encoder.state_dict())
    feats = {
        split_name: encoder_features(encoder, split.signals, tap=cfg.tap)
        for split_name, split in (("train", train), ("val", val), ("test", test))
    }
    probe, info = fit_probe(feats["train"], train.labels, feats["val"], val.labels, n_classes, cfg)
    f1, kappa = score_predictions(test.labels, probe.predict(feats["test"]), n_classes)
    after = state_checksum(encoder.state_dict())
    if before != after:
        raise RuntimeError("probe training modified the frozen encoder")
    report = ProtocolReport("linear_probe", config={**asdict(cfg), **info, "encoder_checksum": before})
    report.add("probe", "run0", f1, kappa)
    return report


# ---------------------------------------------------------------------------
# low-data fine-tuning


@dataclass(frozen=True)
class LowDataConfig:
    ks: Tuple[int, ...] = (5, 10, 20, 40)
    repetitions: int = 20
    epochs: int = 15
    batch: int = 24
    seed: int = 0


def low_data_protocol(
    pretrained_state: Dict[str, np.ndarray],
    train: SegmentArrays,
    test: SegmentArrays,
    n_classes: int,
    cfg: LowDataConfig = LowDataConfig(),
    settings: TrainSettings = TrainSettings(),
) -> ProtocolReport:
    """Fine-tune on k labeled segments per class, against a scratch control.

    Both arms share the optimizer settings and epoch budget; only the
    initial encoder weights differ.
    """
    if cfg.repetitions < 1:
        raise ValueError("need at least one repetition")
    max_k = max(cfg.ks)
    for cls in range(n_classes):
        have = int((train.labels == cls).sum())
        if have < max_k:
            raise ValueError(f"class {cls} has {have} training segments, need {max_k}")
    report = ProtocolReport("low_data", config={**asdict(cfg), "settings_lr": settings.lr})
    for k in cfg.ks:
        for rep in range(cfg.repetitions):
            rep_seed = int(derive_rng(cfg.seed, "low-data", k, rep).integers(0, 2**31 - 1))
            subset = train.take(few_shot_sample(train.labels, k, seed=rep_seed))
            for arm, init in (("pretrained", pretrained_state), ("scratch", None)):
                model, _ = train_supervised(
                    subset,
                    n_classes,
                    settings=settings,
                    epochs=cfg.epochs,
                    batch=cfg.batch,
                    seed=rep_seed,
                    init_state=init,
                )
                pred = _predict_supervised(model, test)
                f1, kappa = score_predictions(test.labels, pred, n_classes)
                report.add(f"k={k}/{arm}", f"rep{rep}", f1, kappa)
    expected = len(cfg.ks) * cfg.repetitions * 2
    if len(report.results) != expected:
        raise RuntimeError(f"logged {len(report.results)} runs, expected {expected}")
    return report


def _predict_supervised(model: ScnModel, arrays: SegmentArrays, batch: int = 64) -> np.ndarray:
    preds = []
    n = arrays.n
    for lo in range(0, n, batch):
        part = {m: arr[lo : lo + batch] for m, arr in arrays.signals.items()}
        preds.append(model.logits(part, training=False).data.argmax(axis=1))
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# transfer


def _identity_adapter(name: str, c_in: int, c_out: int, dtype) -> Tuple[Parameter, Parameter]:
    w = np.zeros((1, c_in, c_out), dtype=dtype)
    eye = min(c_in, c_out)
    w[0, :eye, :eye] = np.eye(eye, dtype=dtype)
    return Parameter(f"adapter/{name}/w", w), Parameter(f"adapter/{name}/b", np.zeros(c_out, dtype=dtype))


def _adapted_features(encoder: ScnModel, adapters, signals: Dict[str, np.ndarray]):
    mapped = {}
    for mod in sorted(signals):
        x = Tensor(np.asarray(signals[mod], dtype=encoder.dtype))
        w, b = adapters[mod]
        mapped[mod] = ops.conv1d(x, w, b)
    return encoder.encoder_vector(mapped, training=False)


def transfer_eval(
    source_state: Dict[str, np.ndarray],
    source_hash: str,
    train: SegmentArrays,
    val: SegmentArrays,
    test: SegmentArrays,
    n_classes: int,
    mode: str = "frozen-probe",
    probe_cfg: ProbeConfig = ProbeConfig(),
    low_data_cfg: Optional[LowDataConfig] = None,
    settings: TrainSettings = TrainSettings(),
) -> ProtocolReport:
    """Reuse a source-pretrained encoder on a target dataset.

    frozen-probe trains only a linear head; fine-tune runs the low-data
    protocol's pretrained arm from the source weights. A 1x1 channel
    adapter (identity-initialized, trained with the probe) bridges
    mismatched channel counts; with matching channels the frozen-probe
    path is byte-for-byte the plain linear probe.
    """
    if mode not in ("frozen-probe", "fine-tune"):
        raise ValueError(f"unknown transfer mode {mode!r}")
    channels, window, _ = model_spec_from_arrays(train)
    arch = settings.resolved_arch()
    source_channels = {
        mod: int(source_state[f"sig/{mod}/conv0/w"].shape[1])
        for mod in channels
        if f"sig/{mod}/conv0/w" in source_state
    }
    if set(source_channels) != set(channels):
        raise ValueError(
            f"source encoder lacks towers for modalities {sorted(set(channels) - set(source_channels))}"
        )
    encoder = ScnModel(source_channels, window, arch=arch, seed=probe_cfg.seed)
    encoder.load_state({k: v for k, v in source_state.items() if k in encoder.params})

    if mode == "fine-tune":
        if source_channels != channels:
            raise ValueError("fine-tune transfer requires matching channel counts")
        cfg = low_data_cfg if low_data_cfg is not None else LowDataConfig(ks=(10,), repetitions=5)
        report = low_data_protocol(source_state, train, test, n_classes, cfg, settings)
        report.protocol = "transfer_fine_tune"
        report.config["checkpoint_hash"] = source_hash
        report.config["mode"] = mode
        return report

    if source_channels == channels:
        report = linear_probe(encoder, train, val, test, n_classes, probe_cfg)
    else:
        report = _adapter_probe(encoder, source_channels, train, val, test, n_classes, probe_cfg)
    report.protocol = "transfer_frozen_probe"
    report.config["checkpoint_hash"] = source_hash
    report.config["mode"] = mode
    return report


def _adapter_probe(
    encoder: ScnModel,
    source_channels: Dict[str, int],
    train: SegmentArrays,
    val: SegmentArrays,
    test: SegmentArrays,
    n_classes: int,
    cfg: ProbeConfig,
) -> ProtocolReport:
    """Probe with per-modality 1x1 channel adapters trained alongside it."""
    before = state_checksum(encoder.state_dict())
    target_channels = {m: arr.shape[2] for m, arr in train.signals.items()}
    adapters = {
        mod: _identity_adapter(mod, target_channels[mod], source_channels[mod], encoder.dtype)
        for mod in source_channels
    }
    probe = LinearProbe(encoder.arch.fusion_maps, n_classes, seed=cfg.seed)
    trainable = dict(probe.params)
    for w, b in adapters.values():
        trainable[w.name] = w
        trainable[b.name] = b

    def loss_fn(batch_idx, rng):
        part = {m: arr[batch_idx] for m, arr in train.signals.items()}
        feats = _adapted_features(encoder, adapters, part)
        logits = ops.dense(feats, probe.params["probe/w"], probe.params["probe/b"])
        ce = ops.softmax_cross_entropy(logits, train.labels[batch_idx])
        return ops.add(ce, _l2(trainable, cfg.l2))

    def predict(arrays: SegmentArrays) -> np.ndarray:
        preds = []
        for lo in range(0, arrays.n, 256):
            part = {m: arr[lo : lo + 256] for m, arr in arrays.signals.items()}
            feats = _adapted_features(encoder, adapters, part)
            logits = ops.dense(feats, probe.params["probe/w"], probe.params["probe/b"])
            preds.append(logits.data.argmax(axis=1))
        return np.concatenate(preds)

    opt = AdamState(trainable)
    best_f1, best_state, stale = -1.0, {k: p.data.copy() for k, p in trainable.items()}, 0
    for epoch in range(cfg.max_epochs):
        train_epochs(
            loss_fn, trainable, opt, AdamConfig(lr=cfg.lr), train.n, 1, cfg.batch, cfg.seed, epoch_base=epoch
        )
        val_f1 = weighted_f1(confusion_matrix(val.labels, predict(val), n_classes))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_state = {k: p.data.copy() for k, p in trainable.items()}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for name, p in trainable.items():
        p.data = best_state[name].copy()
    f1, kappa = score_predictions(test.labels, predict(test), n_classes)
    if state_checksum(encoder.state_dict()) != before:
        raise RuntimeError("adapter probe modified the frozen encoder")
    report = ProtocolReport(
        "transfer_frozen_probe",
        config={**asdict(cfg), "adapter": True, "best_val_f1": best_f1, "encoder_checksum": before},
    )
    report.add("probe", "run0", f1, kappa)
    return report


def _l2(params: Dict[str, Parameter], rate: float):
    from .losses import l2_penalty

    return l2_penalty(params, rate)


# ---------------------------------------------------------------------------
# cross-validation


def loso_folds(subjects: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray, str]]:
    """One fold per subject: (train indices, test indices, tag)."""
    subjects = np.asarray(subjects)
    ids = np.unique(subjects)
    if len(ids) < 2:
        raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {len(ids)}")
    folds = []
    for sid in ids:
        test = np.flatnonzero(subjects == sid)
        trainset = np.flatnonzero(subjects != sid)
        folds.append((trainset, test, f"subject{int(sid)}"))
    return folds


def stratified_folds(labels: np.ndarray, k: int = 10, seed: int = 0) -> List[Tuple[np.ndarray, np.ndarray, str]]:
    """k folds with per-class counts balanced within one segment."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need >= 2 folds")
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < k:
        raise ValueError(f"smallest class has {counts.min()} segments, cannot stratify into {k} folds")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(labels), dtype=np.int64)
    for cls in classes:
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        assignment[idx] = np.arange(len(idx)) % k
    folds = []
    for f in range(k):
        test = np.flatnonzero(assignment == f)
        trainset = np.flatnonzero(assignment != f)
        folds.append((trainset, test, f"fold{f}"))
    return folds


def _stratified_holdout(labels: np.ndarray, frac: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class split keeping at least one segment on each side."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    hold, keep = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_hold = max(1, int(round(len(idx) * frac))) if len(idx) > 1 else 0
        n_hold = min(n_hold, len(idx) - 1)
        hold.append(idx[:n_hold])
        keep.append(idx[n_hold:])
    return np.sort(np.concatenate(keep)), np.sort(np.concatenate(hold))


def make_pipeline(
    kind: str,
    n_classes: int,
    settings: TrainSettings = TrainSettings(),
    pretrain_epochs: int = 10,
    pretrain_batch: int = 24,
    probe_cfg: ProbeConfig = ProbeConfig(),
    supervised_epochs: int = 10,
) -> Callable[[SegmentArrays, SegmentArrays, int], Tuple[float, float]]:
    """Fold pipelines: 'sscl' (pretrain+probe), 'random' (untrained encoder
    probe), 'supervised' (end-to-end baseline)."""
    if kind not in ("sscl", "random", "supervised"):
        raise ValueError(f"unknown pipeline {kind!r}")

    def run(fold_train: SegmentArrays, fold_test: SegmentArrays, fold_seed: int) -> Tuple[float, float]:
        if kind == "supervised":
            model, _ = train_supervised(
                fold_train, n_classes, settings=settings, epochs=supervised_epochs, batch=pretrain_batch, seed=fold_seed
            )
            pred = _predict_supervised(model, fold_test)
            return score_predictions(fold_test.labels, pred, n_classes)
        if kind == "sscl":
            encoder, _ = pretrain_sscl(
                fold_train, settings, epochs=pretrain_epochs, batch=pretrain_batch, seed=fold_seed
            )
        else:
            channels, window, scal_shape = model_spec_from_arrays(fold_train)
            from .scn import build_scn

            encoder = build_scn(channels, window, scal_shape, seed=fold_seed, arch=settings.resolved_arch())
        keep_idx, hold_idx = _stratified_holdout(fold_train.labels, 0.2, fold_seed)
        cfg = replace(probe_cfg, seed=fold_seed)
        report = linear_probe(
            encoder, fold_train.take(keep_idx), fold_train.take(hold_idx), fold_test, n_classes, cfg
        )
        run0 = report.results[0]
        return run0.f1, run0.kappa

    return run


def cross_validate(
    arrays: SegmentArrays,
    scheme: str,
    pipeline: Callable[[SegmentArrays, SegmentArrays, int], Tuple[float, float]],
    seed: int = 0,
    k: int = 10,
) -> ProtocolReport:
    """Run the pipeline per fold; scheme is 'loso' or 'stratified'."""
    if scheme == "loso":
        folds = loso_folds(arrays.subjects)
    elif scheme == "stratified":
        folds = stratified_folds(arrays.labels, k=k, seed=seed)
    else:
        raise ValueError(f"unknown scheme {scheme!r} (use 'loso' or 'stratified')")
    report = ProtocolReport(f"cross_validate_{scheme}", config={"scheme": scheme, "k": k, "seed": seed})
    for i, (train_idx, test_idx, tag) in enumerate(folds):
        fold_seed = int(derive_rng(seed, "fold", i).integers(0, 2**31 - 1))
        f1, kappa = pipeline(arrays.take(train_idx), arrays.take(test_idx), fold_seed)
        report.add(scheme, tag, f1, kappa)
    if len(report.results) != len(folds):
        raise RuntimeError("fold count mismatch in report")
    return report
