"""Training loops: contrastive pretraining, supervised and autoencoder
baselines, and the linear probe head.

Central and federated training share one epoch loop. Every epoch's
randomness (batch order, negative sampling, dropout) comes from a stream
derived as (seed, "epoch", epoch_index, "client", client_id); the central
path is client 0, so the single-client federated degenerate case replays
centralized training exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import ops
from .data import SegmentArrays, make_pairs
from .engine import Parameter, Tape
from .losses import contrastive_loss, l2_penalty, pair_bce_loss
from .optim import AdamConfig, AdamState, adam_step
from .scn import (
    ScnArchitecture,
    ScnModel,
    build_autoencoder,
    build_scn,
    build_supervised,
    stack_modalities,
)
from .seeds import derive_rng


@dataclass(frozen=True)
class TrainSettings:
    """Optimizer and objective knobs shared by all training paths."""

    lr: float = 1e-4
    l2: float = 1e-4
    alpha: float = 1.0
    dropout: float = 0.1
    loss_kind: str = "contrastive"  # or "bce" for the pair-logit ablation
    arch: ScnArchitecture = ScnArchitecture()

    def resolved_arch(self) -> ScnArchitecture:
        return replace(self.arch, dropout_rate=self.dropout)


def model_spec_from_arrays(arrays: SegmentArrays) -> Tuple[Dict[str, int], int, Tuple[int, int]]:
    channels = {name: arr.shape[2] for name, arr in arrays.signals.items()}
    window = next(iter(arrays.signals.values())).shape[1]
    first_scal = next(iter(arrays.scalograms.values()))
    return channels, window, (first_scal.shape[1], first_scal.shape[2])


def iterate_batches(n: int, batch: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Shuffled index batches; a partial tail batch is kept."""
    perm = rng.permutation(n)
    for lo in range(0, n, batch):
        yield perm[lo : lo + batch]


def train_epochs(
    loss_fn: Callable[[np.ndarray, np.random.Generator], "ops.Tensor"],
    trainable: Dict[str, Parameter],
    opt_state: AdamState,
    adam_cfg: AdamConfig,
    n_items: int,
    epochs: int,
    batch: int,
    seed: int,
    epoch_base: int = 0,
    client_id: int = 0,
) -> List[float]:
    """Run epochs of Adam steps; returns per-epoch mean loss."""
    history = []
    for e in range(epochs):
        rng = derive_rng(seed, "epoch", epoch_base + e, "client", client_id)
        total, count = 0.0, 0
        for idx in iterate_batches(n_items, batch, rng):
            with Tape() as tape:
                loss = loss_fn(idx, rng)
                grads = tape.backward(loss, trainable.values())
            adam_step(trainable, grads, opt_state, adam_cfg)
            total += float(loss.data) * len(idx)
            count += len(idx)
        history.append(total / max(count, 1))
    return history


# ---------------------------------------------------------------------------
# objective loss builders


def sscl_loss_fn(model: ScnModel, arrays: SegmentArrays, settings: TrainSettings):
    """Pretext objective: correspondence pairs, margin loss, L2 term.

    Reads only signals and scalograms, never class labels.
    """

    def fn(batch_idx: np.ndarray, rng: np.random.Generator):
        pairs = make_pairs(batch_idx, arrays.n, rng)
        signals = {m: arr[pairs.signal_idx] for m, arr in arrays.signals.items()}
        scalos = {m: arr[pairs.scalogram_idx] for m, arr in arrays.scalograms.items()}
        zx = model.signal_embedding(signals, rng=rng, training=True)
        zs = model.scalogram_embedding(scalos, rng=rng, training=True)
        if settings.loss_kind == "contrastive":
            base = contrastive_loss(zx, zs, pairs.y, settings.alpha)
        elif settings.loss_kind == "bce":
            base = pair_bce_loss(zx, zs, pairs.y, settings.alpha)
        else:
            raise ValueError(f"unknown loss kind {settings.loss_kind!r}")
        return ops.add(base, l2_penalty(model.params, settings.l2))

    return fn


def supervised_loss_fn(
    model: ScnModel,
    arrays: SegmentArrays,
    settings: TrainSettings,
    trainable: Optional[Dict[str, Parameter]] = None,
):
    reg_params = trainable if trainable is not None else model.params
    if (arrays.labels < 0).any():
        raise ValueError("supervised training requires labels on every segment")

    def fn(batch_idx: np.ndarray, rng: np.random.Generator):
        signals = {m: arr[batch_idx] for m, arr in arrays.signals.items()}
        logits = model.logits(signals, rng=rng, training=True)
        ce = ops.softmax_cross_entropy(logits, arrays.labels[batch_idx])
        return ops.add(ce, l2_penalty(reg_params, settings.l2))

    return fn


def autoencoder_loss_fn(model: ScnModel, arrays: SegmentArrays, settings: TrainSettings):
    def fn(batch_idx: np.ndarray, rng: np.random.Generator):
        signals = {m: arr[batch_idx] for m, arr in arrays.signals.items()}
        recon = model.reconstruct(signals, rng=rng, training=True)
        target = stack_modalities(signals)
        mse = ops.mse_loss(recon, target)
        return ops.add(mse, l2_penalty(model.params, settings.l2))

    return fn


# ---------------------------------------------------------------------------
# central entry points


def pretrain_sscl(
    arrays: SegmentArrays,
    settings: TrainSettings = TrainSettings(),
    epochs: int = 30,
    batch: int = 24,
    seed: int = 0,
    progress: Optional[Callable[[int, float], None]] = None,
) -> Tuple[ScnModel, List[float]]:
    """Centralized contrastive pretraining; heads stay attached.

    Epochs run one at a time through the shared loop (bit-identical to a
    single multi-epoch call), so ``progress`` sees every epoch mean loss.
    """
    channels, window, scal_shape = model_spec_from_arrays(arrays)
    model = build_scn(channels, window, scal_shape, seed=seed, arch=settings.resolved_arch())
    opt = AdamState(model.params)
    adam = AdamConfig(lr=settings.lr)
    fn = sscl_loss_fn(model, arrays, settings)
    history: List[float] = []
    for e in range(epochs):
        history += train_epochs(fn, model.params, opt, adam, arrays.n, 1, batch, seed, epoch_base=e)
        if progress is not None:
            progress(e, history[-1])
    return model, history


def train_supervised(
    arrays: SegmentArrays,
    n_classes: int,
    settings: TrainSettings = TrainSettings(),
    epochs: int = 30,
    batch: int = 24,
    seed: int = 0,
    init_state: Optional[Dict[str, np.ndarray]] = None,
) -> Tuple[ScnModel, List[float]]:
    """End-to-end supervised training; optionally warm-started from a
    pretrained encoder state (classifier always starts fresh)."""
    channels, window, _ = model_spec_from_arrays(arrays)
    model = build_supervised(channels, window, n_classes, seed=seed, arch=settings.resolved_arch())
    if init_state is not None:
        transplant_encoder(model, init_state)
    opt = AdamState(model.params)
    adam = AdamConfig(lr=settings.lr)
    fn = supervised_loss_fn(model, arrays, settings)
    history = train_epochs(fn, model.params, opt, adam, arrays.n, epochs, batch, seed)
    return model, history


def train_autoencoder(
    arrays: SegmentArrays,
    settings: TrainSettings = TrainSettings(),
    epochs: int = 30,
    batch: int = 24,
    seed: int = 0,
) -> Tuple[ScnModel, List[float]]:
    """Reconstruction baseline over the same encoder topology."""
    channels, window, _ = model_spec_from_arrays(arrays)
    model = build_autoencoder(channels, window, seed=seed, arch=settings.resolved_arch())
    opt = AdamState(model.params)
    adam = AdamConfig(lr=settings.lr)
    fn = autoencoder_loss_fn(model, arrays, settings)
    history = train_epochs(fn, model.params, opt, adam, arrays.n, epochs, batch, seed)
    return model, history


def transplant_encoder(model: ScnModel, state: Dict[str, np.ndarray]) -> List[str]:
    """Copy shared signal-tower tensors from a saved state into a model.

    Pretext-head tensors absent from the target are ignored (they are
    discarded after pretraining); returns the copied names.
    """
    copied = []
    for name, p in model.params.items():
        if name.startswith("sig/") and not name.startswith("sig/head/") and name in state:
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"encoder tensor {name!r} shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
            copied.append(name)
    if not copied:
        raise ValueError("no encoder tensors were transplanted; incompatible state")
    return copied


# ---------------------------------------------------------------------------
# linear probe head


class LinearProbe:
    """Multinomial logistic regression over fixed feature vectors."""

    def __init__(self, dim: int, n_classes: int, seed: int = 0, dtype=np.float32):
        if n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {n_classes}")
        rng = derive_rng(seed, "probe-init")
        limit = np.sqrt(6.0 / (dim + n_classes))
        self.params: Dict[str, Parameter] = {
            "probe/w": Parameter("probe/w", rng.uniform(-limit, limit, (dim, n_classes)).astype(dtype)),
            "probe/b": Parameter("probe/b", np.zeros(n_classes, dtype=dtype)),
        }

    def logits(self, features: np.ndarray):
        x = features if isinstance(features, np.ndarray) else np.asarray(features)
        from .engine import Tensor

        return ops.dense(Tensor(x.astype(self.params["probe/w"].data.dtype)), self.params["probe/w"], self.params["probe/b"])

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.logits(features).data.argmax(axis=1)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.asarray(state[name], dtype=p.data.dtype).copy()


def probe_loss_fn(probe: LinearProbe, features: np.ndarray, labels: np.ndarray, l2: float):
    def fn(batch_idx: np.ndarray, rng: np.random.Generator):
        ce = ops.softmax_cross_entropy(probe.logits(features[batch_idx]), labels[batch_idx])
        return ops.add(ce, l2_penalty(probe.params, l2))

    return fn
