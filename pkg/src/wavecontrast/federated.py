"""Simulated synchronous federated training with weighted averaging.

Each round: sample n of C clients without replacement, train each for E
local epochs from the current global parameters (fresh optimizer state per
round), then average parameters weighted by shard size. Aggregation runs
in 64-bit accumulators over clients in ascending id order, so results are
independent of client execution interleaving.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import ClientShard, SegmentArrays
from .optim import AdamConfig, AdamState
from .scn import ScnModel, build_autoencoder, build_scn, build_supervised, encoder_features
from .seeds import derive_rng
from .training import (
    LinearProbe,
    TrainSettings,
    autoencoder_loss_fn,
    model_spec_from_arrays,
    probe_loss_fn,
    sscl_loss_fn,
    supervised_loss_fn,
    train_epochs,
)

OBJECTIVES = ("sscl", "supervised", "autoencoder", "linear_probe")


@dataclass(frozen=True)
class FederatedConfig:
    n_clients: int
    clients_per_round: int = 10
    rounds: int = 40
    local_epochs: int = 5
    local_batch: int = 12
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ValueError(
                f"need 1 <= clients_per_round <= n_clients, got {self.clients_per_round}/{self.n_clients}"
            )
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class RoundLog:
    round_index: int
    client_ids: List[int]
    client_losses: List[float]
    global_loss: float
    wall_time: float
    skipped: List[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "round": self.round_index,
            "clients": self.client_ids,
            "client_losses": self.client_losses,
            "global_loss": self.global_loss,
            "wall_time": self.wall_time,
            "skipped": self.skipped,
        }


def sample_clients(n_clients: int, n: int, seed: int, round_index: int) -> np.ndarray:
    """Uniform sample without replacement, deterministic per (seed, round)."""
    if n > n_clients:
        raise ValueError(f"cannot sample {n} of {n_clients} clients")
    rng = derive_rng(seed, "client-sample", round_index)
    return np.sort(rng.choice(n_clients, size=n, replace=False))


def fedavg_aggregate(
    client_params: Sequence[Dict[str, np.ndarray]],
    client_sizes: Sequence[int],
) -> Dict[str, np.ndarray]:
    """Size-weighted parameter mean, accumulated in float64, fixed order."""
    if not client_params:
        raise ValueError("nothing to aggregate")
    if len(client_params) != len(client_sizes):
        raise ValueError("parameter sets and sizes differ in count")
    names = list(client_params[0])
    name_set = set(names)
    for i, params in enumerate(client_params[1:], start=1):
        if set(params) != name_set:
            raise ValueError(f"client {i} parameter names differ from client 0")
    sizes = np.asarray(client_sizes, dtype=np.float64)
    if (sizes <= 0).any():
        raise ValueError("client sizes must be positive")
    total = sizes.sum()
    out: Dict[str, np.ndarray] = {}
    for name in names:
        shape = client_params[0][name].shape
        dtype = client_params[0][name].dtype
        acc = np.zeros(shape, dtype=np.float64)
        for params, size in zip(client_params, sizes):
            arr = params[name]
            if arr.shape != shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {shape}")
            acc += (size / total) * arr.astype(np.float64)
        out[name] = acc.astype(dtype)
    return out


def _build_model(objective: str, arrays: SegmentArrays, settings: TrainSettings, seed: int, n_classes):
    channels, window, scal_shape = model_spec_from_arrays(arrays)
    arch = settings.resolved_arch()
    if objective == "sscl":
        return build_scn(channels, window, scal_shape, seed=seed, arch=arch)
    if objective == "supervised":
        if n_classes is None:
            raise ValueError("supervised objective needs n_classes")
        return build_supervised(channels, window, n_classes, seed=seed, arch=arch)
    if objective == "autoencoder":
        return build_autoencoder(channels, window, seed=seed, arch=arch)
    raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")


def run_federated_training(
    objective: str,
    arrays: SegmentArrays,
    shards: List[ClientShard],
    config: FederatedConfig,
    settings: TrainSettings = TrainSettings(),
    n_classes: Optional[int] = None,
    encoder_state: Optional[Dict[str, np.ndarray]] = None,
    progress: Optional[Callable[[RoundLog], None]] = None,
) -> Tuple[Dict[str, np.ndarray], List[RoundLog], object]:
    """Full federated run; returns (global state, round logs, model).

    For the linear_probe objective the encoder is frozen: its parameters
    come from ``encoder_state``, are broadcast unchanged, and only the
    classifier head is trained and aggregated. The returned model is the
    trained probe in that case.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if len(shards) != config.n_clients:
        raise ValueError(f"{len(shards)} shards registered for {config.n_clients} clients")
    by_id = {s.client_id: s for s in shards}

    if objective == "linear_probe":
        if encoder_state is None:
            raise ValueError("linear_probe objective needs a frozen encoder state")
        if n_classes is None:
            raise ValueError("linear_probe objective needs n_classes")
        channels, window, _ = model_spec_from_arrays(arrays)
        encoder = ScnModel(channels, window, arch=settings.resolved_arch(), seed=config.seed)
        encoder.load_state({k: v for k, v in encoder_state.items() if k in encoder.params})
        features = encoder_features(encoder, arrays.signals, tap="encoder")
        worker = LinearProbe(features.shape[1], n_classes, seed=config.seed)
        global_state = worker.state_dict()

        def local_loss(local_idx):
            return probe_loss_fn(worker, features[local_idx], arrays.labels[local_idx], settings.l2)

        def load_worker(state):
            worker.load_state(state)

        trainable = worker.params
        result_model = worker
    else:
        worker = _build_model(objective, arrays, settings, config.seed, n_classes)
        global_state = worker.state_dict()

        def local_loss(local_idx):
            local = arrays.take(local_idx)
            if objective == "sscl":
                return sscl_loss_fn(worker, local, settings)
            if objective == "supervised":
                return supervised_loss_fn(worker, local, settings)
            return autoencoder_loss_fn(worker, local, settings)

        def load_worker(state):
            worker.load_state(state)

        trainable = worker.params
        result_model = worker

    adam = AdamConfig(lr=settings.lr)
    logs: List[RoundLog] = []
    for t in range(config.rounds):
        start = time.perf_counter()
        sampled = list(sample_clients(config.n_clients, config.clients_per_round, config.seed, t))
        skipped = [cid for cid in sampled if by_id[cid].size == 0]
        if skipped:
            active = [cid for cid in sampled if by_id[cid].size > 0]
            rng = derive_rng(config.seed, "client-resample", t)
            spare = [c for c in range(config.n_clients) if c not in sampled and by_id[c].size > 0]
            order = rng.permutation(len(spare))
            for j in order[: len(sampled) - len(active)]:
                active.append(int(spare[j]))
            sampled = sorted(active)
        client_states, client_sizes, client_losses = [], [], []
        for cid in sampled:
            shard = by_id[cid]
            local_idx = np.sort(shard.indices)
            load_worker(global_state)
            opt = AdamState(trainable)
            losses = train_epochs(
                local_loss(local_idx),
                trainable,
                opt,
                adam,
                len(local_idx),
                config.local_epochs,
                config.local_batch,
                config.seed,
                epoch_base=t * config.local_epochs,
                client_id=cid,
            )
            client_states.append({name: p.data.copy() for name, p in trainable.items()})
            client_sizes.append(shard.size)
            client_losses.append(losses[-1])
        new_trainable = fedavg_aggregate(client_states, client_sizes)
        global_state = dict(global_state)
        global_state.update(new_trainable)
        weights = np.asarray(client_sizes, dtype=np.float64)
        global_loss = float((np.asarray(client_losses) * weights).sum() / weights.sum())
        logs.append(
            RoundLog(t, [int(c) for c in sampled], [float(x) for x in client_losses], global_loss,
                     time.perf_counter() - start, skipped)
        )
        if progress is not None:
            progress(logs[-1])
    load_worker(global_state)
    return global_state, logs, result_model
