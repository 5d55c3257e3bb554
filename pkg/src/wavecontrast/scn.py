"""Dual-stream scalogram-signal network and its baseline variants.

The signal tower applies per-modality 1D convolutions (kernels 10, 8, 6;
maps 32, 64, 96; pool 2 after the first two), concatenates modality
features channel-wise, and fuses them with a kernel-4 conv producing 128
maps. The scalogram tower mirrors this in 2D (kernels 5, 4, 3; fusion
3x3). Each tower carries a pretext head (conv 128 maps, then a 256-unit
dense) used only during contrastive pretraining. Mish activates every
layer except final dense outputs; dropout follows every activated layer.

Downstream consumers read the encoder tap: the fusion map global-average
pooled to a 128-d vector. The projection tap (head output, 256-d) exists
for representation-quality comparisons. Heads are dead weight afterwards.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .engine import Parameter, Tensor
from .seeds import derive_rng


@dataclass(frozen=True)
class ScnArchitecture:
    signal_kernels: Tuple[int, ...] = (10, 8, 6)
    signal_maps: Tuple[int, ...] = (32, 64, 96)
    signal_fusion_kernel: int = 4
    scalogram_kernels: Tuple[int, ...] = (5, 4, 3)
    scalogram_maps: Tuple[int, ...] = (32, 64, 96)
    scalogram_fusion_kernel: int = 3
    fusion_maps: int = 128
    head_conv_maps: int = 128
    head_conv_kernel: int = 3
    embedding_dim: int = 256
    pool_window: int = 2
    pools_after_first: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        if len(self.signal_kernels) != len(self.signal_maps):
            raise ValueError("signal kernel/map lists differ in length")
        if len(self.scalogram_kernels) != len(self.scalogram_maps):
            raise ValueError("scalogram kernel/map lists differ in length")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate {self.dropout_rate} out of range")

    @property
    def pool_factor(self) -> int:
        return self.pool_window ** self.pools_after_first


def _glorot(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ScnModel:
    """Parameter container plus forward passes for every variant.

    Which parts exist depends on the builder: the contrastive model owns
    both towers and heads, the supervised baseline a signal tower and a
    classifier, the autoencoder a signal tower and a mirrored decoder.
    """

    def __init__(
        self,
        modality_channels: Dict[str, int],
        window: int,
        scalogram_shape: Optional[Tuple[int, int]] = None,
        arch: ScnArchitecture = ScnArchitecture(),
        n_classes: Optional[int] = None,
        with_signal_head: bool = False,
        with_scalogram_tower: bool = False,
        with_decoder: bool = False,
        seed: int = 0,
        dtype=np.float32,
    ):
        if not modality_channels:
            raise ValueError("need at least one modality")
        min_window = max(max(arch.signal_kernels), arch.pool_factor * arch.signal_fusion_kernel)
        if window < min_window:
            raise ValueError(f"window {window} shorter than the receptive field (need >= {min_window})")
        if with_scalogram_tower:
            if scalogram_shape is None:
                raise ValueError("scalogram tower requires a scalogram shape")
            min_plane = arch.pool_factor * arch.scalogram_fusion_kernel
            h, w = scalogram_shape
            if h < min_plane or w < min_plane:
                raise ValueError(
                    f"scalogram shape {scalogram_shape} shorter than the receptive field (need >= {min_plane})"
                )
        if with_decoder and window % arch.pool_factor != 0:
            raise ValueError(f"decoder needs window divisible by {arch.pool_factor}, got {window}")
        if n_classes is not None and n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {n_classes}")
        self.arch = arch
        self.modalities = dict(sorted(modality_channels.items()))
        self.window = window
        self.scalogram_shape = scalogram_shape
        self.n_classes = n_classes
        self.with_signal_head = with_signal_head
        self.with_scalogram_tower = with_scalogram_tower
        self.with_decoder = with_decoder
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.params: Dict[str, Parameter] = {}
        self._build(derive_rng(seed, "init"))

    # -- construction -----------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def _add_conv1d(self, rng, name: str, k: int, cin: int, cout: int) -> None:
        self._add(f"{name}/w", _glorot(rng, (k, cin, cout), k * cin, k * cout, self.dtype))
        self._add(f"{name}/b", np.zeros(cout, dtype=self.dtype))

    def _add_conv2d(self, rng, name: str, k: int, cin: int, cout: int) -> None:
        self._add(f"{name}/w", _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout, self.dtype))
        self._add(f"{name}/b", np.zeros(cout, dtype=self.dtype))

    def _add_dense(self, rng, name: str, n: int, m: int) -> None:
        self._add(f"{name}/w", _glorot(rng, (n, m), n, m, self.dtype))
        self._add(f"{name}/b", np.zeros(m, dtype=self.dtype))

    def _build(self, rng) -> None:
        a = self.arch
        for mod, channels in self.modalities.items():
            cin = channels
            for i, (k, maps) in enumerate(zip(a.signal_kernels, a.signal_maps)):
                self._add_conv1d(rng, f"sig/{mod}/conv{i}", k, cin, maps)
                cin = maps
        self._add_conv1d(rng, "sig/fusion", a.signal_fusion_kernel, a.signal_maps[-1] * len(self.modalities), a.fusion_maps)
        if self.with_signal_head:
            self._add_conv1d(rng, "sig/head/conv", a.head_conv_kernel, a.fusion_maps, a.head_conv_maps)
            self._add_dense(rng, "sig/head/dense", a.head_conv_maps, a.embedding_dim)
        if self.with_scalogram_tower:
            for mod, channels in self.modalities.items():
                cin = channels
                for i, (k, maps) in enumerate(zip(a.scalogram_kernels, a.scalogram_maps)):
                    self._add_conv2d(rng, f"scl/{mod}/conv{i}", k, cin, maps)
                    cin = maps
            self._add_conv2d(rng, "scl/fusion", a.scalogram_fusion_kernel, a.scalogram_maps[-1] * len(self.modalities), a.fusion_maps)
            self._add_conv2d(rng, "scl/head/conv", a.head_conv_kernel, a.fusion_maps, a.head_conv_maps)
            self._add_dense(rng, "scl/head/dense", a.head_conv_maps, a.embedding_dim)
        if self.n_classes is not None:
            self._add_dense(rng, "clf", a.fusion_maps, self.n_classes)
        if self.with_decoder:
            total = sum(self.modalities.values())
            rev_maps = tuple(reversed(a.signal_maps))
            rev_kernels = tuple(reversed(a.signal_kernels))
            cin = a.fusion_maps
            self._add_conv1d(rng, "dec/conv0", a.signal_fusion_kernel, cin, rev_maps[0])
            cin = rev_maps[0]
            for i in range(1, len(rev_maps)):
                self._add_conv1d(rng, f"dec/conv{i}", rev_kernels[i - 1], cin, rev_maps[i])
                cin = rev_maps[i]
            self._add_conv1d(rng, "dec/out", rev_kernels[-1], cin, total)

    # -- parameter plumbing ------------------------------------------------

    def param_list(self) -> List[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ValueError(f"state missing parameters: {sorted(missing)[:4]}...")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def architecture_hash(self) -> str:
        desc = [repr(self.arch), repr(sorted(self.modalities.items())), str(self.window),
                str(self.scalogram_shape), str(self.n_classes)]
        desc += [f"{name}:{p.data.shape}" for name, p in self.params.items()]
        return hashlib.sha256("|".join(desc).encode()).hexdigest()[:16]

    # -- forward passes ----------------------------------------------------

    def _as_tensor(self, arr) -> Tensor:
        if isinstance(arr, Tensor):
            return arr
        return Tensor(np.asarray(arr, dtype=self.dtype))

    def _activate(self, h: Tensor, rng, training: bool) -> Tensor:
        h = ops.mish(h)
        return ops.dropout(h, self.arch.dropout_rate, rng=rng, training=training)

    def _signal_tower(self, signals: Dict[str, np.ndarray], rng=None, training: bool = False) -> Tensor:
        a = self.arch
        streams = []
        for mod in self.modalities:
            h = self._as_tensor(signals[mod])
            for i in range(len(a.signal_kernels)):
                h = ops.conv1d(h, self.params[f"sig/{mod}/conv{i}/w"], self.params[f"sig/{mod}/conv{i}/b"])
                h = ops.mish(h)
                if i < a.pools_after_first:
                    h = ops.max_pool(h, a.pool_window, dims=1)
                h = ops.dropout(h, a.dropout_rate, rng=rng, training=training)
            streams.append(h)
        merged = streams[0] if len(streams) == 1 else ops.concat(streams, axis=-1)
        fused = ops.conv1d(merged, self.params["sig/fusion/w"], self.params["sig/fusion/b"])
        return self._activate(fused, rng, training)

    def _scalogram_tower(self, scalograms: Dict[str, np.ndarray], rng=None, training: bool = False) -> Tensor:
        if not self.with_scalogram_tower:
            raise ValueError("model was built without a scalogram tower")
        a = self.arch
        streams = []
        for mod in self.modalities:
            h = self._as_tensor(scalograms[mod])
            for i in range(len(a.scalogram_kernels)):
                h = ops.conv2d(h, self.params[f"scl/{mod}/conv{i}/w"], self.params[f"scl/{mod}/conv{i}/b"])
                h = ops.mish(h)
                if i < a.pools_after_first:
                    h = ops.max_pool(h, a.pool_window, dims=2)
                h = ops.dropout(h, a.dropout_rate, rng=rng, training=training)
            streams.append(h)
        merged = streams[0] if len(streams) == 1 else ops.concat(streams, axis=-1)
        fused = ops.conv2d(merged, self.params["scl/fusion/w"], self.params["scl/fusion/b"])
        return self._activate(fused, rng, training)

    def signal_embedding(self, signals, rng=None, training: bool = False) -> Tensor:
        """Pretext-head output of the signal tower, (batch, 256)."""
        if not self.with_signal_head:
            raise ValueError("model was built without a signal pretext head")
        h = self._signal_tower(signals, rng, training)
        h = ops.conv1d(h, self.params["sig/head/conv/w"], self.params["sig/head/conv/b"])
        h = self._activate(h, rng, training)
        pooled = ops.global_average_pool(h)
        return ops.dense(pooled, self.params["sig/head/dense/w"], self.params["sig/head/dense/b"])

    def scalogram_embedding(self, scalograms, rng=None, training: bool = False) -> Tensor:
        """Pretext-head output of the scalogram tower, (batch, 256)."""
        h = self._scalogram_tower(scalograms, rng, training)
        h = ops.conv2d(h, self.params["scl/head/conv/w"], self.params["scl/head/conv/b"])
        h = self._activate(h, rng, training)
        pooled = ops.global_average_pool(h)
        return ops.dense(pooled, self.params["scl/head/dense/w"], self.params["scl/head/dense/b"])

    def encoder_vector(self, signals, rng=None, training: bool = False) -> Tensor:
        """Downstream feature tap: fusion map pooled to (batch, 128)."""
        return ops.global_average_pool(self._signal_tower(signals, rng, training))

    def logits(self, signals, rng=None, training: bool = False) -> Tensor:
        if self.n_classes is None:
            raise ValueError("model was built without a classifier")
        feats = self.encoder_vector(signals, rng, training)
        return ops.dense(feats, self.params["clf/w"], self.params["clf/b"])

    def reconstruct(self, signals, rng=None, training: bool = False) -> Tensor:
        """Decode the fusion map back to the stacked raw segment."""
        if not self.with_decoder:
            raise ValueError("model was built without a decoder")
        a = self.arch
        h = self._signal_tower(signals, rng, training)
        n_stages = len(a.signal_maps)
        h = ops.conv1d(h, self.params["dec/conv0/w"], self.params["dec/conv0/b"])
        h = self._activate(h, rng, training)
        for i in range(1, n_stages):
            h = ops.upsample_nearest(h, a.pool_window, dims=1)
            h = ops.conv1d(h, self.params[f"dec/conv{i}/w"], self.params[f"dec/conv{i}/b"])
            h = self._activate(h, rng, training)
        return ops.conv1d(h, self.params["dec/out/w"], self.params["dec/out/b"])


def build_scn(
    modality_channels: Dict[str, int],
    window: int,
    scalogram_shape: Tuple[int, int],
    seed: int = 0,
    arch: ScnArchitecture = ScnArchitecture(),
    dtype=np.float32,
) -> ScnModel:
    """Both towers plus pretext heads, for contrastive pretraining."""
    return ScnModel(
        modality_channels,
        window,
        scalogram_shape,
        arch=arch,
        with_signal_head=True,
        with_scalogram_tower=True,
        seed=seed,
        dtype=dtype,
    )


def build_supervised(
    modality_channels: Dict[str, int],
    window: int,
    n_classes: int,
    seed: int = 0,
    arch: ScnArchitecture = ScnArchitecture(),
    dtype=np.float32,
) -> ScnModel:
    """Signal tower with a softmax classifier, trained end-to-end."""
    return ScnModel(
        modality_channels, window, arch=arch, n_classes=n_classes, seed=seed, dtype=dtype
    )


def build_autoencoder(
    modality_channels: Dict[str, int],
    window: int,
    seed: int = 0,
    arch: ScnArchitecture = ScnArchitecture(),
    dtype=np.float32,
) -> ScnModel:
    """Signal tower plus a mirrored upsampling decoder."""
    return ScnModel(
        modality_channels, window, arch=arch, with_decoder=True, seed=seed, dtype=dtype
    )


def stack_modalities(signals: Dict[str, np.ndarray]) -> np.ndarray:
    """Channel-concatenate modality arrays in the model's sorted order."""
    return np.concatenate([signals[k] for k in sorted(signals)], axis=-1)


def encoder_features(
    model: ScnModel,
    signals: Dict[str, np.ndarray],
    tap: str = "encoder",
    batch: int = 64,
) -> np.ndarray:
    # Modest batches keep the conv patch caches small during inference.
    """Inference-mode features for every segment, (n, 128) or (n, 256)."""
    if tap not in ("encoder", "projection"):
        raise ValueError(f"unknown tap {tap!r} (use 'encoder' or 'projection')")
    names = sorted(signals)
    n = len(signals[names[0]])
    chunks = []
    for lo in range(0, n, batch):
        part = {k: signals[k][lo : lo + batch] for k in names}
        if tap == "encoder":
            out = model.encoder_vector(part, training=False)
        else:
            out = model.signal_embedding(part, training=False)
        chunks.append(out.data)
    return np.concatenate(chunks, axis=0)
