"""Dataset ingestion, synthetic generation, splitting, and pair building.

On-disk layout: a JSON manifest describing modalities and subjects, plus
one binary blob per subject. Blob format, all little-endian:

    magic "MSD1"
    u32 modality_count
    per modality: u32 name_len, name bytes (UTF-8), u32 channels,
                  u32 samples, f32 data (samples x channels, row-major)
    u32 label_count, i32 labels

label_count may be 0 (unlabeled), 1 (one label for the whole recording),
equal to the sample count (per-sample labels), or samples // window
(one label per non-overlapping window, expanded to per-sample on load).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .preprocess import MultiSensorSegment, RawRecording, segment
from .wavelet import WaveletConfig, scalogram

BLOB_MAGIC = b"MSD1"


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ModalitySpec:
    name: str
    channels: int
    sample_rate_hz: float
    window: int
    overlap: float


@dataclass
class SubjectEntry:
    subject_id: int
    path: str


@dataclass
class DatasetManifest:
    name: str
    modalities: List[ModalitySpec]
    label_names: List[str]
    subjects: List[SubjectEntry]

    def __post_init__(self):
        if len(self.label_names) < 2:
            raise ValueError(f"need >= 2 output classes, got {len(self.label_names)}")
        windows = {m.window for m in self.modalities}
        if len(windows) != 1:
            raise ValueError(f"modalities disagree on window length: {windows}")

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    @property
    def window(self) -> int:
        return self.modalities[0].window

    @property
    def overlap(self) -> float:
        return self.modalities[0].overlap


def write_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "name": manifest.name,
        "modalities": [
            {
                "name": m.name,
                "channels": m.channels,
                "sample_rate_hz": m.sample_rate_hz,
                "window": m.window,
                "overlap": m.overlap,
            }
            for m in manifest.modalities
        ],
        "label_names": manifest.label_names,
        "subjects": [{"id": s.subject_id, "path": s.path} for s in manifest.subjects],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"manifest {path} is not valid JSON: {e}")
    for key in ("name", "modalities", "label_names", "subjects"):
        if key not in doc:
            raise ValueError(f"manifest {path} missing field {key!r}")
    mods = [
        ModalitySpec(m["name"], int(m["channels"]), float(m["sample_rate_hz"]), int(m["window"]), float(m["overlap"]))
        for m in doc["modalities"]
    ]
    subjects = [SubjectEntry(int(s["id"]), s["path"]) for s in doc["subjects"]]
    return DatasetManifest(doc["name"], mods, list(doc["label_names"]), subjects)


# ---------------------------------------------------------------------------
# subject blobs


def write_blob(path, recording: RawRecording) -> None:
    parts = [BLOB_MAGIC, struct.pack("<I", len(recording.modalities))]
    for name, arr in recording.modalities.items():
        encoded = name.encode("utf-8")
        samples, channels = arr.shape
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<II", channels, samples))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if recording.labels is not None:
        labels = np.asarray(recording.labels, dtype="<i4")
    elif recording.recording_label is not None:
        labels = np.asarray([recording.recording_label], dtype="<i4")
    else:
        labels = np.zeros(0, dtype="<i4")
    parts.append(struct.pack("<I", labels.size))
    parts.append(labels.tobytes())
    Path(path).write_bytes(b"".join(parts))


class BlobFormatError(ValueError):
    pass


def read_blob(path) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Raw blob contents: modality arrays plus the stored label vector."""
    path = Path(path)
    buf = path.read_bytes()
    view = memoryview(buf)
    off = 0

    def take(n: int, what: str):
        nonlocal off
        if off + n > len(buf):
            raise BlobFormatError(f"{path.name}: truncated while reading {what}")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != BLOB_MAGIC:
        raise BlobFormatError(f"{path.name}: bad magic, not a subject blob")
    (n_mod,) = struct.unpack("<I", take(4, "modality count"))
    mods: Dict[str, np.ndarray] = {}
    for i in range(n_mod):
        (name_len,) = struct.unpack("<I", take(4, f"modality {i} name length"))
        name = bytes(take(name_len, f"modality {i} name")).decode("utf-8")
        channels, samples = struct.unpack("<II", take(8, f"modality {name!r} shape"))
        data = np.frombuffer(take(4 * channels * samples, f"modality {name!r} data"), dtype="<f4")
        mods[name] = data.reshape(samples, channels).copy()
    (n_labels,) = struct.unpack("<I", take(4, "label count"))
    labels = np.frombuffer(take(4 * n_labels, "labels"), dtype="<i4").copy()
    if off != len(buf):
        raise BlobFormatError(f"{path.name}: {len(buf) - off} trailing bytes")
    return mods, labels


def load_dataset(manifest_path) -> Tuple[List[RawRecording], DatasetManifest]:
    """Materialize every subject recording declared by a manifest."""
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    recordings = []
    for entry in manifest.subjects:
        blob_path = base / entry.path
        if not blob_path.exists():
            raise FileNotFoundError(f"subject {entry.subject_id}: missing blob {blob_path}")
        try:
            mods, labels = read_blob(blob_path)
        except BlobFormatError as e:
            raise BlobFormatError(f"subject {entry.subject_id}: {e}")
        for spec in manifest.modalities:
            if spec.name not in mods:
                raise ValueError(f"subject {entry.subject_id}: modality {spec.name!r} absent from blob")
            got = mods[spec.name].shape[1]
            if got != spec.channels:
                raise ValueError(
                    f"subject {entry.subject_id}: modality {spec.name!r} has {got} channels, "
                    f"manifest declares {spec.channels}"
                )
        unknown = set(mods) - {m.name for m in manifest.modalities}
        if unknown:
            raise ValueError(f"subject {entry.subject_id}: unknown modalities {sorted(unknown)}")
        samples = next(iter(mods.values())).shape[0]
        per_sample: Optional[np.ndarray] = None
        rec_label: Optional[int] = None
        if labels.size == samples:
            per_sample = labels.astype(np.int64)
        elif labels.size == 1:
            rec_label = int(labels[0])
        elif labels.size == samples // manifest.window and labels.size > 0:
            per_sample = np.repeat(labels.astype(np.int64), manifest.window)
            if per_sample.size < samples:
                pad = np.full(samples - per_sample.size, labels[-1], dtype=np.int64)
                per_sample = np.concatenate([per_sample, pad])
        elif labels.size != 0:
            raise ValueError(
                f"subject {entry.subject_id}: {labels.size} labels do not match "
                f"{samples} samples (window {manifest.window})"
            )
        recordings.append(
            RawRecording(
                mods,
                manifest.modalities[0].sample_rate_hz,
                entry.subject_id,
                labels=per_sample,
                recording_label=rec_label,
            )
        )
    return recordings, manifest


# ---------------------------------------------------------------------------
# splitting and sharding


def split_by_subject(
    subject_ids: Sequence[int],
    train_frac: float = 0.7,
    val_frac_of_train: float = 0.2,
    seed: int = 0,
) -> Tuple[List[int], List[int], List[int]]:
    """Subject-disjoint (train, val, test) id lists.

    Fractions round to the nearest subject count; train and test keep at
    least one subject each, validation is carved out of the training pool.
    """
    ids = sorted(int(s) for s in subject_ids)
    n = len(ids)
    if n < 3:
        raise ValueError(f"need >= 3 subjects to split, got {n}")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(n)]
    n_pool = int(round(n * train_frac))
    n_pool = min(max(n_pool, 1), n - 1)
    pool, test = perm[:n_pool], perm[n_pool:]
    n_val = int(round(len(pool) * val_frac_of_train))
    n_val = min(n_val, len(pool) - 1)
    val, train = pool[:n_val], pool[n_val:]
    return sorted(train), sorted(val), sorted(test)


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray

    @property
    def size(self) -> int:
        return len(self.indices)


def partition_clients(n_segments: int, n_clients: int, seed: int = 0) -> List[ClientShard]:
    """Random permutation chopped into near-equal contiguous shards."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_clients > n_segments:
        raise ValueError(f"more clients ({n_clients}) than segments ({n_segments})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_segments)
    return [ClientShard(c, chunk) for c, chunk in enumerate(np.array_split(perm, n_clients))]


def few_shot_sample(labels: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Exactly k indices per class, sampled without replacement."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picks = []
    for cls in np.unique(labels):
        pool = np.flatnonzero(labels == cls)
        if len(pool) < k:
            raise ValueError(f"class {cls} has only {len(pool)} instances, need {k}")
        picks.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(picks))


# ---------------------------------------------------------------------------
# packed arrays and pretext pairs


@dataclass
class SegmentArrays:
    """Column-packed segments ready for batched training."""

    signals: Dict[str, np.ndarray]  # modality -> (n, window, channels)
    scalograms: Dict[str, np.ndarray]  # modality -> (n, h, w, channels)
    labels: np.ndarray  # (n,), -1 where unlabeled
    subjects: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return len(self.labels)

    def take(self, indices: np.ndarray) -> "SegmentArrays":
        return SegmentArrays(
            {k: v[indices] for k, v in self.signals.items()},
            {k: v[indices] for k, v in self.scalograms.items()},
            self.labels[indices],
            self.subjects[indices],
        )


def build_arrays(
    segments: List[MultiSensorSegment],
    wavelet_cfg: WaveletConfig,
    scalogram_width: int,
    log_power: bool = True,
) -> SegmentArrays:
    """Pack segments and precompute their scalograms.

    log1p compresses the squared-magnitude dynamic range before the values
    reach the 2D tower; disable to keep raw power.
    """
    if not segments:
        raise ValueError("no segments to pack")
    names = list(segments[0].modalities)
    signals = {
        name: np.stack([s.modalities[name] for s in segments]).astype(np.float32) for name in names
    }
    scalograms = {}
    shape = (wavelet_cfg.n_scales, scalogram_width)
    for name in names:
        planes = [scalogram(s.modalities[name], wavelet_cfg, shape) for s in segments]
        arr = np.stack(planes).astype(np.float32)
        if log_power:
            arr = np.log1p(arr)
        scalograms[name] = arr
    labels = np.array([-1 if s.label is None else int(s.label) for s in segments], dtype=np.int64)
    subjects = np.array([s.subject_id for s in segments], dtype=np.int64)
    return SegmentArrays(signals, scalograms, labels, subjects)


@dataclass
class ScalogramNormStats:
    mean: Dict[str, np.ndarray]
    std: Dict[str, np.ndarray]


def scalogram_norm_stats(arrays: SegmentArrays) -> ScalogramNormStats:
    """Per-modality, per-channel statistics over the training arrays."""
    mean = {}
    std = {}
    for name, arr in arrays.scalograms.items():
        mean[name] = arr.mean(axis=(0, 1, 2))
        std[name] = arr.std(axis=(0, 1, 2))
    return ScalogramNormStats(mean, std)


def normalize_scalograms(arrays: SegmentArrays, stats: ScalogramNormStats) -> SegmentArrays:
    scal = {}
    for name, arr in arrays.scalograms.items():
        scal[name] = ((arr - stats.mean[name]) / np.maximum(stats.std[name], 1e-8)).astype(np.float32)
    return SegmentArrays(arrays.signals, scal, arrays.labels, arrays.subjects)


@dataclass
class PairBatch:
    """Pretext pairs: raw-signal index, scalogram index, correspondence bit."""

    signal_idx: np.ndarray
    scalogram_idx: np.ndarray
    y: np.ndarray  # 1.0 where the scalogram belongs to the signal

    def __len__(self) -> int:
        return len(self.y)


def make_pairs(batch_idx: np.ndarray, pool_size: int, rng: np.random.Generator) -> PairBatch:
    """One positive and one out-of-batch negative per segment, shuffled.

    ``pool_size`` is the size of the candidate pool (the training set);
    negatives are drawn uniformly, with replacement, from pool indices not
    present in the current batch. Class labels are never consulted.
    """
    batch_idx = np.asarray(batch_idx)
    m = len(batch_idx)
    in_batch = np.zeros(pool_size, dtype=bool)
    in_batch[batch_idx] = True
    candidates = np.flatnonzero(~in_batch)
    if candidates.size == 0:
        raise ValueError(f"pool of {pool_size} leaves no out-of-batch negatives for batch of {m}")
    neg = rng.choice(candidates, size=m, replace=True)
    signal_idx = np.concatenate([batch_idx, batch_idx])
    scalogram_idx = np.concatenate([batch_idx, neg])
    y = np.concatenate([np.ones(m, dtype=np.float32), np.zeros(m, dtype=np.float32)])
    order = rng.permutation(2 * m)
    return PairBatch(signal_idx[order], scalogram_idx[order], y[order])


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass
class SyntheticConfig:
    """Band-limited multi-class generator at desk scale.

    Each class occupies a distinct frequency band per modality; subjects
    add gain, DC offset, and noise, so class identity is carried by
    frequency content rather than amplitude.
    """

    n_classes: int = 4
    n_subjects: int = 12
    segments_per_subject: int = 20
    window: int = 128
    channels: int = 2
    modalities: Tuple[str, ...] = ("acc", "gyro")
    sample_rate_hz: float = 32.0
    noise_std: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.n_classes}")
        if self.n_subjects < 3:
            raise ValueError(f"need >= 3 subjects, got {self.n_subjects}")


def _class_frequencies(cfg: SyntheticConfig) -> Dict[str, np.ndarray]:
    """Class-band centres in cycles/sample, log-spaced inside the CWT grid."""
    freqs = {}
    for i, name in enumerate(cfg.modalities):
        lo, hi = 0.035, 0.21
        base = np.geomspace(lo, hi, cfg.n_classes)
        # Offset the grid per modality so streams are correlated, not copies.
        freqs[name] = base * (1.0 + 0.12 * i)
    return freqs


def generate_synthetic(cfg: SyntheticConfig) -> Tuple[List[RawRecording], DatasetManifest]:
    """Labeled multi-subject recordings with exact class balance per subject."""
    rng = np.random.default_rng(cfg.seed)
    freqs = _class_frequencies(cfg)
    per_class = cfg.segments_per_subject // cfg.n_classes
    n_segments = per_class * cfg.n_classes
    if n_segments == 0:
        raise ValueError("segments_per_subject smaller than class count")
    recordings = []
    for subject in range(cfg.n_subjects):
        gain = rng.uniform(0.7, 1.3)
        offset = rng.uniform(-0.5, 0.5)
        class_seq = np.repeat(np.arange(cfg.n_classes), per_class)
        rng.shuffle(class_seq)
        mods = {name: np.empty((n_segments * cfg.window, cfg.channels), dtype=np.float32) for name in cfg.modalities}
        labels = np.repeat(class_seq, cfg.window).astype(np.int64)
        t = np.arange(cfg.window)
        for si, cls in enumerate(class_seq):
            sl = slice(si * cfg.window, (si + 1) * cfg.window)
            for name in cfg.modalities:
                f0 = freqs[name][cls]
                block = np.empty((cfg.window, cfg.channels), dtype=np.float64)
                for ch in range(cfg.channels):
                    f = f0 * (1.0 + rng.uniform(-0.06, 0.06))
                    phase = rng.uniform(0, 2 * np.pi)
                    amp = rng.uniform(0.8, 1.2)
                    wave = amp * np.sin(2 * np.pi * f * t + phase)
                    # A weak second tone one octave up keeps the band textured.
                    wave += 0.3 * amp * np.sin(2 * np.pi * min(2 * f, 0.24) * t + rng.uniform(0, 2 * np.pi))
                    block[:, ch] = gain * wave + offset
                block += rng.normal(0.0, cfg.noise_std, size=block.shape)
                mods[name][sl] = block.astype(np.float32)
        recordings.append(RawRecording(mods, cfg.sample_rate_hz, subject, labels=labels))
    manifest = DatasetManifest(
        name="synthetic",
        modalities=[
            ModalitySpec(name, cfg.channels, cfg.sample_rate_hz, cfg.window, 0.0) for name in cfg.modalities
        ],
        label_names=[f"class_{k}" for k in range(cfg.n_classes)],
        subjects=[SubjectEntry(s, f"subject_{s:03d}.msd") for s in range(cfg.n_subjects)],
    )
    return recordings, manifest


def write_synthetic(cfg: SyntheticConfig, out_dir) -> Path:
    """Generate and persist a synthetic dataset; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recordings, manifest = generate_synthetic(cfg)
    for rec, entry in zip(recordings, manifest.subjects):
        write_blob(out / entry.path, rec)
    manifest_path = out / "manifest.json"
    write_manifest(manifest, manifest_path)
    return manifest_path


def segment_dataset(recordings: List[RawRecording], manifest: DatasetManifest) -> List[MultiSensorSegment]:
    """Window every recording with the manifest's segmentation settings."""
    segments: List[MultiSensorSegment] = []
    for rec in recordings:
        segments.extend(segment(rec, manifest.window, manifest.overlap))
    return segments


def frequency_oracle_accuracy(
    train: SegmentArrays, test: SegmentArrays, modality: Optional[str] = None
) -> float:
    """Nearest-centroid accuracy on normalized power spectra.

    A deliberately simple frequency-feature classifier: if it scores high,
    class identity is recoverable from spectral content alone.
    """
    if modality is None:
        modality = next(iter(train.signals))

    def features(arrays: SegmentArrays) -> np.ndarray:
        sig = arrays.signals[modality].astype(np.float64)
        sig = sig - sig.mean(axis=1, keepdims=True)
        spec = np.abs(np.fft.rfft(sig, axis=1)) ** 2
        spec = spec.mean(axis=2)
        norm = spec.sum(axis=1, keepdims=True)
        return spec / np.maximum(norm, 1e-12)

    f_train, f_test = features(train), features(test)
    classes = np.unique(train.labels[train.labels >= 0])
    centroids = np.stack([f_train[train.labels == c].mean(axis=0) for c in classes])
    d = ((f_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = classes[d.argmin(axis=1)]
    return float((pred == test.labels).mean())
