"""Recording-level preprocessing: segmentation, normalization, decimation.

A recording holds one subject's synchronized modality streams. Labels may
be per-sample (majority vote decides each window's class) or a single
value for the whole recording (copied onto every window).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

STD_FLOOR = 1e-8


@dataclass
class RawRecording:
    """Synchronized per-modality sample streams for one subject."""

    modalities: Dict[str, np.ndarray]  # name -> (samples, channels)
    sample_rate_hz: float
    subject_id: int
    labels: Optional[np.ndarray] = None  # per-sample integer labels
    recording_label: Optional[int] = None  # one label for the whole stream

    def __post_init__(self):
        lengths = {name: arr.shape[0] for name, arr in self.modalities.items()}
        if len(set(lengths.values())) > 1:
            raise ValueError(f"modalities disagree on sample count: {lengths}")
        for name, arr in self.modalities.items():
            if arr.ndim != 2:
                raise ValueError(f"modality {name!r} must be (samples, channels), got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"modality {name!r} contains non-finite samples")
        if self.labels is not None and len(self.labels) != self.n_samples:
            raise ValueError(
                f"per-sample labels length {len(self.labels)} != sample count {self.n_samples}"
            )

    @property
    def n_samples(self) -> int:
        return next(iter(self.modalities.values())).shape[0]


@dataclass
class MultiSensorSegment:
    """One fixed-length window across all modalities."""

    modalities: Dict[str, np.ndarray]  # name -> (window, channels)
    subject_id: int
    label: Optional[int] = None


@dataclass
class NormStats:
    """Per-modality, per-channel mean/std (training split only)."""

    mean: Dict[str, np.ndarray] = field(default_factory=dict)
    std: Dict[str, np.ndarray] = field(default_factory=dict)


def _majority_label(window_labels: np.ndarray) -> int:
    # bincount argmax breaks ties toward the smaller label, deterministically.
    return int(np.bincount(window_labels.astype(np.int64)).argmax())


def segment(recording: RawRecording, window: int, overlap_fraction: float) -> List[MultiSensorSegment]:
    """Slice a recording into overlapping windows.

    Stride is window*(1-overlap) rounded down; a trailing partial window is
    dropped.
    """
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    n = recording.n_samples
    if window > n:
        raise ValueError(f"window {window} longer than recording ({n} samples)")
    stride = int(window * (1.0 - overlap_fraction))
    if stride < 1:
        raise ValueError(f"stride collapsed to zero (window {window}, overlap {overlap_fraction})")
    segments = []
    for start in range(0, n - window + 1, stride):
        mods = {name: arr[start : start + window] for name, arr in recording.modalities.items()}
        if recording.labels is not None:
            label = _majority_label(recording.labels[start : start + window])
        else:
            label = recording.recording_label
        segments.append(MultiSensorSegment(mods, recording.subject_id, label))
    return segments


def segment_starts(n_samples: int, window: int, overlap_fraction: float) -> np.ndarray:
    """Window start indices produced by :func:`segment` (for coverage checks)."""
    stride = int(window * (1.0 - overlap_fraction))
    return np.arange(0, n_samples - window + 1, stride)


def compute_norm_stats(segments: List[MultiSensorSegment]) -> NormStats:
    """Per-channel statistics pooled over every sample of every segment."""
    if not segments:
        raise ValueError("cannot compute statistics from zero segments")
    stats = NormStats()
    for name in segments[0].modalities:
        stacked = np.concatenate([s.modalities[name] for s in segments], axis=0)
        stats.mean[name] = stacked.mean(axis=0)
        stats.std[name] = stacked.std(axis=0)
    return stats


def znormalize(segments: List[MultiSensorSegment], stats: NormStats) -> List[MultiSensorSegment]:
    """(x - mean) / max(std, 1e-8) per channel, stats from the training split."""
    out = []
    for s in segments:
        mods = {}
        for name, arr in s.modalities.items():
            if name not in stats.mean:
                raise ValueError(f"no statistics for modality {name!r}")
            mean, std = stats.mean[name], stats.std[name]
            if arr.shape[1] != mean.shape[0]:
                raise ValueError(
                    f"modality {name!r} has {arr.shape[1]} channels, stats expect {mean.shape[0]}"
                )
            mods[name] = ((arr - mean) / np.maximum(std, STD_FLOOR)).astype(arr.dtype)
        out.append(MultiSensorSegment(mods, s.subject_id, s.label))
    return out


def subject_normalize(recording: RawRecording) -> RawRecording:
    """Z-normalize each channel using this subject's own statistics."""
    mods = {}
    for name, arr in recording.modalities.items():
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        mods[name] = ((arr - mean) / np.maximum(std, STD_FLOOR)).astype(arr.dtype)
    return RawRecording(
        mods,
        recording.sample_rate_hz,
        recording.subject_id,
        labels=recording.labels,
        recording_label=recording.recording_label,
    )


def downsample(recording: RawRecording, rate: int) -> RawRecording:
    """Keep every rate-th sample (plain decimation, no anti-alias filter)."""
    if rate < 1:
        raise ValueError(f"rate must be >= 1, got {rate}")
    if rate == 1:
        return recording
    mods = {name: arr[::rate] for name, arr in recording.modalities.items()}
    labels = recording.labels[::rate] if recording.labels is not None else None
    return RawRecording(
        mods,
        recording.sample_rate_hz / rate,
        recording.subject_id,
        labels=labels,
        recording_label=recording.recording_label,
    )
