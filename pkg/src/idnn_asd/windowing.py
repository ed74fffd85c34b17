"""Sliding frame windows for the reconstruct / interpolate / predict regimes.

A window covers ``n`` consecutive spectrogram frames; consecutive windows
start one frame apart, so a T-frame spectrogram yields ``T - n + 1``
windows. Vectors are flattened frame-major: the M values of the first
frame, then the M values of the next, and so on.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

import numpy as np

from .dsp import Spectrogram

STD_FLOOR = 1e-8
_BLOB_MAGIC = b"WSET"
_BLOB_VERSION = 1


class Regime(enum.IntEnum):
    RECONSTRUCT_ALL = 0
    INTERPOLATE_CENTER = 1
    PREDICT_NEXT = 2

    def input_frames(self, n: int) -> list[int]:
        """Frame offsets (within a window) that feed the network."""
        if self is Regime.RECONSTRUCT_ALL:
            return list(range(n))
        return [i for i in range(n) if i != self.target_frames(n)[0]]

    def target_frames(self, n: int) -> list[int]:
        if self is Regime.RECONSTRUCT_ALL:
            return list(range(n))
        if self is Regime.INTERPOLATE_CENTER:
            return [(n - 1) // 2]
        return [n - 1]

    def dims(self, n: int, n_mels: int) -> tuple[int, int]:
        return len(self.input_frames(n)) * n_mels, len(self.target_frames(n)) * n_mels


def check_window_length(n: int, regime: Regime) -> None:
    if n < 2:
        raise ValueError(f"window length must be at least 2 frames, got {n}")
    if regime is Regime.INTERPOLATE_CENTER and n % 2 == 0:
        raise ValueError(f"interpolation needs an odd window length, got {n}")


@dataclass(frozen=True)
class NormStats:
    """Per-Mel-band mean and (population) standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def n_mels(self) -> int:
        return self.mean.shape[0]


@dataclass
class WindowSet:
    regime: Regime
    n: int
    n_mels: int
    inputs: np.ndarray
    targets: np.ndarray
    norm_stats: NormStats | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


def make_windows(spec: Spectrogram, n: int, regime: Regime) -> WindowSet:
    """Cut ``spec`` into (input, target) pairs for ``regime``."""
    regime = Regime(regime)
    check_window_length(n, regime)
    frames = np.asarray(spec.frames, dtype=np.float32)
    t, m = frames.shape
    if t < n:
        raise ValueError(f"spectrogram has {t} frames, fewer than the window length {n}")
    # (N, M, n) view -> (N, n, M) so that flattening is frame-major
    stacked = np.lib.stride_tricks.sliding_window_view(frames, n, axis=0).transpose(0, 2, 1)
    count = t - n + 1
    inputs = np.ascontiguousarray(stacked[:, regime.input_frames(n), :]).reshape(count, -1)
    if regime is Regime.RECONSTRUCT_ALL:
        targets = inputs
    else:
        targets = np.ascontiguousarray(stacked[:, regime.target_frames(n), :]).reshape(count, -1)
    return WindowSet(regime, n, m, inputs, targets)


def concat_windows(sets: list[WindowSet]) -> WindowSet:
    if not sets:
        raise ValueError("no window sets to concatenate")
    first = sets[0]
    for ws in sets[1:]:
        if (ws.regime, ws.n, ws.n_mels) != (first.regime, first.n, first.n_mels):
            raise ValueError("cannot concatenate window sets with different layouts")
    inputs = np.concatenate([ws.inputs for ws in sets])
    if first.regime is Regime.RECONSTRUCT_ALL:
        targets = inputs
    else:
        targets = np.concatenate([ws.targets for ws in sets])
    return WindowSet(first.regime, first.n, first.n_mels, inputs, targets, first.norm_stats)


def fit_norm_stats(ws: WindowSet) -> NormStats:
    """Mean/std per Mel band, pooled over every frame slot of inputs and targets."""
    if len(ws) < 2:
        raise ValueError("need at least two windows to estimate normalization statistics")
    m = ws.n_mels
    pooled = [ws.inputs.reshape(-1, m)]
    if ws.targets is not ws.inputs:
        pooled.append(ws.targets.reshape(-1, m))
    values = np.concatenate(pooled).astype(np.float64)
    mean = values.mean(axis=0)
    std = np.maximum(values.std(axis=0), STD_FLOOR)
    return NormStats(mean, std)


def _check_stats(stats: NormStats, n_mels: int) -> None:
    if stats.mean.shape != (n_mels,) or stats.std.shape != (n_mels,):
        raise ValueError(f"normalization stats have {stats.mean.shape[0]} bands, data has {n_mels}")


def normalize_frames(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardize an ``(..., M)`` array band by band."""
    _check_stats(stats, frames.shape[-1])
    return ((frames - stats.mean) / stats.std).astype(np.float32)


def denormalize_frames(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    _check_stats(stats, frames.shape[-1])
    return frames * stats.std + stats.mean


def apply_norm(ws: WindowSet, stats: NormStats) -> WindowSet:
    m = ws.n_mels
    _check_stats(stats, m)
    inputs = normalize_frames(ws.inputs.reshape(len(ws), -1, m), stats).reshape(ws.inputs.shape)
    if ws.regime is Regime.RECONSTRUCT_ALL:
        targets = inputs
    else:
        targets = normalize_frames(ws.targets.reshape(len(ws), -1, m), stats).reshape(ws.targets.shape)
    return replace(ws, inputs=inputs, targets=targets, norm_stats=stats)


def invert_norm(ws: WindowSet) -> WindowSet:
    """Map a normalized window set back to log-Mel units."""
    if ws.norm_stats is None:
        raise ValueError("window set carries no normalization statistics")
    m, stats = ws.n_mels, ws.norm_stats
    inputs = denormalize_frames(ws.inputs.reshape(len(ws), -1, m), stats).reshape(ws.inputs.shape)
    if ws.regime is Regime.RECONSTRUCT_ALL:
        targets = inputs
    else:
        targets = denormalize_frames(ws.targets.reshape(len(ws), -1, m), stats).reshape(ws.targets.shape)
    return replace(ws, inputs=inputs, targets=targets, norm_stats=None)


def save_windows(ws: WindowSet, path) -> None:
    """Binary cache: header, then float32 inputs, targets and optional stats.

    Header (little-endian): ``b"WSET"``, version, regime code, n, M, N,
    stats flag, all uint32.
    """
    has_stats = ws.norm_stats is not None
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<6I", _BLOB_VERSION, int(ws.regime), ws.n, ws.n_mels, len(ws), has_stats))
        fh.write(np.ascontiguousarray(ws.inputs, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ws.targets, dtype="<f4").tobytes())
        if has_stats:
            fh.write(np.asarray(ws.norm_stats.mean, dtype="<f8").tobytes())
            fh.write(np.asarray(ws.norm_stats.std, dtype="<f8").tobytes())


def load_windows(path) -> WindowSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _BLOB_MAGIC:
        raise ValueError(f"{path}: not a window-set file")
    version, code, n, m, count, has_stats = struct.unpack_from("<6I", blob, 4)
    if version != _BLOB_VERSION:
        raise ValueError(f"{path}: unsupported window-set version {version}")
    regime = Regime(code)
    d_in, d_out = regime.dims(n, m)
    offset = 28
    inputs = np.frombuffer(blob, "<f4", count * d_in, offset).reshape(count, d_in).astype(np.float32)
    offset += 4 * count * d_in
    targets = np.frombuffer(blob, "<f4", count * d_out, offset).reshape(count, d_out).astype(np.float32)
    offset += 4 * count * d_out
    if regime is Regime.RECONSTRUCT_ALL:
        targets = inputs
    stats = None
    if has_stats:
        mean = np.frombuffer(blob, "<f8", m, offset).copy()
        std = np.frombuffer(blob, "<f8", m, offset + 8 * m).copy()
        stats = NormStats(mean, std)
    return WindowSet(regime, n, m, inputs, targets, stats)
