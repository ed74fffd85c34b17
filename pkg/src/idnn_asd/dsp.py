"""WAV input/output and log-Mel spectrogram extraction.

Feature defaults: 1024-sample frames, 512-sample hop, 64 Mel bands,
periodic Hann window, HTK Mel scale ``2595 * log10(1 + f / 700)``,
natural log with a 1e-10 floor. Frames that do not fully fit in the clip
are dropped (no padding).
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

FRAME_SIZE = 1024
HOP_SIZE = 512
N_MELS = 64
LOG_FLOOR = 1e-10

_PCM = 0x0001
_EXTENSIBLE = 0xFFFE
# KSDATAFORMAT_SUBTYPE_PCM, the subformat GUID of WAVE_FORMAT_EXTENSIBLE PCM.
_PCM_SUBFORMAT = b"\x01\x00\x00\x00\x00\x00\x10\x00\x80\x00\x00\xaa\x00\x38\x9b\x71"


class WavError(Exception):
    """Base class for WAV decoding problems."""


class WavNotFoundError(WavError, FileNotFoundError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with nominal amplitude range [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class WavInfo:
    sample_rate: int
    channels: int
    bits_per_sample: int
    n_frames: int
    data_offset: int


@dataclass
class Spectrogram:
    """T x M matrix of natural-log Mel energies."""

    frames: np.ndarray
    frame_size: int = FRAME_SIZE
    hop_size: int = HOP_SIZE

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or min(self.frames.shape) < 1:
            raise ValueError(f"spectrogram must be a non-empty T x M matrix, got {self.frames.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]

    def to_csv(self, path) -> None:
        """One row per frame, M comma-separated values."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in self.frames:
                writer.writerow([repr(float(v)) for v in row])


def read_wav_info(path) -> WavInfo:
    """Parse the RIFF header of ``path`` without decoding samples."""
    if not os.path.isfile(path):
        raise WavNotFoundError(f"no such WAV file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise MalformedWavError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                break
            cid, size = struct.unpack("<4sI", chunk)
            if cid == b"fmt ":
                body = fh.read(size)
                if len(body) < 16:
                    raise MalformedWavError(f"{path}: truncated fmt chunk")
                fmt = body
            elif cid == b"data":
                if fmt is None:
                    raise MalformedWavError(f"{path}: data chunk before fmt chunk")
                return _interpret_fmt(path, fmt, size, fh.tell())
            else:
                fh.seek(size, os.SEEK_CUR)
            if size % 2:
                fh.seek(1, os.SEEK_CUR)
    raise MalformedWavError(f"{path}: missing fmt or data chunk")


def _interpret_fmt(path, fmt: bytes, data_size: int, data_offset: int) -> WavInfo:
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE:
        if len(fmt) < 40:
            raise MalformedWavError(f"{path}: truncated extensible fmt chunk")
        if fmt[24:40] != _PCM_SUBFORMAT:
            raise UnsupportedEncodingError(f"{path}: extensible subformat is not PCM")
    elif tag != _PCM:
        raise UnsupportedEncodingError(f"{path}: format tag {tag:#06x} is not PCM")
    if bits != 16:
        raise UnsupportedEncodingError(f"{path}: {bits}-bit PCM is not supported (16-bit only)")
    if channels < 1 or rate < 1 or block_align != channels * 2:
        raise MalformedWavError(f"{path}: inconsistent fmt chunk")
    return WavInfo(rate, channels, bits, data_size // block_align, data_offset)


def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM WAV file; multichannel input keeps channel 0 only."""
    info = read_wav_info(path)
    with open(path, "rb") as fh:
        fh.seek(info.data_offset)
        raw = fh.read(info.n_frames * info.channels * 2)
    if len(raw) < info.n_frames * info.channels * 2:
        raise MalformedWavError(f"{path}: data chunk shorter than declared")
    pcm = np.frombuffer(raw, dtype="<i2").reshape(info.n_frames, info.channels)
    return AudioClip(pcm[:, 0] / 32768.0, info.sample_rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write ``clip`` as 16-bit mono PCM, clipping to the representable range."""
    pcm = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(data), b"WAVE",
        b"fmt ", 16, _PCM, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16,
        b"data", len(data),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def stft_power(clip: AudioClip, frame_size: int = FRAME_SIZE, hop_size: int = HOP_SIZE,
               window: str = "hann") -> np.ndarray:
    """Squared-magnitude STFT, shape ``(T, frame_size // 2 + 1)``.

    ``T = (len(clip) - frame_size) // hop_size + 1``; trailing partial frames
    are dropped. ``window`` is any name accepted by
    :func:`scipy.signal.get_window` (periodic variant).
    """
    if frame_size <= 0 or frame_size % 2:
        raise ValueError(f"frame_size must be a positive even number, got {frame_size}")
    if hop_size <= 0:
        raise ValueError(f"hop_size must be positive, got {hop_size}")
    x = clip.samples
    if x.shape[0] < frame_size:
        raise ValueError(f"clip has {x.shape[0]} samples, shorter than one frame ({frame_size})")
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_size)[::hop_size]
    win = get_window(window, frame_size, fftbins=True)
    spectrum = np.fft.rfft(frames * win, axis=1)
    return spectrum.real ** 2 + spectrum.imag ** 2


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(
            f"{n_mels} Mel bands are too many for n_fft={n_fft} at {sample_rate} Hz; "
            f"band {empty[0]} covers no FFT bin"
        )
    fb.setflags(write=False)
    return fb


def mel_filterbank(sample_rate: int, n_fft: int = FRAME_SIZE, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular Mel filters, shape ``(n_mels, n_fft // 2 + 1)``, peak height 1.

    Band centres are equally spaced on the Mel scale between 0 Hz and
    ``sample_rate / 2``. Raises ``ValueError`` when some band would contain
    no FFT bin.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be at least 1")
    if n_fft <= 0 or n_fft % 2:
        raise ValueError(f"n_fft must be a positive even number, got {n_fft}")
    return _filterbank(int(sample_rate), int(n_fft), int(n_mels)).copy()


def log_mel(power: np.ndarray, filterbank: np.ndarray, floor: float = LOG_FLOOR,
            frame_size: int = FRAME_SIZE, hop_size: int = HOP_SIZE) -> Spectrogram:
    """``ln(max(filterbank @ power_row, floor))`` for every STFT frame."""
    power = np.atleast_2d(power)
    if power.shape[1] != filterbank.shape[1]:
        raise ValueError(
            f"power has {power.shape[1]} bins but filterbank expects {filterbank.shape[1]}"
        )
    if floor <= 0:
        raise ValueError("floor must be positive")
    energies = power @ filterbank.T
    return Spectrogram(np.log(np.maximum(energies, floor)), frame_size, hop_size)


@dataclass(frozen=True)
class FeatureParams:
    frame_size: int = FRAME_SIZE
    hop_size: int = HOP_SIZE
    n_mels: int = N_MELS
    floor: float = LOG_FLOOR


def log_mel_spectrogram(clip: AudioClip, params: FeatureParams = FeatureParams()) -> Spectrogram:
    power = stft_power(clip, params.frame_size, params.hop_size)
    fb = _filterbank(clip.sample_rate, params.frame_size, params.n_mels)
    return log_mel(power, fb, params.floor, params.frame_size, params.hop_size)
