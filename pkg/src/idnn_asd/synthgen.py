"""Synthetic machine-like sounds with normal and anomalous variants.

Two families stand in for the MIMII machine types:

* stationary (fan / pump analogues): a steady harmonic comb plus a weak
  broadband floor. Speed and spectral tilt vary from clip to clip.
  Anomalies add an inharmonic tone.
* non-stationary (valve / slider analogues): near-silence broken by
  irregular bursts of enveloped band noise and tones whose pitch drifts
  smoothly. Anomalies cut a short dropout into every burst, a timing fault
  that leaves each individual frame looking plausible.

These anomalies exercise the detection method; they are not models of
real machine faults. Every clip is scaled to the same RMS before noise is
added, so loudness never gives an anomaly away.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dsp import AudioClip, write_wav
from .manifest import ANOMALOUS, NORMAL, TEST, TRAIN, DatasetManifest, ManifestEntry, format_snr, write_manifest
from .seeding import derive_seed

SAMPLE_RATE = 16000
DURATION = 10.0
SNRS_DB = (-6.0, 0.0, 6.0)
CLIP_RMS = 0.05
STATIONARY = "stationary"
NON_STATIONARY = "non_stationary"


@dataclass(frozen=True)
class AnomalyTransform:
    """Deviation applied to anomalous clips of a profile."""

    # stationary
    extra_tone: tuple[float, float] | None = None
    tilt_db_per_octave: float = 0.0
    # non-stationary
    glitch_prob: float = 0.0
    glitch_duration: float = 0.08
    dropout_share: float = 0.5
    timbre_shift: float = 1.0


@dataclass(frozen=True)
class SoundProfile:
    name: str
    kind: str
    tones: tuple[tuple[float, float], ...]
    noise_level: float = 0.003
    f0_spread: float = 0.0
    tilt_spread: float = 0.0
    amp_jitter: float = 0.1
    burst_rate: float = 0.0
    burst_duration: float = 0.0
    burst_jitter: float = 0.15
    rate_spread: float = 0.0
    burst_attack: float = 0.01
    burst_release: float = 0.03
    burst_f0_range: tuple[float, float] = (300.0, 1200.0)
    burst_band: tuple[float, float] = (1000.0, 4000.0)
    burst_noise: float = 0.2
    burst_sweep: float = 1.0
    wobble_depth: float = 0.0
    wobble_rate: float = 4.0
    anomaly: AnomalyTransform = field(default_factory=AnomalyTransform)

    def validate(self, sample_rate: int) -> None:
        if self.kind not in (STATIONARY, NON_STATIONARY):
            raise ValueError(f"unknown profile kind {self.kind!r}")
        nyquist = sample_rate / 2.0
        top = max(f for f, _ in self.tones) if self.tones else 0.0
        if self.anomaly.extra_tone:
            top = max(top, self.anomaly.extra_tone[0])
        top *= 1.0 + self.f0_spread + 0.02
        if self.kind == NON_STATIONARY:
            # tone frequencies are multiples of the per-burst fundamental
            top *= self.burst_f0_range[1] * max(self.burst_sweep, 1.0) * max(self.anomaly.timbre_shift, 1.0)
            top = max(top, self.burst_band[1])
            if self.burst_rate <= 0 or self.burst_duration <= 0:
                raise ValueError(f"{self.name}: bursts need a positive rate and duration")
            if self.burst_duration >= 1.0 / self.burst_rate:
                raise ValueError(f"{self.name}: burst duration must be shorter than the burst period")
        if top >= nyquist:
            raise ValueError(f"{self.name}: component at {top} Hz is above Nyquist ({nyquist} Hz)")


def _harmonics(f0: float, count: int, rolloff: float, resonance: float, width: float):
    tones = []
    for k in range(1, count + 1):
        f = f0 * k
        amp = k ** -rolloff * (1.0 + 2.0 * np.exp(-0.5 * ((f - resonance) / width) ** 2))
        tones.append((f, float(amp)))
    return tuple(tones)


# Stationary anomalies add a tone at 4.5x the fundamental, i.e. between two
# harmonics. Normal clips vary in speed and spectral tilt, so the tone's
# band is often occupied in normal clips too; only its inconsistency with
# the rest of the comb gives it away.
# Every burst of an anomalous non-stationary clip loses 50 ms mid-burst.
_DROPOUT = AnomalyTransform(glitch_prob=1.0, glitch_duration=0.05, dropout_share=1.0)

PROFILES = {
    "stationary_a": SoundProfile(
        name="stationary_a", kind=STATIONARY,
        tones=_harmonics(100.0, 70, 0.6, 1200.0, 400.0),
        f0_spread=0.12, tilt_spread=3.0, amp_jitter=0.05,
        anomaly=AnomalyTransform(extra_tone=(450.0, 0.3)),
    ),
    "stationary_b": SoundProfile(
        name="stationary_b", kind=STATIONARY,
        tones=_harmonics(150.0, 45, 0.8, 600.0, 250.0),
        f0_spread=0.12, tilt_spread=3.0, amp_jitter=0.05,
        anomaly=AnomalyTransform(extra_tone=(675.0, 0.35)),
    ),
    "nonstat_a": SoundProfile(
        name="nonstat_a", kind=NON_STATIONARY,
        tones=((1.0, 1.0), (2.0, 0.7), (3.0, 0.5), (4.0, 0.35), (5.0, 0.25)),
        burst_rate=1.5, burst_duration=0.4, rate_spread=0.5, burst_f0_range=(250.0, 1000.0),
        burst_band=(1500.0, 6000.0), wobble_depth=0.5, wobble_rate=4.0,
        anomaly=_DROPOUT,
    ),
    "nonstat_b": SoundProfile(
        name="nonstat_b", kind=NON_STATIONARY,
        tones=((1.0, 1.0), (2.0, 0.5), (3.0, 0.3), (4.0, 0.2)),
        burst_rate=1.25, burst_duration=0.5, rate_spread=0.5, burst_f0_range=(200.0, 800.0),
        burst_band=(300.0, 3000.0), burst_sweep=1.6, burst_attack=0.04, burst_release=0.06,
        wobble_depth=0.5, wobble_rate=4.0, anomaly=_DROPOUT,
    ),
}
KINDS = tuple(PROFILES)


def _normalize(x: np.ndarray, rms: float = CLIP_RMS) -> np.ndarray:
    power = np.sqrt(np.mean(x * x))
    return x * (rms / power) if power > 0 else x


def _band_noise(rng, length: int, sample_rate: int, lo: float, hi: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    band = np.fft.irfft(spectrum, length)
    return band / (np.std(band) + 1e-12)


def _ramp(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(np.pi * (np.arange(n) + 0.5) / max(n, 1))


def _burst_schedule(profile: SoundProfile, rng, length: int, sample_rate: int):
    period = 1.0 / (profile.burst_rate * rng.uniform(1.0 - profile.rate_spread, 1.0 + profile.rate_spread))
    onsets = np.arange(rng.uniform(0.0, period), length / sample_rate, period)
    onsets = onsets + rng.uniform(-profile.burst_jitter, profile.burst_jitter, onsets.size) * period
    durations = profile.burst_duration * rng.uniform(0.9, 1.1, onsets.size)
    starts = np.round(onsets * sample_rate).astype(int)
    ends = starts + np.round(durations * sample_rate).astype(int)
    keep = (starts >= 0) & (ends <= length)
    return list(zip(starts[keep].tolist(), ends[keep].tolist()))


def _stationary(profile: SoundProfile, rng, t: np.ndarray, anomalous: bool) -> np.ndarray:
    detune = rng.uniform(1.0 - profile.f0_spread, 1.0 + profile.f0_spread) + rng.normal(0.0, 0.003)
    x = np.zeros_like(t)
    tilt = rng.uniform(-profile.tilt_spread, profile.tilt_spread)
    if anomalous:
        tilt += profile.anomaly.tilt_db_per_octave
    for f, a in profile.tones:
        gain = 10.0 ** (tilt * np.log2(f / 1000.0) / 20.0)
        amp = a * gain * rng.uniform(1.0 - profile.amp_jitter, 1.0 + profile.amp_jitter)
        x += amp * np.sin(2 * np.pi * f * detune * t + rng.uniform(0, 2 * np.pi))
    if anomalous and profile.anomaly.extra_tone is not None:
        f, rel = profile.anomaly.extra_tone
        ref = np.sqrt(np.mean(x * x)) * np.sqrt(2.0)
        x += rel * ref * rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * f * detune * t + rng.uniform(0, 2 * np.pi))
    return x


def _smooth_noise(rng, length: int, sample_rate: int, cutoff: float) -> np.ndarray:
    """Unit-variance Gaussian noise low-passed at ``cutoff`` Hz."""
    spectrum = np.fft.rfft(rng.standard_normal(length))
    spectrum[np.fft.rfftfreq(length, 1.0 / sample_rate) > cutoff] = 0.0
    x = np.fft.irfft(spectrum, length)
    return x / (np.std(x) + 1e-12)


def _render_burst(profile: SoundProfile, rng, n: int, sample_rate: int,
                  gain: np.ndarray | None = None, pitch: np.ndarray | None = None) -> np.ndarray:
    """One enveloped burst of harmonic tone plus band noise at a random pitch."""
    tau = np.arange(n) / sample_rate
    attack = min(max(1, int(profile.burst_attack * sample_rate)), n // 2)
    release = min(max(1, int(profile.burst_release * sample_rate)), n // 2)
    env = np.ones(n)
    env[:attack] *= _ramp(attack)
    env[n - release:] *= _ramp(release)[::-1]
    if gain is not None:
        env *= gain
    lo, hi = profile.burst_f0_range
    f0 = np.exp(rng.uniform(np.log(lo), np.log(hi)))
    inst = f0 * profile.burst_sweep ** (tau / max(tau[-1], 1e-9))
    if pitch is not None:
        inst = inst * pitch
    phase = 2 * np.pi * np.cumsum(inst) / sample_rate
    tone = np.zeros(n)
    for ratio, a in profile.tones:
        # partials that would alias are muted while above Nyquist
        audible = ratio * inst < 0.45 * sample_rate
        tone += a * audible * np.sin(ratio * phase + rng.uniform(0, 2 * np.pi))
    tone /= np.sqrt(np.mean(tone * tone)) + 1e-12
    band = _band_noise(rng, n, sample_rate, *profile.burst_band)
    return env * (tone + profile.burst_noise * band)


def _glitch_mask(rng, n: int, width: int) -> np.ndarray:
    fade = min(width // 4, 80)
    at = int(rng.uniform(0.35, 0.65) * n) - width // 2
    mask = np.zeros(n)
    mask[at:at + width] = 1.0
    mask[at - fade:at] = _ramp(fade)
    mask[at + width:at + width + fade] = _ramp(fade)[::-1]
    return mask


def _non_stationary(profile: SoundProfile, rng, t: np.ndarray, sample_rate: int, anomalous: bool):
    length = t.size
    bursts = _burst_schedule(profile, rng, length, sample_rate)
    anomaly = profile.anomaly
    width = int(anomaly.glitch_duration * sample_rate)
    x = np.zeros(length)
    wobble = None
    if profile.wobble_depth > 0:
        depth = profile.wobble_depth * rng.uniform(0.2, 1.0)
        drift = np.clip(_smooth_noise(rng, length, sample_rate, profile.wobble_rate), -3.0, 3.0)
        wobble = 2.0 ** (depth * drift)
    for start, end in bursts:
        n = end - start
        gain = pitch = None
        if wobble is not None:
            pitch = wobble[start:end]
        if anomalous and rng.uniform() < anomaly.glitch_prob and n > 3 * width:
            mask = _glitch_mask(rng, n, width)
            if rng.uniform() < anomaly.dropout_share:
                gain = 1.0 - mask
            else:
                shift = 1.0 + (anomaly.timbre_shift - 1.0) * mask
                pitch = shift if pitch is None else pitch * shift
        x[start:end] += _render_burst(profile, rng, n, sample_rate, gain, pitch)
    return x, bursts


def gen_clip_with_events(profile: SoundProfile, duration: float = DURATION,
                         sample_rate: int = SAMPLE_RATE, anomalous: bool = False, seed: int = 0):
    """Like :func:`gen_clip`, also returning burst ``(start, end)`` sample spans."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    profile.validate(sample_rate)
    rng = np.random.default_rng(seed)
    length = int(round(duration * sample_rate))
    t = np.arange(length) / sample_rate
    if profile.kind == STATIONARY:
        x, bursts = _stationary(profile, rng, t, anomalous), []
    else:
        x, bursts = _non_stationary(profile, rng, t, sample_rate, anomalous)
    scale = CLIP_RMS / max(np.sqrt(np.mean(x * x)), 1e-12)
    floor = profile.noise_level * CLIP_RMS * rng.standard_normal(length)
    return AudioClip(x * scale + floor, sample_rate), bursts


def gen_clip(profile: SoundProfile, duration: float = DURATION, sample_rate: int = SAMPLE_RATE,
             anomalous: bool = False, seed: int = 0) -> AudioClip:
    """Deterministic synthetic clip for ``profile`` (same seed, same samples)."""
    return gen_clip_with_events(profile, duration, sample_rate, anomalous, seed)[0]


def background_noise(length: int, sample_rate: int = SAMPLE_RATE, seed: int = 0) -> AudioClip:
    """Pink (1/f power) broadband noise with unit RMS."""
    rng = np.random.default_rng(seed)
    spectrum = np.fft.rfft(rng.standard_normal(length))
    freqs = np.fft.rfftfreq(length, 1.0 / sample_rate)
    spectrum[1:] /= np.sqrt(np.maximum(freqs[1:], 20.0))
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, length)
    return AudioClip(x / np.sqrt(np.mean(x * x)), sample_rate)


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """``signal + g * noise`` with ``g`` chosen so the power ratio is ``snr_db``."""
    if signal.sample_rate != noise.sample_rate:
        raise ValueError("signal and noise sample rates differ")
    if len(signal) != len(noise):
        raise ValueError("signal and noise lengths differ")
    p_signal = np.mean(signal.samples ** 2)
    p_noise = np.mean(noise.samples ** 2)
    if p_signal <= 0 or p_noise <= 0:
        raise ValueError("signal and noise must both have non-zero power")
    gain = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioClip(signal.samples + gain * noise.samples, signal.sample_rate)


@dataclass
class GenerationConfig:
    seed: int = 0
    n_train: int = 40
    n_test_normal: int = 20
    n_test_anomalous: int = 20
    duration: float = DURATION
    sample_rate: int = SAMPLE_RATE
    kinds: tuple[str, ...] = KINDS
    snrs: tuple[float, ...] = SNRS_DB

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.snrs = tuple(float(s) for s in self.snrs)
        unknown = [k for k in self.kinds if k not in PROFILES]
        if unknown:
            raise ValueError(f"unknown machine kind(s): {', '.join(unknown)}")
        if min(self.n_train, self.n_test_normal, self.n_test_anomalous) < 0:
            raise ValueError("clip counts must be non-negative")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(format_snr(v) if f.name == "snrs" else str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "GenerationConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown generation setting {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                items = [v.strip() for v in str(raw).split(",") if v.strip()]
                kwargs[key] = tuple(float(v) for v in items) if key == "snrs" else tuple(items)
            else:
                kwargs[key] = type(default)(raw)
        return cls(**kwargs)


@dataclass(frozen=True)
class GeneratedClip:
    segment_id: str
    kind: str
    snr_db: float
    label: str
    split: str
    clip: AudioClip


def _plan(cfg: GenerationConfig):
    for split, label, count in ((TRAIN, NORMAL, cfg.n_train), (TEST, NORMAL, cfg.n_test_normal),
                                (TEST, ANOMALOUS, cfg.n_test_anomalous)):
        for i in range(count):
            yield split, label, i


def generate_cell(cfg: GenerationConfig, kind: str, snr_db: float, seed: int | None = None):
    """All clips of one (machine kind, SNR) cell, generated in memory.

    Source and background noise seeds do not depend on the SNR, so the
    three SNR versions of a clip share the same underlying sounds.
    """
    seed = cfg.seed if seed is None else seed
    profile = PROFILES[kind]
    length = int(round(cfg.duration * cfg.sample_rate))
    clips = []
    for split, label, i in _plan(cfg):
        src = gen_clip(profile, cfg.duration, cfg.sample_rate, label == ANOMALOUS,
                       derive_seed(seed, kind, split, label, i))
        noise = background_noise(length, cfg.sample_rate, derive_seed(seed, kind, split, label, i, "noise"))
        mixed = mix_at_snr(src, noise, snr_db)
        seg = f"{kind}/snr_{format_snr(snr_db)}dB/{split}/{label}_{i:04d}"
        clips.append(GeneratedClip(seg, kind, float(snr_db), label, split, mixed))
    return clips


def make_dataset(cfg: GenerationConfig, out_dir) -> DatasetManifest:
    """Write every cell's clips as 16-bit WAV plus ``manifest.csv`` and ``config.txt``."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for kind in cfg.kinds:
        for snr in cfg.snrs:
            for item in generate_cell(cfg, kind, snr):
                rel = item.segment_id + ".wav"
                path = os.path.join(out_dir, rel)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                write_wav(path, item.clip)
                entries.append(ManifestEntry(rel, kind, snr, item.label, item.split))
    manifest = DatasetManifest(entries, cfg.seed, root=os.path.abspath(out_dir))
    write_manifest(manifest, os.path.join(out_dir, "manifest.csv"))
    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    return manifest


def with_counts(cfg: GenerationConfig, **counts) -> GenerationConfig:
    return replace(cfg, **counts)
