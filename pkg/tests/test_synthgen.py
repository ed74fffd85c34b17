import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idnn_asd.dsp import AudioClip, load_wav, log_mel_spectrogram
from idnn_asd.manifest import read_manifest
from idnn_asd.seeding import derive_seed
from idnn_asd.synthgen import (
    CLIP_RMS,
    KINDS,
    PROFILES,
    GenerationConfig,
    SoundProfile,
    background_noise,
    gen_clip,
    gen_clip_with_events,
    generate_cell,
    make_dataset,
    mix_at_snr,
)


def rms(x):
    return math.sqrt(float(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def median_frame_distance(clip):
    frames = log_mel_spectrogram(clip).frames
    return float(np.median(np.linalg.norm(np.diff(frames, axis=0), axis=1)))


def frame_energy_db(clip):
    return 10 * np.log10(np.exp(log_mel_spectrogram(clip).frames).sum(axis=1))


# -- clips --------------------------------------------------------------------

def test_ten_second_clip_length():
    assert len(gen_clip(PROFILES["stationary_a"], 10.0, 16000)) == 160000


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_is_bit_identical(kind):
    a = gen_clip(PROFILES[kind], 1.0, anomalous=True, seed=4)
    b = gen_clip(PROFILES[kind], 1.0, anomalous=True, seed=4)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.array_equal(a.samples, gen_clip(PROFILES[kind], 1.0, anomalous=True, seed=5).samples)


def test_stationary_frames_change_far_less_than_bursts():
    seeds = range(3)
    stat = np.mean([median_frame_distance(gen_clip(PROFILES[k], seed=s))
                    for k in KINDS if k.startswith("stationary") for s in seeds])
    burst = np.mean([median_frame_distance(gen_clip(PROFILES[k], seed=s))
                     for k in KINDS if k.startswith("nonstat") for s in seeds])
    assert burst >= 5 * stat


@pytest.mark.parametrize("kind", ["nonstat_a", "nonstat_b"])
def test_silence_between_bursts(kind):
    profile = PROFILES[kind]
    # the noise floor alone, measured the same way
    floor = AudioClip(profile.noise_level * CLIP_RMS * np.random.default_rng(99).standard_normal(160000), 16000)
    floor_db = float(np.median(frame_energy_db(floor)))
    for seed in range(2):
        clip, bursts = gen_clip_with_events(profile, seed=seed)
        energy = frame_energy_db(clip)
        starts = np.arange(len(energy)) * 512
        free = [i for i, s in enumerate(starts) if all(s + 1024 <= a or s >= b for a, b in bursts)]
        assert free
        assert np.mean(np.abs(energy[free] - floor_db) <= 3.0) >= 0.9


@pytest.mark.parametrize("kind", KINDS)
def test_anomalies_are_not_a_volume_change(kind):
    for seed in range(2):
        normal = gen_clip(PROFILES[kind], 2.0, seed=seed)
        anomalous = gen_clip(PROFILES[kind], 2.0, anomalous=True, seed=seed)
        assert np.abs(normal.samples - anomalous.samples).max() > 0
        assert abs(20 * math.log10(rms(anomalous.samples) / rms(normal.samples))) <= 3.0


def test_burst_spans_are_inside_the_clip():
    clip, bursts = gen_clip_with_events(PROFILES["nonstat_b"], 3.0, seed=1)
    assert bursts and all(0 <= a < b <= len(clip) for a, b in bursts)


def test_invalid_profiles():
    with pytest.raises(ValueError):
        gen_clip(PROFILES["stationary_a"], 0.0)
    with pytest.raises(ValueError):
        SoundProfile("x", "stationary", ((9000.0, 1.0),)).validate(16000)
    with pytest.raises(ValueError):
        SoundProfile("x", "non_stationary", ((1.0, 1.0),), burst_rate=4, burst_duration=0.3).validate(16000)
    with pytest.raises(ValueError):
        SoundProfile("x", "rotating", ()).validate(16000)


# -- mixing -------------------------------------------------------------------

def test_equal_power_at_zero_db_keeps_noise_scale():
    sig = AudioClip(np.array([1.0, -1.0, 1.0, -1.0]), 16000)
    noise = AudioClip(np.array([1.0, 1.0, -1.0, -1.0]), 16000)
    np.testing.assert_allclose(mix_at_snr(sig, noise, 0.0).samples - sig.samples, noise.samples)


def test_six_db_scales_noise_by_closed_form():
    sig = AudioClip(np.array([1.0, -1.0, 1.0, -1.0]), 16000)
    noise = AudioClip(np.array([1.0, 1.0, -1.0, -1.0]), 16000)
    scaled = mix_at_snr(sig, noise, 6.0).samples - sig.samples
    np.testing.assert_allclose(scaled, 10 ** (-6 / 20) * noise.samples)
    assert 10 ** (-6 / 20) == pytest.approx(0.501, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-30, 30), st.floats(1e-6, 1e3), st.integers(16, 2000))
def test_achieved_snr(seed, snr_db, scale, length):
    rng = np.random.default_rng(seed)
    sig = AudioClip(scale * rng.normal(size=length), 8000)
    noise = AudioClip(rng.uniform(-1, 1, length), 8000)
    residual = mix_at_snr(sig, noise, snr_db).samples - sig.samples
    assert 10 * math.log10(rms(sig.samples) ** 2 / rms(residual) ** 2) == pytest.approx(snr_db, abs=0.01)


def test_mix_errors():
    ok = AudioClip(np.ones(8), 16000)
    with pytest.raises(ValueError):
        mix_at_snr(AudioClip(np.zeros(8), 16000), ok, 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(ok, AudioClip(np.ones(8), 8000), 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(ok, AudioClip(np.ones(9), 16000), 0.0)


def test_background_noise_is_unit_rms_and_pink():
    noise = background_noise(160000, seed=3)
    assert rms(noise.samples) == pytest.approx(1.0)
    power = np.abs(np.fft.rfft(noise.samples)) ** 2
    freqs = np.fft.rfftfreq(160000, 1 / 16000)
    low = power[(freqs > 100) & (freqs < 200)].mean()
    high = power[(freqs > 1000) & (freqs < 2000)].mean()
    # 1/f power: ten times the frequency, a tenth of the power
    assert 5 < low / high < 20


# -- datasets -----------------------------------------------------------------

def test_default_counts_give_960_files():
    cfg = GenerationConfig()
    per_cell = cfg.n_train + cfg.n_test_normal + cfg.n_test_anomalous
    assert (len(cfg.kinds), len(cfg.snrs), per_cell) == (4, 3, 80)
    assert len(cfg.kinds) * len(cfg.snrs) * per_cell == 960


def test_full_default_layout_with_short_clips(tmp_path):
    manifest = make_dataset(GenerationConfig(duration=0.1), tmp_path)
    assert len(manifest) == 960
    assert len(list(tmp_path.rglob("*.wav"))) == 960
    assert {e.label for e in manifest.select(split="train")} == {"normal"}
    assert len(read_manifest(tmp_path / "manifest.csv")) == 960


def test_small_dataset_files_and_manifest(tmp_path):
    cfg = GenerationConfig(n_train=2, n_test_normal=1, n_test_anomalous=1, duration=0.5,
                           kinds=("stationary_b", "nonstat_a"), snrs=(-6.0, 6.0))
    make_dataset(cfg, tmp_path)
    with open(tmp_path / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["path", "kind", "snr_db", "label", "split"]
    assert len(rows) == 16
    for row in rows:
        clip = load_wav(tmp_path / row["path"])
        assert (clip.sample_rate, len(clip)) == (16000, 8000)
        assert not (row["split"] == "train" and row["label"] == "anomalous")


def test_regeneration_is_byte_identical(tmp_path):
    cfg = GenerationConfig(n_train=1, n_test_normal=1, n_test_anomalous=1, duration=0.25, kinds=("nonstat_b",),
                           snrs=(0.0,), seed=11)
    make_dataset(cfg, tmp_path / "a")
    make_dataset(cfg, tmp_path / "b")
    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()


def test_snr_versions_share_the_source():
    cfg = GenerationConfig(n_train=1, n_test_normal=0, n_test_anomalous=0, duration=0.5)
    quiet = generate_cell(cfg, "stationary_a", -6.0)[0].clip.samples
    loud = generate_cell(cfg, "stationary_a", 6.0)[0].clip.samples
    noise = background_noise(8000, seed=derive_seed(0, "stationary_a", "train", "normal", 0, "noise")).samples
    # (x + g1 n) - (x + g2 n) is a multiple of the shared noise
    diff = quiet - loud
    gain = float(diff @ noise / (noise @ noise))
    assert gain > 0
    np.testing.assert_allclose(diff, gain * noise, atol=1e-9)


def test_config_text_round_trip():
    cfg = GenerationConfig(seed=3, n_train=7, kinds=("nonstat_a",), snrs=(-6.0, 0.0))
    values = dict(line.split("=", 1) for line in cfg.to_text().splitlines())
    assert GenerationConfig.from_mapping(values) == cfg


def test_config_rejects_unknown_values():
    with pytest.raises(ValueError):
        GenerationConfig(kinds=("lathe",))
    with pytest.raises(ValueError):
        GenerationConfig.from_mapping({"colour": "blue"})
    with pytest.raises(ValueError):
        GenerationConfig(n_train=-1)
