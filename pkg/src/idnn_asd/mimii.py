"""Manifest builder for a user-supplied MIMII-style corpus.

Expected layout (as distributed)::

    <root>/<snr dir>/<machine type>/<machine id>/{normal,abnormal}/*.wav

where the SNR directory name starts with the SNR in dB, e.g. ``-6_dB_fan``
or ``0dB``. Normal files are split into train/test by a hash of their
relative path; abnormal files always go to the test split.
"""

from __future__ import annotations

import hashlib
import os
import re

from .dsp import read_wav_info
from .manifest import ANOMALOUS, NORMAL, TEST, TRAIN, DatasetManifest, ManifestEntry

_SNR_DIR = re.compile(r"^(-?\d+(?:\.\d+)?)\s*_?dB", re.IGNORECASE)
_LABELS = {"normal": NORMAL, "abnormal": ANOMALOUS}
EXPECTED_SAMPLE_RATE = 16000
# (normal, anomalous) segment counts of the full published corpus, per SNR level
FULL_CORPUS_TOTALS = (24490, 5620)


class CorpusLayoutError(ValueError):
    pass


def hash_fraction(relpath: str) -> float:
    """Deterministic value in [0, 1) for a path, independent of the platform separator."""
    digest = hashlib.sha1(relpath.replace(os.sep, "/").encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def scan_corpus(root, train_fraction: float = 0.8, validate: bool = True) -> DatasetManifest:
    """Walk ``root`` and return a manifest sorted by relative path.

    With ``validate`` every WAV header is checked to be 16-bit PCM at 16 kHz.
    """
    if not os.path.isdir(root):
        raise FileNotFoundError(f"corpus root not found: {root}")
    if not 0.0 <= train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in [0, 1]")
    root = os.path.abspath(root)
    entries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if not name.lower().endswith(".wav"):
                continue
            rel = os.path.relpath(os.path.join(dirpath, name), root)
            parts = rel.split(os.sep)
            if len(parts) != 5:
                raise CorpusLayoutError(
                    f"{rel}: expected <snr>/<machine type>/<machine id>/<normal|abnormal>/<file>.wav"
                )
            snr_dir, machine, _, label_dir, _ = parts
            match = _SNR_DIR.match(snr_dir)
            if not match:
                raise CorpusLayoutError(f"{rel}: cannot read an SNR from directory {snr_dir!r}")
            label = _LABELS.get(label_dir.lower())
            if label is None:
                raise CorpusLayoutError(f"{rel}: label directory must be 'normal' or 'abnormal'")
            if validate:
                info = read_wav_info(os.path.join(root, rel))
                if info.sample_rate != EXPECTED_SAMPLE_RATE:
                    raise CorpusLayoutError(f"{rel}: sample rate {info.sample_rate} Hz, expected 16000")
            if label == NORMAL and hash_fraction(rel) < train_fraction:
                split = TRAIN
            else:
                split = TEST
            entries.append(ManifestEntry(rel.replace(os.sep, "/"), machine, float(match.group(1)), label, split))
    if not entries:
        raise CorpusLayoutError(f"no WAV files found under {root}")
    entries.sort(key=lambda e: e.path)
    return DatasetManifest(entries, root=root)


def corpus_totals(manifest: DatasetManifest) -> dict[float, tuple[int, int]]:
    """``{snr_db: (normal count, anomalous count)}``, for checking a corpus is complete."""
    totals = {}
    for snr in manifest.snrs():
        entries = manifest.select(snr_db=snr)
        anomalous = sum(e.is_anomalous for e in entries)
        totals[snr] = (len(entries) - anomalous, anomalous)
    return totals
