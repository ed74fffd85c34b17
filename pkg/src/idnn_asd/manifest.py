"""Dataset manifests shared by the synthetic generator and the MIMII reader.

CSV columns: ``path,kind,snr_db,label,split``. Paths are stored relative
to the manifest's directory when possible.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

NORMAL = "normal"
ANOMALOUS = "anomalous"
TRAIN = "train"
TEST = "test"
FIELDS = ("path", "kind", "snr_db", "label", "split")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    kind: str
    snr_db: float
    label: str
    split: str

    def __post_init__(self):
        if self.label not in (NORMAL, ANOMALOUS):
            raise ValueError(f"unknown label {self.label!r}")
        if self.split not in (TRAIN, TEST):
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def is_anomalous(self) -> int:
        return int(self.label == ANOMALOUS)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int | None = None
    root: str = "."

    def __post_init__(self):
        bad = [e.path for e in self.entries if e.split == TRAIN and e.label != NORMAL]
        if bad:
            raise ValueError(f"training split must be normal-only; offending file {bad[0]}")

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, kind=None, snr_db=None, split=None, label=None) -> list[ManifestEntry]:
        return [
            e for e in self.entries
            if (kind is None or e.kind == kind)
            and (snr_db is None or e.snr_db == float(snr_db))
            and (split is None or e.split == split)
            and (label is None or e.label == label)
        ]

    def kinds(self) -> list[str]:
        return sorted({e.kind for e in self.entries})

    def snrs(self) -> list[float]:
        return sorted({e.snr_db for e in self.entries})

    def resolve(self, entry: ManifestEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)


def format_snr(snr_db: float) -> str:
    return f"{float(snr_db):g}"


def write_manifest(manifest: DatasetManifest, path) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for e in manifest.entries:
            full = manifest.resolve(e)
            rel = os.path.relpath(os.path.abspath(full), base)
            writer.writerow([rel.replace(os.sep, "/"), e.kind, format_snr(e.snr_db), e.label, e.split])


def read_manifest(path) -> DatasetManifest:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(FIELDS)}")
        entries = [
            ManifestEntry(row["path"], row["kind"], float(row["snr_db"]), row["label"], row["split"])
            for row in reader
        ]
    return DatasetManifest(entries, root=os.path.dirname(os.path.abspath(path)))
