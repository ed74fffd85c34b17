"""ROC-AUC and the repeated-trial model comparison."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .dsp import FeatureParams, load_wav, log_mel_spectrogram
from .manifest import ANOMALOUS, TEST, TRAIN, format_snr, read_manifest
from .models import ModelKind, ModelSpec, TrainConfig, build_model, score_segment, train, training_windows
from .seeding import derive_seed
from .synthgen import GenerationConfig, generate_cell

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoreRecord:
    segment_id: str
    label: int
    score: float

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 (normal) or 1 (anomalous), got {self.label!r}")
        if not np.isfinite(self.score):
            raise ValueError(f"score for {self.segment_id} is not finite")


def auc_from_scores(labels, scores) -> float:
    """Mann-Whitney AUC: P(anomalous score > normal score), ties count one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores differ in length")
    positives = labels == 1
    n_pos = int(positives.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one normal and one anomalous segment")
    ranks = rankdata(scores)
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(records: list[ScoreRecord]) -> float:
    return auc_from_scores([r.label for r in records], [r.score for r in records])


def write_scores_csv(records: list[ScoreRecord], path) -> None:
    """Write ``segment_id,label,score`` rows to a path or an open text stream."""
    if hasattr(path, "write"):
        _write_scores(records, path)
        return
    with open(path, "w", newline="") as fh:
        _write_scores(records, fh)


def _write_scores(records, fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(("segment_id", "label", "score"))
    for r in records:
        writer.writerow((r.segment_id, r.label, repr(float(r.score))))


def read_scores_csv(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        return [ScoreRecord(row["segment_id"], int(row["label"]), float(row["score"]))
                for row in csv.DictReader(fh)]


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """One experiment: every model on every (machine kind, SNR) cell, ``trials`` times.

    With ``manifest`` set, clips come from that dataset and only model
    initialization and shuffling change between trials. Otherwise the
    synthetic corpus described by ``generation`` is regenerated per trial.
    """

    models: tuple[str, ...] = tuple(k.value for k in ModelKind)
    kinds: tuple[str, ...] | None = None
    snrs: tuple[float, ...] | None = None
    trials: int = 3
    seed: int = 0
    n_frames: int = 5
    features: FeatureParams = field(default_factory=FeatureParams)
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    kl_weights: dict[str, float] = field(default_factory=dict)
    manifest: str | None = None
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    jobs: int = 1

    def __post_init__(self):
        self.models = tuple(ModelKind(m).value for m in self.models)
        if self.trials < 1:
            raise ValueError("trial count must be at least 1")

    def kl_weight(self, model: str) -> float:
        return self.kl_weights.get(model, ModelKind(model).default_kl_weight)


@dataclass
class ExperimentResult:
    """Per-trial AUCs keyed by ``(model, machine kind, snr_db)``."""

    trials: int
    aucs: dict[tuple[str, str, float], list[float]] = field(default_factory=dict)

    def mean(self, model, kind, snr) -> float:
        return float(np.mean(self.aucs[(model, kind, float(snr))]))

    def std(self, model, kind, snr) -> float:
        return float(np.std(self.aucs[(model, kind, float(snr))]))

    def mean_over(self, model, kinds=None, snrs=None) -> float:
        """Mean AUC of ``model`` pooled over the selected cells and trials."""
        values = [
            a for (m, k, s), trial_aucs in self.aucs.items() for a in trial_aucs
            if m == model and (kinds is None or k in kinds) and (snrs is None or s in snrs)
        ]
        if not values:
            raise KeyError(f"no results for {model}")
        return float(np.mean(values))

    def trial_rows(self):
        for (model, kind, snr) in sorted(self.aucs):
            for trial, auc in enumerate(self.aucs[(model, kind, snr)]):
                yield model, kind, snr, trial, auc

    def summary_rows(self):
        for (model, kind, snr) in sorted(self.aucs):
            yield model, kind, snr, self.mean(model, kind, snr), self.std(model, kind, snr), self.trials


def write_results(result: ExperimentResult, trials_path, summary_path) -> None:
    with open(trials_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", "machine", "snr_db", "trial", "auc"))
        for model, kind, snr, trial, auc in result.trial_rows():
            writer.writerow((model, kind, format_snr(snr), trial, repr(auc)))
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("model", "machine", "snr_db", "mean_auc", "std_auc", "trials"))
        for model, kind, snr, mean, std, trials in result.summary_rows():
            writer.writerow((model, kind, format_snr(snr), repr(mean), repr(std), trials))


def _cell_data(cfg: ExperimentConfig, kind: str, snr: float, trial: int):
    """(train spectrograms, [(segment_id, label, spectrogram)] for the test split)."""
    train_specs, test = [], []
    if cfg.manifest is None:
        for item in generate_cell(cfg.generation, kind, snr, derive_seed(cfg.seed, "data", trial)):
            spec = log_mel_spectrogram(item.clip, cfg.features)
            if item.split == TRAIN:
                train_specs.append(spec)
            else:
                test.append((item.segment_id, int(item.label == ANOMALOUS), spec))
    else:
        manifest = read_manifest(cfg.manifest)
        for entry in manifest.select(kind=kind, snr_db=snr):
            spec = log_mel_spectrogram(load_wav(manifest.resolve(entry)), cfg.features)
            if entry.split == TRAIN:
                train_specs.append(spec)
            else:
                test.append((entry.path, entry.is_anomalous, spec))
    return train_specs, test


def _run_cell(cfg: ExperimentConfig, kind: str, snr: float, trial: int):
    train_specs, test = _cell_data(cfg, kind, snr, trial)
    where = f"{kind} at {format_snr(snr)} dB, trial {trial}"
    if not train_specs:
        raise ExperimentError(f"{where}: no training clips")
    if not test:
        raise ExperimentError(f"{where}: no test clips")
    results = {}
    for model in cfg.models:
        try:
            spec = ModelSpec.for_kind(model, cfg.n_frames, cfg.features.n_mels)
            untrained = build_model(spec, derive_seed(cfg.seed, "init", trial, kind, snr, model), cfg.features)
            tcfg = TrainConfig(
                epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                kl_weight=cfg.kl_weight(model) if spec.variational else 0.0,
                seed=derive_seed(cfg.seed, "train", trial, kind, snr, model),
            )
            trained = train(untrained, training_windows(train_specs, spec), tcfg)
            records = [ScoreRecord(seg, label, score_segment(trained, s)) for seg, label, s in test]
            results[model] = roc_auc(records)
        except Exception as exc:
            raise ExperimentError(f"{model} on {where}: {exc}") from exc
        log.info("%s %s %s dB trial %d: AUC %.4f", model, kind, format_snr(snr), trial, results[model])
    return kind, float(snr), trial, results


def _cells(cfg: ExperimentConfig):
    if cfg.manifest is None:
        kinds = cfg.kinds or cfg.generation.kinds
        snrs = cfg.snrs or cfg.generation.snrs
    else:
        if not os.path.isfile(cfg.manifest):
            raise ExperimentError(f"manifest not found: {cfg.manifest}")
        manifest = read_manifest(cfg.manifest)
        kinds = cfg.kinds or manifest.kinds()
        snrs = cfg.snrs or manifest.snrs()
        for kind in kinds:
            for snr in snrs:
                if not manifest.select(kind=kind, snr_db=snr, split=TEST):
                    raise ExperimentError(f"manifest has no test clips for {kind} at {format_snr(snr)} dB")
    return [(k, float(s), t) for k in kinds for s in snrs for t in range(cfg.trials)]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Train and score every model on every cell; deterministic for a given ``cfg.seed``."""
    cells = _cells(cfg)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_run_cell, cfg, *cell) for cell in cells]
            outcomes = [f.result() for f in futures]
    else:
        outcomes = [_run_cell(cfg, *cell) for cell in cells]
    result = ExperimentResult(cfg.trials)
    for kind, snr, trial, per_model in sorted(outcomes, key=lambda o: (o[0], o[1], o[2])):
        for model, auc in per_model.items():
            result.aucs.setdefault((model, kind, snr), []).append(auc)
    return result
