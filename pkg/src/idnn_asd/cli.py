"""Command-line interface: ``idnn-asd {synth,train,score,eval,gradcheck}``.

Settings are resolved as command-line flags, then a ``--config`` file of
``key=value`` lines (keys are the long flag names, with ``-`` or ``_``),
then built-in defaults. ``IDNN_ASD_DATA`` sets the default data directory.
Every output file is written to a temporary name and renamed into place,
so a failed command leaves no partial output behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import shutil
import sys
import tempfile

import numpy as np

from . import __version__
from .dsp import FeatureParams, WavError, load_wav, log_mel_spectrogram
from .evaluation import ExperimentConfig, ExperimentError, ScoreRecord, run_experiment, write_results, write_scores_csv
from .gradcheck import TOLERANCE, run_gradcheck
from .manifest import TEST, TRAIN, format_snr, read_manifest, write_manifest
from .mimii import FULL_CORPUS_TOTALS, corpus_totals, scan_corpus
from .models import (
    N_FRAMES,
    ModelKind,
    ModelSpec,
    TrainConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
    score_segment,
    segment_errors,
    train,
    training_windows,
)
from .synthgen import KINDS, GenerationConfig, make_dataset

DATA_ENV = "IDNN_ASD_DATA"
log = logging.getLogger("idnn_asd")


class CliError(Exception):
    pass


def data_root() -> str:
    return os.environ.get(DATA_ENV, "data")


def _csv_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _floats(text: str) -> list[float]:
    return [float(v) for v in _csv_list(text)]


def _models(text: str) -> list[str]:
    names = _csv_list(text)
    for name in names:
        ModelKind(name)
    return names


def _kl_weights(text: str) -> dict[str, float]:
    """``vae=0.1,vidnn=0.01`` or a single number applied to every model."""
    items = _csv_list(text)
    if len(items) == 1 and "=" not in items[0]:
        value = float(items[0])
        return {k.value: value for k in ModelKind if k.variational}
    out = {}
    for item in items:
        name, _, value = item.partition("=")
        out[ModelKind(name.strip()).value] = float(value)
    return out


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise CliError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


# -- atomic outputs -----------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise CliError(f"output directory does not exist: {directory}")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# -- shared argument groups ---------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file supplying defaults for any flag")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _add_features(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("features")
    g.add_argument("--frame-size", type=int, default=1024)
    g.add_argument("--hop-size", type=int, default=512)
    g.add_argument("--n-mels", type=int, default=64)


def _add_training(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--n-frames", type=int, default=N_FRAMES, help="frames per window")
    g.add_argument("--epochs", type=int, default=50)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)


def _add_selection(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="dataset manifest (default: $%s/manifest.csv)" % DATA_ENV)
    p.add_argument("--kind", help="only use clips of this machine kind")
    p.add_argument("--snr", type=float, help="only use clips at this SNR (dB)")


def _features(args) -> FeatureParams:
    return FeatureParams(args.frame_size, args.hop_size, args.n_mels)


def _manifest_path(args) -> str:
    return args.manifest or os.path.join(data_root(), "manifest.csv")


def _selected(manifest, args, split):
    entries = manifest.select(kind=args.kind, snr_db=args.snr, split=split)
    if args.snr is None and args.kind is None and len(manifest.snrs()) > 1:
        log.warning("using clips from several SNRs; pass --snr to pick one")
    return entries


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    out = os.path.abspath(args.out or data_root())
    parent = os.path.dirname(out)
    if not os.path.isdir(parent):
        raise CliError(f"parent directory does not exist: {parent}")
    if os.path.exists(out) and not os.path.isdir(out):
        raise CliError(f"output path is not a directory: {out}")
    if args.mimii_root:
        return _ingest_mimii(args, out)
    if os.path.isdir(out) and os.listdir(out) and not args.overwrite:
        raise CliError(f"output directory is not empty: {out} (use --overwrite)")
    cfg = GenerationConfig(
        seed=args.seed, n_train=args.n_train, n_test_normal=args.n_test_normal,
        n_test_anomalous=args.n_test_anomalous, duration=args.duration,
        kinds=tuple(args.kinds), snrs=tuple(args.snrs),
    )
    staging = tempfile.mkdtemp(dir=parent, prefix=".synth-")
    try:
        manifest = make_dataset(cfg, staging)
        if os.path.isdir(out):
            shutil.rmtree(out)
        os.rename(staging, out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    print(os.path.join(out, "manifest.csv"))
    log.info("%d clips written", len(manifest))
    return 0


def _ingest_mimii(args, out) -> int:
    """Write a manifest for an existing MIMII-style tree instead of generating audio."""
    path = os.path.join(out, "manifest.csv")
    if os.path.exists(path) and not args.overwrite:
        raise CliError(f"manifest already exists: {path} (use --overwrite)")
    manifest = scan_corpus(args.mimii_root, args.train_fraction)
    os.makedirs(out, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".tmp-")
    os.close(fd)
    try:
        write_manifest(manifest, tmp)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
    for snr, (normal, anomalous) in corpus_totals(manifest).items():
        note = " (full corpus)" if (normal, anomalous) == FULL_CORPUS_TOTALS else ""
        print(f"{format_snr(snr)} dB: {normal} normal, {anomalous} anomalous{note}")
    print(path)
    return 0


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise CliError(f"missing required setting(s): {', '.join(missing)}")


def _check_out_dir(path) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise CliError(f"output directory does not exist: {directory}")


def cmd_train(args) -> int:
    _require(args, "model", "out")
    _check_out_dir(args.out)
    manifest = read_manifest(_manifest_path(args))
    entries = _selected(manifest, args, TRAIN)
    if not entries:
        raise CliError("no training clips match the selection")
    feats = _features(args)
    specs = [log_mel_spectrogram(load_wav(manifest.resolve(e)), feats) for e in entries]
    spec = ModelSpec.for_kind(args.model, args.n_frames, feats.n_mels)
    kind = ModelKind(args.model)
    kl_weight = args.kl_weight if args.kl_weight is not None else kind.default_kl_weight
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      kl_weight=kl_weight if kind.variational else 0.0, seed=args.seed)
    model = train(build_model(spec, args.seed, feats), training_windows(specs, spec), cfg)
    history_path = args.history or os.path.splitext(args.out)[0] + "_loss.csv"
    history = _csv_text(("epoch", "loss"), ((i + 1, repr(v)) for i, v in enumerate(model.loss_history)))
    atomic_write_text(history_path, history)
    try:
        save_checkpoint(model, args.out)
    except BaseException:
        os.unlink(history_path)
        raise
    print(f"{kind.value}: {spec.input_dim} -> {spec.output_dim}, final loss {model.loss_history[-1]:.6g}")
    return 0


def _check_features(model, args) -> FeatureParams:
    """Checkpoint features, unless flags explicitly ask for different ones."""
    feats = model.features
    for name in ("frame_size", "hop_size", "n_mels"):
        given = getattr(args, name)
        if given is not None and given != getattr(feats, name):
            raise CliError(f"--{name.replace('_', '-')} {given} does not match the checkpoint ({getattr(feats, name)})")
    return feats


def cmd_score(args) -> int:
    _require(args, "checkpoint", "out")
    _check_out_dir(args.out)
    if not os.path.isfile(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    feats = _check_features(model, args)
    manifest = read_manifest(_manifest_path(args))
    entries = _selected(manifest, args, None if args.all_splits else TEST)
    if not entries:
        raise CliError("no clips match the selection")
    records = []
    for e in entries:
        spec = log_mel_spectrogram(load_wav(manifest.resolve(e)), feats)
        records.append(ScoreRecord(e.path, e.is_anomalous, score_segment(model, spec)))
    dump = None
    if args.dump_errors:
        errors = segment_errors(model, log_mel_spectrogram(load_wav(args.dump_errors), feats))
        dump = _csv_text(*_error_table(errors, model.spec.n_mels))
    buf = io.StringIO()
    write_scores_csv(records, buf)
    written = []
    try:
        atomic_write_text(args.out, buf.getvalue())
        written.append(args.out)
        if dump is not None:
            dump_path = args.dump_out or os.path.splitext(args.out)[0] + "_errors.csv"
            atomic_write_text(dump_path, dump)
    except BaseException:
        for path in written:
            os.unlink(path)
        raise
    normal = [r.score for r in records if r.label == 0]
    print(f"scored {len(records)} clips; mean normal score "
          f"{np.mean(normal) if normal else float('nan'):.6g}")
    return 0


def _error_table(errors: np.ndarray, n_mels: int):
    """Rows ``window, score, mel_0..mel_{M-1}``; multi-frame targets are summed per band."""
    per_mel = errors.reshape(errors.shape[0], -1, n_mels).sum(axis=1)
    header = ("window", "score", *(f"mel_{j}" for j in range(n_mels)))
    rows = ((i, repr(float(row.sum())), *(repr(float(v)) for v in row)) for i, row in enumerate(per_mel))
    return header, rows


def cmd_eval(args) -> int:
    if not os.path.isdir(args.out_dir):
        raise CliError(f"output directory does not exist: {args.out_dir}")
    manifest = args.manifest
    if manifest is None and not args.synthetic:
        manifest = _manifest_path(args)
    if manifest is not None and not os.path.isfile(manifest):
        raise CliError(f"manifest not found: {manifest} (use --synthetic to generate data per trial)")
    cfg = ExperimentConfig(
        models=tuple(args.models), kinds=tuple(args.kinds) if args.kinds else None,
        snrs=tuple(args.snrs) if args.snrs else None, trials=args.trials, seed=args.seed,
        n_frames=args.n_frames, features=_features(args), epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, kl_weights=args.kl_weight or {},
        manifest=manifest, jobs=args.jobs,
        generation=GenerationConfig(seed=args.seed, n_train=args.n_train,
                                    n_test_normal=args.n_test_normal,
                                    n_test_anomalous=args.n_test_anomalous),
    )
    result = run_experiment(cfg)
    trials_path = os.path.join(args.out_dir, "trials.csv")
    summary_path = os.path.join(args.out_dir, "summary.csv")
    staging = tempfile.mkdtemp(dir=args.out_dir, prefix=".eval-")
    try:
        write_results(result, os.path.join(staging, "trials.csv"), os.path.join(staging, "summary.csv"))
        os.replace(os.path.join(staging, "trials.csv"), trials_path)
        os.replace(os.path.join(staging, "summary.csv"), summary_path)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    for model, kind, snr, mean, std, _ in result.summary_rows():
        print(f"{model:6s} {kind:14s} {format_snr(snr):>4s} dB  AUC {mean:.3f} +- {std:.3f}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(args.networks, args.seed, args.corrupt_gradient)
    print(f"{'loss':6s} {'nets':>5s} {'max rel error':>14s}")
    for row in rows:
        flag = "ok" if row.passed else "FAIL"
        print(f"{row.loss:6s} {row.networks:5d} {row.max_rel_error:14.3e}  {flag}")
    if all(r.passed for r in rows):
        return 0
    sys.stdout.flush()
    print(f"gradient check failed: tolerance {TOLERANCE:g}", file=sys.stderr)
    return 1


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idnn-asd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus (or index a MIMII tree)")
    _add_common(p)
    p.add_argument("--out", help="dataset directory (default: $%s or ./data)" % DATA_ENV)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", type=_csv_list, default=list(KINDS))
    p.add_argument("--snrs", type=_floats, default=[-6.0, 0.0, 6.0])
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-test-normal", type=int, default=20)
    p.add_argument("--n-test-anomalous", type=int, default=20)
    p.add_argument("--duration", type=float, default=10.0, help="clip length in seconds")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.add_argument("--mimii-root", metavar="DIR",
                   help="index an existing MIMII-style corpus instead of generating audio")
    p.add_argument("--train-fraction", type=float, default=0.8,
                   help="share of normal MIMII files used for training")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one detector on the training split")
    _add_common(p)
    _add_selection(p)
    _add_features(p)
    _add_training(p)
    p.add_argument("--model", choices=[k.value for k in ModelKind], help="required")
    p.add_argument("--kl-weight", type=float, help="KL weight (variational models)")
    p.add_argument("--out", help="checkpoint path (required)")
    p.add_argument("--history", help="loss-history CSV (default: <out>_loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score test clips with a trained checkpoint")
    _add_common(p)
    _add_selection(p)
    g = p.add_argument_group("features (must match the checkpoint)")
    g.add_argument("--frame-size", type=int)
    g.add_argument("--hop-size", type=int)
    g.add_argument("--n-mels", type=int)
    p.add_argument("--checkpoint", help="required")
    p.add_argument("--out", help="scores CSV (required)")
    p.add_argument("--all-splits", action="store_true", help="score training clips too")
    p.add_argument("--dump-errors", metavar="WAV", help="also write per-window errors for this file")
    p.add_argument("--dump-out", help="error CSV path (default: <out>_errors.csv)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="repeated-trial comparison of several detectors")
    _add_common(p)
    _add_features(p)
    _add_training(p)
    p.add_argument("--manifest", help="dataset manifest (default: $%s/manifest.csv)" % DATA_ENV)
    p.add_argument("--synthetic", action="store_true",
                   help="regenerate the synthetic corpus for every trial instead of reading a manifest")
    p.add_argument("--models", type=_models, default=[k.value for k in ModelKind])
    p.add_argument("--kinds", type=_csv_list)
    p.add_argument("--snrs", type=_floats)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--kl-weight", type=_kl_weights, help="e.g. vae=0.1,vidnn=0.01")
    p.add_argument("--n-train", type=int, default=40, help="synthetic mode only")
    p.add_argument("--n-test-normal", type=int, default=20, help="synthetic mode only")
    p.add_argument("--n-test-anomalous", type=int, default=20, help="synthetic mode only")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out-dir", default=".", help="where trials.csv and summary.csv go")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss form")
    _add_common(p)
    p.add_argument("--networks", type=int, default=20, help="random networks per loss form")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    """Parse twice: once to find the subcommand and config file, then with the file as defaults."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = read_config_file(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    for key in values:
        if key not in known or key in ("config", "help", "func"):
            raise CliError(f"{args.config}: unknown setting {key!r} for '{args.command}'")
        if known[key].nargs == 0:
            values[key] = values[key].lower() in ("1", "true", "yes", "on")
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except (CliError, ExperimentError, WavError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
