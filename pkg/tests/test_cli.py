import csv
import struct

import numpy as np
import pytest

from idnn_asd.cli import main, read_config_file
from idnn_asd.dsp import AudioClip, write_wav
from idnn_asd.models import load_checkpoint


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    argv = ["synth", "--out", str(root), "--kinds", "stationary_a", "--snrs", "6", "--n-train", "3",
            "--n-test-normal", "2", "--n-test-anomalous", "2", "--duration", "2", "--seed", "1"]
    assert main(argv) == 0
    return root


@pytest.fixture(scope="module")
def idnn_ckpt(data):
    out = data.parent / "idnn.ckpt"
    assert main(["train", "--manifest", str(data / "manifest.csv"), "--model", "idnn", "--epochs", "10",
                 "--out", str(out)]) == 0
    return out


# -- synth --------------------------------------------------------------------

def test_synth_prints_manifest_path(data, capsys, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--kinds", "nonstat_b", "--snrs", "0",
                 "--n-train", "1", "--n-test-normal", "1", "--n-test-anomalous", "1", "--duration", "0.5"]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "d" / "manifest.csv")
    assert len(read_rows(tmp_path / "d" / "manifest.csv")) == 3
    assert (tmp_path / "d" / "config.txt").read_text().startswith("seed=0\n")


def test_synth_refuses_bad_output(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "missing" / "d")]) == 1
    (tmp_path / "file").write_text("x")
    assert main(["synth", "--out", str(tmp_path / "file")]) == 1
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "keep.txt").write_text("x")
    assert main(["synth", "--out", str(tmp_path / "full"), "--duration", "0.1"]) == 1
    assert (tmp_path / "full" / "keep.txt").exists()
    assert capsys.readouterr().err.count("error:") == 3


def test_synth_uses_data_env(tmp_path, monkeypatch):
    monkeypatch.setenv("IDNN_ASD_DATA", str(tmp_path / "env"))
    assert main(["synth", "--kinds", "nonstat_a", "--snrs", "0", "--n-train", "1", "--n-test-normal", "1",
                 "--n-test-anomalous", "1", "--duration", "0.25"]) == 0
    assert (tmp_path / "env" / "manifest.csv").is_file()


def test_synth_indexes_a_mimii_tree(tmp_path, capsys):
    for rel in ("-6_dB_fan/fan/id_00/normal/a.wav", "-6_dB_fan/fan/id_00/abnormal/b.wav"):
        path = tmp_path / "mimii" / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        write_wav(path, AudioClip(np.zeros(64), 16000))
    assert main(["synth", "--mimii-root", str(tmp_path / "mimii"), "--out", str(tmp_path / "m")]) == 0
    rows = read_rows(tmp_path / "m" / "manifest.csv")
    assert [(r["kind"], r["snr_db"], r["label"]) for r in rows] == [("fan", "-6", "anomalous"), ("fan", "-6", "normal")]
    assert "-6 dB: 1 normal, 1 anomalous" in capsys.readouterr().out


# -- train --------------------------------------------------------------------

def header_dims(path):
    raw = path.read_bytes()
    # magic, version, then regime, variational, n, n_mels, input_dim, output_dim
    return struct.unpack_from("<6I", raw, 12)[4:]


def test_train_writes_checkpoint_and_history(idnn_ckpt):
    assert header_dims(idnn_ckpt) == (256, 64)
    history = read_rows(idnn_ckpt.parent / "idnn_loss.csv")
    assert [int(r["epoch"]) for r in history] == list(range(1, 11))


def test_ae_checkpoint_dims(data, tmp_path):
    out = tmp_path / "ae.ckpt"
    assert main(["train", "--manifest", str(data / "manifest.csv"), "--model", "ae", "--epochs", "1",
                 "--out", str(out)]) == 0
    assert header_dims(out) == (320, 320)


def test_train_is_bit_reproducible(data, tmp_path):
    outs = [tmp_path / f"{i}.ckpt" for i in range(2)]
    for out in outs:
        assert main(["train", "--manifest", str(data / "manifest.csv"), "--model", "vpdnn", "--epochs", "2",
                     "--seed", "4", "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_train_requires_model_and_out(data, capsys):
    assert main(["train", "--manifest", str(data / "manifest.csv"), "--model", "ae"]) == 1
    assert "--out" in capsys.readouterr().err


def test_train_with_empty_selection(data, tmp_path):
    assert main(["train", "--manifest", str(data / "manifest.csv"), "--model", "ae", "--kind", "lathe",
                 "--out", str(tmp_path / "x.ckpt")]) == 1
    assert not list(tmp_path.iterdir())


def test_config_file_and_flag_precedence(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# training settings\nmanifest = {data / 'manifest.csv'}\nmodel=pdnn\nepochs=3\nn-frames=3\n")
    out = tmp_path / "p.ckpt"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--epochs", "2"]) == 0
    model = load_checkpoint(out)
    assert model.spec.kind.value == "pdnn" and model.spec.n_frames == 3
    assert len(model.loss_history) == 2


def test_config_file_rejects_unknown_keys(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour=blue\n")
    assert main(["gradcheck", "--config", str(cfg)]) == 1
    cfg.write_text("just words\n")
    assert main(["gradcheck", "--config", str(cfg)]) == 1


def test_read_config_file(tmp_path):
    (tmp_path / "c").write_text("a-b = 1 # note\n\n# c=2\nd=x=y\n")
    assert read_config_file(tmp_path / "c") == {"a_b": "1", "d": "x=y"}


# -- score --------------------------------------------------------------------

def test_score_test_split(data, idnn_ckpt, tmp_path):
    out = tmp_path / "scores.csv"
    assert main(["score", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(idnn_ckpt),
                 "--out", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 4 and sorted(r["label"] for r in rows) == ["0", "0", "1", "1"]


def test_training_clips_score_below_white_noise(data, idnn_ckpt, tmp_path):
    noise_dir = tmp_path / "noise"
    noise_dir.mkdir()
    rng = np.random.default_rng(0)
    lines = ["path,kind,snr_db,label,split"]
    for i in range(2):
        write_wav(noise_dir / f"n{i}.wav", AudioClip(rng.normal(0, 0.05, 32000), 16000))
        lines.append(f"n{i}.wav,noise,0,normal,test")
    (noise_dir / "manifest.csv").write_text("\n".join(lines) + "\n")
    assert main(["score", "--manifest", str(noise_dir / "manifest.csv"), "--checkpoint", str(idnn_ckpt),
                 "--out", str(tmp_path / "noise.csv")]) == 0
    assert main(["score", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(idnn_ckpt),
                 "--all-splits", "--kind", "stationary_a", "--out", str(tmp_path / "all.csv")]) == 0
    train = [float(r["score"]) for r in read_rows(tmp_path / "all.csv") if "/train/" in r["segment_id"]]
    noise = [float(r["score"]) for r in read_rows(tmp_path / "noise.csv")]
    assert len(train) == 3 and np.mean(train) < np.mean(noise)


def test_dump_errors_has_one_row_per_window(data, idnn_ckpt, tmp_path):
    wav = data / "stationary_a/snr_6dB/test/anomalous_0000.wav"
    out = tmp_path / "s.csv"
    assert main(["score", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(idnn_ckpt),
                 "--out", str(out), "--dump-errors", str(wav)]) == 0
    rows = read_rows(tmp_path / "s_errors.csv")
    frames = (32000 - 1024) // 512 + 1
    assert len(rows) == frames - 5 + 1
    assert list(rows[0])[:3] == ["window", "score", "mel_0"] and len(rows[0]) == 66
    row = rows[7]
    assert float(row["score"]) == pytest.approx(sum(float(row[f"mel_{j}"]) for j in range(64)))


def test_missing_checkpoint_leaves_no_csv(data, tmp_path, capsys):
    out = tmp_path / "scores.csv"
    assert main(["score", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(tmp_path / "none.ckpt"),
                 "--out", str(out)]) == 1
    assert not out.exists() and "checkpoint not found" in capsys.readouterr().err


def test_feature_mismatch_is_rejected(data, idnn_ckpt, tmp_path):
    out = tmp_path / "scores.csv"
    assert main(["score", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(idnn_ckpt),
                 "--out", str(out), "--hop-size", "256"]) == 1
    assert not out.exists()


def test_corrupt_checkpoint_is_an_error(data, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"IDNNCKPT\x01\x00\x00\x00")
    assert main(["score", "--manifest", str(data / "manifest.csv"), "--checkpoint", str(bad),
                 "--out", str(tmp_path / "s.csv")]) == 1


# -- eval ---------------------------------------------------------------------

def test_eval_three_trials_per_cell(data, tmp_path, capsys):
    assert main(["eval", "--manifest", str(data / "manifest.csv"), "--models", "ae,vae", "--trials", "3",
                 "--epochs", "1", "--out-dir", str(tmp_path)]) == 0
    trials = read_rows(tmp_path / "trials.csv")
    assert len(trials) == 6
    assert sorted(r["trial"] for r in trials if r["model"] == "vae") == ["0", "1", "2"]
    summary = read_rows(tmp_path / "summary.csv")
    assert [(r["model"], r["trials"]) for r in summary] == [("ae", "3"), ("vae", "3")]
    assert "AUC" in capsys.readouterr().out


def test_eval_reruns_are_identical(data, tmp_path):
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        assert main(["eval", "--manifest", str(data / "manifest.csv"), "--models", "pdnn", "--trials", "1",
                     "--epochs", "1", "--seed", "3", "--out-dir", str(tmp_path / name)]) == 0
    for f in ("trials.csv", "summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_synthetic_mode(tmp_path):
    assert main(["eval", "--synthetic", "--models", "idnn", "--kinds", "nonstat_b", "--snrs", "-6",
                 "--trials", "1", "--epochs", "1", "--n-train", "1", "--n-test-normal", "1",
                 "--n-test-anomalous", "1", "--out-dir", str(tmp_path)]) == 0
    assert [r["snr_db"] for r in read_rows(tmp_path / "trials.csv")] == ["-6"]


def test_eval_errors(tmp_path, monkeypatch):
    assert main(["eval", "--manifest", str(tmp_path / "none.csv"), "--out-dir", str(tmp_path)]) == 1
    assert main(["eval", "--synthetic", "--out-dir", str(tmp_path / "missing")]) == 1
    monkeypatch.setenv("IDNN_ASD_DATA", str(tmp_path / "nowhere"))
    assert main(["eval", "--out-dir", str(tmp_path)]) == 1
    with pytest.raises(SystemExit):
        main(["eval", "--models", "ae,cnn"])


# -- gradcheck ----------------------------------------------------------------

def test_gradcheck_report(capsys):
    assert main(["gradcheck", "--networks", "2"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    assert [line.split()[0] for line in lines[1:]] == ["ae", "vae", "idnn", "pdnn"]
    assert all(line.endswith("ok") for line in lines[1:])


def test_gradcheck_corrupted_gradient_fails(capsys):
    assert main(["gradcheck", "--networks", "1", "--corrupt-gradient", "0.01"]) == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and "gradient check failed" in captured.err
