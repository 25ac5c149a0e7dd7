import subprocess
import sys

import numpy as np
import pytest

from hieracoustic import evaluation as ev
from hieracoustic.cli import main, read_config
from hieracoustic.features import load_norm_stats, write_feature_file
from hieracoustic.network import build_network, load_model, model_to_bytes
from hieracoustic.training import hierarchical_transfer

EASY = ev.SyntheticCorpusConfig(seed=2, segments_per_class=4, frames_per_segment=40, class_spread=1.5, segment_jitter=0.1)


@pytest.fixture(scope="module")
def easy_corpus(tmp_path_factory):
    return ev.generate_synthetic_corpus(EASY, tmp_path_factory.mktemp("easy"))


@pytest.fixture(scope="module")
def trained(easy_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.hacm"
    rc = main(
        ["train", "--manifest", str(easy_corpus), "--fold", "1", "--stage", "baseline",
         "--epochs", "20", "--lr", "0.05", "--hidden", "64,64", "--out", str(out)]
    )
    assert rc == 0
    return out


def run(*args):
    return main([str(a) for a in args])


class TestTrain:
    def test_sidecars(self, trained):
        for suffix in (".norm", ".log.csv", ".timing.csv", ".run.txt"):
            assert trained.with_name(trained.name + suffix).exists()
        assert load_norm_stats(trained.with_name("m.hacm.norm")).dim == 440
        log = trained.with_name("m.hacm.log.csv").read_text().splitlines()
        assert log[0] == "epoch,train_loss,val_frame_acc"
        assert len(log) == 21

    def test_run_manifest_reproduces(self, trained, tmp_path):
        cfg = trained.with_name("m.hacm.run.txt")
        assert read_config(cfg)["seed"] == "0"
        assert run("train", "--config", cfg, "--out", tmp_path / "again.hacm") == 0
        assert (tmp_path / "again.hacm").read_bytes() == trained.read_bytes()

    def test_flags_override_config(self, trained, tmp_path):
        cfg = trained.with_name("m.hacm.run.txt")
        assert run("train", "--config", cfg, "--epochs", "1", "--out", tmp_path / "one.hacm") == 0
        assert len((tmp_path / "one.hacm.log.csv").read_text().splitlines()) == 2

    def test_zero_epochs_is_init(self, easy_corpus, tmp_path):
        rc = run("train", "--manifest", easy_corpus, "--fold", "1", "--stage", "baseline",
                 "--epochs", "0", "--hidden", "8", "--seed", "4", "--out", tmp_path / "z.hacm")
        assert rc == 0
        init = build_network(440, 15, hidden_sizes=(8,), seed=np.random.default_rng([4, 1]))  # init stream
        assert (tmp_path / "z.hacm").read_bytes() == model_to_bytes(init)

    def test_curriculum_chain(self, easy_corpus, tmp_path):
        common = ["--manifest", easy_corpus, "--fold", "2", "--hidden", "16", "--epochs", "1"]
        assert run("train", *common, "--stage", "dnn1", "--out", tmp_path / "d1.hacm") == 0
        assert load_model(tmp_path / "d1.hacm").num_classes == 3
        assert run("train", *common, "--stage", "dnn2", "--init-model", tmp_path / "d1.hacm",
                   "--out", tmp_path / "d2.hacm") == 0
        assert run("train", *common, "--stage", "dnn3", "--init-model", tmp_path / "d2.hacm",
                   "--out", tmp_path / "d3.hacm") == 0
        d3 = load_model(tmp_path / "d3.hacm")
        assert d3.is_multi_level and d3.num_classes == 15

    def test_zero_epoch_dnn2_equals_transfer(self, easy_corpus, tmp_path):
        common = ["--manifest", easy_corpus, "--fold", "2", "--hidden", "16", "--seed", "3"]
        run("train", *common, "--epochs", "1", "--stage", "dnn1", "--out", tmp_path / "d1.hacm")
        run("train", *common, "--epochs", "0", "--stage", "dnn2", "--init-model", tmp_path / "d1.hacm",
            "--out", tmp_path / "d2.hacm")
        expect = hierarchical_transfer(load_model(tmp_path / "d1.hacm"), 15, seed=3)
        assert (tmp_path / "d2.hacm").read_bytes() == model_to_bytes(expect)

    def test_all_config_errors_listed(self, capsys):
        rc = run("train", "--stage", "dnn2", "--epochs", "-1", "--alpha", "2", "--out", "x.hacm")
        assert rc == 1
        err = capsys.readouterr().err
        for needle in ("--manifest", "--fold", "--init-model", "epochs", "alpha"):
            assert needle in err

    def test_unknown_config_key(self, tmp_path, easy_corpus, capsys):
        (tmp_path / "c.txt").write_text(f"manifest={easy_corpus}\nfold=1\nstage=dnn1\nlearning_rat=0.1\n")
        assert run("train", "--config", tmp_path / "c.txt", "--out", tmp_path / "m.hacm") == 1
        assert "learning_rat" in capsys.readouterr().err

    def test_bad_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("train", "--no-such-flag")
        assert exc.value.code == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_internal(self, easy_corpus, tmp_path):
        rc = run("train", "--manifest", easy_corpus, "--fold", "1", "--stage", "baseline", "--epochs", "3",
                 "--lr", "1e30", "--momentum", "0.99", "--hidden", "8", "--out", tmp_path / "d.hacm")
        assert rc == 3


class TestPredict:
    def test_held_out_c2(self, easy_corpus, tmp_path, capsys):
        # DNN1 -> DNN2 via the CLI; C2_000 sits in fold 1, which training never saw
        common = ["--manifest", easy_corpus, "--fold", "1", "--hidden", "64,64", "--lr", "0.05"]
        assert run("train", *common, "--stage", "dnn1", "--epochs", "2", "--out", tmp_path / "d1.hacm") == 0
        assert run("train", *common, "--stage", "dnn2", "--epochs", "20", "--init-model", tmp_path / "d1.hacm",
                   "--out", tmp_path / "d2.hacm") == 0
        capsys.readouterr()
        seg = easy_corpus.parent / "features" / "C2_000.hacf"
        assert run("predict", "--model", tmp_path / "d2.hacm", "--input", seg) == 0
        label, conf, margin = capsys.readouterr().out.strip().split("\t")
        assert label == "C2"
        assert float(conf) > 0.9
        assert 0 <= float(margin) <= float(conf)

    def test_wav_input(self, trained, tmp_path, capsys):
        # a WAV gives 40-dim features, so it goes through the same checks
        from scipy.io import wavfile

        wavfile.write(tmp_path / "x.wav", 16000, np.zeros(4000, dtype=np.int16))
        assert run("predict", "--model", trained, "--input", tmp_path / "x.wav") == 0
        assert len(capsys.readouterr().out.split("\t")) == 3

    def test_dim_mismatch(self, trained, tmp_path):
        write_feature_file(tmp_path / "f.hacf", np.zeros((20, 12), dtype=np.float32))
        assert run("predict", "--model", trained, "--input", tmp_path / "f.hacf") == 2

    def test_corrupt_model(self, tmp_path, easy_corpus):
        (tmp_path / "bad.hacm").write_bytes(b"HACMjunk")
        seg = easy_corpus.parent / "features" / "C2_000.hacf"
        assert run("predict", "--model", tmp_path / "bad.hacm", "--input", seg) == 2

    def test_missing_input(self, trained, tmp_path):
        assert run("predict", "--model", trained, "--input", tmp_path / "nope.hacf") == 2


class TestEvaluate:
    def test_report(self, trained, easy_corpus, tmp_path, capsys):
        out = tmp_path / "rep"
        rc = run("evaluate", "--manifest", easy_corpus, "--model", trained, "--fold", 1,
                 "--model", trained, "--fold", 2, "--out", out)
        assert rc == 0
        text = capsys.readouterr().out
        assert "avg" in text
        accs = [float(line.split(",")[1]) for line in (out / "accuracy.csv").read_text().splitlines()[1:]]
        avg_line = next(line for line in text.splitlines() if line.strip().startswith("avg"))
        assert float(avg_line.split()[1]) == pytest.approx(100 * np.mean(accs), abs=0.005)
        assert accs[0] > 0.9  # held-out fold
        for name in ("report.txt", "confusion.csv", "predictions_fold1.csv", "predictions_fold2.csv"):
            assert (out / name).exists()

    def test_unpaired(self, trained, easy_corpus, tmp_path):
        rc = run("evaluate", "--manifest", easy_corpus, "--model", trained, "--fold", 1, "--fold", 2,
                 "--out", tmp_path)
        assert rc == 1

    def test_unknown_fold(self, trained, easy_corpus, tmp_path):
        rc = run("evaluate", "--manifest", easy_corpus, "--model", trained, "--fold", 7, "--out", tmp_path)
        assert rc == 1


class TestSynthAndFeatures:
    def test_synth_echoes_seed(self, tmp_path, capsys):
        assert run("synth", "--out", tmp_path, "--seed", "11", "--segments-per-class", "4",
                   "--frames-per-segment", "5") == 0
        assert "seed=11" in capsys.readouterr().out
        assert len(ev.read_manifest(tmp_path / "manifest.csv")) == 60

    def test_synth_bad_config(self, tmp_path):
        assert run("synth", "--out", tmp_path, "--separation", "1") == 1

    def test_features_from_wavs(self, tmp_path):
        cfg = ev.SyntheticCorpusConfig(seed=0, segments_per_class=4)
        ev.generate_synthetic_wavs(cfg, tmp_path / "wav", seconds=0.3)
        rc = run("features", "--manifest", tmp_path / "wav" / "manifest.csv", "--out", tmp_path / "feat",
                 "--fold", "1")
        assert rc == 0
        entries = ev.read_manifest(tmp_path / "feat" / "manifest.csv")
        assert len(entries) == 60
        assert entries[0].path.suffix == ".hacf"
        assert load_norm_stats(tmp_path / "feat" / "norm_fold1.hacf").dim == 440

    def test_features_bad_wav(self, tmp_path):
        (tmp_path / "a.wav").write_bytes(b"not audio")
        (tmp_path / "m.csv").write_text("segment_path,low_class,fold\na.wav,C1,1\n")
        assert run("features", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "o") == 2

    def test_features_bad_framing(self, tmp_path):
        (tmp_path / "m.csv").write_text("segment_path,low_class,fold\na.wav,C1,1\n")
        assert run("features", "--manifest", tmp_path / "m.csv", "--out", tmp_path / "o", "--hop", "0") == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "hieracoustic", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    assert "predict" in r.stdout


def test_log_env(tmp_path, easy_corpus):
    env = {"HIERACOUSTIC_LOG": "info", "PATH": "/usr/bin:/bin"}
    r = subprocess.run(
        [sys.executable, "-m", "hieracoustic", "train", "--manifest", str(easy_corpus), "--fold", "1",
         "--stage", "dnn1", "--epochs", "0", "--hidden", "4", "--out", str(tmp_path / "m.hacm")],
        capture_output=True, text=True, env=env,
    )
    assert r.returncode == 0, r.stderr
    assert "INFO" in r.stderr
