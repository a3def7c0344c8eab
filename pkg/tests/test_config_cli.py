import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from conftest import TINY_CONFIG_TEXT, write_toy_corpus

from despk import cli
from despk.config import (SEED_ENV, ConfigError, RunConfig, config_keys, dump_config, help_table,
                          load_config, parse_config_text)
from despk.cyclegan import load_checkpoint, read_loss_log
from despk.vocoderfeat import read_features


class TestConfig:
    def test_defaults_follow_reported_values(self):
        cfg = RunConfig().cyclegan
        assert (cfg.lambda_cyc, cfg.lambda_id, cfg.id_cutoff_epoch) == (10.0, 1.0, 100)
        assert (cfg.lr_g, cfg.lr_d) == (0.0002, 0.0001)
        frames = RunConfig().frames
        assert (frames.window_len, frames.hop, frames.sample_rate) == (320, 80, 16000)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_text("[cyclegan]\nlambda_cycle = 3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            parse_config_text("[optimiser]\nlr = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("[cyclegan]\nepochs = many\n")
        with pytest.raises(ConfigError):
            parse_config_text("[cyclegan]\nlambda_id = -1\n")

    def test_typed_values(self):
        cfg = parse_config_text(TINY_CONFIG_TEXT + "\n[viz]\nall_filters = yes\n")
        assert cfg.cyclegan.generator.down_channels == (4, 4)
        assert cfg.cyclegan.discriminator.strides == ((1, 1), (1, 2), (1, 2), (1, 1))
        assert cfg.viz.all_filters is True

    def test_dump_round_trip(self):
        cfg = parse_config_text(TINY_CONFIG_TEXT + "\n[run]\nseed = 7\n")
        assert parse_config_text(dump_config(cfg)) == cfg

    def test_seed_precedence(self, tmp_path):
        path = tmp_path / "c.ini"
        path.write_text("[run]\nseed = 3\n")
        assert load_config(env={}).seed == 0
        assert load_config(path, env={}).seed == 3
        assert load_config(path, env={SEED_ENV: "5"}).seed == 5
        assert load_config(path, seed_flag=9, env={SEED_ENV: "5"}).seed == 9
        assert load_config(path, seed_flag=9, env={}).cyclegan.seed == 9

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError):
            load_config(env={SEED_ENV: "abc"})

    def test_help_lists_every_key(self):
        text = help_table()
        for section, key, _ in config_keys():
            assert f"[{section}]" in text and f"    {key} = " in text
        assert "lambda_cyc = 10.0" in text and "(reported setting)" in text
        assert SEED_ENV in text


def run(argv):
    """Exit status of one CLI invocation, including argparse usage errors."""
    try:
        return cli.main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture
def corpus(tmp_path):
    manifest = write_toy_corpus(tmp_path / "corpus")
    return manifest, tmp_path / "corpus" / "tiny.ini"


class TestExtract:
    def test_one_row(self, tmp_path):
        manifest = write_toy_corpus(tmp_path / "c", n_per_domain=1)
        lines = manifest.read_text().splitlines()
        manifest.write_text("\n".join(lines[:2]) + "\n")
        assert run(["extract", "--manifest", manifest, "--out-dir", tmp_path / "f"]) == 0
        files = sorted(p.name for p in (tmp_path / "f" / "laughter").iterdir())
        assert files == ["f0_stats.json", "lau00.feat"]
        stats = json.loads((tmp_path / "f" / "laughter" / "f0_stats.json").read_text())
        assert stats["sigma"] > 0 and stats["utterances"] == 1

    def test_corrupt_wav(self, tmp_path, capsys):
        manifest = write_toy_corpus(tmp_path / "c", n_per_domain=1)
        (tmp_path / "c" / "wav" / "nor00.wav").write_bytes(b"RIFF....garbage")
        assert run(["extract", "--manifest", manifest, "--out-dir", tmp_path / "f"]) == 3
        assert "nor00.wav" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert run(["extract", "--manifest", tmp_path / "none.tsv", "--out-dir", tmp_path]) == 3

    def test_rerun_identical(self, corpus, tmp_path):
        manifest, _ = corpus
        for d in ("a", "b"):
            assert run(["extract", "--manifest", manifest, "--out-dir", tmp_path / d]) == 0
        for p in (tmp_path / "a").rglob("*.*"):
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


@pytest.fixture
def features(corpus, tmp_path):
    manifest, ini = corpus
    assert run(["extract", "--manifest", manifest, "--out-dir", tmp_path / "feats"]) == 0
    return tmp_path / "feats", ini


class TestTrain:
    def args(self, features, out, *extra):
        feats, ini = features
        return ["train", "--config", ini, "--x-dir", feats / "laughter", "--y-dir", feats / "normal",
                "--out", out, *extra]

    def test_one_epoch(self, features, tmp_path):
        import time

        t0 = time.time()
        assert run(self.args(features, tmp_path / "m")) == 0
        assert time.time() - t0 < 60
        out = tmp_path / "m"
        assert sorted(p.name for p in out.glob("*.ckpt")) == ["epoch_0001.ckpt"]
        assert len(read_loss_log(out / "loss_log.tsv")) == 2
        assert (out / "frontend.bundle").exists()

    def test_negative_lambda(self, features, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text(TINY_CONFIG_TEXT.replace("epochs = 1", "epochs = 1\nlambda_cyc = -2"))
        feats, _ = features
        assert run(["train", "--config", ini, "--x-dir", feats / "laughter", "--y-dir",
                    feats / "normal", "--out", tmp_path / "m"]) == 2

    def test_missing_feature_dir(self, features, tmp_path):
        _, ini = features
        assert run(["train", "--config", ini, "--x-dir", tmp_path / "nope", "--y-dir", tmp_path / "nope",
                    "--out", tmp_path / "m"]) == 3

    def test_resume_matches_uninterrupted(self, features, tmp_path):
        assert run(self.args(features, tmp_path / "full", "--epochs", 3)) == 0
        assert run(self.args(features, tmp_path / "part", "--epochs", 2)) == 0
        ckpt = tmp_path / "part" / "epoch_0001.ckpt"
        assert run(self.args(features, tmp_path / "part", "--epochs", 3, "--resume", ckpt)) == 0
        for name in ("epoch_0003.ckpt", "loss_log.tsv", "frontend.bundle"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()
        assert load_checkpoint(tmp_path / "part" / "epoch_0003.ckpt").epoch == 3

    def test_resume_with_other_model_rejected(self, features, tmp_path):
        assert run(self.args(features, tmp_path / "m")) == 0
        feats, ini = features
        other = tmp_path / "other.ini"
        other.write_text(ini.read_text().replace("in_channels = 4", "in_channels = 6"))
        code = run(["train", "--config", other, "--x-dir", feats / "laughter", "--y-dir",
                    feats / "normal", "--out", tmp_path / "m2", "--resume",
                    tmp_path / "m" / "epoch_0001.ckpt"])
        assert code == 3


@pytest.fixture
def trained(features, tmp_path):
    feats, ini = features
    out = tmp_path / "model"
    assert run(["train", "--config", ini, "--x-dir", feats / "laughter", "--y-dir", feats / "normal",
                "--out", out]) == 0
    return out / "frontend.bundle"


class TestConvertEval:
    def test_convert_manifest(self, corpus, trained, tmp_path):
        manifest, _ = corpus
        assert run(["convert", "--bundle", trained, "--manifest", manifest, "--out-dir", tmp_path / "o"]) == 0
        report = json.loads((tmp_path / "o" / "conversion_report.json").read_text())
        assert len(report["converted"]) == 4 and report["failed"] == []
        assert (tmp_path / "o" / "lau00.wav").exists()

    def test_convert_wav_list_with_failure(self, corpus, trained, tmp_path):
        wav_dir = corpus[0].parent / "wav"
        (wav_dir / "broken.wav").write_bytes(b"xx")
        code = run(["convert", "--bundle", trained, "--wav", wav_dir / "lau00.wav", wav_dir / "broken.wav",
                    "--out-dir", tmp_path / "o"])
        assert code == 0
        report = json.loads((tmp_path / "o" / "conversion_report.json").read_text())
        assert [f["utterance_id"] for f in report["failed"]] == ["broken"]

    def test_convert_needs_one_source(self, trained, tmp_path):
        assert run(["convert", "--bundle", trained, "--out-dir", tmp_path / "o"]) == 2

    def test_convert_missing_bundle(self, corpus, tmp_path):
        assert run(["convert", "--bundle", tmp_path / "none", "--manifest", corpus[0],
                    "--out-dir", tmp_path / "o"]) == 3

    def test_eval_with_mock(self, corpus, trained, tmp_path, capsys):
        manifest, _ = corpus
        mock = tmp_path / "mock.tsv"
        mock.write_text("lau00\tsee anything out\nlau01\tthink they should get rid of it\n"
                        "nor00\tsee anything out there\nnor01\tthink they should get rid of it\n")
        code = run(["eval", "--manifest", manifest, "--mock", mock, "--bundle", f"FE-MFBs+APs={trained}",
                    "--out-dir", tmp_path / "e"])
        assert code == 0
        data = json.loads((tmp_path / "e" / "report.json").read_text())
        assert [c["condition"] for c in data] == ["no-FE", "FE-MFBs+APs"]
        assert data[0]["wer"] == pytest.approx(100 / 22) and data[0]["ser"] == 25.0
        assert len(list((tmp_path / "e" / "audio" / "FE-MFBs+APs").glob("*.wav"))) == 4
        assert "no-FE" in capsys.readouterr().out

    def test_eval_with_command(self, corpus, tmp_path):
        import sys

        manifest, _ = corpus
        cmd = f"{sys.executable} -c \"print('hello world')\""
        assert run(["eval", "--manifest", manifest, "--adapter", cmd, "--out-dir", tmp_path / "e"]) == 0
        data = json.loads((tmp_path / "e" / "report.json").read_text())
        assert data[0]["n"] == 4 and data[0]["valid"]

    def test_eval_without_recogniser(self, corpus, tmp_path):
        assert run(["eval", "--manifest", corpus[0], "--out-dir", tmp_path / "e"]) == 2

    def test_eval_bad_bundle_spec(self, corpus, tmp_path):
        mock = tmp_path / "mock.tsv"
        mock.write_text("lau00\tx\n")
        assert run(["eval", "--manifest", corpus[0], "--mock", mock, "--bundle", "nameonly",
                    "--out-dir", tmp_path / "e"]) == 2


class TestViz:
    def feature_args(self, features):
        feats, _ = features
        return [f"{lab}={p}" for lab, p in (("laughter", feats / "laughter" / "lau00.feat"),
                                            ("normal", feats / "normal" / "nor00.feat"),
                                            ("other", feats / "normal" / "nor01.feat"))]

    @pytest.mark.parametrize("method", ["pca", "tsne"])
    def test_three_classes(self, features, tmp_path, method):
        code = run(["viz", "--method", method, "--perplexity", 10, "--features",
                    *self.feature_args(features), "--out", tmp_path / "v" / "emb"])
        assert code == 0
        root = ET.parse(tmp_path / "v" / "emb.svg").getroot()
        fills = {c.get("fill") for c in root.iter("{http://www.w3.org/2000/svg}circle")}
        assert len(fills) == 3
        assert (tmp_path / "v" / "emb.tsv").exists()

    def test_violin_all_filters(self, features, tmp_path):
        code = run(["viz", "--method", "violin", "--all-filters", "--features",
                    *self.feature_args(features), "--out", tmp_path / "vio"])
        assert code == 0
        from despk.viz import read_violin_tsv

        assert len(read_violin_tsv(tmp_path / "vio.tsv").filters) == 24

    def test_unknown_method(self, features, tmp_path):
        assert run(["viz", "--method", "umap", "--features", *self.feature_args(features),
                    "--out", tmp_path / "x"]) == 2

    def test_bad_perplexity(self, features, tmp_path):
        assert run(["viz", "--method", "tsne", "--perplexity", 1000, "--features",
                    *self.feature_args(features), "--out", tmp_path / "x"]) == 2


class TestCheckGradAndHelp:
    def test_ops_pass(self, capsys):
        assert run(["check-grad", "--seeds", 1, "--ops-only"]) == 0
        assert "all passed" in capsys.readouterr().out

    def test_failure_exit_code(self, monkeypatch):
        from despk import gradbattery

        monkeypatch.setattr(gradbattery, "TOLERANCE", 0.0)
        assert run(["check-grad", "--seeds", 1, "--ops-only"]) == 1

    def test_help_enumerates_keys(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", "--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for _, key, _ in config_keys():
            assert f" {key} = " in out

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["extract"])
        assert exc.value.code == 2

    def test_seed_flag_changes_training(self, features, tmp_path):
        feats, ini = features
        base = ["train", "--config", ini, "--x-dir", feats / "laughter", "--y-dir", feats / "normal"]
        assert run(base + ["--out", tmp_path / "a", "--seed", 1]) == 0
        assert run(base + ["--out", tmp_path / "b", "--seed", 2]) == 0
        a = (tmp_path / "a" / "epoch_0001.ckpt").read_bytes()
        b = (tmp_path / "b" / "epoch_0001.ckpt").read_bytes()
        assert a != b


def test_feature_files_readable(features):
    feats, _ = features
    fs = read_features(feats / "laughter" / "lau00.feat")
    assert fs.mfb.shape[1] == 24 and np.all(np.isfinite(fs.mfb))
