import os

import numpy as np
import pytest
from conftest import tiny_config

from despk import vocoderfeat as vf
from despk.cyclegan import MFB, MFB_AP, train
from despk.evalkit import ManifestRow
from despk.frontend import (BUNDLE_MAGIC, FrontendBundle, batch_convert, bundle_bytes,
                            bundle_from_bytes, convert_features, convert_utterance, load_bundle,
                            save_bundle)
from despk.synthetic import vowel_waveform
from despk.vocoderfeat import F0Stats, FeatureSequence, Waveform

HOP = vf.FrameSpec().hop


@pytest.fixture(scope="module")
def trained_models():
    from despk.synthetic import two_domain_corpus

    xs, ys, _ = two_domain_corpus(3, 3, seed=5, n_frames=24)
    return {mode: train(xs, ys, tiny_config(feature_mode=mode, epochs=1))[0] for mode in (MFB, MFB_AP)}


def random_features(t, seed=0):
    rng = np.random.default_rng(seed)
    vuv = rng.random(t) > 0.3
    return FeatureSequence(rng.normal(-2, 1, (t, 24)), rng.random((t, 24)),
                           np.where(vuv, rng.normal(5, 0.2, t), 0.0), vuv)


class TestConvertFeatures:
    def test_passthrough_is_identity(self):
        fs = random_features(40)
        out = convert_features(fs, FrontendBundle.passthrough(MFB_AP, F0Stats(5.0, 0.2, 10)))
        assert out.equals(fs)

    @pytest.mark.parametrize("mode", [MFB, MFB_AP])
    def test_odd_length_trimmed_back(self, trained_models, mode):
        bundle = FrontendBundle.from_models(trained_models[mode])
        out = convert_features(random_features(130), bundle)
        assert out.n_frames == 130

    def test_mfb_mode_keeps_ap_bit_identical(self, trained_models):
        fs = random_features(37)
        out = convert_features(fs, FrontendBundle.from_models(trained_models[MFB]))
        assert out.ap is not None and np.array_equal(out.ap, fs.ap)
        assert not np.array_equal(out.mfb, fs.mfb)

    def test_mfb_ap_mode_changes_ap(self, trained_models):
        fs = random_features(37)
        out = convert_features(fs, FrontendBundle.from_models(trained_models[MFB_AP]))
        assert not np.array_equal(out.ap, fs.ap)
        assert out.ap.min() >= 0 and out.ap.max() <= 1

    def test_f0_transform_applied(self, trained_models):
        models = trained_models[MFB]
        fs = random_features(20)
        out = convert_features(fs, FrontendBundle.from_models(models))
        expect = vf.transform_f0(fs.log_f0, fs.vuv, models.f0_x, models.f0_y)
        np.testing.assert_array_equal(out.log_f0, expect)
        np.testing.assert_array_equal(out.vuv, fs.vuv)

    def test_padding_does_not_leak_into_output(self, trained_models):
        # the last frames depend only on edge replication, so they match a manual pad
        bundle = FrontendBundle.from_models(trained_models[MFB])
        fs = random_features(30)
        padded = FeatureSequence(np.vstack([fs.mfb, fs.mfb[-1:], fs.mfb[-1:]]),
                                 np.vstack([fs.ap, fs.ap[-1:], fs.ap[-1:]]),
                                 np.concatenate([fs.log_f0, fs.log_f0[-1:].repeat(2)]),
                                 np.concatenate([fs.vuv, fs.vuv[-1:].repeat(2)]))
        a = convert_features(fs, bundle).mfb
        b = convert_features(padded, bundle).mfb[:30]
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch(self, trained_models):
        g = trained_models[MFB]
        with pytest.raises(ValueError):
            FrontendBundle(MFB_AP, g.config.generator, g.g_xy, g.f0_x, g.f0_y, g.norm_x, g.norm_y)


class TestConvertUtterance:
    def test_passthrough_preserves_features(self):
        wav = vowel_waveform(np.random.default_rng(1))
        fs = vf.analyze(wav)
        out = convert_utterance(wav, FrontendBundle.passthrough(MFB_AP, F0Stats(5.0, 0.2, 10)))
        assert np.abs(vf.analyze(out).mfb - fs.mfb).mean() <= 1.5

    @pytest.mark.parametrize("n", [4000, 4037, 5555, 8000])
    def test_duration_within_one_hop(self, trained_models, n):
        wav = Waveform(vowel_waveform(np.random.default_rng(n), duration=1.0).samples[:n])
        out = convert_utterance(wav, FrontendBundle.from_models(trained_models[MFB_AP]))
        assert abs(len(out) - len(wav)) <= HOP
        assert np.all(np.isfinite(out.samples))


def write_rows(tmp_path, n, bad=()):
    rows = []
    for i in range(n):
        path = tmp_path / "in" / f"utt{i}.wav"
        path.parent.mkdir(exist_ok=True)
        if i in bad:
            path.write_bytes(b"garbage")
        else:
            vf.write_wav(path, vowel_waveform(np.random.default_rng(i), duration=0.3))
        rows.append(ManifestRow(f"u{i}", str(path), "hello", "laughter", "s1", "f"))
    return rows


class TestBatchConvert:
    def test_empty(self, tmp_path):
        rep = batch_convert([], FrontendBundle.passthrough(MFB, F0Stats(5, 0.2, 2)), tmp_path / "o")
        assert rep == {"converted": [], "failed": []}

    def test_one_unreadable(self, tmp_path, trained_models):
        rows = write_rows(tmp_path, 3, bad={1})
        rep = batch_convert(rows, FrontendBundle.from_models(trained_models[MFB]), tmp_path / "o")
        assert [r["utterance_id"] for r in rep["converted"]] == ["u0", "u2"]
        assert [r["utterance_id"] for r in rep["failed"]] == ["u1"]
        assert sorted(os.listdir(tmp_path / "o")) == ["utt0.wav", "utt2.wav"]
        for r in rep["converted"]:
            assert abs(r["out_samples"] - r["in_samples"]) <= HOP

    def test_rerun_is_byte_identical(self, tmp_path, trained_models):
        rows = write_rows(tmp_path, 2)
        bundle = FrontendBundle.from_models(trained_models[MFB_AP])
        batch_convert(rows, bundle, tmp_path / "a")
        batch_convert(rows, bundle, tmp_path / "b")
        for name in ("utt0.wav", "utt1.wav"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_unwritable_dir(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            batch_convert([], FrontendBundle.passthrough(MFB, F0Stats(5, 0.2, 2)), blocker / "sub")


class TestBundleFile:
    def test_round_trip(self, tmp_path, trained_models):
        bundle = FrontendBundle.from_models(trained_models[MFB_AP])
        save_bundle(bundle, tmp_path / "b.bundle")
        blob = (tmp_path / "b.bundle").read_bytes()
        assert blob.startswith(BUNDLE_MAGIC)
        back = load_bundle(tmp_path / "b.bundle")
        assert bundle_bytes(back) == blob
        fs = random_features(16)
        assert convert_features(fs, back).equals(convert_features(fs, bundle))

    def test_passthrough_round_trip(self):
        bundle = FrontendBundle.passthrough(MFB, F0Stats(5.0, 0.3, 4))
        back = bundle_from_bytes(bundle_bytes(bundle))
        assert back.generator is None and back.src_f0 == bundle.src_f0

    def test_rejects_checkpoint_bytes(self, trained_models):
        from despk.cyclegan import CheckpointError, checkpoint_bytes

        with pytest.raises(CheckpointError):
            bundle_from_bytes(checkpoint_bytes(trained_models[MFB]))
