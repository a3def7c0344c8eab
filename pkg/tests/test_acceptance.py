"""Acceptance criteria 1-8; each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  Criterion 4 trains two
200-epoch models and dominates the runtime.
"""
import time

import numpy as np
import pytest
from conftest import tiny_config, write_toy_corpus
from test_evalkit import CASES, CHAR_ERR, CHAR_REF, SENT_ERR, WORD_ERR, WORD_REF, bfs_distances
from test_evalkit import all_strings
from test_viz import clusters, power_iteration_eigs, two_means_accuracy

from despk import cli
from despk import vocoderfeat as vf
from despk.cyclegan import MFB, MFB_AP, adv_losses, cycle_loss, identity_loss, total_loss, train
from despk.evalkit import (NO_FE, CorpusManifest, ManifestRow, MockAdapter, evaluate,
                           levenshtein_align, wer)
from despk.gradbattery import TOLERANCE, run_battery, summarize
from despk.numcore import Tensor
from despk.synthetic import run_experiment, two_domain_corpus
from despk.viz import pca_2d, tsne_2d


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {number} failed: {detail}"


def test_criterion_1_gradient_battery(capsys):
    t0 = time.time()
    worst = summarize(run_battery(range(20)))
    seconds = time.time() - t0
    err = max(worst.values())
    ok = err < TOLERANCE and seconds < 120
    report(capsys, 1, ok, f"{len(worst)} checks x 20 seeds, max rel err {err:.2e} "
                          f"(< {TOLERANCE:g}), {seconds:.1f} s (< 120 s)")


def test_criterion_2_loss_algebra(capsys):
    rng = np.random.default_rng(0)
    x, y = Tensor(rng.standard_normal((24, 16))), Tensor(rng.standard_normal((24, 16)))

    def ident(t):
        return t

    cyc = cycle_loss(x, y, ident, ident).item()
    idl = identity_loss(x, y, ident, ident).item()
    ones, zeros = Tensor(np.ones((4, 5))), Tensor(np.zeros((4, 5)))
    d_perfect, _ = adv_losses(ones, zeros)
    _, g_fooled = adv_losses(zeros, ones)
    sum_err = 0.0
    xs, ys, _ = two_domain_corpus(2, 2, seed=1, n_frames=24)
    models, _, _ = train(xs, ys, tiny_config(epochs=1))
    for seed in range(5):
        r = np.random.default_rng(seed)
        a, b = Tensor(r.standard_normal((48, 16))), Tensor(r.standard_normal((48, 16)))
        for epoch in (1, 101):
            total, parts = total_loss(a, b, models, epoch=epoch)
            sum_err = max(sum_err, abs(total.item() - sum(parts.values())))
    ok = cyc == 0.0 and idl == 0.0 and d_perfect.item() == 0.0 and g_fooled.item() == 0.0 and sum_err <= 1e-12
    report(capsys, 2, ok, f"identity cycle={cyc} id={idl}; LSGAN d={d_perfect.item()} g={g_fooled.item()}; "
                          f"|total - sum| max {sum_err:.1e} (<= 1e-12)")


def test_criterion_3_schedule(capsys):
    xs, ys, _ = two_domain_corpus(2, 2, seed=2, n_frames=24)
    cfg = tiny_config(epochs=120)
    _, recs, _ = train(xs, ys, cfg)
    after = [r for r in recs if r["epoch"] > 100]
    before = [r for r in recs if r["epoch"] <= 100]
    id_ok = all(r["loss_id"] == 0.0 for r in after) and all(r["loss_id"] > 0 for r in before)
    lr_bad = 0
    for r in recs:
        k = max(0, r["iter"] - 100 * len(xs))        # steps taken after the cutoff epoch
        for name, lr0 in (("lr_g", cfg.lr_g), ("lr_d", cfg.lr_d)):
            expect = max(0.0, lr0 - k * lr0 / cfg.lr_decay_steps)
            if r[name] != pytest.approx(expect, rel=1e-12, abs=0):
                lr_bad += 1
    ok = id_ok and lr_bad == 0 and len(recs) == 120 * len(xs)
    report(capsys, 3, ok, f"{len(recs)} iterations; identity term 0 on all {len(after)} steps after epoch 100: "
                          f"{id_ok}; LR mismatches {lr_bad}")


def test_criterion_5_evalkit(capsys):
    exhaustive_ok = True
    for ref in all_strings(5):
        if not ref:
            continue
        dist = bfs_distances(ref)
        for hyp in all_strings(5):
            if levenshtein_align(list(ref), list(hyp)).errors != dist[hyp]:
                exhaustive_ok = False
    c = levenshtein_align("think they should get rid of it".split(), "think they should get rid of".split())
    table3_ok = c.deletions == 1 and c.errors == 1 and round(wer(c), 2) == 14.29
    rows = tuple(ManifestRow(uid, f"{uid}.wav", ref, "laughter", "s", "f") for uid, ref, _ in CASES)
    res = evaluate(CorpusManifest(rows), {NO_FE: None}, MockAdapter({u: h for u, _, h in CASES}))[NO_FE]
    eval_ok = (res.wer == 100.0 * WORD_ERR / WORD_REF and res.ser == 100.0 * SENT_ERR / len(CASES)
               and res.cer == 100.0 * CHAR_ERR / CHAR_REF)
    ok = exhaustive_ok and table3_ok and eval_ok
    report(capsys, 5, ok, f"exhaustive <=5: {exhaustive_ok}; creaky pair D={c.deletions} WER={wer(c):.2f}%; "
                          f"10-utterance mock WER/SER/CER {res.wer:.4f}/{res.ser:.1f}/{res.cer:.4f} "
                          f"match hand counts: {eval_ok}")


def test_criterion_6_codec(capsys):
    n = 8000
    tone = vf.Waveform(0.5 * np.sin(2 * np.pi * 220.0 * np.arange(n) / vf.SAMPLE_RATE))
    f0, vuv = vf.estimate_f0(tone)
    tone_frac = float(np.mean(np.abs(f0[vuv] - 220.0) <= 2.0)) if vuv.any() else 0.0
    fb = vf.mel_filterbank_matrix()
    peaks = np.argmax(fb, axis=1)
    inner = np.arange(peaks[0] + 1, peaks[-1])
    pou = float(np.abs(fb[:, inner].sum(axis=0) - 1.0).max())
    t = 100
    fs = vf.FeatureSequence(np.tile(-0.1 * np.arange(24), (t, 1)), np.full((t, 24), 0.05),
                            np.full(t, np.log(200.0)), np.ones(t, bool))
    f0b, vuvb = vf.estimate_f0(vf.synthesize(fs))
    rt_frac = float(np.mean(vuvb & (np.abs(f0b - 200.0) <= 5.0)))
    ok = tone_frac >= 0.95 and pou <= 1e-6 and rt_frac >= 0.8
    report(capsys, 6, ok, f"220 Hz tone within 2 Hz on {100 * tone_frac:.0f}% of voiced frames; "
                          f"partition-of-unity error {pou:.1e}; 200 Hz round trip within 5 Hz on "
                          f"{100 * rt_frac:.0f}% of frames")


def test_criterion_7_viz(capsys):
    kl_ok = 0
    for seed in range(10):
        x, _ = clusters(seed, n_per=20, sep=5.0)
        r = tsne_2d(x, perplexity=8, seed=seed)
        kl_ok += r.final_objective < r.initial_objective
    x, truth = clusters(100)
    sep = two_means_accuracy(tsne_2d(x, perplexity=10, seed=0).points, truth)
    data = np.random.default_rng(0).standard_normal((200, 24)) * np.linspace(3.0, 0.1, 24)
    xc = data - data.mean(axis=0)
    oracle = power_iteration_eigs(xc.T @ xc / (len(data) - 1))
    pca_err = float(np.abs(pca_2d(data).points.var(axis=0, ddof=1) - oracle).max())
    ok = kl_ok == 10 and sep >= 0.95 and pca_err <= 1e-8
    report(capsys, 7, ok, f"KL decreased on {kl_ok}/10 seeds; separation {100 * sep:.0f}%; "
                          f"PCA eigenvalue error {pca_err:.1e}")


def pipeline(root, seed):
    manifest = write_toy_corpus(root)
    ini = root / "tiny.ini"
    ini.write_text(ini.read_text().replace("epochs = 1", "epochs = 5"))
    mock = root / "mock.tsv"
    mock.write_text("lau00\tsee anything out\nlau01\tthink they should get rid of it\n"
                    "nor00\tsee anything out there\nnor01\tthink they should get rid of\n")
    steps = [
        ["extract", "--manifest", manifest, "--out-dir", root / "feats"],
        ["train", "--config", ini, "--x-dir", root / "feats" / "laughter", "--y-dir",
         root / "feats" / "normal", "--out", root / "model"],
        ["convert", "--bundle", root / "model" / "frontend.bundle", "--manifest", manifest,
         "--out-dir", root / "converted"],
        ["eval", "--manifest", manifest, "--mock", mock, "--bundle",
         f"FE={root / 'model' / 'frontend.bundle'}", "--out-dir", root / "eval"],
    ]
    for argv in steps:
        code = cli.main([str(a) for a in argv] + ["--seed", str(seed)])
        assert code == 0, argv
    outputs = sorted(root.glob("model/*.ckpt")) + sorted(root.glob("converted/*")) + \
        sorted(root.glob("eval/**/*.*"))
    return {str(p.relative_to(root)): p.read_bytes() for p in outputs if p.is_file()}


def test_criterion_8_determinism(tmp_path, capsys):
    a = pipeline(tmp_path / "a", seed=11)
    b = pipeline(tmp_path / "b", seed=11)
    n_ckpt = sum(k.endswith(".ckpt") for k in a)
    n_wav = sum(k.endswith(".wav") for k in a)
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    ok = same and n_ckpt == 5 and n_wav >= 8 and "eval/report.json" in a
    report(capsys, 8, ok, f"{len(a)} files ({n_ckpt} checkpoints, {n_wav} WAVs, reports) byte-identical: {same}")


def test_criterion_4_synthetic_experiment(capsys):
    results = {mode: run_experiment(mode) for mode in (MFB, MFB_AP)}
    lines, ok = [], True
    for mode, r in results.items():
        good = r.cycle_ratio < 0.3 and r.improved_fraction >= 0.9 and r.seconds < 1800
        ok &= good
        lines.append(f"{mode}: cycle ratio {r.cycle_ratio:.3f} (< 0.3), converted closer to clean on "
                     f"{100 * r.improved_fraction:.0f}% (>= 90%), mean distance {r.converted_dist.mean():.3f} "
                     f"vs raw {r.raw_dist.mean():.3f}, {r.seconds / 60:.1f} min")
    order = results[MFB_AP].converted_dist.mean() < results[MFB].converted_dist.mean()
    ok &= order
    lines.append(f"MFB+AP beats MFB-only on mean distance: {order}")
    report(capsys, 4, ok, "; ".join(lines))
