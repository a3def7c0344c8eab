"""Command-line entry point: extract, train, convert, eval, viz, check-grad.

Exit codes: 0 success, 1 failed self-check, 2 invalid input or
configuration, 3 I/O failure (unreadable or corrupt files, unwritable
outputs).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, help_table, load_config
from .cyclegan.checkpoint import CheckpointError, load_checkpoint
from .cyclegan.train import TrainingHalted, read_loss_log, train, write_loss_log
from .evalkit import (NO_FE, CommandAdapter, ManifestError, ManifestRow, MockAdapter, evaluate,
                      read_manifest, write_report)
from .frontend import FrontendBundle, batch_convert, load_bundle, save_bundle
from .vocoderfeat import (F0StatsError, FeatureFormatError, WavFormatError, analyze, f0_stats,
                          read_features, read_wav, write_features)

log = logging.getLogger("despk")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INVALID = 2
EXIT_IO = 3

FEATURE_SUFFIX = ".feat"
STATS_NAME = "f0_stats.json"
LOSS_LOG = "loss_log.tsv"
BUNDLE_NAME = "frontend.bundle"

# corrupt files are reported as I/O failures even though they subclass ValueError
IO_ERRORS = (OSError, WavFormatError, FeatureFormatError, CheckpointError)


class UsageError(ValueError):
    """Invalid combination of command-line arguments."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- subcommands -------------------------------------------------------------------

def cmd_extract(args, cfg: RunConfig) -> int:
    """Analyse every manifest row into ``out_dir/<domain>/<utterance_id>.feat``."""
    manifest = read_manifest(args.manifest)
    out = Path(args.out_dir)
    per_domain: dict[str, list] = {}
    for row in manifest:
        wav = read_wav(row.wav_path)
        fs = analyze(wav, cfg.frames)
        dom_dir = out / row.domain
        dom_dir.mkdir(parents=True, exist_ok=True)
        write_features(dom_dir / f"{row.utterance_id}{FEATURE_SUFFIX}", fs)
        per_domain.setdefault(row.domain, []).append(fs)
        log.info("extracted %s (%d frames)", row.utterance_id, fs.n_frames)
    for domain, seqs in sorted(per_domain.items()):
        st = f0_stats(seqs)
        _write_json(out / domain / STATS_NAME, {"mu": st.mu, "sigma": st.sigma, "count": st.count,
                                                "utterances": len(seqs)})
    print(f"extracted {len(manifest)} utterances into {out}")
    return EXIT_OK


def _load_feature_dir(path) -> list:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"feature directory {d} does not exist")
    files = sorted(d.glob(f"*{FEATURE_SUFFIX}"))
    if not files:
        raise UsageError(f"no {FEATURE_SUFFIX} files in {d}")
    return [read_features(f) for f in files]


def cmd_train(args, cfg: RunConfig) -> int:
    config = cfg.cyclegan
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be non-negative")
        config = replace(config, epochs=args.epochs)
    xs = _load_feature_dir(args.x_dir)
    ys = _load_feature_dir(args.y_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOSS_LOG
    resume = None
    prior: list[dict] = []
    if args.resume:
        resume = load_checkpoint(args.resume, expect_config=config)
        # the run length is not part of the model; adopt the requested one
        resume = replace(resume, config=config)
        if log_path.exists():
            prior = [r for r in read_loss_log(log_path) if r["epoch"] <= resume.epoch]
    t0 = time.time()
    try:
        models, records, paths = train(xs, ys, config, out_dir=out, resume=resume)
    except TrainingHalted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    write_loss_log(log_path, prior + records)
    save_bundle(FrontendBundle.from_models(models), out / BUNDLE_NAME)
    print(f"trained to epoch {models.epoch} ({len(paths)} checkpoints, {time.time() - t0:.1f} s); "
          f"bundle {out / BUNDLE_NAME}")
    return EXIT_OK


def _rows_from_args(args):
    if bool(args.manifest) == bool(args.wav):
        raise UsageError("give exactly one of --manifest or --wav")
    if args.manifest:
        return list(read_manifest(args.manifest))
    return [ManifestRow(Path(w).stem, str(w), "", "normal", "", "") for w in args.wav]


def cmd_convert(args, cfg: RunConfig) -> int:
    bundle = load_bundle(args.bundle)
    rows = _rows_from_args(args)
    out = Path(args.out_dir)
    report = batch_convert(rows, bundle, out, cfg.frames)
    # file names only, so reports do not depend on where the tree lives
    for item in report["converted"]:
        item["input"] = Path(item["input"]).name
        item["output"] = Path(item["output"]).name
    for item in report["failed"]:
        item["wav_path"] = Path(item["wav_path"]).name
    _write_json(out / "conversion_report.json", report)
    print(f"converted {len(report['converted'])}, failed {len(report['failed'])}")
    return EXIT_OK


def _read_mock_table(path) -> dict[str, str]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'utterance_id<TAB>hypothesis'")
        uid, hyp = line.split("\t", 1)
        table[uid] = hyp
    return table


def _parse_bundles(specs) -> dict[str, str]:
    out = {}
    for spec in specs or []:
        if "=" not in spec:
            raise UsageError(f"--bundle expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        if not name or name == NO_FE or name in out:
            raise UsageError(f"invalid or duplicate condition name {name!r}")
        out[name] = path
    return out


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = read_manifest(args.manifest)
    if args.mock:
        adapter = MockAdapter(_read_mock_table(args.mock))
    else:
        command = args.adapter or cfg.adapter.command
        if not command:
            raise UsageError("no recogniser: give --adapter, --mock or [adapter] command")
        adapter = CommandAdapter(command, cfg.adapter.timeout)
    conditions: dict[str, FrontendBundle | None] = {NO_FE: None}
    for name, path in _parse_bundles(args.bundle).items():
        conditions[name] = load_bundle(path)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(manifest, conditions, adapter, work_dir=out / "audio",
                      strip_tags=cfg.adapter.strip_tags, parallelism=cfg.adapter.parallelism,
                      spec=cfg.frames)
    write_report(report, out / "report.json", out / "report.txt")
    sys.stdout.write(report.format_table())
    return EXIT_OK


def _parse_feature_args(specs) -> list[tuple[str, Path]]:
    out = []
    for spec in specs:
        if "=" in spec:
            label, path = spec.split("=", 1)
        else:
            label, path = Path(spec).stem, spec
        out.append((label, Path(path)))
    return out


def cmd_viz(args, cfg: RunConfig) -> int:
    from . import viz

    items = _parse_feature_args(args.features)
    mats, labels = [], []
    for label, path in items:
        fs = read_features(path)
        mats.append(fs.mfb)
        labels.extend([label] * fs.n_frames)
    rows = np.vstack(mats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.method == "pca":
        result = viz.pca_2d(rows, labels)
    elif args.method == "tsne":
        perp = args.perplexity if args.perplexity is not None else cfg.viz.perplexity
        result = viz.tsne_2d(rows, labels, perplexity=perp, iters=cfg.viz.iters, seed=cfg.seed)
    else:
        n_filters = rows.shape[1] if (args.all_filters or cfg.viz.all_filters) else 8
        result = viz.violin_summary([rows[:, k] for k in range(n_filters)])
    viz.emit_tsv(result, out.with_suffix(".tsv"))
    viz.emit_svg(result, out.with_suffix(".svg"))
    print(f"wrote {out.with_suffix('.tsv')} and {out.with_suffix('.svg')}")
    return EXIT_OK


def cmd_check_grad(args, cfg: RunConfig) -> int:
    from .gradbattery import TOLERANCE, run_battery, summarize

    t0 = time.time()
    results = run_battery(range(args.seeds), networks=not args.ops_only)
    worst = summarize(results)
    for name, err in worst.items():
        print(f"{name:<18} max rel err {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    bad = [n for n, e in worst.items() if not e < TOLERANCE]
    print(f"{len(results)} checks over {args.seeds} seeds in {time.time() - t0:.1f} s: "
          f"{'all passed' if not bad else 'failures in ' + ', '.join(bad)}")
    return EXIT_OK if not bad else EXIT_CHECK_FAILED


# --- parser --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    epilog = help_table()
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="despk", description="Feature-domain speech front-end: extraction, "
                "CycleGAN training, conversion, ASR scoring and visualisation.",
                epilog=epilog, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, epilog=epilog, formatter_class=fmt)
        sp.add_argument("--config", help="key = value config file with [section] headers")
        sp.add_argument("--seed", type=int, help="overrides DESPK_SEED and the config seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("extract", cmd_extract, "analyse manifest WAVs into feature files and F0 statistics")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out-dir", required=True)

    sp = add("train", cmd_train, "train the two-way mapping on feature directories")
    sp.add_argument("--x-dir", required=True, help="source-domain features (perturbed speech)")
    sp.add_argument("--y-dir", required=True, help="target-domain features (normal speech)")
    sp.add_argument("--out", required=True, help="directory for checkpoints, loss log and bundle")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--epochs", type=int, help="total epochs (overrides [cyclegan] epochs)")

    sp = add("convert", cmd_convert, "convert WAVs with a trained front-end bundle")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--wav", nargs="+")
    sp.add_argument("--out-dir", required=True)

    sp = add("eval", cmd_eval, "score recogniser output with and without the front-end")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--adapter", help="command template; '{wav}' is replaced by the WAV path")
    sp.add_argument("--mock", help="TSV of utterance_id<TAB>hypothesis for the built-in mock recogniser")
    sp.add_argument("--bundle", action="append", help="NAME=PATH front-end condition (repeatable)")
    sp.add_argument("--out-dir", required=True)

    sp = add("viz", cmd_viz, "2-D embeddings or per-filter distributions of MFB frames")
    sp.add_argument("--features", nargs="+", required=True, help="feature files, optionally LABEL=PATH")
    sp.add_argument("--method", choices=("pca", "tsne", "violin"), default="tsne")
    sp.add_argument("--perplexity", type=float)
    sp.add_argument("--all-filters", action="store_true", help="violin: all 24 filters, not just 1-8")
    sp.add_argument("--out", required=True, help="output prefix; .tsv and .svg are written")

    sp = add("check-grad", cmd_check_grad, "finite-difference gradient battery")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--ops-only", action="store_true", help="skip the network checks")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        return args.func(args, cfg)
    except IO_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ManifestError, F0StatsError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
