"""Waveform-to-waveform front-end: analyse, map features with the forward
generator, convert F0, resynthesise."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cyclegan.checkpoint import CheckpointError, canonical_json, pack_arrays, pack_blob, seal, unseal
from .cyclegan.model import FEATURE_DIMS, MFB, GeneratorConfig, Params, generator_forward
from .cyclegan.train import ModelPair, NormStats, feature_matrix
from .numcore import Tensor
from .vocoderfeat import (N_BANDS, F0Stats, FeatureSequence, FrameSpec, Waveform, analyze,
                          read_wav, synthesize, transform_f0, wav_bytes)

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"DSPKFE01"


@dataclass
class FrontendBundle:
    """Everything needed to run the forward (perturbed -> normal) mapping.

    ``generator`` is None for the pass-through bundle used as a no-op
    reference.
    """

    feature_mode: str
    generator_config: GeneratorConfig | None
    generator: Params | None
    src_f0: F0Stats
    tgt_f0: F0Stats
    norm_src: NormStats
    norm_tgt: NormStats

    def __post_init__(self):
        dim = FEATURE_DIMS[self.feature_mode]
        if self.generator is not None and self.generator["in.w"].shape[1] != dim:
            raise ValueError(f"generator expects {self.generator['in.w'].shape[1]} feature dims "
                             f"but feature_mode {self.feature_mode} has {dim}")
        for stats in (self.src_f0, self.tgt_f0):
            if not stats.sigma > 0:
                raise ValueError(f"F0 statistics must have positive sigma, got {stats}")

    @property
    def feat_dim(self) -> int:
        return FEATURE_DIMS[self.feature_mode]

    @classmethod
    def from_models(cls, models: ModelPair) -> "FrontendBundle":
        g = {k: Tensor(v.data) for k, v in models.g_xy.items()}
        return cls(models.config.feature_mode, models.config.generator, g,
                   models.f0_x, models.f0_y, models.norm_x, models.norm_y)

    @classmethod
    def passthrough(cls, feature_mode: str, f0: F0Stats) -> "FrontendBundle":
        dim = FEATURE_DIMS[feature_mode]
        unit = NormStats(np.zeros(dim), np.ones(dim))
        return cls(feature_mode, None, None, f0, f0, unit, unit)


def _pad_frames(mat: np.ndarray, factor: int) -> np.ndarray:
    t = mat.shape[1]
    extra = (-t) % factor
    return np.pad(mat, ((0, 0), (0, extra)), mode="edge") if extra else mat


def convert_features(fs: FeatureSequence, bundle: FrontendBundle) -> FeatureSequence:
    """Map analysed features into the target domain.

    Frames are edge-padded to the generator's downsampling factor and
    trimmed back afterwards.  In MFB mode the AP matrix is passed through
    untouched.
    """
    mat = feature_matrix(fs, bundle.feature_mode)
    if mat.shape[0] != bundle.feat_dim:
        raise ValueError(f"feature dimension {mat.shape[0]} does not match bundle ({bundle.feat_dim})")
    t = fs.n_frames
    if bundle.generator is None:
        out = mat
    else:
        z = _pad_frames(bundle.norm_src.apply(mat), bundle.generator_config.time_factor)
        y = generator_forward(bundle.generator_config, bundle.generator, Tensor(z)).data[:, :t]
        out = bundle.norm_tgt.invert(y)
    mfb = out[:N_BANDS].T
    ap = fs.ap if bundle.feature_mode == MFB else np.clip(out[N_BANDS:].T, 0.0, 1.0)
    log_f0 = transform_f0(fs.log_f0, fs.vuv, bundle.src_f0, bundle.tgt_f0)
    return FeatureSequence(mfb, ap, log_f0, fs.vuv)


def convert_utterance(wav: Waveform, bundle: FrontendBundle, spec: FrameSpec = FrameSpec()) -> Waveform:
    """Analyse, convert and resynthesise one utterance."""
    return synthesize(convert_features(analyze(wav, spec), bundle), spec)


def batch_convert(rows, bundle: FrontendBundle, out_dir, spec: FrameSpec = FrameSpec()) -> dict:
    """Convert every manifest row, writing ``out_dir/<input file name>``.

    Failures are recorded per utterance and do not stop the batch.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    report = {"converted": [], "failed": []}
    for row in rows:
        src = Path(row.wav_path)
        try:
            wav = read_wav(src)
            conv = convert_utterance(wav, bundle, spec)
            dst = out / src.name
            dst.write_bytes(wav_bytes(conv))
        except (OSError, ValueError) as exc:
            log.warning("conversion failed for %s: %s", row.utterance_id, exc)
            report["failed"].append({"utterance_id": row.utterance_id, "wav_path": str(src),
                                     "error": str(exc)})
            continue
        report["converted"].append({"utterance_id": row.utterance_id, "input": str(src),
                                    "output": str(dst), "in_samples": len(wav),
                                    "out_samples": len(conv),
                                    "in_seconds": len(wav) / wav.sample_rate,
                                    "out_seconds": len(conv) / conv.sample_rate})
    return report


# --- bundle file -----------------------------------------------------------

def bundle_bytes(bundle: FrontendBundle) -> bytes:
    meta = {
        "feature_mode": bundle.feature_mode,
        "generator_config": (None if bundle.generator_config is None
                             else json.loads(json.dumps(bundle.generator_config.__dict__))),
        "src_f0": [bundle.src_f0.mu, bundle.src_f0.sigma, bundle.src_f0.count],
        "tgt_f0": [bundle.tgt_f0.mu, bundle.tgt_f0.sigma, bundle.tgt_f0.count],
    }
    arrays = {"norm_src.mean": bundle.norm_src.mean, "norm_src.std": bundle.norm_src.std,
              "norm_tgt.mean": bundle.norm_tgt.mean, "norm_tgt.std": bundle.norm_tgt.std}
    for k, v in (bundle.generator or {}).items():
        arrays[f"g.{k}"] = v.data
    return seal(BUNDLE_MAGIC, struct.pack("<H", 1) + pack_blob(canonical_json(meta))
                 + pack_arrays(arrays))


def bundle_from_bytes(blob: bytes) -> FrontendBundle:
    rd = unseal(blob, BUNDLE_MAGIC, "front-end bundle")
    (version,) = rd.unpack("<H")
    if version != 1:
        raise CheckpointError(f"unsupported bundle version {version}")
    meta = json.loads(rd.blob_bytes())
    arrays = rd.arrays()
    gc = meta["generator_config"]
    gen_cfg = None
    gen = None
    if gc is not None:
        gen_cfg = GeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in gc.items()})
        gen = {k[2:]: Tensor(v) for k, v in arrays.items() if k.startswith("g.")}
    s, t = meta["src_f0"], meta["tgt_f0"]
    return FrontendBundle(meta["feature_mode"], gen_cfg, gen,
                          F0Stats(s[0], s[1], int(s[2])), F0Stats(t[0], t[1], int(t[2])),
                          NormStats(arrays["norm_src.mean"], arrays["norm_src.std"]),
                          NormStats(arrays["norm_tgt.mean"], arrays["norm_tgt.std"]))


def save_bundle(bundle: FrontendBundle, path) -> None:
    Path(path).write_bytes(bundle_bytes(bundle))


def load_bundle(path) -> FrontendBundle:
    return bundle_from_bytes(Path(path).read_bytes())
