"""Synthetic stand-ins for speech corpora.

Two generators live here: vowel-like waveforms (formant-filtered pulse
trains) used to exercise the codec and the end-to-end pipeline, and a
two-domain feature-level corpus used for the translation experiment,
where the perturbed domain is the clean domain after a fixed spectral
tilt, time-varying band-limited noise and an F0 shift.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .vocoderfeat import N_BANDS, SAMPLE_RATE, FeatureSequence, Waveform

VOWEL_FORMANTS = {
    "a": (730.0, 1090.0, 2440.0),
    "i": (270.0, 2290.0, 3010.0),
    "u": (300.0, 870.0, 2240.0),
    "e": (530.0, 1840.0, 2480.0),
    "o": (570.0, 840.0, 2410.0),
}


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int = SAMPLE_RATE) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2.0 * np.pi * freq / sr
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def vowel_waveform(rng: np.random.Generator, duration: float = 0.5, f0: float | None = None,
                   vowel: str | None = None, amplitude: float = 0.3) -> Waveform:
    """Formant-filtered pulse train with a gentle F0 glide and a little breath noise."""
    n = int(duration * SAMPLE_RATE)
    f0 = float(rng.uniform(110.0, 220.0)) if f0 is None else f0
    vowel = vowel or str(rng.choice(sorted(VOWEL_FORMANTS)))
    glide = f0 * (1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(1.0, 3.0) * np.arange(n) / SAMPLE_RATE))
    phase = np.cumsum(glide / SAMPLE_RATE)
    src = np.diff(np.floor(phase), prepend=0.0)
    src += 0.01 * rng.standard_normal(n)
    y = src
    for f, bw in zip(VOWEL_FORMANTS[vowel], (80.0, 100.0, 140.0)):
        y = _resonator(y, f, bw)
    y = y / (np.abs(y).max() + 1e-12) * amplitude
    return Waveform(y)


# --- feature-level two-domain corpus ---------------------------------------

@dataclass(frozen=True)
class PerturbationSpec:
    """Clean -> perturbed mapping of feature sequences."""

    tilt_intercept: float = 2.0
    tilt_slope: float = -3.0          # across the 24 bands, low bands boosted
    noise_bands: tuple[int, int] = (8, 18)
    noise_level_range: tuple[float, float] = (-1.0, 2.5)   # log power relative to band
    f0_shift: float = float(np.log(1.3))

    @property
    def tilt(self) -> np.ndarray:
        return self.tilt_intercept + self.tilt_slope * np.arange(N_BANDS) / (N_BANDS - 1)


def clean_features(rng: np.random.Generator, n_frames: int = 96) -> FeatureSequence:
    """Speech-like log band energies: three formant bumps that jump between short segments."""
    bands = np.arange(N_BANDS)
    # phone-like segments of 6-16 frames (30-80 ms)
    lengths = []
    while sum(lengths) < n_frames:
        lengths.append(int(rng.integers(6, 17)))
    n_seg = len(lengths)
    seg_id = np.repeat(np.arange(n_seg), lengths)[:n_frames]
    centers = rng.uniform([1.0, 6.0, 12.0], [6.0, 12.0, 19.0], size=(n_seg, 3))
    heights = rng.uniform(1.5, 4.5, size=(n_seg, 3))
    # smooth the segment transitions over ~4 frames
    kern = np.ones(4) / 4.0

    def smooth(v):
        return np.convolve(np.pad(v, (2, 1), mode="edge"), kern, "valid")[:n_frames]

    c_t = np.stack([smooth(centers[seg_id, j]) for j in range(3)], axis=1)
    h_t = np.stack([smooth(heights[seg_id, j]) for j in range(3)], axis=1)
    env = np.zeros((n_frames, N_BANDS))
    for j in range(3):
        env += h_t[:, j:j + 1] * np.exp(-0.5 * ((bands[None, :] - c_t[:, j:j + 1]) / 1.8) ** 2)
    energy = np.log(np.exp(env) + 0.5) - 1.0 - 0.08 * bands[None, :]
    mfb = energy + 0.05 * rng.standard_normal(energy.shape)
    vuv = np.ones(n_frames, dtype=bool)
    edge = int(rng.integers(2, 6))
    vuv[:edge] = False
    vuv[-edge:] = False
    ap = np.where(vuv[:, None], np.clip(0.05 + 0.02 * bands[None, :]
                                        + 0.02 * rng.random((n_frames, N_BANDS)), 0, 1), 1.0)
    base = np.log(rng.uniform(100.0, 180.0))
    contour = base + 0.08 * np.sin(np.linspace(0, np.pi * rng.uniform(0.5, 2.0), n_frames))
    log_f0 = np.where(vuv, contour, 0.0)
    return FeatureSequence(mfb, ap, log_f0, vuv)


def perturb_features(clean: FeatureSequence, rng: np.random.Generator,
                     spec: PerturbationSpec = PerturbationSpec()) -> FeatureSequence:
    """Apply tilt, bursty band-limited noise (raising aperiodicity) and an F0 shift."""
    t = clean.n_frames
    lo, hi = spec.noise_bands
    # piecewise-constant noise level over short bursts
    n_burst = max(1, t // 12)
    levels = rng.uniform(*spec.noise_level_range, size=n_burst)
    level_t = np.repeat(levels, int(np.ceil(t / n_burst)))[:t]
    signal = np.exp(clean.mfb + spec.tilt[None, :])
    noise = np.zeros_like(signal)
    band_ref = np.exp(clean.mfb[:, lo:hi].mean(axis=1, keepdims=True))
    noise[:, lo:hi] = band_ref * np.exp(level_t)[:, None]
    total = signal + noise
    mfb = np.log(total)
    frac_clean = signal / total
    ap = np.where(clean.vuv[:, None], 1.0 - (1.0 - clean.ap) * frac_clean, 1.0)
    log_f0 = np.where(clean.vuv, clean.log_f0 + spec.f0_shift, 0.0)
    return FeatureSequence(mfb, np.clip(ap, 0.0, 1.0), log_f0, clean.vuv)


def two_domain_corpus(n_x: int, n_y: int, seed: int, n_frames: int = 96,
                      spec: PerturbationSpec = PerturbationSpec()):
    """Non-parallel training corpora plus the clean originals of the X side.

    Returns (xs, ys, x_clean): X utterances are perturbed versions of clean
    draws that are independent of the Y draws.
    """
    rng = np.random.default_rng(seed)
    ys = [clean_features(rng, n_frames) for _ in range(n_y)]
    x_clean = [clean_features(rng, n_frames) for _ in range(n_x)]
    xs = [perturb_features(c, rng, spec) for c in x_clean]
    return xs, ys, x_clean


# --- translation experiment -------------------------------------------------------

@dataclass
class ExperimentResult:
    feature_mode: str
    epochs: int
    seconds: float
    cycle_by_epoch: list[float]       # mean weighted cycle loss per epoch
    converted_dist: np.ndarray        # per held-out utterance, MFB L1 to the clean original
    raw_dist: np.ndarray              # same, without conversion

    @property
    def cycle_ratio(self) -> float:
        return self.cycle_by_epoch[-1] / self.cycle_by_epoch[0]

    @property
    def improved_fraction(self) -> float:
        return float(np.mean(self.converted_dist < self.raw_dist))


def experiment_config(feature_mode: str, epochs: int = 200, seed: int = 0):
    """Reduced-width model sized so 200 epochs on 30+30 utterances fit a desk budget."""
    from .cyclegan import CycleGanConfig, DiscriminatorConfig, GeneratorConfig

    gen = GeneratorConfig(in_kernel=5, in_channels=32, down_kernel=5, down_channels=(64, 64),
                          res_blocks=6, res_kernel=3, up_kernel=5, up_channels=(64, 32), out_kernel=5)
    disc = DiscriminatorConfig(channels=(8, 16, 32, 32))
    return CycleGanConfig(feature_mode=feature_mode, epochs=epochs, seed=seed, generator=gen,
                          discriminator=disc)


def run_experiment(feature_mode: str, epochs: int = 200, n_train: int = 30, n_heldout: int = 20,
                   n_frames: int = 128, seed: int = 0) -> ExperimentResult:
    """Train X -> Y on non-parallel synthetic corpora and score held-out conversions."""
    import time

    from .cyclegan import train
    from .frontend import FrontendBundle, convert_features

    xs, ys, _ = two_domain_corpus(n_train, n_train, seed=seed, n_frames=n_frames)
    held_x, _, held_clean = two_domain_corpus(n_heldout, 1, seed=seed + 1000, n_frames=n_frames)
    t0 = time.time()
    models, records, _ = train(xs, ys, experiment_config(feature_mode, epochs, seed))
    seconds = time.time() - t0
    cyc = [float(np.mean([r["loss_cyc"] for r in records if r["epoch"] == e]))
           for e in range(1, epochs + 1)]
    bundle = FrontendBundle.from_models(models)
    conv = np.array([np.abs(convert_features(x, bundle).mfb - c.mfb).mean()
                     for x, c in zip(held_x, held_clean)])
    raw = np.array([np.abs(x.mfb - c.mfb).mean() for x, c in zip(held_x, held_clean)])
    return ExperimentResult(feature_mode, epochs, seconds, cyc, conv, raw)
