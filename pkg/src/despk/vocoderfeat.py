"""Analysis/synthesis feature codec: 24 log mel-band energies, 24 band
aperiodicities, log-F0 and voicing at a 5 ms hop, plus a simple
excitation/filter resynthesiser and the file formats for waveforms and
feature sequences."""
from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

SAMPLE_RATE = 16000
N_BANDS = 24
MFB_FLOOR = 1e-10
FEATURE_MAGIC = b"DSPK1"


class WavFormatError(ValueError):
    """Unsupported or malformed WAV data."""


class FeatureFormatError(ValueError):
    """Malformed feature file."""


class F0StatsError(ValueError):
    """Too few (or identical) voiced frames to form log-F0 statistics."""


@dataclass(frozen=True)
class FrameSpec:
    window_len: int = 320
    hop: int = 80
    fft_size: int = 512
    sample_rate: int = SAMPLE_RATE
    f0_min: float = 60.0
    f0_max: float = 400.0
    voicing_threshold: float = 0.3
    rms_floor: float = 1e-4

    def __post_init__(self):
        if self.hop > self.window_len:
            raise ValueError(f"hop ({self.hop}) must not exceed window_len ({self.window_len})")
        if self.fft_size < self.window_len:
            raise ValueError(f"fft_size ({self.fft_size}) must be >= window_len ({self.window_len})")
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"only {SAMPLE_RATE} Hz is supported, got {self.sample_rate}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.window_len) // self.hop


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise WavFormatError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise WavFormatError("waveform must be mono (1-d samples)")
        if not np.all(np.isfinite(self.samples)):
            raise WavFormatError("waveform contains NaN or infinite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FeatureSequence:
    mfb: np.ndarray      # T x 24 log band energies
    ap: np.ndarray       # T x 24 in [0, 1]
    log_f0: np.ndarray   # T, 0.0 on unvoiced frames
    vuv: np.ndarray      # T bool

    def __post_init__(self):
        self.mfb = np.asarray(self.mfb, dtype=np.float64)
        self.ap = np.asarray(self.ap, dtype=np.float64)
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64)
        self.vuv = np.asarray(self.vuv, dtype=bool)
        t = len(self.vuv)
        if self.mfb.shape != (t, N_BANDS) or self.ap.shape != (t, N_BANDS) or self.log_f0.shape != (t,):
            raise ValueError(f"inconsistent feature shapes: mfb {self.mfb.shape}, ap {self.ap.shape}, "
                             f"log_f0 {self.log_f0.shape}, vuv {self.vuv.shape}")
        if np.any(self.ap < 0) or np.any(self.ap > 1):
            raise ValueError("ap values must lie in [0, 1]")
        if not np.all(np.isfinite(self.log_f0[self.vuv])):
            raise ValueError("log_f0 must be finite on voiced frames")

    @property
    def n_frames(self) -> int:
        return len(self.vuv)

    def equals(self, other: "FeatureSequence") -> bool:
        return (np.array_equal(self.mfb, other.mfb) and np.array_equal(self.ap, other.ap)
                and np.array_equal(self.log_f0, other.log_f0) and np.array_equal(self.vuv, other.vuv))


@dataclass(frozen=True)
class F0Stats:
    mu: float
    sigma: float
    count: int


# --- framing and spectra ---------------------------------------------------

@lru_cache(maxsize=8)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window (sums to a constant under 75% overlap)."""
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_signal(wav: Waveform, spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Hann-windowed frames, shape T x window_len."""
    x = wav.samples
    if len(x) < spec.window_len:
        raise ValueError(f"signal has {len(x)} samples, need at least window_len={spec.window_len}")
    t = spec.n_frames(len(x))
    idx = np.arange(t)[:, None] * spec.hop + np.arange(spec.window_len)[None, :]
    return x[idx] * hann(spec.window_len)


def stft_mag(frames: np.ndarray, fft_size: int = 512) -> np.ndarray:
    """One-sided DFT magnitudes, T x (fft_size/2 + 1)."""
    return np.abs(np.fft.rfft(frames, n=fft_size, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_filterbank_cached(n_mels: int, f_min: float, f_max: float, fft_size: int,
                           sample_rate: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[m] = np.clip(np.minimum(rise, fall), 0.0, None)
    fb.setflags(write=False)
    return fb


def mel_filterbank_matrix(n_mels: int = N_BANDS, f_min: float = 0.0, f_max: float = 8000.0,
                          fft_size: int = 512, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with unit peaks at mel-spaced centres, n_mels x (fft_size/2+1).

    Adjacent triangles share edges, so columns sum to 1 between the first
    and last centre frequencies.
    """
    return _mel_filterbank_cached(n_mels, float(f_min), float(f_max), fft_size, sample_rate)


def mel_centers(n_mels: int = N_BANDS, f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def extract_mfb(spectra: np.ndarray, filterbank: np.ndarray) -> np.ndarray:
    """Log mel-band power, T x n_mels, floored at 1e-10 before the log."""
    if spectra.shape[1] != filterbank.shape[1]:
        raise ValueError(f"spectra have {spectra.shape[1]} bins, filterbank expects {filterbank.shape[1]}")
    return np.log(np.maximum((spectra ** 2) @ filterbank.T, MFB_FLOOR))


# --- F0 ----------------------------------------------------------------------

def _nccf(x: np.ndarray, start: int, n: int, lags: np.ndarray) -> np.ndarray:
    seg = x[start:start + n]
    e0 = seg @ seg
    out = np.zeros(len(lags))
    for i, lag in enumerate(lags):
        other = x[start + lag:start + lag + n]
        e1 = other @ other
        if e0 > 0 and e1 > 0:
            out[i] = (seg @ other) / np.sqrt(e0 * e1)
    return out


def estimate_f0(wav: Waveform, spec: FrameSpec = FrameSpec()) -> tuple[np.ndarray, np.ndarray]:
    """Normalised cross-correlation pitch tracker.

    Each frame's ``window_len`` samples are correlated with the same-length
    segment ``lag`` samples later, for lags covering ``f0_max``..``f0_min``.
    The shortest-lag local maximum within 85% of the best peak wins, which
    suppresses period-doubling.  Returns (f0 in Hz, 0 where unvoiced; vuv).
    """
    x = wav.samples
    n = spec.window_len
    t = spec.n_frames(len(x)) if len(x) >= n else 0
    min_lag = int(np.floor(spec.sample_rate / spec.f0_max))
    max_lag = int(np.ceil(spec.sample_rate / spec.f0_min))
    lags = np.arange(min_lag - 1, max_lag + 2)
    xp = np.concatenate([x, np.zeros(max_lag + 2)])
    f0 = np.zeros(t)
    vuv = np.zeros(t, dtype=bool)
    for i in range(t):
        start = i * spec.hop
        seg = x[start:start + n]
        if np.sqrt(np.mean(seg ** 2)) < spec.rms_floor:
            continue
        r = _nccf(xp, start, n, lags)
        inner = r[1:-1]
        is_peak = (inner >= r[:-2]) & (inner > r[2:])
        peaks = np.flatnonzero(is_peak) + 1
        if len(peaks) == 0:
            continue
        best = r[peaks].max()
        if best < spec.voicing_threshold:
            continue
        k = peaks[np.argmax(r[peaks] >= 0.85 * best)]
        a, b, c = r[k - 1], r[k], r[k + 1]
        denom = a - 2.0 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        lag = lags[k] + shift
        f0_val = spec.sample_rate / lag
        if spec.f0_min * 0.95 <= f0_val <= spec.f0_max * 1.05:
            f0[i] = f0_val
            vuv[i] = True
    return f0, vuv


# --- aperiodicity ----------------------------------------------------------

@lru_cache(maxsize=8)
def _window_power_spectrum(window_len: int, fft_size: int) -> np.ndarray:
    return np.abs(np.fft.rfft(hann(window_len), n=fft_size)) ** 2


def _autocorr_at(power: np.ndarray, lag: float, fft_size: int) -> np.ndarray:
    """Autocorrelation at ``lag`` (samples, may be fractional) from one-sided power spectra.

    ``power`` is (..., n_bins); returns (...,).  Uses the cosine series of the
    inverse DFT, so lags beyond fft_size - window_len alias circularly.
    """
    k = np.arange(power.shape[-1])
    c = np.cos(2.0 * np.pi * k * lag / fft_size)
    wts = np.full(power.shape[-1], 2.0)
    wts[0] = 1.0
    if fft_size % 2 == 0:
        wts[-1] = 1.0
    return (power * (wts * c)).sum(axis=-1)


def estimate_ap(spectra: np.ndarray, f0: np.ndarray, vuv: np.ndarray,
                spec: FrameSpec = FrameSpec(), filterbank: np.ndarray | None = None) -> np.ndarray:
    """Band aperiodicity, T x 24.

    For each mel band the frame power spectrum is weighted by the band's
    triangle, turned into an autocorrelation, and read at the pitch lag.
    The value is divided by the analysis window's own normalised
    autocorrelation at that lag so a stationary periodic band scores 1.
    ap = 1 - that correlation, clamped to [0, 1]; unvoiced frames are 1.
    """
    if not (len(spectra) == len(f0) == len(vuv)):
        raise ValueError(f"length mismatch: spectra {len(spectra)}, f0 {len(f0)}, vuv {len(vuv)}")
    fb = mel_filterbank_matrix(fft_size=spec.fft_size) if filterbank is None else filterbank
    wpow = _window_power_spectrum(spec.window_len, spec.fft_size)
    ap = np.ones((len(spectra), fb.shape[0]))
    power = spectra ** 2
    for i in np.flatnonzero(vuv):
        lag = spec.sample_rate / f0[i]
        band_pow = power[i][None, :] * fb                      # bands x bins
        r_lag = _autocorr_at(band_pow, lag, spec.fft_size)
        r0 = _autocorr_at(band_pow, 0.0, spec.fft_size)
        w_rho = _autocorr_at(wpow, lag, spec.fft_size) / _autocorr_at(wpow, 0.0, spec.fft_size)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(r0 > 0, r_lag / (r0 * w_rho), 0.0)
        ap[i] = np.clip(1.0 - corr, 0.0, 1.0)
    return ap


# --- F0 statistics and conversion -----------------------------------------

def f0_stats(corpus) -> F0Stats:
    """Pooled mean and population std of voiced log-F0 over feature sequences."""
    vals = np.concatenate([fs.log_f0[fs.vuv] for fs in corpus]) if corpus else np.zeros(0)
    if len(vals) < 2:
        raise F0StatsError(f"need at least 2 voiced frames, got {len(vals)}")
    mu = float(vals.mean())
    sigma = float(vals.std())
    if not sigma > 0:
        raise F0StatsError("voiced log-F0 values are all identical (sigma = 0)")
    return F0Stats(mu, sigma, len(vals))


def transform_f0(log_f0: np.ndarray, vuv: np.ndarray, src: F0Stats, tgt: F0Stats) -> np.ndarray:
    """Log-Gaussian normalised mapping of voiced log-F0 from source to target statistics."""
    if not src.sigma > 0:
        raise F0StatsError(f"source sigma must be positive, got {src.sigma}")
    out = np.array(log_f0, dtype=np.float64, copy=True)
    v = np.asarray(vuv, dtype=bool)
    out[v] = (out[v] - src.mu) / src.sigma * tgt.sigma + tgt.mu
    return out


# --- analysis --------------------------------------------------------------

def analyze(wav: Waveform, spec: FrameSpec = FrameSpec()) -> FeatureSequence:
    frames = frame_signal(wav, spec)
    spectra = stft_mag(frames, spec.fft_size)
    fb = mel_filterbank_matrix(fft_size=spec.fft_size)
    mfb = extract_mfb(spectra, fb)
    f0, vuv = estimate_f0(wav, spec)
    ap = estimate_ap(spectra, f0, vuv, spec, fb)
    log_f0 = np.zeros(len(f0))
    log_f0[vuv] = np.log(f0[vuv])
    return FeatureSequence(mfb, ap, log_f0, vuv)


# --- synthesis -------------------------------------------------------------

def _tikhonov_nnls(fb: np.ndarray, m: np.ndarray, damping: float, max_iter: int = 100) -> np.ndarray:
    """Active-set solve of min ||F e - m||^2 + damping ||e||^2 subject to e >= 0.

    The free-set subproblem has the closed form F_S^T (F_S F_S^T + damping I)^-1 m,
    a system of size n_bands, so each iteration is cheap.  Falls back to
    scipy's NNLS on the stacked system if the active set does not settle.
    """
    n_bands, n_bins = fb.shape
    free = np.ones(n_bins, dtype=bool)
    eye = damping * np.eye(n_bands)
    for _ in range(max_iter):
        fs = fb[:, free]
        e = np.zeros(n_bins)
        e[free] = fs.T @ np.linalg.solve(fs @ fs.T + eye, m)
        neg = free & (e < 0)
        if neg.any():
            free &= ~neg
            continue
        grad = fb.T @ (fb @ e - m) + damping * e
        release = ~free & (grad < -1e-12)
        if not release.any():
            return e
        free |= release
    a = np.vstack([fb, np.sqrt(damping) * np.eye(n_bins)])
    e, _ = nnls(a, np.concatenate([m, np.zeros(n_bins)]), maxiter=50 * n_bins)
    return e


def spectral_envelope(mfb_row: np.ndarray, filterbank: np.ndarray, damping: float = 1e-3) -> np.ndarray:
    """Non-negative per-bin power envelope whose filterbank projection matches exp(mfb).

    Solves min ||F e - m||^2 + damping ||e||^2, e >= 0, on m scaled to unit
    peak so the damping is level independent.
    """
    m = np.exp(mfb_row)
    peak = m.max()
    if peak <= MFB_FLOOR * 1.0000001:
        return np.zeros(filterbank.shape[1])
    return _tikhonov_nnls(filterbank, m / peak, damping) * peak


def _pulse_train(log_f0: np.ndarray, vuv: np.ndarray, n_samples: int, spec: FrameSpec) -> np.ndarray:
    """Unit impulses placed by integrating the frame-wise F0 track."""
    t = len(vuv)
    centers = np.arange(t) * spec.hop + spec.window_len / 2.0
    f0 = np.where(vuv, np.exp(np.where(vuv, log_f0, 0.0)), 0.0)
    n = np.arange(n_samples)
    frame_idx = np.clip(np.searchsorted(centers, n) - 1, 0, t - 1) if t > 1 else np.zeros(n_samples, int)
    inst = f0[frame_idx]
    pulses = np.zeros(n_samples)
    phase = 0.0
    for i in range(n_samples):
        if inst[i] <= 0:
            phase = 0.0
            continue
        phase += inst[i] / spec.sample_rate
        if phase >= 1.0 or (i > 0 and inst[i - 1] <= 0):
            pulses[i] = 1.0
            phase %= 1.0
    return pulses


def synthesize(features: FeatureSequence, spec: FrameSpec = FrameSpec(), seed: int = 0,
               damping: float = 1e-3) -> Waveform:
    """Excitation/filter resynthesis with weighted overlap-add.

    Per frame, a pulse train (voiced) and white noise are windowed and
    normalised to unit mean bin power, mixed per bin by the interpolated
    aperiodicity, and shaped by the magnitude envelope recovered from the
    MFB row.  Frames are overlap-added with the Hann window and the result
    is scaled down only if its peak exceeds 0.99.
    """
    t = features.n_frames
    n = spec.window_len
    n_samples = (t - 1) * spec.hop + n
    fb = mel_filterbank_matrix(fft_size=spec.fft_size)
    # per-bin aperiodicity: filterbank-weighted average of band values
    col = fb.sum(axis=0)
    ap_bins = np.where(col > 0, (features.ap @ fb) / np.where(col > 0, col, 1.0), 1.0)
    # bins outside the filter support inherit the nearest band
    ap_bins[:, col <= 0] = np.where(np.arange(fb.shape[1])[col <= 0] < fb.shape[1] // 2,
                                    features.ap[:, :1], features.ap[:, -1:])
    pulses = _pulse_train(features.log_f0, features.vuv, n_samples, spec)
    noise = np.random.default_rng(seed).standard_normal(n_samples)
    w = hann(n)
    out = np.zeros(n_samples)
    norm = np.zeros(n_samples)
    for i in range(t):
        s = i * spec.hop
        env = np.sqrt(spectral_envelope(features.mfb[i], fb, damping))
        nz = np.fft.rfft(noise[s:s + n] * w, n=spec.fft_size)
        nz /= np.sqrt(np.mean(np.abs(nz) ** 2)) + 1e-300
        if features.vuv[i]:
            pz = np.fft.rfft(pulses[s:s + n] * w, n=spec.fft_size)
            pp = np.mean(np.abs(pz) ** 2)
            pz = pz / np.sqrt(pp) if pp > 0 else nz
            a = ap_bins[i]
            exc = np.sqrt(1.0 - a) * pz + np.sqrt(a) * nz
        else:
            exc = nz
        frame = np.fft.irfft(env * exc, n=spec.fft_size)[:n]
        out[s:s + n] += frame * w
        norm[s:s + n] += w * w
    # the window-power floor keeps the first/last few samples from blowing up
    out = out / np.maximum(norm, 0.1)
    peak = np.abs(out).max(initial=0.0)
    if peak > 0.99:
        out *= 0.99 / peak
    return Waveform(out)


# --- file formats ----------------------------------------------------------

def read_wav(path) -> Waveform:
    """Read 16-bit little-endian PCM mono 16 kHz RIFF data."""
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
            if wf.getsampwidth() != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
            if wf.getframerate() != SAMPLE_RATE:
                raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()} Hz")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data)


def wav_bytes(wav: Waveform) -> bytes:
    pcm = np.clip(np.round(wav.samples * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(path, wav: Waveform) -> None:
    Path(path).write_bytes(wav_bytes(wav))


def feature_bytes(fs: FeatureSequence) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<I", fs.n_frames)]
    for arr in (fs.mfb, fs.ap, fs.log_f0):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(np.packbits(fs.vuv).tobytes())
    return b"".join(parts)


def features_from_bytes(blob: bytes) -> FeatureSequence:
    if blob[:5] != FEATURE_MAGIC:
        raise FeatureFormatError(f"bad magic {blob[:5]!r}, expected {FEATURE_MAGIC!r}")
    (t,) = struct.unpack_from("<I", blob, 5)
    off = 9
    need = off + 8 * t * (2 * N_BANDS + 1) + (t + 7) // 8
    if len(blob) != need:
        raise FeatureFormatError(f"feature blob has {len(blob)} bytes, expected {need} for T={t}")

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        return arr

    mfb = take(t * N_BANDS).reshape(t, N_BANDS)
    ap = take(t * N_BANDS).reshape(t, N_BANDS)
    log_f0 = take(t)
    vuv = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, offset=off), count=t).astype(bool)
    return FeatureSequence(mfb, ap, log_f0, vuv)


def write_features(path, fs: FeatureSequence) -> None:
    Path(path).write_bytes(feature_bytes(fs))


def read_features(path) -> FeatureSequence:
    return features_from_bytes(Path(path).read_bytes())
