"""2-D embeddings of frame features and per-filter distribution summaries,
written as TSV tables and standalone SVG figures."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from scipy.spatial.distance import pdist, squareform

PCA = "PCA"
TSNE = "TSNE"
# fixed class palette, assigned to labels in sorted order
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

MAX_TSNE_POINTS = 5000
KDE_POINTS = 32
BANDWIDTH_FLOOR = 1e-6


@dataclass
class EmbeddingResult:
    points: np.ndarray
    labels: list[str]
    method: str
    final_objective: float
    initial_objective: float | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"embedding points must be N x 2, got {self.points.shape}")
        if len(self.labels) != self.points.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.points.shape[0]} points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("embedding contains non-finite points")
        if self.method not in (PCA, TSNE):
            raise ValueError(f"unknown embedding method {self.method!r}")


def _as_rows(rows) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an N x D matrix, got shape {x.shape}")
    return x


def _labels(labels, n: int) -> list[str]:
    return [""] * n if labels is None else [str(l) for l in labels]


# --- PCA ------------------------------------------------------------------------

def pca_2d(rows, labels: Sequence | None = None) -> EmbeddingResult:
    """Project centred rows onto the top two covariance eigenvectors.

    Each axis is signed so its largest-magnitude loading is positive.
    ``final_objective`` is the explained variance ratio of the two axes.
    """
    x = _as_rows(rows)
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"pca_2d needs at least 3 rows, got {n}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total_var = evals.sum()
    if not total_var > 1e-300 or evals[0] <= 1e-12 * max(1.0, np.abs(x).max()) ** 2:
        raise ValueError("pca_2d: data has rank 0 (all rows identical)")
    axes = evecs[:, :2].copy()
    for k in range(2):
        j = np.argmax(np.abs(axes[:, k]))
        if axes[j, k] < 0:
            axes[:, k] = -axes[:, k]
    pts = xc @ axes
    return EmbeddingResult(pts, _labels(labels, n), PCA, float(evals[:2].sum() / total_var))


# --- t-SNE ----------------------------------------------------------------------

def _entropy_bits(d2: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise conditional distributions and their entropies (bits)."""
    shifted = d2 - np.where(np.isfinite(d2), d2, np.inf).min(axis=1, keepdims=True)
    p = np.exp(-shifted * beta[:, None])
    p /= p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log2(p), 0.0).sum(axis=1)
    return p, h


def conditional_affinities(x: np.ndarray, perplexity: float, tol: float = 1e-4,
                           max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gaussian affinities whose entropy matches log2(perplexity).

    Bisection on log precision is run for all rows at once.  Returns the
    conditional matrix and the achieved entropies in bits.
    """
    n = x.shape[0]
    d2 = squareform(pdist(x, "sqeuclidean"))
    np.fill_diagonal(d2, np.inf)
    target = np.log2(perplexity)
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    log_beta = np.zeros(n)
    scale = np.median(d2[np.isfinite(d2)])
    if scale > 0:
        log_beta -= np.log(scale)
    for _ in range(max_iter):
        p, h = _entropy_bits(d2, np.exp(log_beta))
        diff = h - target
        if np.all(np.abs(diff) < tol):
            break
        # entropy too high -> sharpen (raise precision)
        up = diff > 0
        lo = np.where(up, log_beta, lo)
        hi = np.where(up, hi, log_beta)
        step = np.where(np.isfinite(lo) & np.isfinite(hi), (lo + hi) / 2.0,
                        np.where(up, log_beta + 1.0, log_beta - 1.0))
        log_beta = np.where(np.abs(diff) < tol, log_beta, step)
    p, h = _entropy_bits(d2, np.exp(log_beta))
    return p, h


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _student_q(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squareform(pdist(y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    return np.maximum(num / num.sum(), 1e-12), num


def tsne_2d(rows, labels: Sequence | None = None, perplexity: float = 30.0, iters: int = 1000,
            seed: int = 0, learning_rate: float = 200.0, exaggeration: float = 12.0,
            exaggeration_iters: int = 250, momentum_switch: int = 250) -> EmbeddingResult:
    """Exact t-SNE with a Student-t output kernel.

    ``initial_objective`` is the KL divergence of the random start and
    ``final_objective`` that of the returned embedding, both without
    exaggeration.
    """
    x = _as_rows(rows)
    n = x.shape[0]
    if n > MAX_TSNE_POINTS:
        raise ValueError(f"tsne_2d is exact O(N^2); N={n} exceeds {MAX_TSNE_POINTS}")
    if not 5.0 <= perplexity <= (n - 1) / 3.0:
        raise ValueError(f"perplexity {perplexity} outside [5, (N-1)/3 = {(n - 1) / 3.0:.3g}] for N={n}")
    if iters < 1:
        raise ValueError(f"iters must be positive, got {iters}")
    cond, _ = conditional_affinities(x, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)

    rng = np.random.default_rng(seed)
    y = 1e-4 * rng.standard_normal((n, 2))
    initial_kl = _kl(p, _student_q(y)[0])
    if not np.ptp(x, axis=0).any():
        # identical inputs: the affinities are uniform and a single point is
        # the only embedding that mirrors the input geometry
        y = np.zeros((n, 2))
        return EmbeddingResult(y, _labels(labels, n), TSNE, _kl(p, _student_q(y)[0]), initial_kl)
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    for it in range(iters):
        pe = p * exaggeration if it < exaggeration_iters else p
        q, num = _student_q(y)
        w = (pe - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        momentum = 0.5 if it < momentum_switch else 0.8
        same = np.sign(grad) == np.sign(velocity)
        gains = np.maximum(np.where(same, gains * 0.8, gains + 0.2), 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    final_kl = _kl(p, _student_q(y)[0])
    return EmbeddingResult(y, _labels(labels, n), TSNE, final_kl, initial_kl)


# --- violin summaries -------------------------------------------------------------

@dataclass
class FilterSummary:
    filter_index: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    bandwidth: float
    density: np.ndarray


@dataclass
class ViolinSummary:
    grid: np.ndarray
    filters: list[FilterSummary]


def silverman_bandwidth(v: np.ndarray) -> float:
    q1, q3 = np.percentile(v, [25, 75])
    spread = min(np.std(v, ddof=1), (q3 - q1) / 1.34)
    if spread <= 0:
        spread = np.std(v, ddof=1)
    return max(0.9 * spread * len(v) ** -0.2, BANDWIDTH_FLOOR)


def violin_summary(values: Sequence, first_index: int = 1) -> ViolinSummary:
    """Quartiles and a grid-normalised Gaussian KDE for each filter's values.

    The KDE is evaluated on 32 points spanning the global range and
    rescaled so its trapezoid integral over the grid is 1.  The kernel
    used on the grid is never narrower than the grid step, so a
    constant array still yields a single visible peak.
    """
    arrays = [np.asarray(v, dtype=np.float64).ravel() for v in values]
    if not arrays:
        raise ValueError("violin_summary needs at least one filter")
    for i, a in enumerate(arrays):
        if a.size < 5:
            raise ValueError(f"filter {first_index + i}: need at least 5 values, got {a.size}")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"filter {first_index + i}: non-finite values")
    lo = min(a.min() for a in arrays)
    hi = max(a.max() for a in arrays)
    if hi == lo:
        # unit-width grid with the constant value on a grid point
        step = 2.0 / KDE_POINTS
        lo, hi = lo - (KDE_POINTS // 2 - 1) * step, hi + (KDE_POINTS // 2) * step
    grid = np.linspace(lo, hi, KDE_POINTS)
    step = grid[1] - grid[0]
    out = []
    for i, a in enumerate(arrays):
        q = np.percentile(a, [0, 25, 50, 75, 100])
        bw = silverman_bandwidth(a)
        h = max(bw, step)
        z = (grid[:, None] - a[None, :]) / h
        dens = np.exp(-0.5 * z * z).sum(axis=1) / (a.size * h * np.sqrt(2 * np.pi))
        area = np.trapezoid(dens, grid)
        dens = dens / area if area > 0 else dens
        out.append(FilterSummary(first_index + i, *map(float, q), bw, dens))
    return ViolinSummary(grid, out)


# --- TSV --------------------------------------------------------------------------

def _g(v: float) -> str:
    return format(float(v), ".17g")


def emit_tsv(result, path) -> None:
    """One row per point (embeddings) or per filter/grid cell (violins)."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if isinstance(result, EmbeddingResult):
            w.writerow(["x", "y", "label", "method", "objective"])
            for (px, py), lab in zip(result.points, result.labels):
                w.writerow([_g(px), _g(py), lab, result.method, _g(result.final_objective)])
        elif isinstance(result, ViolinSummary):
            w.writerow(["filter", "min", "q1", "median", "q3", "max", "bandwidth", "grid", "density"])
            for f in result.filters:
                stats = [_g(v) for v in (f.minimum, f.q1, f.median, f.q3, f.maximum, f.bandwidth)]
                for gv, dv in zip(result.grid, f.density):
                    w.writerow([f.filter_index, *stats, _g(gv), _g(dv)])
        else:
            raise TypeError(f"cannot write {type(result).__name__} as TSV")


def read_embedding_tsv(path) -> EmbeddingResult:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    if not rows:
        raise ValueError(f"{path}: empty embedding table")
    pts = np.array([[float(r["x"]), float(r["y"])] for r in rows])
    return EmbeddingResult(pts, [r["label"] for r in rows], rows[0]["method"], float(rows[0]["objective"]))


def read_violin_tsv(path) -> ViolinSummary:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    by_filter: dict[int, list[dict]] = {}
    for r in rows:
        by_filter.setdefault(int(r["filter"]), []).append(r)
    grid = None
    filters = []
    for idx, rs in by_filter.items():
        g = np.array([float(r["grid"]) for r in rs])
        grid = g if grid is None else grid
        r0 = rs[0]
        filters.append(FilterSummary(idx, *(float(r0[k]) for k in ("min", "q1", "median", "q3", "max",
                                                                     "bandwidth")),
                                     np.array([float(r["density"]) for r in rs])))
    return ViolinSummary(grid, filters)


# --- SVG --------------------------------------------------------------------------

def _svg(width: int, height: int, body: list[str], title: str) -> str:
    return "\n".join([
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<title>{escape(title)}</title>",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        *body, "</svg>", ""])


def class_colors(labels: Sequence[str]) -> dict[str, str]:
    return {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(sorted(set(labels)))}


def embedding_svg(result: EmbeddingResult, size: int = 480, margin: int = 30) -> str:
    pts = result.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = margin + (pts - lo) / span * (size - 2 * margin)
    colors = class_colors(result.labels)
    body = [f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="{colors[lab]}" '
            f'fill-opacity="0.7"><title>{escape(lab)}</title></circle>'
            for (x, y), lab in zip(xy, result.labels)]
    for k, (lab, col) in enumerate(colors.items()):
        body.append(f'<text x="{margin}" y="{14 + 14 * k}" font-size="12" fill="{col}">'
                    f"{escape(lab or '(unlabelled)')}</text>")
    return _svg(size, size, body, f"{result.method} embedding")


def violin_svg(summary: ViolinSummary, width_per: int = 70, height: int = 360, margin: int = 30) -> str:
    n = len(summary.filters)
    width = 2 * margin + n * width_per
    lo, hi = summary.grid[0], summary.grid[-1]

    def ypos(v):
        return margin + (hi - v) / (hi - lo) * (height - 2 * margin)

    peak = max(f.density.max() for f in summary.filters) or 1.0
    body = []
    for k, f in enumerate(summary.filters):
        cx = margin + (k + 0.5) * width_per
        half = f.density / peak * (width_per * 0.45)
        right = [f"{cx + w:.2f},{ypos(g):.2f}" for g, w in zip(summary.grid, half)]
        left = [f"{cx - w:.2f},{ypos(g):.2f}" for g, w in zip(summary.grid[::-1], half[::-1])]
        body.append(f'<polygon points="{" ".join(right + left)}" fill="#9ecae1" stroke="#3182bd"/>')
        body.append(f'<line x1="{cx:.2f}" y1="{ypos(f.q3):.2f}" x2="{cx:.2f}" y2="{ypos(f.q1):.2f}" '
                    f'stroke="black" stroke-width="4"/>')
        body.append(f'<circle cx="{cx:.2f}" cy="{ypos(f.median):.2f}" r="3" fill="white"/>')
        body.append(f'<text x="{cx:.2f}" y="{height - 8}" font-size="12" text-anchor="middle">'
                    f"{f.filter_index}</text>")
    return _svg(width, height, body, "per-filter distributions")


def emit_svg(result, path) -> None:
    if isinstance(result, EmbeddingResult):
        text = embedding_svg(result)
    elif isinstance(result, ViolinSummary):
        text = violin_svg(result)
    else:
        raise TypeError(f"cannot render {type(result).__name__} as SVG")
    Path(path).write_text(text, encoding="utf-8")
