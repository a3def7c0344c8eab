"""Model state, the combined objective, and the batch-size-1 training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..numcore import (AdamState, NumericError, Tape, Tensor, adam_step, backward, l1_loss,
                       mse_loss)
from ..vocoderfeat import F0Stats, FeatureSequence, f0_stats
from .losses import adv_losses, identity_weight
from .model import (MFB, CycleGanConfig, Params, discriminator_forward, generator_forward,
                    init_discriminator, init_generator)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "iter", "loss_d_x", "loss_d_y", "loss_g_adv", "loss_cyc", "loss_id",
               "total", "lr_g", "lr_d")


class TrainingHalted(RuntimeError):
    """A non-finite loss or gradient stopped training."""


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.mean[:, None]) / self.std[:, None]

    def invert(self, feats: np.ndarray) -> np.ndarray:
        return feats * self.std[:, None] + self.mean[:, None]

    @classmethod
    def fit(cls, mats: Sequence[np.ndarray]) -> "NormStats":
        allf = np.concatenate(mats, axis=1)
        return cls(allf.mean(axis=1), np.maximum(allf.std(axis=1), 1e-8))


@dataclass
class ModelPair:
    config: CycleGanConfig
    g_xy: Params
    g_yx: Params
    d_x: Params
    d_y: Params
    opt_g_xy: AdamState
    opt_g_yx: AdamState
    opt_d_x: AdamState
    opt_d_y: AdamState
    norm_x: NormStats
    norm_y: NormStats
    f0_x: F0Stats
    f0_y: F0Stats
    rng: np.random.Generator
    epoch: int = 0              # completed epochs
    iteration: int = 0          # completed train steps
    decay_iters: int = 0        # steps taken past the identity cutoff

    def gen_xy(self, x: Tensor) -> Tensor:
        return generator_forward(self.config.generator, self.g_xy, x)

    def gen_yx(self, y: Tensor) -> Tensor:
        return generator_forward(self.config.generator, self.g_yx, y)

    def disc_x(self, x: Tensor) -> Tensor:
        return discriminator_forward(self.config.discriminator, self.d_x, x)

    def disc_y(self, y: Tensor) -> Tensor:
        return discriminator_forward(self.config.discriminator, self.d_y, y)


def feature_matrix(fs: FeatureSequence, feature_mode: str) -> np.ndarray:
    """``C x T`` model input: MFB rows, or MFB rows stacked over AP rows."""
    if feature_mode == MFB:
        return fs.mfb.T.copy()
    return np.concatenate([fs.mfb.T, fs.ap.T], axis=0)


def init_model_pair(config: CycleGanConfig, norm_x: NormStats, norm_y: NormStats,
                    f0_x: F0Stats, f0_y: F0Stats) -> ModelPair:
    rng = np.random.default_rng(config.seed)
    d = config.feat_dim
    g_xy = init_generator(config.generator, d, rng, config.init_std)
    g_yx = init_generator(config.generator, d, rng, config.init_std)
    d_x = init_discriminator(config.discriminator, rng, config.init_std)
    d_y = init_discriminator(config.discriminator, rng, config.init_std)
    adam = dict(beta1=config.beta1, beta2=config.beta2)
    return ModelPair(config, g_xy, g_yx, d_x, d_y,
                     AdamState.zeros_like(g_xy, **adam), AdamState.zeros_like(g_yx, **adam),
                     AdamState.zeros_like(d_x, **adam), AdamState.zeros_like(d_y, **adam),
                     norm_x, norm_y, f0_x, f0_y, rng)


def scheduled_lr(lr0: float, decay_iters: int, decay_steps: float = 2e5) -> float:
    """Linear decay: ``lr0 - decay_iters * lr0 / decay_steps``, floored at 0.

    ``decay_iters`` counts steps taken after the identity-loss cutoff epoch,
    including the current one; before the cutoff it is 0.
    """
    return max(0.0, lr0 - decay_iters * (lr0 / decay_steps))


def _frozen(p: Params) -> Params:
    return {k: Tensor(v.data) for k, v in p.items()}


def _generator_objective(models: ModelPair, x: Tensor, y: Tensor, epoch: int):
    """Full generator-side loss with the discriminators held fixed.

    Returns (total tensor, breakdown, fake_x, fake_y).  Breakdown entries
    are the weighted contributions, summed in the same order as ``total``.
    """
    cfg = models.config
    gcfg, dcfg = cfg.generator, cfg.discriminator
    d_x, d_y = _frozen(models.d_x), _frozen(models.d_y)

    def gxy(t):
        return generator_forward(gcfg, models.g_xy, t)

    def gyx(t):
        return generator_forward(gcfg, models.g_yx, t)

    fake_y = gxy(x)
    fake_x = gyx(y)
    # generator side of the least-squares objective: fakes pushed towards 1
    adv_xy = mse_loss(discriminator_forward(dcfg, d_y, fake_y), 1.0)
    adv_yx = mse_loss(discriminator_forward(dcfg, d_x, fake_x), 1.0)
    cyc = l1_loss(gyx(fake_y), x) + l1_loss(gxy(fake_x), y)
    lam_id = identity_weight(cfg.lambda_id, epoch, cfg.id_cutoff_epoch)
    adv = adv_xy + adv_yx
    cyc_w = cyc * cfg.lambda_cyc
    total = adv + cyc_w
    id_val = 0.0
    if lam_id > 0:
        idl = l1_loss(gyx(x), x) + l1_loss(gxy(y), y)
        id_w = idl * lam_id
        total = total + id_w
        id_val = id_w.item()
    breakdown = {"adv_xy": adv_xy.item(), "adv_yx": adv_yx.item(),
                 "cyc": cyc_w.item(), "id": id_val}
    return total, breakdown, fake_x, fake_y


def total_loss(x: Tensor, y: Tensor, models: ModelPair, config: CycleGanConfig | None = None,
               epoch: int = 1) -> tuple[Tensor, dict[str, float]]:
    """Adversarial (both directions) + weighted cycle + scheduled identity loss."""
    if config is not None and config is not models.config:
        models = replace(models, config=config)
    total, breakdown, _, _ = _generator_objective(models, x, y, epoch)
    return total, breakdown


def _disc_loss(cfg, params: Params, real: Tensor, fake: Tensor) -> Tensor:
    loss_d, _ = adv_losses(discriminator_forward(cfg, params, real),
                           discriminator_forward(cfg, params, fake))
    return loss_d


def train_step(models: ModelPair, x_crop: Tensor, y_crop: Tensor,
               config: CycleGanConfig | None = None) -> tuple[ModelPair, dict]:
    """One generator update followed by one update of each discriminator.

    The epoch being trained is ``models.epoch + 1``; the discriminators see
    the fakes produced before the generator update.
    """
    cfg = config or models.config
    if cfg is not models.config:
        models = replace(models, config=cfg)
    epoch = models.epoch + 1
    decay_iters = models.decay_iters + (1 if epoch > cfg.id_cutoff_epoch else 0)
    lr_g = scheduled_lr(cfg.lr_g, decay_iters, cfg.lr_decay_steps)
    lr_d = scheduled_lr(cfg.lr_d, decay_iters, cfg.lr_decay_steps)

    with Tape():
        g_total, parts, fake_x, fake_y = _generator_objective(models, x_crop, y_crop, epoch)
    gl = list(models.g_xy.values()) + list(models.g_yx.values())
    grads = backward(g_total, wrt=gl)
    g_xy, opt_g_xy = adam_step(models.g_xy, {k: grads[v] for k, v in models.g_xy.items()},
                               models.opt_g_xy, lr_g)
    g_yx, opt_g_yx = adam_step(models.g_yx, {k: grads[v] for k, v in models.g_yx.items()},
                               models.opt_g_yx, lr_g)

    dcfg = cfg.discriminator
    fake_x, fake_y = fake_x.detach(), fake_y.detach()
    with Tape():
        loss_dx = _disc_loss(dcfg, models.d_x, x_crop, fake_x)
    grads = backward(loss_dx, wrt=models.d_x.values())
    d_x, opt_d_x = adam_step(models.d_x, {k: grads[v] for k, v in models.d_x.items()},
                             models.opt_d_x, lr_d)
    with Tape():
        loss_dy = _disc_loss(dcfg, models.d_y, y_crop, fake_y)
    grads = backward(loss_dy, wrt=models.d_y.values())
    d_y, opt_d_y = adam_step(models.d_y, {k: grads[v] for k, v in models.d_y.items()},
                             models.opt_d_y, lr_d)

    new = replace(models, g_xy=g_xy, g_yx=g_yx, d_x=d_x, d_y=d_y, opt_g_xy=opt_g_xy,
                  opt_g_yx=opt_g_yx, opt_d_x=opt_d_x, opt_d_y=opt_d_y,
                  iteration=models.iteration + 1, decay_iters=decay_iters)
    record = {"epoch": epoch, "iter": new.iteration, "loss_d_x": loss_dx.item(),
              "loss_d_y": loss_dy.item(), "loss_g_adv": parts["adv_xy"] + parts["adv_yx"],
              "loss_cyc": parts["cyc"], "loss_id": parts["id"], "total": g_total.item(),
              "lr_g": lr_g, "lr_d": lr_d}
    return new, record


def random_crop(mat: np.ndarray, crop_len: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform crop of ``crop_len`` frames; shorter inputs are edge-padded."""
    t = mat.shape[1]
    if t <= crop_len:
        return np.pad(mat, ((0, 0), (0, crop_len - t)), mode="edge")
    start = int(rng.integers(0, t - crop_len + 1))
    return mat[:, start:start + crop_len]


def prepare_corpora(corpus_x: Sequence[FeatureSequence], corpus_y: Sequence[FeatureSequence],
                    config: CycleGanConfig):
    if not corpus_x or not corpus_y:
        raise ValueError(f"both corpora need at least one utterance "
                         f"(got {len(corpus_x)} X, {len(corpus_y)} Y)")
    mats_x = [feature_matrix(f, config.feature_mode) for f in corpus_x]
    mats_y = [feature_matrix(f, config.feature_mode) for f in corpus_y]
    norm_x, norm_y = NormStats.fit(mats_x), NormStats.fit(mats_y)
    return ([norm_x.apply(m) for m in mats_x], [norm_y.apply(m) for m in mats_y],
            norm_x, norm_y)


def run_epoch(models: ModelPair, xs: Sequence[np.ndarray], ys: Sequence[np.ndarray]):
    """Shuffle each domain independently and take one step per pair of random crops."""
    cfg = models.config
    rng = models.rng
    order_x = rng.permutation(len(xs))
    order_y = rng.permutation(len(ys))
    n = max(len(xs), len(ys))
    records = []
    for i in range(n):
        xc = random_crop(xs[order_x[i % len(xs)]], cfg.crop_len, rng)
        yc = random_crop(ys[order_y[i % len(ys)]], cfg.crop_len, rng)
        models, rec = train_step(models, Tensor(xc), Tensor(yc))
        records.append(rec)
    return replace(models, epoch=models.epoch + 1), records


def train(corpus_x: Sequence[FeatureSequence], corpus_y: Sequence[FeatureSequence],
          config: CycleGanConfig, out_dir: str | Path | None = None,
          resume: ModelPair | None = None, epochs: int | None = None,
          log_path: str | Path | None = None):
    """Train a model pair; returns (final models, loss records, checkpoint paths).

    With ``out_dir`` a checkpoint is written after every epoch.  ``resume``
    continues from a loaded checkpoint (same corpus and config) up to
    ``config.epochs`` total epochs, or ``epochs`` more if given.
    """
    from .checkpoint import save_checkpoint

    xs, ys, norm_x, norm_y = prepare_corpora(corpus_x, corpus_y, config)
    if resume is None:
        models = init_model_pair(config, norm_x, norm_y, f0_stats(corpus_x), f0_stats(corpus_y))
    else:
        models = resume
    last = config.epochs if epochs is None else models.epoch + epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    paths: list[Path] = []
    last_good = None
    while models.epoch < last:
        try:
            models, recs = run_epoch(models, xs, ys)
        except NumericError as exc:
            raise TrainingHalted(f"training halted in epoch {models.epoch + 1}: {exc}; "
                                 f"last good checkpoint: {last_good}") from exc
        records.extend(recs)
        log.info("epoch %d: cyc %.4f total %.4f", models.epoch, recs[-1]["loss_cyc"], recs[-1]["total"])
        if out is not None:
            path = out / f"epoch_{models.epoch:04d}.ckpt"
            save_checkpoint(models, path)
            paths.append(path)
            last_good = path
        if log_path is not None:
            write_loss_log(log_path, records)
    return models, records, paths


def format_loss_log(records: Sequence[dict]) -> str:
    lines = ["\t".join(LOG_COLUMNS)]
    for r in records:
        lines.append("\t".join(str(r[c]) if c in ("epoch", "iter") else repr(float(r[c]))
                               for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def write_loss_log(path, records: Sequence[dict]) -> None:
    Path(path).write_text(format_loss_log(records))


def read_loss_log(path) -> list[dict]:
    rows = Path(path).read_text().splitlines()
    header = rows[0].split("\t")
    out = []
    for line in rows[1:]:
        vals = line.split("\t")
        out.append({k: (int(v) if k in ("epoch", "iter") else float(v)) for k, v in zip(header, vals)})
    return out
