"""Least-squares adversarial, cycle-consistency and identity losses."""
from __future__ import annotations

from typing import Callable

from ..numcore import Tensor, l1_loss, mse_loss

Generator = Callable[[Tensor], Tensor]


def adv_losses(d_out_real: Tensor, d_out_fake: Tensor) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) on raw patch logits."""
    loss_d = mse_loss(d_out_real, 1.0) + mse_loss(d_out_fake, 0.0)
    loss_g = mse_loss(d_out_fake, 1.0)
    return loss_d, loss_g


def cycle_loss(x: Tensor, y: Tensor, g_xy: Generator, g_yx: Generator) -> Tensor:
    return l1_loss(g_yx(g_xy(x)), x) + l1_loss(g_xy(g_yx(y)), y)


def identity_loss(x: Tensor, y: Tensor, g_xy: Generator, g_yx: Generator) -> Tensor:
    # each generator sees an input already in its own output domain
    return l1_loss(g_yx(x), x) + l1_loss(g_xy(y), y)


def identity_weight(lambda_id: float, epoch: int, cutoff: int) -> float:
    """Identity-loss multiplier: ``lambda_id`` up to and including ``cutoff``, then 0."""
    return lambda_id if epoch <= cutoff else 0.0
