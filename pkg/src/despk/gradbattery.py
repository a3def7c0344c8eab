"""Finite-difference battery over every differentiable op and small networks.

Each check builds a scalar by projecting the op's output onto a fixed
random tensor, then compares tape gradients against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .cyclegan.model import (DiscriminatorConfig, GeneratorConfig, discriminator_forward,
                             generator_forward, init_discriminator, init_generator)

TOLERANCE = 1e-4
# coordinates probed per network array; small arrays are checked in full
NETWORK_SAMPLES = 24

SMALL_GENERATOR = GeneratorConfig(in_kernel=3, in_channels=4, down_kernel=3, down_channels=(4, 4),
                                  res_blocks=1, res_kernel=3, up_kernel=3, up_channels=(4, 4),
                                  out_kernel=3)
SMALL_DISCRIMINATOR = DiscriminatorConfig(channels=(2, 2, 2, 2), kernel=(3, 3),
                                          strides=((1, 1), (1, 2), (1, 2), (1, 1)), patch=(2, 2))


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _projected(out_fn: Callable[..., nc.Tensor], proj: np.ndarray):
    r = nc.Tensor(proj)

    def fn(*ts):
        return nc.total(nc.mul(out_fn(*ts), r))

    return fn


def _op_checks(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    def n(*shape):
        return rng.standard_normal(shape)

    a, b = n(3, 5), n(3, 5)
    checks = {
        "add": (_projected(nc.add, n(3, 5)), [a, b]),
        "sub": (_projected(nc.sub, n(3, 5)), [a, b]),
        "mul": (_projected(nc.mul, n(3, 5)), [a, b]),
        "scale": (_projected(lambda x: nc.scale(x, -1.7), n(3, 5)), [a]),
        "total": (lambda x: nc.scale(nc.total(x), 0.3), [a]),
        "mean": (lambda x: nc.mean(nc.mul(x, x)), [a]),
        "reshape": (_projected(lambda x: nc.reshape(x, (5, 3)), n(5, 3)), [a]),
        "concat": (_projected(lambda x, y: nc.concat([x, y], axis=1), n(3, 10)), [a, b]),
        "conv1d": (_projected(lambda x, w, bb: nc.conv1d(x, w, bb, 2, 1), n(4, 5)),
                   [n(3, 10), n(4, 3, 3), n(4)]),
        "conv2d": (_projected(lambda x, w, bb: nc.conv2d(x, w, bb, 1, 2, 1, 1), n(2, 6, 4)),
                   [n(1, 6, 8), n(2, 1, 3, 3), n(2)]),
        "glu": (_projected(nc.glu, n(3, 5)), [n(6, 5)]),
        "instance_norm": (_projected(nc.instance_norm, n(3, 7)), [n(3, 7), n(3), n(3)]),
        "pixel_shuffle_1d": (_projected(lambda x: nc.pixel_shuffle_1d(x, 2), n(2, 10)), [n(4, 5)]),
        # offsets keep every element away from the kink at zero difference
        "l1_loss": (lambda x, y: nc.l1_loss(x, y), [a, a + np.sign(n(3, 5)) * (0.5 + rng.random((3, 5)))]),
        "mse_loss": (lambda x, y: nc.mse_loss(x, y), [a, b]),
        "mse_loss_scalar": (lambda x: nc.mse_loss(x, 1.0), [a]),
    }
    return checks


def _network_checks(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    gp = init_generator(SMALL_GENERATOR, 6, rng, 0.5)
    gnames = list(gp)
    gproj = nc.Tensor(rng.standard_normal((6, 8)))

    def gen(x, *params):
        out = generator_forward(SMALL_GENERATOR, dict(zip(gnames, params)), x)
        return nc.total(nc.mul(out, gproj))

    dp = init_discriminator(SMALL_DISCRIMINATOR, rng, 0.5)
    dnames = list(dp)
    grid = SMALL_DISCRIMINATOR.grid_shape(6, 8)
    dproj = nc.Tensor(rng.standard_normal(grid))

    def disc(x, *params):
        out = discriminator_forward(SMALL_DISCRIMINATOR, dict(zip(dnames, params)), x)
        return nc.total(nc.mul(out, dproj))

    return {
        "generator": (gen, [rng.standard_normal((6, 8))] + [gp[k].data for k in gnames]),
        "discriminator": (disc, [rng.standard_normal((6, 8))] + [dp[k].data for k in dnames]),
    }


def run_battery(seeds=range(20), networks: bool = True, progress=None) -> list[CheckResult]:
    """Run every check once per seed and return the individual results."""
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        checks = _op_checks(rng)
        if networks:
            checks.update(_network_checks(rng))
        for name, (fn, arrays) in checks.items():
            sample = NETWORK_SAMPLES if name in ("generator", "discriminator") else None
            res = CheckResult(name, seed, nc.gradcheck(fn, arrays, max_entries=sample,
                                                       rng=np.random.default_rng(seed)))
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def summarize(results: list[CheckResult]) -> dict[str, float]:
    """Worst error per check name."""
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    return worst


if __name__ == "__main__":
    t0 = time.time()
    res = run_battery()
    for name, err in summarize(res).items():
        print(f"{name:<18} {err:.3e}")
    print(f"{time.time() - t0:.1f} s")
