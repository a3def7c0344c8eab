"""Generator and discriminator definitions.

Parameters are plain ordered ``dict[str, Tensor]`` so they can be
updated functionally by Adam and serialised without reflection.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..numcore import (ShapeError, Tensor, conv1d, conv2d, glu, instance_norm, pixel_shuffle_1d,
                       reshape)

Params = dict[str, Tensor]

MFB = "MFB"
MFB_AP = "MFB_AP"
FEATURE_DIMS = {MFB: 24, MFB_AP: 48}


@dataclass(frozen=True)
class GeneratorConfig:
    in_kernel: int = 15
    in_channels: int = 128
    down_kernel: int = 5
    down_channels: tuple[int, ...] = (256, 512)
    res_blocks: int = 6
    res_kernel: int = 3
    up_kernel: int = 5
    up_channels: tuple[int, ...] = (256, 128)
    out_kernel: int = 15
    norm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.down_channels) != len(self.up_channels):
            raise ValueError("generator needs as many upsampling blocks as downsampling blocks")
        for k in (self.in_kernel, self.down_kernel, self.res_kernel, self.up_kernel, self.out_kernel):
            if k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd for symmetric padding, got {k}")

    @property
    def time_factor(self) -> int:
        return 2 ** len(self.down_channels)

    @property
    def n_blocks(self) -> int:
        return 1 + len(self.down_channels) + self.res_blocks + len(self.up_channels) + 1


@dataclass(frozen=True)
class DiscriminatorConfig:
    channels: tuple[int, ...] = (64, 128, 256, 512)
    kernel: tuple[int, int] = (3, 3)
    strides: tuple[tuple[int, int], ...] = ((1, 1), (1, 2), (1, 2), (1, 2))
    patch: tuple[int, int] = (6, 6)
    norm_eps: float = 1e-5

    def __post_init__(self):
        if len(self.channels) != len(self.strides):
            raise ValueError("one stride pair per discriminator block is required")

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        """Patch-logit grid size for a ``height x width`` feature image."""
        kh, kw = self.kernel
        ph, pw = kh // 2, kw // 2
        for sh, sw in self.strides:
            height = (height + 2 * ph - kh) // sh + 1
            width = (width + 2 * pw - kw) // sw + 1
        if height < self.patch[0] or width < self.patch[1]:
            raise ShapeError(f"discriminator input too small: final feature map {height}x{width} "
                             f"is smaller than the {self.patch[0]}x{self.patch[1]} patch")
        return ((height - self.patch[0]) // self.patch[0] + 1,
                (width - self.patch[1]) // self.patch[1] + 1)


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_generator(cfg: GeneratorConfig, feat_dim: int, rng: np.random.Generator,
                   std: float = 0.02) -> Params:
    p: Params = {}
    p["in.w"] = _normal(rng, (2 * cfg.in_channels, feat_dim, cfg.in_kernel), std)
    p["in.b"] = _zeros(2 * cfg.in_channels)
    c = cfg.in_channels
    for i, co in enumerate(cfg.down_channels):
        p[f"down{i}.w"] = _normal(rng, (2 * co, c, cfg.down_kernel), std)
        p[f"down{i}.b"] = _zeros(2 * co)
        p[f"down{i}.g"] = _ones(2 * co)
        p[f"down{i}.beta"] = _zeros(2 * co)
        c = co
    for i in range(cfg.res_blocks):
        p[f"res{i}.w1"] = _normal(rng, (2 * c, c, cfg.res_kernel), std)
        p[f"res{i}.b1"] = _zeros(2 * c)
        p[f"res{i}.g1"] = _ones(2 * c)
        p[f"res{i}.beta1"] = _zeros(2 * c)
        p[f"res{i}.w2"] = _normal(rng, (c, c, cfg.res_kernel), std)
        p[f"res{i}.b2"] = _zeros(c)
        p[f"res{i}.g2"] = _ones(c)
        p[f"res{i}.beta2"] = _zeros(c)
    for i, co in enumerate(cfg.up_channels):
        p[f"up{i}.w"] = _normal(rng, (2 * co * 2, c, cfg.up_kernel), std)
        p[f"up{i}.b"] = _zeros(2 * co * 2)
        p[f"up{i}.g"] = _ones(2 * co)
        p[f"up{i}.beta"] = _zeros(2 * co)
        c = co
    p["out.w"] = _normal(rng, (feat_dim, c, cfg.out_kernel), std)
    p["out.b"] = _zeros(feat_dim)
    return p


def generator_forward(cfg: GeneratorConfig, p: Params, x: Tensor) -> Tensor:
    """Map a ``C x T`` feature matrix to another ``C x T`` matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"generator expects a C x T matrix, got shape {x.shape}")
    feat_dim, t = x.shape
    if p["in.w"].shape[1] != feat_dim:
        raise ShapeError(f"generator built for {p['in.w'].shape[1]} feature dims, input has {feat_dim}")
    if t % cfg.time_factor:
        raise ShapeError(f"frame count {t} is not divisible by {cfg.time_factor}; "
                         f"pad the input to a multiple of {cfg.time_factor}")
    eps = cfg.norm_eps
    h = glu(conv1d(x, p["in.w"], p["in.b"], 1, cfg.in_kernel // 2))
    for i in range(len(cfg.down_channels)):
        h = conv1d(h, p[f"down{i}.w"], p[f"down{i}.b"], 2, cfg.down_kernel // 2)
        h = glu(instance_norm(h, p[f"down{i}.g"], p[f"down{i}.beta"], eps))
    pad = cfg.res_kernel // 2
    for i in range(cfg.res_blocks):
        r = conv1d(h, p[f"res{i}.w1"], p[f"res{i}.b1"], 1, pad)
        r = glu(instance_norm(r, p[f"res{i}.g1"], p[f"res{i}.beta1"], eps))
        r = conv1d(r, p[f"res{i}.w2"], p[f"res{i}.b2"], 1, pad)
        r = instance_norm(r, p[f"res{i}.g2"], p[f"res{i}.beta2"], eps)
        h = h + r
    for i in range(len(cfg.up_channels)):
        h = conv1d(h, p[f"up{i}.w"], p[f"up{i}.b"], 1, cfg.up_kernel // 2)
        h = pixel_shuffle_1d(h, 2)
        h = glu(instance_norm(h, p[f"up{i}.g"], p[f"up{i}.beta"], eps))
    return conv1d(h, p["out.w"], p["out.b"], 1, cfg.out_kernel // 2)


def init_discriminator(cfg: DiscriminatorConfig, rng: np.random.Generator,
                       std: float = 0.02) -> Params:
    p: Params = {}
    kh, kw = cfg.kernel
    c = 1
    for i, co in enumerate(cfg.channels):
        p[f"b{i}.w"] = _normal(rng, (2 * co, c, kh, kw), std)
        p[f"b{i}.b"] = _zeros(2 * co)
        if i > 0:
            p[f"b{i}.g"] = _ones(2 * co)
            p[f"b{i}.beta"] = _zeros(2 * co)
        c = co
    p["proj.w"] = _normal(rng, (1, c, *cfg.patch), std)
    p["proj.b"] = _zeros(1)
    return p


def discriminator_forward(cfg: DiscriminatorConfig, p: Params, x: Tensor) -> Tensor:
    """Raw patch logits for a ``C x T`` feature matrix treated as a 1-channel image."""
    if x.data.ndim != 2:
        raise ShapeError(f"discriminator expects a C x T matrix, got shape {x.shape}")
    grid = cfg.grid_shape(*x.shape)
    kh, kw = cfg.kernel
    h = reshape(x, (1, *x.shape))
    for i, (sh, sw) in enumerate(cfg.strides):
        h = conv2d(h, p[f"b{i}.w"], p[f"b{i}.b"], sh, sw, kh // 2, kw // 2)
        if i > 0:
            shape = h.shape
            h = reshape(h, (shape[0], shape[1] * shape[2]))
            h = instance_norm(h, p[f"b{i}.g"], p[f"b{i}.beta"], cfg.norm_eps)
            h = reshape(h, shape)
        h = glu(h)
    out = conv2d(h, p["proj.w"], p["proj.b"], *cfg.patch)
    out = reshape(out, grid)
    return out


@dataclass(frozen=True)
class CycleGanConfig:
    feature_mode: str = MFB_AP
    lambda_cyc: float = 10.0
    lambda_id: float = 1.0
    id_cutoff_epoch: int = 100
    lr_g: float = 0.0002
    lr_d: float = 0.0001
    lr_decay_steps: float = 2e5
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 200
    crop_len: int = 128
    seed: int = 0
    init_std: float = 0.02
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.feature_mode not in FEATURE_DIMS:
            raise ValueError(f"feature_mode must be one of {sorted(FEATURE_DIMS)}, got {self.feature_mode!r}")
        if not self.lambda_cyc > 0:
            raise ValueError(f"lambda_cyc must be positive, got {self.lambda_cyc}")
        if self.lambda_id < 0:
            raise ValueError(f"lambda_id must be non-negative, got {self.lambda_id}")
        if self.lr_g < 0 or self.lr_d < 0:
            raise ValueError("learning rates must be non-negative")
        if self.crop_len % self.generator.time_factor:
            raise ValueError(f"crop_len {self.crop_len} must be divisible by {self.generator.time_factor}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    @property
    def feat_dim(self) -> int:
        return FEATURE_DIMS[self.feature_mode]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CycleGanConfig":
        d = dict(d)
        g = d.pop("generator", {})
        disc = d.pop("discriminator", {})
        gen = GeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in g.items()})
        dd = {k: v for k, v in disc.items()}
        for key in ("channels", "kernel", "patch"):
            if key in dd:
                dd[key] = tuple(dd[key])
        if "strides" in dd:
            dd["strides"] = tuple(tuple(s) for s in dd["strides"])
        return cls(generator=gen, discriminator=DiscriminatorConfig(**dd), **d)
