"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Every key has a typed default taken from the corresponding dataclass, so
the documented table and the code cannot drift apart.  Unknown sections
or keys are rejected.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .cyclegan.model import CycleGanConfig, DiscriminatorConfig, GeneratorConfig
from .evalkit import DEFAULT_TIMEOUT
from .vocoderfeat import FrameSpec

SEED_ENV = "DESPK_SEED"

# keys whose defaults follow the reported training setup; everything else
# is a local engineering choice
REPORTED = {
    ("cyclegan", "lambda_cyc"), ("cyclegan", "lambda_id"), ("cyclegan", "id_cutoff_epoch"),
    ("cyclegan", "lr_g"), ("cyclegan", "lr_d"), ("cyclegan", "epochs"),
    ("frames", "window_len"), ("frames", "hop"), ("frames", "sample_rate"),
}


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class AdapterSettings:
    command: str = ""
    timeout: float = DEFAULT_TIMEOUT
    strip_tags: bool = True
    parallelism: int = 1


@dataclass(frozen=True)
class VizSettings:
    perplexity: float = 30.0
    iters: int = 1000
    all_filters: bool = False


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    cyclegan: CycleGanConfig = field(default_factory=CycleGanConfig)
    frames: FrameSpec = field(default_factory=FrameSpec)
    adapter: AdapterSettings = field(default_factory=AdapterSettings)
    viz: VizSettings = field(default_factory=VizSettings)

    @property
    def seed(self) -> int:
        return self.run.seed

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, run=RunSettings(seed), cyclegan=replace(self.cyclegan, seed=seed))


# section name -> (dataclass, keys excluded from the file)
_SECTIONS = {
    "run": (RunSettings, ()),
    "cyclegan": (CycleGanConfig, ("seed", "generator", "discriminator")),
    "generator": (GeneratorConfig, ()),
    "discriminator": (DiscriminatorConfig, ()),
    "frames": (FrameSpec, ()),
    "adapter": (AdapterSettings, ()),
    "viz": (VizSettings, ()),
}


def _defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls)}


def config_keys() -> list[tuple[str, str, object]]:
    """(section, key, default) for every accepted key, in documentation order."""
    out = []
    for section, (cls, skip) in _SECTIONS.items():
        for key, default in _defaults(cls).items():
            if key not in skip:
                out.append((section, key, default))
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ",".join("x".join(str(i) for i in pair) for pair in v)
        return ",".join(str(i) for i in v)
    return str(v)


def parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(i) for i in s.split("x")) for s in items)
            return tuple(int(i) for i in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def help_table() -> str:
    """Every key with its default and provenance, for ``--help``."""
    lines = ["configuration keys ([section] key = default):"]
    current = None
    for section, key, default in config_keys():
        if section != current:
            lines.append(f"  [{section}]")
            current = section
        origin = "reported setting" if (section, key) in REPORTED else "local default"
        lines.append(f"    {key + ' = ' + format_value(default):<40} ({origin})")
    lines.append(f"  environment: {SEED_ENV} overrides [run] seed; --seed overrides both")
    return "\n".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cp.defaults():
        raise ConfigError(f"{source}: keys outside a section: {sorted(cp.defaults())}")
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}] (known: {', '.join(_SECTIONS)})")
        cls, skip = _SECTIONS[section]
        defaults = {k: v for k, v in _defaults(cls).items() if k not in skip}
        for key, raw in cp.items(section):
            if key not in defaults:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}] "
                                  f"(known: {', '.join(defaults)})")
            values.setdefault(section, {})[key] = parse_value(raw, defaults[key],
                                                              f"{source} [{section}] {key}")
    return build_config(values, source)


def build_config(values: dict[str, dict], source: str = "<config>") -> RunConfig:
    try:
        run = RunSettings(**values.get("run", {}))
        gen = GeneratorConfig(**values.get("generator", {}))
        disc = DiscriminatorConfig(**values.get("discriminator", {}))
        cg = CycleGanConfig(generator=gen, discriminator=disc, seed=run.seed, **values.get("cyclegan", {}))
        frames = FrameSpec(**values.get("frames", {}))
        adapter = AdapterSettings(**values.get("adapter", {}))
        viz = VizSettings(**values.get("viz", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if adapter.timeout <= 0:
        raise ConfigError(f"{source}: [adapter] timeout must be positive")
    if adapter.parallelism < 1:
        raise ConfigError(f"{source}: [adapter] parallelism must be at least 1")
    return RunConfig(run, cg, frames, adapter, viz)


def load_config(path=None, seed_flag: int | None = None, env=None) -> RunConfig:
    """Read ``path`` (or defaults) and resolve the seed: flag > environment > file > default."""
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        cfg = parse_config_text(p.read_text(encoding="utf-8"), str(p))
    env = os.environ if env is None else env
    if seed_flag is not None:
        return cfg.with_seed(seed_flag)
    raw = env.get(SEED_ENV)
    if raw is not None and raw.strip():
        try:
            return cfg.with_seed(int(raw))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return cfg.with_seed(cfg.run.seed)


def dump_config(cfg: RunConfig) -> str:
    """Render a config file that parses back to ``cfg``."""
    objs = {"run": cfg.run, "cyclegan": cfg.cyclegan, "generator": cfg.cyclegan.generator,
            "discriminator": cfg.cyclegan.discriminator, "frames": cfg.frames,
            "adapter": cfg.adapter, "viz": cfg.viz}
    lines = []
    current = None
    for section, key, _ in config_keys():
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{key} = {format_value(getattr(objs[section], key))}")
    return "\n".join(lines) + "\n"
