"""Flat ``key=value`` run configuration and its fingerprint.

Keys are ``section.field`` (sections: gen, seg, model, pretrain, probe) plus
the top-level ``seed``. One key per line, ``#`` starts a comment. Per-stage
seeds are not keys: they are derived from the root seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .corpus import DAY, GenConfig
from .model import ModelConfig
from .seeding import derive_seed
from .sessions import REFERENCE_SPAN, SegmentConfig
from .training import ContrastiveConfig, ProbeConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SegSettings:
    q_levels: int = 2**15
    sigma: float = 2.0**10
    window: int = 1
    kernel: str = "gaussian"
    # shrink q_levels with the corpus span, keeping sigma / bin width fixed
    scale_to_span: bool = True
    reference_span: float = REFERENCE_SPAN

    def resolve(self, span: float) -> SegmentConfig:
        if not self.scale_to_span:
            return SegmentConfig(self.q_levels, self.sigma, self.window, self.kernel)
        return SegmentConfig.scaled_to(span, self.q_levels, self.sigma, self.window, self.kernel, self.reference_span)


_SEEDED = {"seed"}
_DERIVED = {"vocab_size"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)
    seg: SegSettings = field(default_factory=SegSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    SECTIONS = ("gen", "seg", "model", "pretrain", "probe")

    def items(self) -> list[tuple[str, object]]:
        out = [("seed", self.seed)]
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if f.name in _SEEDED or (sec == "model" and f.name in _DERIVED):
                    continue
                out.append((f"{sec}.{f.name}", getattr(obj, f.name)))
        return sorted(out)

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in self.items())

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, seed=int(seed))

    def override(self, **dotted) -> RunConfig:
        return apply_settings(self, {k.replace("__", "."): v for k, v in dotted.items()})

    # resolved per-stage configs -------------------------------------------------

    def gen_config(self) -> GenConfig:
        return replace(self.gen, seed=derive_seed(self.seed, "gen"))

    def model_config(self, vocab_size: int) -> ModelConfig:
        return replace(self.model, vocab_size=vocab_size)

    def pretrain_config(self, run_seed: int | None = None) -> ContrastiveConfig:
        return replace(self.pretrain, seed=derive_seed(self.seed if run_seed is None else run_seed, "pretrain"))

    def probe_config(self, run_seed: int | None = None) -> ProbeConfig:
        return replace(self.probe, seed=derive_seed(self.seed if run_seed is None else run_seed, "probe"))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def apply_settings(cfg: RunConfig, settings: dict) -> RunConfig:
    known = dict(cfg.items())
    updates: dict[str, dict] = {}
    seed = cfg.seed
    for key, raw in settings.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse_value(raw, known[key], key) if isinstance(raw, str) else raw
        if key == "seed":
            seed = int(value)
            continue
        sec, name = key.split(".", 1)
        updates.setdefault(sec, {})[name] = value
    out = replace(cfg, seed=seed)
    for sec, vals in updates.items():
        out = replace(out, **{sec: replace(getattr(out, sec), **vals)})
    try:
        out.gen.validate()
        out.model.validate()
        out.pretrain.validate()
        out.probe.validate()
        out.seg.resolve(DAY)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return out


def parse_config_text(text: str) -> dict[str, str]:
    settings = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in settings:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        settings[key] = value.strip()
    return settings


def load_config(path=None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        with open(path) as fh:
            cfg = apply_settings(cfg, parse_config_text(fh.read()))
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg
