"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .models import ConfigError, ModelConfig, parse_bool
from .training import OptimizerConfig

SEED_ENV = "PAINLARKS_SEED"

MODEL_KEYS = tuple(ModelConfig().to_flat())
OPTIMIZER_KEYS = tuple(f.name for f in fields(OptimizerConfig))
RUN_KEYS = ("data", "val_data", "test_data", "edges", "seed", "out_dir", "workers", "val_fraction")
ALL_KEYS = frozenset(MODEL_KEYS + OPTIMIZER_KEYS + RUN_KEYS)

_OPT_TYPES = {f.name: f.type for f in fields(OptimizerConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in flat:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        flat[key] = value
    return flat


def _optimizer_from_flat(flat: dict[str, str]) -> OptimizerConfig:
    kwargs = {}
    for key in OPTIMIZER_KEYS:
        if key not in flat or flat[key] == "":
            continue
        raw, kind = flat[key], _OPT_TYPES[key]
        try:
            if "bool" in kind:
                kwargs[key] = parse_bool(raw)
            elif "float" in kind:
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        except (ValueError, ConfigError):
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None
    try:
        return OptimizerConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: str | None = None
    val_data: str | None = None
    test_data: str | None = None
    edges: str | None = None
    seed: int | None = None
    out_dir: str = "painlarks-out"
    workers: int = 1
    val_fraction: float = 0.125

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "RunConfig":
        unknown = sorted(set(flat) - ALL_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        try:
            model = ModelConfig.from_flat({k: v for k, v in flat.items() if k in MODEL_KEYS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

        def opt(key):
            v = flat.get(key, "")
            return v if v != "" else None

        try:
            seed = int(flat["seed"]) if opt("seed") is not None else None
            workers = int(flat.get("workers") or 1)
            val_fraction = float(flat.get("val_fraction") or 0.125)
        except ValueError as exc:
            raise ConfigError(f"bad run setting: {exc}") from None
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        if not 0 <= val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        return cls(model, _optimizer_from_flat(flat), opt("data"), opt("val_data"), opt("test_data"),
                   opt("edges"), seed, flat.get("out_dir") or cls.out_dir, workers, val_fraction)

    def to_flat(self) -> dict[str, str]:
        flat = dict(self.model.to_flat())
        for key in OPTIMIZER_KEYS:
            v = getattr(self.optimizer, key)
            flat[key] = "" if v is None else (str(v).lower() if isinstance(v, bool) else repr(v))
        for key in RUN_KEYS:
            v = getattr(self, key)
            flat[key] = "" if v is None else str(v)
        return flat

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())


def load_run_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return RunConfig.from_flat(parse_config_text(text, str(path)))


def resolve_seed(cli_seed: int | None, config_seed: int | None, env=None) -> int:
    """``--seed`` beats the config file, which beats ``$PAINLARKS_SEED``; default 0."""
    if cli_seed is not None:
        return cli_seed
    if config_seed is not None:
        return config_seed
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV, "").strip()
    if raw:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    return 0
