"""Flat key=value run configuration with strict key checking."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 7
    image_size: int = 96
    channels: tuple[int, ...] = (16, 32, 64, 128)
    levels: int = 3
    lr: float = 1e-3
    steps: int = 600
    batch: int = 2
    lambda_pc: float = 1.0
    lambda_ps: tuple[float, ...] = (1.0, 5.0, 8.0)
    lambda_tv: float = 1e-6
    zero_pair_weight: float = 0.1
    content_count: int = 64
    style_count: int = 16
    model_dir: str = "model"

    def validate(self):
        if len(self.channels) != 4:
            raise ConfigError(f"channels needs 4 values, got {len(self.channels)}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.lambda_ps) != self.levels:
            raise ConfigError(f"lambda_ps needs {self.levels} values, got {len(self.lambda_ps)}")
        need = 8 * 2 ** (self.levels - 1)
        if self.image_size % need:
            raise ConfigError(f"image_size {self.image_size} not divisible by {need}")
        if not all(c > 0 for c in self.channels):
            raise ConfigError("channels must be positive")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.content_count < 1 or self.style_count < 1:
            raise ConfigError("corpus counts must be positive")
        return self


_INT_KEYS = {"seed", "image_size", "levels", "steps", "batch", "content_count", "style_count"}
_FLOAT_KEYS = {"lr", "lambda_pc", "lambda_tv", "zero_pair_weight"}
_INT_TUPLE_KEYS = {"channels"}
_FLOAT_TUPLE_KEYS = {"lambda_ps"}
_STR_KEYS = {"model_dir"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _INT_TUPLE_KEYS | _FLOAT_TUPLE_KEYS | _STR_KEYS


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            elif key in _INT_TUPLE_KEYS:
                values[key] = tuple(int(v) for v in val.split(","))
            elif key in _FLOAT_TUPLE_KEYS:
                values[key] = tuple(float(v) for v in val.split(","))
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    """Canonical snapshot text; parsing it reproduces the config exactly."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
