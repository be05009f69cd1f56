"""Plain-text ``key = value`` run configuration: model, training and benchmark knobs in one place."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable, Mapping

from .episodes import BenchmarkConfig
from .model import TrainConfig


class ConfigError(ValueError):
    pass


def _fields(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


TRAIN_KEYS = _fields(TrainConfig)
BENCH_KEYS = _fields(BenchmarkConfig)
KEYS = {**TRAIN_KEYS, **BENCH_KEYS}


def _default(f: dataclasses.Field) -> Any:
    return f.default if f.default is not dataclasses.MISSING else f.default_factory()


def parse_value(key: str, text: str) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    default = _default(KEYS[key])
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    bench: BenchmarkConfig

    def as_dict(self) -> dict[str, Any]:
        return {**dataclasses.asdict(self.train), **dataclasses.asdict(self.bench)}

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.as_dict().items())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **kw) -> "RunConfig":
        return build(self.as_dict(), kw)


def read_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        pairs[key] = value
    return pairs


def build(*layers: Mapping[str, Any]) -> RunConfig:
    """Merge layers left to right over the defaults; string values are parsed."""
    values: dict[str, Any] = {}
    for layer in layers:
        for k, v in layer.items():
            values[k] = parse_value(k, v) if isinstance(v, str) else v
    unknown = set(values) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        train = TrainConfig(**{k: v for k, v in values.items() if k in TRAIN_KEYS})
        bench = BenchmarkConfig(**{k: v for k, v in values.items() if k in BENCH_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(train, bench)


def load(path: str | Path | None, overrides: Mapping[str, str] | None = None) -> RunConfig:
    file_pairs = read_pairs(Path(path).read_text(), str(path)) if path else {}
    return build(file_pairs, overrides or {})


def parse_overrides(tokens: Iterable[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` tokens into a dict (dashes become underscores)."""
    out: dict[str, str] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            i += 1
            value = tokens[i]
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"unknown option --{key}")
        out[key] = value
        i += 1
    return out
