"""``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are an error.
Model topology is written as ``layers = 64x64 bias; 64x64 bias fold`` where
``fold`` links a layer to its predecessor as smoothing producer, and
outliers as ``outliers = layer:channel:multiplier, ...``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .lowrank import CompensationConfig
from .pipeline import REFERENCE_SEED, LayerSpec, ToyModelSpec, reference_spec
from .search import GridSearchConfig

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "format_layers", "format_outliers"]


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, source: str = "<config>", line: int | None = None):
        where = source if line is None else f"{source}:{line}"
        prefix = f"{where}: " + (f"key '{key}': " if key else "")
        super().__init__(prefix + message)
        self.key = key
        self.source = source
        self.line = line


_REF = reference_spec()


@dataclass(frozen=True)
class RunConfig:
    weight_bits: int = 4
    act_bits: int = 8
    alpha: float | None = None
    grid_points: int = 21
    rank: int = 32
    ao_iters: int = 10
    seed: int = REFERENCE_SEED
    timesteps: int = _REF.timesteps
    calib_batch: int = 12
    heldout_batch: int = _REF.heldout_batch
    token_len: int = _REF.token_len
    layers: tuple[LayerSpec, ...] = _REF.layers
    outliers: tuple[tuple[int, int, float], ...] = _REF.outliers

    def model_spec(self) -> ToyModelSpec:
        return ToyModelSpec(
            layers=self.layers,
            token_len=self.token_len,
            timesteps=self.timesteps,
            calib_batch=self.calib_batch,
            heldout_batch=self.heldout_batch,
            seed=self.seed,
            outliers=self.outliers,
        )

    def grid_config(self) -> GridSearchConfig:
        return GridSearchConfig(
            grid_points=self.grid_points,
            weight_bits=self.weight_bits,
            act_bits=self.act_bits,
            rank=self.rank,
            ao_iters=self.ao_iters,
        )

    def compensation_config(self) -> CompensationConfig:
        return CompensationConfig(self.rank, self.ao_iters, self.weight_bits)

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "layers":
                text = format_layers(value)
            elif f.name == "outliers":
                text = format_outliers(value)
            elif value is None:
                text = "none"
            else:
                text = repr(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def format_layers(layers) -> str:
    parts = []
    for i, layer in enumerate(layers):
        text = f"{layer.out_features}x{layer.in_features} {'bias' if layer.bias else 'nobias'}"
        if layer.producer is not None:
            text += " fold"
        parts.append(text)
    return "; ".join(parts)


def format_outliers(outliers) -> str:
    if not outliers:
        return "none"
    return ", ".join(f"{l}:{c}:{m!r}" for l, c, m in outliers)


def _parse_layers(text: str) -> tuple[LayerSpec, ...]:
    layers = []
    for i, record in enumerate(r.strip() for r in text.split(";")):
        tokens = record.split()
        if not tokens:
            raise ValueError(f"empty layer record {i}")
        dims = tokens[0].lower().split("x")
        if len(dims) != 2:
            raise ValueError(f"layer {i}: expected NxC, got {tokens[0]!r}")
        n, c = int(dims[0]), int(dims[1])
        bias, fold = True, False
        for tok in tokens[1:]:
            if tok == "bias":
                bias = True
            elif tok == "nobias":
                bias = False
            elif tok == "fold":
                fold = True
            else:
                raise ValueError(f"layer {i}: unknown flag {tok!r}")
        layers.append(LayerSpec(n, c, bias, i - 1 if fold else None))
    return tuple(layers)


def _parse_outliers(text: str) -> tuple[tuple[int, int, float], ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    out = []
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"expected layer:channel:multiplier, got {item.strip()!r}")
        out.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return tuple(out)


def _parse_alpha(text: str) -> float | None:
    if text.lower() == "none":
        return None
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return value


_PARSERS = {
    "weight_bits": int,
    "act_bits": int,
    "alpha": _parse_alpha,
    "grid_points": int,
    "rank": int,
    "ao_iters": int,
    "seed": int,
    "timesteps": int,
    "calib_batch": int,
    "heldout_batch": int,
    "token_len": int,
    "layers": _parse_layers,
    "outliers": _parse_outliers,
}


def _validate_bits(key: str, bits: int) -> None:
    if not (2 <= bits <= 8 or bits == 32):
        raise ValueError(f"bitwidth must be in [2, 8] or 32 (pass-through), got {bits}")


def parse_config(text: str, source: str = "<config>", base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", source=source, line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError("unknown key", key, source, lineno)
        if key in values:
            raise ConfigError("given more than once", key, source, lineno)
        try:
            values[key] = _PARSERS[key](value)
            if key in ("weight_bits", "act_bits"):
                _validate_bits(key, values[key])
            elif key in ("grid_points",) and values[key] < 2:
                raise ValueError("must be >= 2")
            elif key in ("rank", "ao_iters", "timesteps", "calib_batch", "heldout_batch", "token_len") and values[key] < 1:
                raise ValueError("must be >= 1")
        except ValueError as exc:
            raise ConfigError(str(exc), key, source, lineno) from None
    cfg = replace(base or RunConfig(), **values)
    try:
        cfg.model_spec()
    except ValueError as exc:
        key = "outliers" if "outlier" in str(exc) else "layers"
        raise ConfigError(str(exc), key, source) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    return parse_config(text, str(path))
