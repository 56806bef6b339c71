"""Toy linear-chain model, synthetic diffusion traces and the ablation harness.

The chain stands in for a transformer block's linear layers. Calibration
and held-out inputs are produced by the diffusion forward process
``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps_t`` so activation ranges
drift across timesteps, and selected channels carry multiplicative
outliers. Four variants are compared against the full-precision chain:

``linearquant``  plain W/A quantization, no smoothing
``tas``          smoothing with alpha = 0.5
``gridsearch``   smoothing with the searched alpha per layer
``compensation`` per-input-channel weights, alpha searched for them, plus
                 low-rank error compensation

The first three variants quantize weights with a conventional grid
(per output channel by default); the fine-grained per-input-channel grid
and the compensation arrive together in the last stage.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .lowrank import CompensatedWeight, CompensationConfig, alternating_optimize, compensated_forward
from .quant import is_pass_through, quantize_weight
from .search import GridSearchConfig, GridSearchResult, LayerError, grid_search_layer
from .smoothing import (
    DEFAULT_ALPHA,
    ActivationTrace,
    SmoothingFactor,
    compute_tas_factor,
    fold_smoothing,
    weight_absmax,
)
from .tensor import ShapeError, as_tensor
from .tensorfile import fnv1a64

__all__ = [
    "VARIANTS",
    "ABLATION_MIN_IMPROVEMENT",
    "REFERENCE_SEED",
    "LayerSpec",
    "ToyModelSpec",
    "ToyModel",
    "Traces",
    "QuantLayer",
    "QuantizedModel",
    "LayerReport",
    "EvalReport",
    "linear_noise_schedule",
    "forward_noise",
    "build_model",
    "generate_inputs",
    "propagate",
    "generate_traces",
    "reference_spec",
    "select_factors",
    "build_variant",
    "evaluate",
    "ablation_verdict",
    "trace_fingerprint",
    "quantize_variants",
    "evaluate_variants",
    "run_pipeline",
]

VARIANTS = ("linearquant", "tas", "gridsearch", "compensation")
# Minimum relative end-to-end MSE improvement each ablation stage must
# deliver on the reference spec (frozen with REFERENCE_SEED).
ABLATION_MIN_IMPROVEMENT = 0.05
REFERENCE_SEED = 20240917

_STREAM_WEIGHTS = 0
_STREAM_CALIBRATION = 1
_STREAM_HELDOUT = 2


@dataclass(frozen=True)
class LayerSpec:
    out_features: int
    in_features: int
    bias: bool = True
    producer: int | None = None


def linear_noise_schedule(timesteps: int, train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    """Cumulative ``abar_t`` of a linear-beta schedule, respaced to ``timesteps``."""
    betas = np.linspace(beta_start, beta_end, train_steps)
    abar = np.cumprod(1.0 - betas)
    idx = np.round(np.linspace(0, train_steps - 1, timesteps)).astype(int)
    return abar[idx]


@dataclass(frozen=True)
class ToyModelSpec:
    layers: tuple[LayerSpec, ...]
    token_len: int = 16
    timesteps: int = 50
    calib_batch: int = 12
    heldout_batch: int = 4
    seed: int = REFERENCE_SEED
    outliers: tuple[tuple[int, int, float], ...] = ()
    noise_schedule: tuple[float, ...] | None = None

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "outliers", tuple(tuple(o) for o in self.outliers))
        if not layers:
            raise ValueError("model needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.out_features < 1 or layer.in_features < 1:
                raise ValueError(f"layer {i}: dimensions must be positive")
            if i and layer.in_features != layers[i - 1].out_features:
                raise ShapeError(
                    f"layer {i} expects {layer.in_features} inputs, layer {i - 1} produces {layers[i - 1].out_features}"
                )
            if layer.producer is not None and (i == 0 or layer.producer != i - 1):
                raise ValueError(f"layer {i}: producer must be the preceding layer, got {layer.producer}")
        for n in ("token_len", "timesteps", "calib_batch", "heldout_batch"):
            if getattr(self, n) < 1:
                raise ValueError(f"{n} must be >= 1")
        for layer_idx, channel, mult in self.outliers:
            if not 0 <= layer_idx < len(layers):
                raise ValueError(f"outlier on unknown layer {layer_idx}")
            if not 0 <= channel < layers[layer_idx].in_features:
                raise ValueError(f"outlier channel {channel} out of range for layer {layer_idx}")
            if not mult > 0:
                raise ValueError("outlier multiplier must be positive")
        if self.noise_schedule is None:
            schedule = linear_noise_schedule(self.timesteps)
        else:
            schedule = np.asarray(self.noise_schedule, dtype=np.float64)
        if schedule.shape != (self.timesteps,):
            raise ValueError(f"noise schedule has {schedule.size} entries for {self.timesteps} timesteps")
        if np.any(schedule <= 0) or np.any(schedule > 1) or np.any(np.diff(schedule) > 0):
            raise ValueError("noise schedule must lie in (0, 1] and be non-increasing")
        object.__setattr__(self, "noise_schedule", tuple(float(v) for v in schedule))

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features


@dataclass(frozen=True)
class ToyModel:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray | None, ...]
    producers: tuple[int | None, ...]

    def __len__(self) -> int:
        return len(self.weights)

    def layer_forward(self, i: int, x: np.ndarray) -> np.ndarray:
        y = x @ self.weights[i].T
        if self.biases[i] is not None:
            y = y + self.biases[i]
        return y

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i in range(len(self)):
            x = self.layer_forward(i, x)
        return x


def build_model(spec: ToyModelSpec) -> ToyModel:
    """Gaussian weights; outliers on deeper layers come from scaled producer rows."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _STREAM_WEIGHTS]))
    weights, biases = [], []
    for layer in spec.layers:
        weights.append(rng.standard_normal((layer.out_features, layer.in_features)) / np.sqrt(layer.in_features))
        biases.append(0.1 * rng.standard_normal(layer.out_features) if layer.bias else None)
    for layer_idx, channel, mult in spec.outliers:
        if layer_idx > 0:
            weights[layer_idx - 1][channel] *= mult
            if biases[layer_idx - 1] is not None:
                biases[layer_idx - 1][channel] *= mult
    return ToyModel(tuple(weights), tuple(biases), tuple(l.producer for l in spec.layers))


def forward_noise(x0, alpha_bar, noise) -> np.ndarray:
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * noise


def _input_gain(spec: ToyModelSpec) -> np.ndarray:
    gain = np.ones(spec.in_features)
    for layer_idx, channel, mult in spec.outliers:
        if layer_idx == 0:
            gain[channel] *= mult
    return gain


def generate_inputs(spec: ToyModelSpec, stream: str = "calibration") -> np.ndarray:
    """First-layer inputs of shape ``(B, T, L, C)``.

    Each sample has its own sub-seed, so samples can be generated in any
    order or in shards. Outlier gains act on the clean signal ``x_0``.
    """
    if stream == "calibration":
        stream_id, batch = _STREAM_CALIBRATION, spec.calib_batch
    elif stream == "heldout":
        stream_id, batch = _STREAM_HELDOUT, spec.heldout_batch
    else:
        raise ValueError(f"unknown stream {stream!r}")
    gain = _input_gain(spec)
    out = np.empty((batch, spec.timesteps, spec.token_len, spec.in_features))
    for b in range(batch):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, stream_id, b]))
        x0 = rng.standard_normal((spec.token_len, spec.in_features)) * gain
        for t, abar in enumerate(spec.noise_schedule):
            out[b, t] = forward_noise(x0, abar, rng.standard_normal(x0.shape))
    return out


def propagate(model: ToyModel, x: np.ndarray) -> list[np.ndarray]:
    """Full-precision inputs of every layer followed by the final output."""
    acts = [as_tensor(x)]
    for i in range(len(model)):
        acts.append(model.layer_forward(i, acts[-1]))
    return acts


@dataclass(frozen=True)
class Traces:
    model: ToyModel
    calibration: tuple[ActivationTrace, ...]
    heldout_input: np.ndarray

    def layers(self) -> list[tuple[ActivationTrace, np.ndarray, np.ndarray | None]]:
        return list(zip(self.calibration, self.model.weights, self.model.biases))


def generate_traces(spec: ToyModelSpec) -> Traces:
    model = build_model(spec)
    calib = propagate(model, generate_inputs(spec, "calibration"))[:-1]
    traces = tuple(ActivationTrace(x, layer_id=str(i)) for i, x in enumerate(calib))
    return Traces(model, traces, generate_inputs(spec, "heldout"))


def reference_spec(seed: int = REFERENCE_SEED) -> ToyModelSpec:
    """Three 64x64 layers, W4A8 ablation reference."""
    return ToyModelSpec(
        layers=(
            LayerSpec(64, 64, True, None),
            LayerSpec(64, 64, True, 0),
            LayerSpec(64, 64, True, None),
        ),
        token_len=16,
        timesteps=50,
        calib_batch=12,
        heldout_batch=4,
        seed=seed,
        outliers=((0, 3, 100.0), (1, 17, 10.0)),
    )


# --------------------------------------------------------------------------
# quantized variants
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantLayer:
    """One simulated-quantized layer of a variant.

    ``on_the_fly`` means the input is divided by the smoothing factor at run
    time; otherwise the division has been folded into the previous layer.
    ``output_scale`` undoes a fold applied to this layer's output when
    comparing against the full-precision chain.
    """

    weight: CompensatedWeight
    bias: np.ndarray | None
    act_bits: int
    on_the_fly: bool
    output_scale: np.ndarray | None = None
    alpha: float | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        return compensated_forward(x, self.weight, self.act_bits, self.bias, smooth_input=self.on_the_fly)


@dataclass(frozen=True)
class QuantizedModel:
    name: str
    layers: tuple[QuantLayer, ...]
    search: tuple[GridSearchResult | None, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x


def _folded_weights(model: ToyModel, factors):
    """Apply each layer's smoothing to its producer; returns weights, biases, on-the-fly flags."""
    weights = list(model.weights)
    biases = list(model.biases)
    on_the_fly = []
    for i, factor in enumerate(factors):
        if factor is None:
            on_the_fly.append(False)
            continue
        producer = model.producers[i]
        if producer is None:
            on_the_fly.append(True)
            continue
        weights[producer], folded_bias = fold_smoothing(weights[producer], factor, biases[producer])
        biases[producer] = folded_bias
        on_the_fly.append(False)
    return weights, biases, on_the_fly


def select_factors(model: ToyModel, traces, mode, grid_cfg: GridSearchConfig, workers: int = 1):
    """Choose one smoothing factor per layer.

    ``mode`` is ``None`` (no smoothing), a fixed alpha, or ``"search"``.
    Layers are visited last to first because folding a layer's factor into
    its producer changes the producer's weight statistics.
    """
    n = len(model)
    factors: list[SmoothingFactor | None] = [None] * n
    results: list[GridSearchResult | None] = [None] * n
    if mode is None:
        return factors, results
    for i in reversed(range(n)):
        weights, biases, _ = _folded_weights(model, [None] * (i + 1) + factors[i + 1:])
        trace, w, bias = traces[i], weights[i], biases[i]
        try:
            if mode == "search":
                results[i] = grid_search_layer(trace, w, bias, grid_cfg)
                factors[i] = results[i].best_factor
            else:
                factors[i] = compute_tas_factor(trace.absmax, weight_absmax(w), float(mode))
        except Exception as exc:
            raise LayerError(trace.layer_id, exc) from exc
    return factors, results


def build_variant(
    name: str,
    model: ToyModel,
    factors,
    weight_bits: int,
    act_bits: int,
    compensation: CompensationConfig | None = None,
    search=(),
    granularity: str = "input_channel",
) -> QuantizedModel:
    weights, biases, on_the_fly = _folded_weights(model, factors)
    layers = []
    for i, w in enumerate(weights):
        factor = factors[i] or SmoothingFactor.identity(w.shape[1])
        w_s = w * factor.s
        try:
            if compensation is not None:
                cw = alternating_optimize(w_s, compensation, factor)
            else:
                cw = _plain_weight(w_s, weight_bits, factor, granularity)
        except Exception as exc:
            raise LayerError(str(i), exc) from exc
        nxt = factors[i + 1] if i + 1 < len(factors) else None
        folded_out = nxt is not None and model.producers[i + 1] == i
        layers.append(
            QuantLayer(
                weight=cw,
                bias=biases[i],
                act_bits=act_bits,
                on_the_fly=on_the_fly[i],
                output_scale=nxt.s if folded_out else None,
                alpha=None if factors[i] is None else factors[i].alpha,
            )
        )
    return QuantizedModel(name, tuple(layers), tuple(search))


def _plain_weight(w_s: np.ndarray, bits: int, factor: SmoothingFactor, granularity: str) -> CompensatedWeight:
    n, c = w_s.shape
    if is_pass_through(bits):
        q, deq = None, w_s.copy()
    else:
        q = quantize_weight(w_s, bits, granularity)
        deq = q.dequantize()
    empty_a, empty_b = np.zeros((c, 0)), np.zeros((n, 0))
    resid = float(np.sqrt(np.sum((w_s - deq) ** 2)))
    return CompensatedWeight(q, deq, empty_a, empty_b, (resid,), factor)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerReport:
    layer_id: str
    mse: float
    alpha: float | None
    residual_history: tuple[float, ...]


@dataclass(frozen=True)
class EvalReport:
    weight_bits: int
    act_bits: int
    end_to_end: dict[str, float]
    layers: dict[str, tuple[LayerReport, ...]]
    calibration_fingerprints: tuple[int, ...] = ()
    heldout_fingerprint: int | None = None
    verdict: str = "n/a"
    notes: tuple[str, ...] = field(default=())


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return float(np.mean(d * d))


def evaluate(qmodel: QuantizedModel, fp_model: ToyModel, heldout) -> tuple[float, tuple[LayerReport, ...]]:
    """End-to-end and per-layer MSE of a variant on held-out ``(B, T, L, C)`` inputs.

    Activations are quantized per timestep, one tensor over all samples
    and tokens. Per-layer outputs are compared against the full-precision
    chain on the same inputs, after undoing any fold applied to them.
    """
    heldout = as_tensor(heldout)
    if heldout.ndim != 4 or heldout.shape[-1] != fp_model.weights[0].shape[1]:
        raise ShapeError(f"held-out inputs of shape {heldout.shape} do not fit the model")
    if len(qmodel.layers) != len(fp_model):
        raise ShapeError("variant and model have different depths")
    n_layers = len(fp_model)
    sq = np.zeros(n_layers)
    counts = np.zeros(n_layers)
    for t in range(heldout.shape[1]):
        x_fp = x_q = heldout[:, t].reshape(-1, heldout.shape[-1])
        for i, layer in enumerate(qmodel.layers):
            x_fp = fp_model.layer_forward(i, x_fp)
            x_q = layer.forward(x_q)
            y = x_q if layer.output_scale is None else x_q * layer.output_scale
            d = y - x_fp
            sq[i] += float(np.sum(d * d))
            counts[i] += d.size
    per_layer = tuple(
        LayerReport(str(i), float(sq[i] / counts[i]), layer.alpha, layer.weight.residual_history)
        for i, layer in enumerate(qmodel.layers)
    )
    return per_layer[-1].mse, per_layer


def ablation_verdict(end_to_end: dict[str, float], min_improvement: float = ABLATION_MIN_IMPROVEMENT) -> str:
    """``pass`` when every present stage beats its predecessor by ``min_improvement``."""
    chain = [end_to_end[v] for v in VARIANTS if v in end_to_end]
    if len(chain) < 2 or all(v == 0.0 for v in chain):
        return "n/a"
    for prev, cur in zip(chain, chain[1:]):
        if not cur < prev * (1.0 - min_improvement):
            return "fail"
    return "pass"


def trace_fingerprint(x: np.ndarray) -> int:
    return fnv1a64(np.ascontiguousarray(x, dtype="<f8").tobytes())


def quantize_variants(
    model: ToyModel,
    calibration,
    grid_cfg: GridSearchConfig,
    comp_cfg: CompensationConfig | None = None,
    fixed_alpha: float | None = None,
    workers: int = 1,
    baseline_granularity: str = "output_channel",
) -> dict[str, QuantizedModel]:
    """Build every ablation variant from calibration traces alone.

    At full precision (both bitwidths pass-through) smoothing is a pure
    reparameterisation, so all variants reduce to the original chain.
    """
    wb, ab = grid_cfg.weight_bits, grid_cfg.act_bits
    n = len(model)
    base_cfg = replace(grid_cfg, weight_granularity=baseline_granularity, use_compensation=False)
    fine_cfg = replace(grid_cfg, weight_granularity="input_channel", use_compensation=False)
    mode = "search" if fixed_alpha is None else fixed_alpha
    full_precision = is_pass_through(wb) and is_pass_through(ab)

    def factors_for(alpha_mode, cfg):
        if full_precision:
            return [None] * n, [None] * n
        return select_factors(model, calibration, alpha_mode, cfg, workers)

    variants = {
        "linearquant": build_variant("linearquant", model, [None] * n, wb, ab, granularity=baseline_granularity)
    }
    factors, _ = factors_for(DEFAULT_ALPHA, base_cfg)
    variants["tas"] = build_variant("tas", model, factors, wb, ab, granularity=baseline_granularity)
    factors, results = factors_for(mode, base_cfg)
    variants["gridsearch"] = build_variant(
        "gridsearch", model, factors, wb, ab, search=results, granularity=baseline_granularity
    )
    if comp_cfg is not None:
        comp_cfg = CompensationConfig(comp_cfg.rank, comp_cfg.iterations, wb)
        factors, results = factors_for(mode, fine_cfg)
        variants["compensation"] = build_variant("compensation", model, factors, wb, ab, comp_cfg, results)
    return variants


def evaluate_variants(variants: dict[str, QuantizedModel], model: ToyModel, heldout, workers: int = 1):
    """Score variants; results are keyed and ordered like ``variants``."""

    def score(name):
        return name, evaluate(variants[name], model, heldout)

    names = list(variants)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = dict(pool.map(score, names))
    else:
        scored = dict(score(n) for n in names)
    return {n: scored[n][0] for n in names}, {n: scored[n][1] for n in names}


def run_pipeline(
    spec: ToyModelSpec,
    grid_cfg: GridSearchConfig,
    comp_cfg: CompensationConfig | None = None,
    fixed_alpha: float | None = None,
    traces: Traces | None = None,
    workers: int = 1,
    baseline_granularity: str = "output_channel",
) -> tuple[dict[str, QuantizedModel], EvalReport]:
    """Quantize the toy chain four ways and score each on the held-out inputs.

    ``fixed_alpha`` replaces the grid search; ``comp_cfg=None`` drops the
    compensation variant. Calibration statistics never touch the held-out
    inputs.
    """
    if traces is None:
        traces = generate_traces(spec)
    variants = quantize_variants(
        traces.model, traces.calibration, grid_cfg, comp_cfg, fixed_alpha, workers, baseline_granularity
    )
    end_to_end, per_layer = evaluate_variants(variants, traces.model, traces.heldout_input, workers)
    notes = []
    if comp_cfg is None:
        notes.append("compensation variant disabled")
    if fixed_alpha is not None:
        notes.append(f"grid search bypassed, alpha fixed at {fixed_alpha!r}")
    report = EvalReport(
        weight_bits=grid_cfg.weight_bits,
        act_bits=grid_cfg.act_bits,
        end_to_end=end_to_end,
        layers=per_layer,
        calibration_fingerprints=tuple(trace_fingerprint(t.x) for t in traces.calibration),
        heldout_fingerprint=trace_fingerprint(traces.heldout_input),
        verdict=ablation_verdict(end_to_end),
        notes=tuple(notes),
    )
    return variants, report
