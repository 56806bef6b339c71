"""Post-training quantization of diffusion-transformer style linear layers.

Temporal-aggregated activation smoothing, per-layer grid search of the
migration exponent, per-input-channel weight quantization and low-rank
compensation by alternating optimization.
"""

from .lowrank import CompensatedWeight, CompensationConfig, alternating_optimize, compensated_forward
from .pipeline import ToyModelSpec, reference_spec, run_pipeline
from .quant import (
    QuantParams,
    compute_params,
    fake_quant_activation,
    quantize_weight_per_input_channel,
)
from .search import GridSearchConfig, grid_search_layer, grid_search_model, layer_loss
from .smoothing import ActivationTrace, SmoothingFactor, apply_smoothing, compute_tas_factor, fold_smoothing

__version__ = "0.1.0"
