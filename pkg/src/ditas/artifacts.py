"""On-disk layout for traces, quantized models and evaluation reports.

Text files are line oriented with tab-separated fields. Every tensor is a
DTAS file; manifests carry 64-bit FNV-1a fingerprints of tensor payloads so
a quantization run is bound to the exact calibration data it read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .lowrank import CompensatedWeight
from .pipeline import (
    VARIANTS,
    EvalReport,
    QuantizedModel,
    QuantLayer,
    ToyModel,
    build_model,
    generate_inputs,
    propagate,
)
from .quant import ChannelQuantParams, QuantizedTensor
from .smoothing import ActivationTrace, SmoothingFactor
from .tensorfile import (
    DTYPE_F64,
    DTYPE_U8,
    TensorFileError,
    atomic_write_text,
    fnv1a64,
    read_payload,
    read_tensor,
    write_tensor,
)

__all__ = [
    "ArtifactError",
    "TRACE_MANIFEST",
    "MODEL_MANIFEST",
    "write_traces",
    "read_trace_manifest",
    "load_traces",
    "write_quantized",
    "load_quantized",
    "format_report",
    "format_loss_curve",
    "parse_loss_curve",
]

TRACE_MANIFEST = "manifest.tsv"
MODEL_MANIFEST = "model.tsv"
TRACE_CONFIG = "config.txt"


class ArtifactError(RuntimeError):
    pass


def _hex(fp: int) -> str:
    return f"{fp:016x}"


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) or "-"


def _num(x: float) -> str:
    return format(float(x), ".17g")


# --------------------------------------------------------------------------
# traces
# --------------------------------------------------------------------------


def write_traces(cfg: RunConfig, out_dir) -> list[tuple[str, ...]]:
    """Write weights, calibration traces, held-out inputs and a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.model_spec()
    model = build_model(spec)
    calib = propagate(model, generate_inputs(spec, "calibration"))[:-1]
    heldout = generate_inputs(spec, "heldout")

    records = []

    def put(kind, name, filename, array, seed):
        path = out / filename
        write_tensor(path, array, DTYPE_F64)
        records.append((kind, name, filename, _shape_text(array.shape), seed, _hex(fnv1a64(read_payload(path)))))

    config_text = cfg.dump()
    atomic_write_text(out / TRACE_CONFIG, config_text)
    records.append(("config", "run", TRACE_CONFIG, "-", str(cfg.seed), _hex(fnv1a64(config_text.encode()))))
    for i, w in enumerate(model.weights):
        put("weight", str(i), f"layer{i}.weight.dtas", w, f"{cfg.seed}/weights")
        if model.biases[i] is not None:
            put("bias", str(i), f"layer{i}.bias.dtas", model.biases[i], f"{cfg.seed}/weights")
    for i, x in enumerate(calib):
        put("calibration", str(i), f"layer{i}.calib.dtas", x, f"{cfg.seed}/calibration")
    put("heldout", "input", "heldout.input.dtas", heldout, f"{cfg.seed}/heldout")

    lines = ["kind\tname\tfile\tshape\tseed\tfnv1a64"] + ["\t".join(r) for r in records]
    atomic_write_text(out / TRACE_MANIFEST, "\n".join(lines) + "\n")
    return records


def read_trace_manifest(trace_dir) -> list[dict[str, str]]:
    path = Path(trace_dir) / TRACE_MANIFEST
    if not path.is_file():
        raise ArtifactError(f"{path}: missing trace manifest")
    lines = path.read_text().splitlines()
    header = lines[0].split("\t")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(header):
            raise ArtifactError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        rows.append(dict(zip(header, fields)))
    return rows


def _verified_tensor(trace_dir: Path, row: dict[str, str]) -> np.ndarray:
    path = trace_dir / row["file"]
    if not path.is_file():
        raise ArtifactError(f"{path}: missing ({row['kind']} {row['name']})")
    try:
        payload = read_payload(path)
        array = read_tensor(path)
    except TensorFileError as exc:
        raise ArtifactError(str(exc)) from None
    actual = _hex(fnv1a64(payload))
    if actual != row["fnv1a64"]:
        raise ArtifactError(
            f"{path}: field fnv1a64 mismatch (manifest {row['fnv1a64']}, payload {actual})"
        )
    if _shape_text(array.shape) != row["shape"]:
        raise ArtifactError(f"{path}: field shape mismatch (manifest {row['shape']}, file {_shape_text(array.shape)})")
    return array


def load_traces(trace_dir, heldout: bool = False):
    """Return ``(config, model, calibration traces, heldout_input or None, manifest rows)``.

    Held-out inputs are only read when asked for, so quantization never
    touches them.
    """
    trace_dir = Path(trace_dir)
    rows = read_trace_manifest(trace_dir)
    by_kind: dict[str, dict[str, dict[str, str]]] = {}
    for row in rows:
        by_kind.setdefault(row["kind"], {})[row["name"]] = row

    cfg_row = by_kind.get("config", {}).get("run")
    if cfg_row is None:
        raise ArtifactError(f"{trace_dir / TRACE_MANIFEST}: no config record")
    cfg_path = trace_dir / cfg_row["file"]
    if not cfg_path.is_file():
        raise ArtifactError(f"{cfg_path}: missing")
    cfg_text = cfg_path.read_text()
    if _hex(fnv1a64(cfg_text.encode())) != cfg_row["fnv1a64"]:
        raise ArtifactError(f"{cfg_path}: field fnv1a64 mismatch")
    cfg = parse_config(cfg_text, str(cfg_path))

    n = len(cfg.layers)
    weights, biases, traces = [], [], []
    for i in range(n):
        key = str(i)
        if key not in by_kind.get("weight", {}) or key not in by_kind.get("calibration", {}):
            raise ArtifactError(f"{trace_dir / TRACE_MANIFEST}: layer {i} weight or calibration record missing")
        weights.append(_verified_tensor(trace_dir, by_kind["weight"][key]))
        bias_row = by_kind.get("bias", {}).get(key)
        biases.append(None if bias_row is None else _verified_tensor(trace_dir, bias_row))
        traces.append(ActivationTrace(_verified_tensor(trace_dir, by_kind["calibration"][key]), layer_id=key))
    model = ToyModel(tuple(weights), tuple(biases), tuple(l.producer for l in cfg.layers))
    held = None
    if heldout:
        row = by_kind.get("heldout", {}).get("input")
        if row is None:
            raise ArtifactError(f"{trace_dir / TRACE_MANIFEST}: no held-out record")
        held = _verified_tensor(trace_dir, row)
    return cfg, model, traces, held, rows


# --------------------------------------------------------------------------
# quantized models
# --------------------------------------------------------------------------


def format_loss_curve(curve) -> str:
    return "".join(f"{_num(alpha)}\t{_num(loss)}\n" for alpha, loss in curve)


def parse_loss_curve(text: str) -> list[tuple[float, float]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            alpha, loss = line.split("\t")
            out.append((float(alpha), float(loss)))
    return out


def _write_layer(layer_dir: Path, layer: QuantLayer, search) -> None:
    layer_dir.mkdir(parents=True, exist_ok=True)
    cw = layer.weight
    meta = [("act_bits", str(layer.act_bits)), ("on_the_fly", str(int(layer.on_the_fly)))]
    meta.append(("alpha", "none" if layer.alpha is None else _num(layer.alpha)))
    if cw.q_w is None:
        meta.append(("weight", "full_precision"))
        write_tensor(layer_dir / "weight.dtas", cw.dequantized)
    else:
        params = cw.q_w.params
        meta += [("weight", "quantized"), ("bits", str(params.bits)), ("axis", str(cw.q_w.axis))]
        write_tensor(layer_dir / "codes.dtas", cw.q_w.codes, DTYPE_U8)
        write_tensor(layer_dir / "scales.dtas", params.scales)
        write_tensor(layer_dir / "zero_points.dtas", params.zero_points, DTYPE_U8)
    write_tensor(layer_dir / "smoothing.dtas", cw.smoothing.s)
    if cw.rank:
        write_tensor(layer_dir / "a.dtas", cw.a)
        write_tensor(layer_dir / "b.dtas", cw.b)
    meta.append(("rank", str(cw.rank)))
    if layer.bias is not None:
        write_tensor(layer_dir / "bias.dtas", layer.bias)
    if layer.output_scale is not None:
        write_tensor(layer_dir / "output_scale.dtas", layer.output_scale)
    meta.append(("residual_history", ",".join(_num(r) for r in cw.residual_history)))
    if search is not None:
        meta.append(("best_alpha", _num(search.best_alpha)))
        atomic_write_text(layer_dir / "loss_curve.txt", format_loss_curve(search.loss_curve))
    atomic_write_text(layer_dir / "meta.tsv", "".join(f"{k}\t{v}\n" for k, v in meta))


def write_quantized(out_dir, variants: dict[str, QuantizedModel], cfg: RunConfig, trace_rows, notes=()) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, qmodel in variants.items():
        for i, layer in enumerate(qmodel.layers):
            search = qmodel.search[i] if i < len(qmodel.search) else None
            _write_layer(out / name / f"layer{i}", layer, search)
    lines = [
        f"weight_bits\t{cfg.weight_bits}",
        f"act_bits\t{cfg.act_bits}",
        f"layers\t{len(cfg.layers)}",
        f"alpha_mode\t{'search' if cfg.alpha is None else 'fixed ' + _num(cfg.alpha)}",
    ]
    for row in trace_rows:
        if row["kind"] in ("config", "weight", "bias", "calibration"):
            lines.append(f"source\t{row['kind']}\t{row['name']}\t{row['fnv1a64']}")
    for name in VARIANTS:
        lines.append(f"{'variant' if name in variants else 'variant_absent'}\t{name}")
    lines += [f"note\t{n}" for n in notes]
    atomic_write_text(out / MODEL_MANIFEST, "\n".join(lines) + "\n")


def read_model_manifest(model_dir) -> dict:
    path = Path(model_dir) / MODEL_MANIFEST
    if not path.is_file():
        raise ArtifactError(f"{path}: missing model manifest")
    info = {"variants": [], "absent": [], "sources": {}, "notes": []}
    for line in path.read_text().splitlines():
        fields = line.split("\t")
        key = fields[0]
        if key == "variant":
            info["variants"].append(fields[1])
        elif key == "variant_absent":
            info["absent"].append(fields[1])
        elif key == "source":
            info["sources"][(fields[1], fields[2])] = fields[3]
        elif key == "note":
            info["notes"].append(fields[1])
        else:
            info[key] = fields[1]
    return info


def _read_meta(path: Path) -> dict[str, str]:
    return dict(line.split("\t", 1) for line in path.read_text().splitlines() if line)


def _required_files(meta: dict[str, str]) -> list[str]:
    files = ["smoothing.dtas"]
    if meta.get("weight") == "full_precision":
        files.append("weight.dtas")
    else:
        files += ["codes.dtas", "scales.dtas", "zero_points.dtas"]
    if int(meta.get("rank", "0")):
        files += ["a.dtas", "b.dtas"]
    return files


def missing_model_files(model_dir) -> list[str]:
    model_dir = Path(model_dir)
    missing = []
    info = read_model_manifest(model_dir)
    for name in info["variants"]:
        for i in range(int(info["layers"])):
            layer_dir = model_dir / name / f"layer{i}"
            meta_path = layer_dir / "meta.tsv"
            if not meta_path.is_file():
                missing.append(str(meta_path))
                continue
            missing += [str(layer_dir / f) for f in _required_files(_read_meta(meta_path)) if not (layer_dir / f).is_file()]
    return missing


def _load_layer(layer_dir: Path) -> QuantLayer:
    meta = _read_meta(layer_dir / "meta.tsv")
    s = SmoothingFactor(read_tensor(layer_dir / "smoothing.dtas"))
    if meta["weight"] == "full_precision":
        q_w, deq = None, read_tensor(layer_dir / "weight.dtas")
    else:
        params = ChannelQuantParams(
            read_tensor(layer_dir / "scales.dtas"), read_tensor(layer_dir / "zero_points.dtas"), int(meta["bits"])
        )
        q_w = QuantizedTensor(read_tensor(layer_dir / "codes.dtas"), params, axis=int(meta["axis"]))
        deq = q_w.dequantize()
    n, c = deq.shape
    rank = int(meta["rank"])
    if rank:
        a, b = read_tensor(layer_dir / "a.dtas"), read_tensor(layer_dir / "b.dtas")
    else:
        a, b = np.zeros((c, 0)), np.zeros((n, 0))
    history = tuple(float(v) for v in meta["residual_history"].split(","))
    cw = CompensatedWeight(q_w, deq, a, b, history, s)
    bias = read_tensor(layer_dir / "bias.dtas") if (layer_dir / "bias.dtas").is_file() else None
    out_scale = read_tensor(layer_dir / "output_scale.dtas") if (layer_dir / "output_scale.dtas").is_file() else None
    alpha = None if meta["alpha"] == "none" else float(meta["alpha"])
    return QuantLayer(cw, bias, int(meta["act_bits"]), meta["on_the_fly"] == "1", out_scale, alpha)


def load_quantized(model_dir) -> tuple[dict[str, QuantizedModel], dict]:
    model_dir = Path(model_dir)
    info = read_model_manifest(model_dir)
    missing = missing_model_files(model_dir)
    if missing:
        raise ArtifactError("missing artifacts: " + ", ".join(missing))
    variants = {}
    for name in info["variants"]:
        layers = tuple(_load_layer(model_dir / name / f"layer{i}") for i in range(int(info["layers"])))
        variants[name] = QuantizedModel(name, layers)
    return variants, info


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


def format_report(report: EvalReport, absent=()) -> str:
    lines = [
        "# ditas evaluation report",
        f"weight_bits\t{report.weight_bits}",
        f"act_bits\t{report.act_bits}",
    ]
    lines += [f"calibration_fingerprint\t{i}\t{_hex(fp)}" for i, fp in enumerate(report.calibration_fingerprints)]
    if report.heldout_fingerprint is not None:
        lines.append(f"heldout_fingerprint\t{_hex(report.heldout_fingerprint)}")
    lines.append("# layer_mse\tvariant\tlayer\tmse\talpha\tresidual_history")
    for variant, rows in report.layers.items():
        for row in rows:
            alpha = "-" if row.alpha is None else _num(row.alpha)
            history = ",".join(_num(r) for r in row.residual_history)
            lines.append(f"layer_mse\t{variant}\t{row.layer_id}\t{_num(row.mse)}\t{alpha}\t{history}")
    lines.append("# end_to_end_mse\tvariant\tmse")
    for variant, mse in report.end_to_end.items():
        lines.append(f"end_to_end_mse\t{variant}\t{_num(mse)}")
    lines += [f"variant_absent\t{v}" for v in absent]
    lines += [f"note\t{n}" for n in report.notes]
    lines.append(f"verdict\t{report.verdict}")
    return "\n".join(lines) + "\n"
