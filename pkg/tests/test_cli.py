import numpy as np
import pytest

from ditas.artifacts import (
    load_traces,
    parse_loss_curve,
    read_model_manifest,
    read_trace_manifest,
)
from ditas.cli import main
from ditas.config import ConfigError, RunConfig, parse_config
from ditas.search import GridSearchConfig, layer_loss
from ditas.smoothing import SmoothingFactor
from ditas.tensorfile import read_tensor

SMALL = """\
weight_bits = 4
act_bits = 8
grid_points = 5
rank = 2
ao_iters = 3
timesteps = 3
calib_batch = 2
heldout_batch = 2
token_len = 4
layers = 6x5 bias; 4x6 bias fold
outliers = 0:1:30.0, 1:2:5.0
"""


@pytest.fixture
def small(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL)
    traces = tmp_path / "traces"
    assert main(["gen-traces", "--config", str(cfg), "--out", str(traces)]) == 0
    return cfg, traces


def run_quantize(cfg, traces, out, *extra):
    return main(["quantize", "--config", str(cfg), "--traces", str(traces), "--out", str(out), *extra])


def test_show_config_defaults(capsys):
    assert main(["show-config"]) == 0
    out = capsys.readouterr().out
    assert out == RunConfig().dump()
    assert "rank = 32\n" in out and "calib_batch = 12\n" in out


def test_minimal_config_writes_one_of_each(tmp_path):
    cfg = tmp_path / "one.cfg"
    cfg.write_text("layers = 3x3 nobias\ntimesteps = 2\ncalib_batch = 1\nheldout_batch = 1\ntoken_len = 2\noutliers = none\n")
    out = tmp_path / "t"
    assert main(["gen-traces", "--config", str(cfg), "--out", str(out)]) == 0
    kinds = [r["kind"] for r in read_trace_manifest(out)]
    assert sorted(kinds) == ["calibration", "config", "heldout", "weight"]
    for row in read_trace_manifest(out):
        assert len(row["fnv1a64"]) == 16
    assert read_tensor(out / "layer0.calib.dtas").shape == (1, 2, 2, 3)


def test_fingerprints_stable(tmp_path, small):
    cfg, traces = small
    again = tmp_path / "again"
    main(["gen-traces", "--config", str(cfg), "--out", str(again)])
    assert read_trace_manifest(traces) == read_trace_manifest(again)


def test_tampered_trace_detected(tmp_path, small, capsys):
    cfg, traces = small
    path = traces / "layer1.calib.dtas"
    data = bytearray(path.read_bytes())
    data[-3] ^= 0x40
    path.write_bytes(bytes(data))
    assert run_quantize(cfg, traces, tmp_path / "m") != 0
    err = capsys.readouterr().err
    assert "layer1.calib.dtas" in err and "fnv1a64" in err


def test_quantize_and_eval_roundtrip(tmp_path, small):
    cfg, traces = small
    model = tmp_path / "model"
    assert run_quantize(cfg, traces, model) == 0
    info = read_model_manifest(model)
    assert info["variants"] == ["linearquant", "tas", "gridsearch", "compensation"]
    r1, r2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
    assert main(["eval", "--model", str(model), "--traces", str(traces), "--report", str(r1)]) == 0
    assert main(["eval", "--model", str(model), "--traces", str(traces), "--report", str(r2), "--workers", "3"]) == 0
    assert r1.read_bytes() == r2.read_bytes()
    text = r1.read_text()
    assert text.startswith("# ditas evaluation report\n")
    assert "heldout_fingerprint" in text and "verdict\t" in text


def test_reloaded_loss_matches_curve(tmp_path, small):
    cfg_path, traces = small
    model_dir = tmp_path / "model"
    run_quantize(cfg_path, traces, model_dir, "--no-compensation")
    cfg, model, calib, _, _ = load_traces(traces)
    grid = GridSearchConfig(grid_points=5, weight_bits=4, act_bits=8, weight_granularity="output_channel")
    s_next = read_tensor(model_dir / "gridsearch" / "layer1" / "smoothing.dtas")
    for i in range(2):
        layer_dir = model_dir / "gridsearch" / f"layer{i}"
        meta = dict(l.split("\t") for l in (layer_dir / "meta.tsv").read_text().splitlines())
        curve = dict(parse_loss_curve((layer_dir / "loss_curve.txt").read_text()))
        w, b = model.weights[i], model.biases[i]
        if i == 0:  # layer 1 folds its smoothing into layer 0
            w, b = w / s_next[:, None], b / s_next
        s = SmoothingFactor(read_tensor(layer_dir / "smoothing.dtas"))
        loss = layer_loss(calib[i], w, b, s, grid)
        expected = curve[float(meta["best_alpha"])]
        assert abs(loss - expected) <= 1e-12 * max(expected, 1.0)
        assert expected == min(curve.values())


def test_fixed_alpha_and_no_compensation(tmp_path, small):
    cfg, traces = small
    model = tmp_path / "model"
    assert run_quantize(cfg, traces, model, "--alpha", "0.5", "--no-compensation") == 0
    info = read_model_manifest(model)
    assert info["absent"] == ["compensation"]
    assert info["alpha_mode"] == "fixed 0.5"
    for i in range(2):
        meta = (model / "gridsearch" / f"layer{i}" / "meta.tsv").read_text()
        assert "alpha\t0.5\n" in meta
        assert not (model / "gridsearch" / f"layer{i}" / "loss_curve.txt").exists()
    report = tmp_path / "r.txt"
    assert main(["eval", "--model", str(model), "--traces", str(traces), "--report", str(report)]) == 0
    text = report.read_text()
    assert "variant_absent\tcompensation" in text
    assert "compensation variant disabled" in text


def test_missing_artifact_listed(tmp_path, small, capsys):
    cfg, traces = small
    model = tmp_path / "model"
    run_quantize(cfg, traces, model)
    (model / "tas" / "layer1" / "codes.dtas").unlink()
    assert main(["eval", "--model", str(model), "--traces", str(traces), "--report", str(tmp_path / "r")]) != 0
    assert "tas/layer1/codes.dtas" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_full_precision_report_zero(tmp_path):
    cfg = tmp_path / "fp.cfg"
    cfg.write_text(SMALL.replace("weight_bits = 4", "weight_bits = 32").replace("act_bits = 8", "act_bits = 32"))
    traces, model, report = tmp_path / "t", tmp_path / "m", tmp_path / "r.txt"
    assert main(["gen-traces", "--config", str(cfg), "--out", str(traces)]) == 0
    assert run_quantize(cfg, traces, model) == 0
    assert main(["eval", "--model", str(model), "--traces", str(traces), "--report", str(report)]) == 0
    rows = [l.split("\t") for l in report.read_text().splitlines() if l.startswith("end_to_end_mse")]
    assert len(rows) == 4 and all(float(r[2]) == 0.0 for r in rows)
    assert "verdict\tn/a" in report.read_text()


def test_mismatched_traces_rejected(tmp_path, small, capsys):
    _, traces = small
    other = tmp_path / "other.cfg"
    other.write_text(SMALL.replace("4x6 bias fold", "4x6 bias"))
    assert run_quantize(other, traces, tmp_path / "m") != 0
    assert "layers" in capsys.readouterr().err


def test_unknown_key_named(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("weight_bits = 4\nsmoothing_mode = fast\n")
    assert main(["show-config", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "smoothing_mode" in err and ":2" in err


@pytest.mark.parametrize(
    "text,key",
    [
        ("weight_bits = 9\n", "weight_bits"),
        ("act_bits = 1\n", "act_bits"),
        ("rank = 0\n", "rank"),
        ("grid_points = 1\n", "grid_points"),
        ("rank = 2\nrank = 3\n", "rank"),
        ("alpha = 1.5\n", "alpha"),
        ("layers = 4x4 bias; 4x5 bias\n", "layers"),
    ],
)
def test_config_errors_name_key(text, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "x.cfg")
    assert key in str(info.value)


def test_config_roundtrip():
    cfg = parse_config(SMALL, "s.cfg")
    assert parse_config(cfg.dump(), "d") == cfg
    assert cfg.grid_config().grid_points == 5
    assert cfg.compensation_config().rank == 2
