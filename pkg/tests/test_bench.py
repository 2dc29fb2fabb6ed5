import json

import numpy as np
import pytest

from directconv.bench import BenchConfig, ChainLayer, run_benchmark, run_chain
from directconv.cli import main
from directconv.errors import ChainShapeMismatch
from directconv.layers import resnet50_layer
from directconv.oracles import conv_forward_naive
from directconv.propagation import forward
from directconv.streams import FusedOp
from directconv.tensors import error_norms, read_tensor, to_blocked_activation, to_blocked_weight, unblock_activation


def test_config_validation():
    with pytest.raises(ValueError):
        BenchConfig(iterations=0)
    with pytest.raises(ValueError):
        BenchConfig(minibatch=0)
    with pytest.raises(ValueError):
        BenchConfig(impl="im2col", pass_="B")
    with pytest.raises(ValueError):
        BenchConfig(fuse="relu", pass_="U")


def test_one_sample_per_layer():
    r = run_benchmark(BenchConfig(layer_ids=(18, 19), iterations=1))
    assert [x.layer_id for x in r.layers] == [18, 19]
    assert all(len(x.times) == 1 for x in r.layers)
    assert all(x.gflops == pytest.approx(x.flops / x.best / 1e9) for x in r.layers)


@pytest.mark.parametrize("impl", ["naive", "direct"])
def test_check_within_tolerance(impl):
    r = run_benchmark(BenchConfig(layer_ids=(13,), minibatch=2, impl=impl, check=True, seed=7))
    assert r.ok and r.layers[0].norms.within(1e-4, 1e-5)


def test_reports_deterministic_given_seed():
    cfg = BenchConfig(layer_ids=(18,), check=True, seed=3, fuse="bias_relu")
    a, b = run_benchmark(cfg), run_benchmark(cfg)
    assert a.layers[0].norms == b.layers[0].norms


@pytest.mark.parametrize("pass_,dtype", [("B", "f32"), ("U", "f32"), ("F", "i16"), ("B", "i16")])
def test_passes_and_dtypes(pass_, dtype):
    r = run_benchmark(BenchConfig(layer_ids=(18,), pass_=pass_, dtype=dtype, check=True, threads=2))
    assert r.ok
    if dtype == "i16":
        assert r.layers[0].norms.linf_abs == 0


def test_chain_matches_oracle_composition():
    specs = [resnet50_layer(3), resnet50_layer(4)]
    rng = np.random.default_rng(11)
    I = rng.uniform(-0.5, 0.5, specs[0].with_minibatch(2).input_shape()).astype(np.float32)
    Ws = [rng.uniform(-0.5, 0.5, s.weight_shape()).astype(np.float32) for s in specs]
    res = run_chain([ChainLayer(s, FusedOp("RELU")) for s in specs], N=2, threads=2, I=I, weights=Ws)
    x = I.astype(np.float64)
    for s, w in zip(specs, Ws):
        x = np.maximum(conv_forward_naive(s.with_minibatch(2), x, w.astype(np.float64)), 0)
    assert error_norms(x, res.canonical()).linf_rel <= 1e-4
    assert [d["layer_id"] for d in res.layers] == [3, 4]


def test_single_layer_chain_is_forward():
    spec = resnet50_layer(18, N=1)
    rng = np.random.default_rng(0)
    I = rng.uniform(-0.5, 0.5, spec.input_shape()).astype(np.float32)
    W = rng.uniform(-0.5, 0.5, spec.weight_shape()).astype(np.float32)
    res = run_chain([ChainLayer(spec)], N=1, I=I, weights=[W])
    direct = forward(spec, to_blocked_activation(I, spec), to_blocked_weight(W, spec))
    assert np.array_equal(res.output.data, direct.data)


def test_incompatible_chain():
    with pytest.raises(ChainShapeMismatch, match="K=64 != C=256"):
        run_chain([ChainLayer(resnet50_layer(4)), ChainLayer(resnet50_layer(13))], N=1)


def test_cli_json_report_and_dumps(tmp_path, capsys):
    out = tmp_path / "r.json"
    rc = main(["--layer-ids", "18", "--iters", "2", "--check", "--fuse", "relu", "--out", str(out),
               "--dump-dir", str(tmp_path / "dump")])
    assert rc == 0
    rep = json.loads(out.read_text())
    assert rep["ok"] and rep["layers"][0]["flops"] == resnet50_layer(18).flops
    assert len(rep["layers"][0]["times_s"]) == 2
    ref = read_tensor(tmp_path / "dump" / "L18_F_direct_f32_ref.cft")
    got = read_tensor(tmp_path / "dump" / "L18_F_direct_f32_out.cft")
    assert error_norms(ref, got).linf_rel <= 1e-4
    assert "GFLOPS" in capsys.readouterr().out


def test_cli_layer_file_and_csv(tmp_path):
    layers = tmp_path / "l.csv"
    layers.write_text("id,C,K,H,W,R,S,stride\n7,16,32,9,9,3,3,2\n")
    out = tmp_path / "r.csv"
    assert main(["--layers", str(layers), "--iters", "1", "--check", "--pass", "B", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("layer_id,") and lines[1].startswith("7,")


def test_cli_check_failure_exit_code(tmp_path, monkeypatch):
    import directconv.bench as bench
    monkeypatch.setattr(bench, "F32_LINF_REL", 0.0)
    monkeypatch.setattr(bench, "F32_L2_REL", 0.0)
    assert main(["--layer-ids", "18", "--iters", "1", "--check"]) == 1


def test_cli_bad_input(tmp_path):
    empty = tmp_path / "e.csv"
    empty.write_text("")
    assert main(["--layers", str(empty), "--iters", "1"]) == 2
    assert main(["--impl", "im2col", "--pass", "U", "--iters", "1"]) == 2
