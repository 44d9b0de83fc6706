import csv
import io
import json

import numpy as np
import pytest

from repmlp.cli import main
from repmlp.model_io import load_net, read_checkpoint, save_net
from repmlp.net import NAMED_CONFIGS, NetConfig, build_net, net_forward

SMALL = NetConfig((1, 1, 1, 1), 8, (1, 2, 4, 8), (32, 32), num_classes=10)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL.to_dict()))
    return path


@pytest.fixture
def train_ckpt(tmp_path):
    path = tmp_path / "train.rmlp"
    save_net(path, build_net(SMALL, seed=4))
    return path


def test_count_t224(capsys):
    code, out, _ = run(capsys, "count", "--config", "T224")
    assert code == 0 and "38.3M / 2.8B" in out


def test_count_per_layer_and_mode(capsys, small_cfg):
    code, out, _ = run(capsys, "count", "--config", small_cfg, "--per-layer", "--mode", "train")
    assert code == 0 and "stage0.0.local3x3" in out


def test_count_bad_config(capsys, tmp_path):
    code, _, err = run(capsys, "count", "--config", "preset = nope")
    assert code == 2 and "unknown preset" in err
    code, _, err = run(capsys, "count", "--config", tmp_path / "missing.json")
    assert code == 2 and "neither a preset" in err


def test_convert(capsys, tmp_path, train_ckpt):
    out_path = tmp_path / "deploy.rmlp"
    code, out, _ = run(capsys, "convert", "--in", train_ckpt, "--out", out_path)
    assert code == 0
    assert "stage3.0.block" in out and "logits" in out and out.strip().splitlines()[-1].startswith("OK")
    mode, _, arrays = read_checkpoint(out_path)
    assert mode == "deploy"
    assert not any(".local." in k or ".bn." in k for k in arrays)
    assert load_net(out_path).mode == "deploy"


def test_convert_rejects_deploy_input(capsys, tmp_path, train_ckpt):
    deploy = tmp_path / "deploy.rmlp"
    run(capsys, "convert", "--in", train_ckpt, "--out", deploy)
    code, _, err = run(capsys, "convert", "--in", deploy, "--out", tmp_path / "again.rmlp")
    assert code == 2 and "mode flag" in err


def test_convert_is_deterministic(capsys, tmp_path, train_ckpt):
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.rmlp"
        outs.append(run(capsys, "convert", "--in", train_ckpt, "--out", path, "--seed", 3)[1].replace(str(path), ""))
        outs.append(path.read_bytes())
    assert outs[0] == outs[2] and outs[1] == outs[3]


@pytest.mark.slow
def test_convert_t224(capsys, tmp_path):
    src = tmp_path / "t224.rmlp"
    save_net(src, build_net(NAMED_CONFIGS["T224"], seed=0))
    code, out, _ = run(capsys, "convert", "--in", src, "--out", tmp_path / "t224d.rmlp", "--probe-batch", 1)
    assert code == 0
    logits_diff = float(next(l for l in out.splitlines() if l.startswith("logits")).split()[1])
    assert logits_diff <= 1e-3


def test_verify_default_passes(capsys):
    code, out, _ = run(capsys, "verify", "--seed", 0)
    assert code == 0
    block = next(l for l in out.splitlines() if "block-merge" in l)
    assert block.startswith("PASS") and float(block.split("worst=")[1].split()[0]) <= 1e-4


def test_verify_exhaustive_and_config(capsys, small_cfg):
    code, out, _ = run(capsys, "verify", "--exhaustive-small", "--config", small_cfg)
    assert code == 0 and "cases=160" in out and "net-merge" in out


def test_verify_detects_perturbation(capsys):
    code, out, _ = run(capsys, "verify", "--perturb", "1e-2")
    assert code == 1
    assert "FAIL block-merge" in out


def test_bench_rows(capsys, small_cfg, tmp_path):
    path = tmp_path / "bench.csv"
    code, _, _ = run(capsys, "bench", "--config", small_cfg, "--config", small_cfg, "--batch", 2, "--out", path, "--threads", 1)
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert [(r["config"], r["mode"]) for r in rows] == [("small", "train"), ("small", "deploy")] * 2
    assert all(int(r["iters"]) >= 10 and int(r["warmup"]) >= 3 for r in rows)
    assert all(float(r["samples_per_sec"]) > 0 for r in rows)


def test_bench_rejects_short_runs_and_bad_modes(capsys, small_cfg):
    assert run(capsys, "bench", "--config", small_cfg, "--iters", 3)[0] == 2
    assert run(capsys, "bench", "--config", small_cfg, "--modes", "fast")[0] == 2


def _zero_head_ckpt(tmp_path):
    net = build_net(SMALL, seed=1)
    net.head.weight[:] = 0
    net.head.bias[:] = 0
    path = tmp_path / "zh.rmlp"
    save_net(path, net)
    return path


def test_infer_uniform_logits(capsys, tmp_path):
    ckpt = _zero_head_ckpt(tmp_path)
    x = tmp_path / "x.f32"
    x.write_bytes(np.zeros((2, 3, 32, 32), "<f4").tobytes())
    code, out, _ = run(capsys, "infer", "--ckpt", ckpt, "--input", x, "--batch", 2, "--topk", 10)
    assert code == 0
    lines = out.strip().splitlines()
    assert len(lines) == 2
    values = {float(tok.split(":")[1]) for tok in lines[0].split()[2:]}
    assert values == {0.0}


def test_infer_matches_library(capsys, tmp_path, train_ckpt):
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype("<f4")
    path = tmp_path / "x.f32"
    path.write_bytes(x.tobytes())
    code, out, _ = run(capsys, "infer", "--ckpt", train_ckpt, "--input", path, "--topk", 1)
    expected = int(net_forward(load_net(train_ckpt), x).argmax())
    assert code == 0 and out.split()[2].split(":")[0] == str(expected)


def test_infer_wrong_size(capsys, tmp_path, train_ckpt):
    path = tmp_path / "x.f32"
    path.write_bytes(b"\0" * 100)
    code, _, err = run(capsys, "infer", "--ckpt", train_ckpt, "--input", path)
    assert code == 2 and "(1, 3, 32, 32)" in err


def test_inspect_sampling_indices(capsys, tmp_path):
    # stage 3 has ten blocks on a 16x16 grid, like the deep 256 preset
    cfg = NetConfig((1, 1, 10, 1), 8, (1, 2, 4, 8), (256, 256), num_classes=10)
    ckpt = tmp_path / "deep.rmlp"
    save_net(ckpt, build_net(cfg, seed=0))
    out = tmp_path / "heat"
    code, text, _ = run(capsys, "inspect", "--ckpt", ckpt, "--stage", 3, "--block", 10, "--set", 1, "--pos", "7,7", "--out", out)
    assert code == 0 and "stage 3 block 10" in text
    grid = np.loadtxt(tmp_path / "heat.csv", delimiter=",")
    assert grid.shape == (16, 16)
    assert (tmp_path / "heat.pgm").read_bytes().startswith(b"P5\n16 16\n255\n")

    code, _, _ = run(capsys, "inspect", "--ckpt", ckpt, "--stage", 3, "--block", 10, "--pos", "7,7", "--kernel", "diff", "--out", out)
    assert code == 0
    diff = np.loadtxt(tmp_path / "heat.csv", delimiter=",")
    # 0-based (6,6) is the sampled point; the 3x3 branch reaches one step around it
    inside = np.zeros_like(diff, dtype=bool)
    inside[5:8, 5:8] = True
    assert np.all(diff[~inside] == diff.min()) and np.all(diff[inside] > diff.min())


def test_inspect_bad_indices(capsys, train_ckpt, tmp_path):
    out = tmp_path / "h"
    assert run(capsys, "inspect", "--ckpt", train_ckpt, "--stage", 5, "--block", 1, "--pos", "1,1", "--out", out)[0] == 2
    assert run(capsys, "inspect", "--ckpt", train_ckpt, "--stage", 1, "--block", 1, "--pos", "9,9", "--out", out)[0] == 2
    assert run(capsys, "inspect", "--ckpt", train_ckpt, "--stage", 1, "--block", 1, "--pos", "x", "--out", out)[0] == 2


def test_missing_file_is_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "infer", "--ckpt", tmp_path / "nope", "--input", tmp_path / "x")
    assert code == 2 and "nope" in err
