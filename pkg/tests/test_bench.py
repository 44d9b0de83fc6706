import io

import numpy as np
import pytest

import repmlp.bench as bench
from repmlp.errors import ConfigurationError
from repmlp.net import NetConfig, build_net, convert_net

SMALL = NetConfig((1, 1, 1, 1), 8, (1, 2, 4, 8), (32, 32), num_classes=10)


def test_minimum_iterations_enforced():
    net = build_net(SMALL)
    x = np.zeros((1, 3, 32, 32), np.float32)
    with pytest.raises(ConfigurationError):
        bench.time_forward(net, x, warmup=2)
    with pytest.raises(ConfigurationError):
        bench.time_interleaved({"a": net}, x, iters=9)


def test_interleaved_rounds_alternate(monkeypatch):
    calls = []
    monkeypatch.setattr(bench, "net_forward", lambda net, x: calls.append(net))
    medians = bench.time_interleaved({"a": "A", "b": "B"}, None, warmup=3, iters=10)
    assert set(medians) == {"a", "b"}
    timed = calls[6:]
    assert timed[:4] == ["A", "B", "B", "A"] and timed.count("A") == timed.count("B") == 10


def test_bench_rows_and_csv():
    rows = bench.bench_config("small", SMALL, batch=2)
    assert [(r.config, r.mode, r.batch) for r in rows] == [("small", "train", 2), ("small", "deploy", 2)]
    assert all(r.median_ms > 0 and r.samples_per_sec == pytest.approx(2e3 / r.median_ms) for r in rows)
    out = io.StringIO()
    bench.write_csv(rows, out)
    lines = out.getvalue().splitlines()
    assert lines[0] == "config,mode,batch,warmup,iters,median_ms,samples_per_sec" and len(lines) == 3


def test_broken_conversion_is_refused(monkeypatch):
    def broken(net):
        deploy = convert_net(net)
        deploy.stages[0][0][0].fc3.bias[:] += 1.0
        return deploy

    monkeypatch.setattr(bench, "convert_net", broken)
    with pytest.raises(bench.EquivalenceError, match="differ"):
        bench.bench_config("small", SMALL, batch=2)
