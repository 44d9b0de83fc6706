"""End-to-end forward latency of train-form vs deploy-form networks."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import astuple, dataclass, fields
from typing import Dict, Iterable, List, Sequence

import numpy as np

from repmlp.block import DEPLOY, TRAIN
from repmlp.errors import ConfigurationError
from repmlp.net import NetConfig, build_net, convert_net, net_forward
from repmlp.verify import TOL_NET

MIN_WARMUP = 3
MIN_ITERS = 10


@dataclass
class BenchRow:
    config: str
    mode: str
    batch: int
    warmup: int
    iters: int
    median_ms: float
    samples_per_sec: float


class EquivalenceError(AssertionError):
    pass


def time_forward(net, x, warmup=MIN_WARMUP, iters=MIN_ITERS) -> float:
    """Median wall-clock seconds of ``net_forward(net, x)``."""
    if warmup < MIN_WARMUP or iters < MIN_ITERS:
        raise ConfigurationError(f"need at least {MIN_WARMUP} warmups and {MIN_ITERS} timed iterations")
    for _ in range(warmup):
        net_forward(net, x)
    samples = []
    for _ in range(iters):
        start = time.perf_counter()
        net_forward(net, x)
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def time_interleaved(nets: Dict[str, object], x, warmup=MIN_WARMUP, iters=MIN_ITERS) -> Dict[str, float]:
    """Median seconds per network, timing the networks in alternating rounds.

    Round ``i`` runs every network once, in reverse order on odd rounds, so
    slow drift of the machine (thermal, host contention) is shared evenly
    instead of landing on whichever network is timed last.
    """
    if warmup < MIN_WARMUP or iters < MIN_ITERS:
        raise ConfigurationError(f"need at least {MIN_WARMUP} warmups and {MIN_ITERS} timed iterations")
    order = list(nets)
    for _ in range(warmup):
        for key in order:
            net_forward(nets[key], x)
    samples = {key: [] for key in order}
    for i in range(iters):
        for key in order if i % 2 == 0 else order[::-1]:
            start = time.perf_counter()
            net_forward(nets[key], x)
            samples[key].append(time.perf_counter() - start)
    return {key: statistics.median(v) for key, v in samples.items()}


def bench_config(
    name: str,
    cfg: NetConfig,
    batch=8,
    modes: Sequence[str] = (TRAIN, DEPLOY),
    warmup=MIN_WARMUP,
    iters=MIN_ITERS,
    seed=0,
) -> List[BenchRow]:
    """Time each mode on the same seeded input after checking the outputs agree."""
    train = build_net(cfg, seed)
    nets = {TRAIN: train, DEPLOY: convert_net(train)}
    x = np.random.default_rng(seed).standard_normal((batch, 3) + cfg.input_hw).astype(np.float32)
    diff = float(np.abs(net_forward(nets[TRAIN], x) - net_forward(nets[DEPLOY], x)).max())
    if diff > TOL_NET:
        raise EquivalenceError(f"{name}: train and deploy outputs differ by {diff:.3e} > {TOL_NET}")
    medians = time_interleaved({mode: nets[mode] for mode in modes}, x, warmup, iters)
    return [
        BenchRow(name, mode, batch, warmup, iters, medians[mode] * 1e3, batch / medians[mode]) for mode in modes
    ]


def write_csv(rows: Iterable[BenchRow], stream):
    writer = csv.writer(stream)
    writer.writerow([f.name for f in fields(BenchRow)])
    for row in rows:
        writer.writerow([f"{v:.3f}" if isinstance(v, float) else v for v in astuple(row)])
