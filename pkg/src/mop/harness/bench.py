"""Greedy-generation latency protocol: timed runs with warm-up discarded."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..model import TransformerModel, generate
from .flops import flops_per_token


@dataclass
class BenchReport:
    name: str
    times: list[float]
    warmup: int
    mean: float
    std: float
    tokens_generated: int
    flops_per_token: int
    speedup: float | None = None

    @property
    def retained(self) -> list[float]:
        return self.times[self.warmup:]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retained_runs"] = len(self.retained)
        return d


def latency_bench(model: TransformerModel, prompt_len: int = 12, gen_len: int = 128,
                  runs: int = 20, warmup: int = 10, seed: int = 0, name: str = "model") -> BenchReport:
    """Wall-clock time of ``runs`` batch-1 generations; the first ``warmup`` are dropped."""
    if runs <= warmup:
        raise ValueError("runs must exceed warmup")
    prompt = np.random.default_rng(seed).integers(0, model.config.vocab_size, size=prompt_len)
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        generate(model, prompt, gen_len)
        times.append(time.perf_counter() - start)
    kept = times[warmup:]
    return BenchReport(
        name=name, times=times, warmup=warmup, mean=statistics.fmean(kept),
        std=statistics.stdev(kept) if len(kept) > 1 else 0.0, tokens_generated=gen_len,
        flops_per_token=flops_per_token(model, prompt_len + gen_len // 2),
    )


def compare(models: dict, baseline: str = "dense", **kwargs) -> list[BenchReport]:
    """Benchmark each model serially; speedup is baseline mean / model mean."""
    reports = [latency_bench(m, name=name, **kwargs) for name, m in models.items()]
    base = next(r for r in reports if r.name == baseline)
    for r in reports:
        r.speedup = base.mean / r.mean
    return reports
