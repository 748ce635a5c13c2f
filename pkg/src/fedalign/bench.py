"""Wall-clock scaling of the Sinkhorn solver and the barycenter iteration."""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import seeding
from .barycenter import BarycenterConfig, bregman_barycenter
from .errors import ValidationError
from .ot import DiscreteMeasure, SinkhornConfig, build_cost, sinkhorn

BENCH_HEADER = ("d", "sinkhorn_seconds", "barycenter_seconds")
BARYCENTER_INPUTS = 3


@dataclass(frozen=True)
class BenchRow:
    d: int
    sinkhorn_seconds: float
    barycenter_seconds: float


@dataclass
class BenchResult:
    rows: List[BenchRow]
    sinkhorn_slope: float
    barycenter_slope: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(BENCH_HEADER) + "\n")
        for r in self.rows:
            buf.write(f"{r.d},{float(r.sinkhorn_seconds)!r},{float(r.barycenter_seconds)!r}\n")
        buf.write(f"# slope,{float(self.sinkhorn_slope)!r},{float(self.barycenter_slope)!r}\n")
        return buf.getvalue()


def parse_bench_csv(text: str) -> BenchResult:
    lines = [line for line in text.strip().splitlines()]
    if not lines or tuple(lines[0].split(",")) != BENCH_HEADER:
        raise ValidationError(f"bench CSV must start with header {','.join(BENCH_HEADER)}")
    rows, slopes = [], (float("nan"), float("nan"))
    for line in lines[1:]:
        if line.startswith("# slope,"):
            _, s, b = line.split(",")
            slopes = (float(s), float(b))
            continue
        d, s, b = line.split(",")
        rows.append(BenchRow(int(d), float(s), float(b)))
    return BenchResult(rows, *slopes)


def loglog_slope(sizes: Sequence[float], seconds: Sequence[float]) -> float:
    """Least-squares slope of log(seconds) against log(size)."""
    return float(np.polyfit(np.log(sizes), np.log(seconds), 1)[0])


def random_measure(d: int, rng: np.random.Generator, support=None) -> DiscreteMeasure:
    support = rng.random(d) if support is None else support
    return DiscreteMeasure(support, rng.dirichlet(np.ones(d)))


def _median_time(make_problem, solve, repeats: int) -> float:
    times = []
    for r in range(repeats):
        problem = make_problem(r)
        t0 = time.perf_counter()
        solve(*problem)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def time_sinkhorn(d: int, cfg: SinkhornConfig, repeats: int = 5, seed: int = 0) -> float:
    """Median over ``repeats`` random size-``d`` problems of cost build + solve."""

    def make(r):
        rng = seeding.rng(seed, seeding.BENCH, 0, d, r)
        return random_measure(d, rng), random_measure(d, rng)

    return _median_time(make, lambda a, b: sinkhorn(a, b, build_cost(a, b, 2), cfg), repeats)


def time_barycenter(d: int, cfg: BarycenterConfig, repeats: int = 5, seed: int = 0) -> float:
    """Median time of barycenters of random histograms on a size-``d`` grid.

    The problems depend on ``(seed, d)`` only, so timings at different
    epsilons are paired.
    """
    grid = np.linspace(0.0, 1.0, d)

    def make(r):
        rng = seeding.rng(seed, seeding.BENCH, 1, d, r)
        return ([random_measure(d, rng, grid) for _ in range(BARYCENTER_INPUTS)],)

    return _median_time(make, lambda inputs: bregman_barycenter(inputs, cfg), repeats)


def bench_scaling(
    sizes: Sequence[int],
    cfg: Optional[SinkhornConfig] = None,
    bary_cfg: Optional[BarycenterConfig] = None,
    repeats: int = 5,
    seed: int = 0,
) -> BenchResult:
    """Time both solvers over ``sizes`` and fit log-log slopes per column."""
    sizes = [int(d) for d in sizes]
    if len(sizes) < 2:
        raise ValidationError("need at least two sizes to fit a slope")
    if len(set(sizes)) != len(sizes):
        raise ValidationError("sizes must be distinct")
    if sizes != sorted(sizes):
        raise ValidationError("sizes must be ascending")
    if sizes[0] < 2:
        raise ValidationError("sizes must be >= 2")
    cfg = cfg or SinkhornConfig()
    bary_cfg = bary_cfg or BarycenterConfig()
    rows = [
        BenchRow(d, time_sinkhorn(d, cfg, repeats, seed), time_barycenter(d, bary_cfg, repeats, seed))
        for d in sizes
    ]
    return BenchResult(
        rows,
        loglog_slope(sizes, [r.sinkhorn_seconds for r in rows]),
        loglog_slope(sizes, [r.barycenter_seconds for r in rows]),
    )


def bench_epsilon(d: int, epsilons: Sequence[float], repeats: int = 5, seed: int = 0, **bary_kwargs):
    """Barycenter time on one fixed problem for each epsilon."""
    return [
        time_barycenter(d, BarycenterConfig(epsilon=eps, **bary_kwargs), repeats, seed)
        for eps in epsilons
    ]
