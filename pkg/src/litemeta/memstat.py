"""Activation-memory accounting for support-set adaptation.

Each measurement runs one support forward pass under a fresh tape and reads
its counters: ``tracked_count`` (recorded nodes) and ``retained_scalars``
(array elements held for the backward pass, parameters excluded).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .episodes import Episode, SyntheticSpec, generate_synthetic_class_bank
from .lite import FullPass, LiteConfig, lite_support_forward, sample_backprop_indices

MEMSTAT_HEADER = ["N", "H", "mode", "tracked_count", "retained_scalars", "estimated_bytes"]


@dataclass
class MemRow:
    N: int
    H: int
    mode: str
    tracked_count: int
    retained_scalars: int
    estimated_bytes: int

    def as_list(self) -> list:
        return [self.N, self.H, self.mode, self.tracked_count, self.retained_scalars, self.estimated_bytes]


def support_episode(n: int, way: int, input_shape, seed: int) -> Episode:
    """A balanced ``way``-class support set of ``n`` synthetic examples (one query example)."""
    if n % way:
        raise ValueError(f"N={n} is not a multiple of way={way}")
    generator = "patterned_images" if len(input_shape) == 3 else "gaussian_clusters"
    rng = np.random.default_rng(seed)
    bank = generate_synthetic_class_bank(SyntheticSpec(generator, tuple(input_shape)), way, n // way + 1, rng)
    x = bank.x[:, :-1].reshape((n,) + bank.input_shape)
    y = np.repeat(np.arange(way), n // way)
    return Episode(x, y, bank.x[:, -1], np.arange(way), way)


def measure(model, params, episode: Episode, h: int | None, seed: int = 0) -> MemRow:
    """Counters for one support pass; ``h=None`` means full back-propagation."""
    n = episode.n_support
    with ad.Tape() as tape:
        if h is None:
            model.adapt(params, FullPass(episode.support_x, episode.support_y, episode.way))
        else:
            idx = sample_backprop_indices(n, h, "without_replacement", np.random.default_rng(seed))
            lite_support_forward(model, params, episode, idx, LiteConfig(H=h))
    itemsize = ad.default_dtype().itemsize
    return MemRow(
        n, n if h is None else h, "full" if h is None else "lite",
        tape.tracked_count, tape.retained_scalars, tape.retained_scalars * itemsize,
    )


def memory_grid(model, params, n_values, h_values, way: int, input_shape, seed: int = 0) -> list[MemRow]:
    """LITE rows for every (N, H) with H <= N, plus one full-backprop row per N."""
    rows = []
    for n in n_values:
        episode = support_episode(n, way, input_shape, seed)
        for h in h_values:
            if h <= n:
                rows.append(measure(model, params, episode, h, seed))
        rows.append(measure(model, params, episode, None))
    return rows


def write_memstat(rows: list[MemRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MEMSTAT_HEADER)
        for r in rows:
            w.writerow(r.as_list())


def linear_r2(x, y) -> float:
    """Coefficient of determination of the least-squares line y ~ a + b x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    total = np.sum((y - y.mean()) ** 2)
    return 1.0 - float(np.sum(resid**2) / total) if total > 0 else 1.0
