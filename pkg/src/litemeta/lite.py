"""LITE episodic training: forward the whole support set, back-propagate a subset.

A *support pass* is the object a model uses to push its support set through
per-example networks and to form support aggregates (means, class sums,
second moments).  Three passes exist:

``FullPass``
    every support row is tracked; aggregates are ordinary weighted sums.
``LitePass``
    H sampled rows are tracked in one batch, the complement is evaluated
    with gradients disabled in chunks, and each aggregate is assembled with
    :func:`straight_through_scaled` so that its value equals the full-support
    value while its gradient comes from the H rows only, scaled by N/H.

Sub-sampled tasks reuse ``FullPass`` on a reduced episode.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, Tape, Tensor
from .episodes import Episode, EpisodeSampler, split_query_batches
from .params import ParamStore, make_optimizer

log = logging.getLogger(__name__)


SAMPLING_MODES = ("without_replacement", "with_replacement", "stratified")


@dataclass
class LiteConfig:
    H: int = 8
    query_batch: int = 40
    sampling_mode: str = "without_replacement"  # or "with_replacement", "stratified"
    scale_mode: str = "support_path"  # or "none"
    aggregate_scale: str = "global"  # or "per_class"
    complement_batch: int = 64
    resample_per_query_batch: bool = True
    stage_subsets: str = "independent"  # or "shared"
    H_fraction: float = 0.0

    def __post_init__(self):
        if self.query_batch < 1:
            raise ValueError("query_batch must be >= 1")
        if self.H < 0:
            raise ValueError("H must be >= 0")
        if self.complement_batch < 1:
            raise ValueError("complement_batch must be >= 1")
        checks = {
            "sampling_mode": SAMPLING_MODES,
            "scale_mode": ("support_path", "none"),
            "aggregate_scale": ("global", "per_class"),
            "stage_subsets": ("shared", "independent"),
        }
        for key, allowed in checks.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")

    def resolve_h(self, n: int) -> int:
        """Subset size for a support set of ``n``; clipped to ``n``."""
        h = max(1, round(self.H_fraction * n)) if self.H_fraction > 0 else self.H
        return min(h, n)


@dataclass
class TrainLoopConfig:
    iterations: int = 10000
    lr: float = 1e-3
    accumulate_tasks: int = 16
    optimizer: str = "adam"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.accumulate_tasks < 1:
            raise ValueError("accumulate_tasks must be >= 1")


TRAIN_MODES = ("lite", "full", "subsampled")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, task_seed: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (task seed {task_seed})")
        self.iteration = iteration
        self.task_seed = task_seed


def class_allocation(labels: np.ndarray, h: int, rng: np.random.Generator) -> np.ndarray:
    """Per-class subset sizes summing to ``h``: an even split, remainder to random classes.

    Every class gets at least one row and at most its own size.
    """
    counts = np.bincount(labels)
    way = len(counts)
    if h < way:
        raise ValueError(f"stratified H={h} cannot cover {way} classes")
    if h > counts.sum():
        raise ValueError(f"cannot draw H={h} distinct indices from N={counts.sum()}")
    alloc = np.minimum(counts, h // way)
    while alloc.sum() < h:
        room = np.flatnonzero(alloc < counts)
        need = h - alloc.sum()
        pick = rng.choice(room, size=min(need, len(room)), replace=False)
        alloc[pick] += 1
    return alloc


def sample_backprop_indices(
    n: int, h: int, mode: str, rng: np.random.Generator, labels: Optional[np.ndarray] = None
) -> np.ndarray:
    """H support indices to back-propagate.

    ``without_replacement``: a uniform subset; ``with_replacement``: i.i.d.
    uniform draws; ``stratified``: a uniform subset inside each class, sized
    by :func:`class_allocation` (needs ``labels``).
    """
    if mode == "without_replacement":
        if h > n:
            raise ValueError(f"cannot draw H={h} distinct indices from N={n}")
        return np.sort(rng.choice(n, size=h, replace=False))
    if mode == "with_replacement":
        return np.sort(rng.integers(0, n, size=h))
    if mode == "stratified":
        if labels is None:
            raise ValueError("stratified sampling needs support labels")
        labels = np.asarray(labels)
        alloc = class_allocation(labels, h, rng)
        picks = [rng.choice(np.flatnonzero(labels == c), size=a, replace=False) for c, a in enumerate(alloc)]
        return np.sort(np.concatenate(picks))
    raise ValueError(f"unknown sampling mode {mode!r}")


def subsample_support(episode: Episode, h: int, rng: np.random.Generator) -> Episode:
    """Reduced task of ``h`` support examples keeping at least one per class."""
    if h < episode.way:
        raise ValueError(f"sub-sampled task of {h} examples cannot cover {episode.way} classes")
    if h > episode.n_support:
        raise ValueError(f"sub-sampled task of {h} examples exceeds N={episode.n_support}")
    y = episode.support_y
    keep = [rng.choice(np.flatnonzero(y == c)) for c in range(episode.way)]
    rest = np.setdiff1d(np.arange(len(y)), keep)
    keep = np.sort(np.concatenate([keep, rng.choice(rest, size=h - episode.way, replace=False)]))
    return Episode(
        episode.support_x[keep],
        y[keep],
        episode.query_x,
        episode.query_y,
        episode.way,
        episode.task_id,
        episode.rng_seed,
    )


# ---------------------------------------------------------------------------
# support passes


@dataclass
class Rows:
    """Per-example outputs: values for all N rows plus the tracked subset."""

    full: np.ndarray
    tracked: Optional[Tensor]
    idx: np.ndarray
    owner: "FullPass" = field(repr=False)

    def then(self, fn: Callable[[Tensor], Tensor]) -> "Rows":
        """Apply a row-wise function to both the tracked rows and all values."""
        return self.owner._then(self, fn)


class FullPass:
    def __init__(self, x: np.ndarray, labels: np.ndarray, way: int):
        self.x = x
        self.labels = np.asarray(labels)
        self.way = way
        self.n = len(self.labels)

    def map(self, fn: Callable[[np.ndarray], Tensor]) -> Rows:
        out = fn(self.x)
        return Rows(out.data, out if out.tracked else None, np.arange(self.n), self)

    def _then(self, rows: Rows, fn) -> Rows:
        out = fn(rows.tracked if rows.tracked is not None else Tensor(rows.full))
        return Rows(out.data, out if out.tracked else None, rows.idx, self)

    def aggregate(self, rows: Rows, weights: np.ndarray) -> Tensor:
        """``weights @ rows`` over the support axis; (G, N) x (N, ...) -> (G, ...)."""
        tail = rows.full.shape[1:]
        w = Tensor(weights)
        if rows.tracked is None:
            flat = Tensor(rows.full.reshape(self.n, -1))
            return Tensor((w.data @ flat.data).reshape((len(weights),) + tail))
        flat = ad.reshape(rows.tracked, (self.n, -1))
        return ad.reshape(w @ flat, (len(weights),) + tail)


class LitePass(FullPass):
    """Support pass that back-propagates only ``h`` sampled rows.

    With ``indices`` given, every stage uses them; otherwise rows are drawn
    from ``rng`` (once per pass when ``stage_subsets == "shared"``, once per
    ``map`` call when ``"independent"``).
    """

    def __init__(self, x, labels, way, h: int, cfg: LiteConfig, rng=None, indices=None):
        super().__init__(x, labels, way)
        self.h = h if indices is None else len(indices)
        self.cfg = cfg
        self.rng = rng
        self._fixed = None if indices is None else np.asarray(indices)

    def _draw(self) -> np.ndarray:
        if self._fixed is not None:
            return self._fixed
        idx = sample_backprop_indices(self.n, self.h, self.cfg.sampling_mode, self.rng, self.labels)
        if self.cfg.stage_subsets == "shared":
            self._fixed = idx
        return idx

    def _no_grad_rows(self, fn, rows_idx: np.ndarray, out: Optional[np.ndarray]) -> np.ndarray:
        step = self.cfg.complement_batch
        with ad.with_grad_disabled():
            for start in range(0, len(rows_idx), step):
                chunk = rows_idx[start : start + step]
                vals = fn(self.x[chunk]).data
                if out is None:
                    out = np.empty((self.n,) + vals.shape[1:], dtype=vals.dtype)
                out[chunk] = vals
        return out

    def map(self, fn) -> Rows:
        idx = self._draw()
        if self.h == 0:
            return Rows(self._no_grad_rows(fn, np.arange(self.n), None), None, idx, self)
        tracked = fn(self.x[idx])
        # values for every row come from the no-grad pass, so the forward result
        # does not depend on which rows were tracked (BLAS rounding varies with batch shape)
        full = self._no_grad_rows(fn, np.arange(self.n), None)
        return Rows(full, tracked if tracked.tracked else None, idx, self)

    def _then(self, rows: Rows, fn) -> Rows:
        with ad.with_grad_disabled():
            full = fn(Tensor(rows.full)).data
        tracked = fn(rows.tracked) if rows.tracked is not None else None
        return Rows(full, tracked, rows.idx, self)

    def aggregate(self, rows: Rows, weights: np.ndarray) -> Tensor:
        tail = rows.full.shape[1:]
        g = len(weights)
        value = Tensor((weights @ rows.full.reshape(self.n, -1)).reshape((g,) + tail))
        if rows.tracked is None:
            return value
        idx = rows.idx
        flat = ad.reshape(rows.tracked, (len(idx), -1))
        w_tracked = weights[:, idx]
        if self.cfg.sampling_mode == "stratified" and self.cfg.scale_mode != "none":
            # inverse inclusion probability k_c / h_c per tracked row
            k = np.bincount(self.labels, minlength=self.way)
            h = np.bincount(self.labels[idx], minlength=self.way)
            inv_pi = (k / np.maximum(h, 1))[self.labels[idx]]
            partial = ad.reshape(Tensor(w_tracked * inv_pi) @ flat, (g,) + tail)
            return ad.straight_through_scaled(value, partial, 1.0)
        partial = ad.reshape(Tensor(w_tracked) @ flat, (g,) + tail)
        return ad.straight_through_scaled(value, partial, self._scale(weights, idx, tail))

    def _scale(self, weights: np.ndarray, idx: np.ndarray, tail) -> np.ndarray | float:
        if self.cfg.scale_mode == "none":
            return 1.0
        if self.cfg.aggregate_scale == "global":
            return self.n / len(idx)
        # per aggregate row: (#support rows it uses) / (#tracked rows it uses)
        used = weights != 0
        hit = used[:, idx].sum(axis=1)
        scale = np.where(hit > 0, used.sum(axis=1) / np.maximum(hit, 1), 0.0)
        return scale.reshape((-1,) + (1,) * len(tail))


def make_support_pass(mode: str, episode: Episode, cfg: LiteConfig, rng, indices=None):
    if mode == "full":
        return FullPass(episode.support_x, episode.support_y, episode.way)
    if mode == "lite":
        h = cfg.resolve_h(episode.n_support)
        return LitePass(episode.support_x, episode.support_y, episode.way, h, cfg, rng, indices)
    raise ValueError(f"no support pass for mode {mode!r}")


def lite_support_forward(model, params: ParamStore, episode: Episode, indices, cfg: LiteConfig):
    """Adaptation state with ``indices`` tracked and the rest forwarded without grad."""
    sp = LitePass(episode.support_x, episode.support_y, episode.way, len(indices), cfg, indices=indices)
    return model.adapt(params, sp)


# ---------------------------------------------------------------------------
# one task


@dataclass
class TaskResult:
    loss: float
    accuracy: float
    tracked_count: int
    retained_scalars: int
    grads: GradMap


def task_step(
    model,
    params: ParamStore,
    episode: Episode,
    cfg: LiteConfig,
    mode: str = "lite",
    rng: Optional[np.random.Generator] = None,
    grads: Optional[GradMap] = None,
) -> TaskResult:
    """Forward/backward one task per query batch, accumulating into ``grads``.

    Each query batch contributes the gradient of its own mean loss; the
    reported loss is the query-size-weighted mean over batches.
    """
    if mode not in TRAIN_MODES:
        raise ValueError(f"unknown train mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(episode.rng_seed)
    if grads is None:
        grads = params.grad
    if mode == "subsampled":
        episode = subsample_support(episode, cfg.resolve_h(episode.n_support), rng)
        mode = "full"
    total = correct = 0.0
    indices = None
    with Tape() as tape:
        for qx, qy in split_query_batches(episode, cfg.query_batch):
            sp = make_support_pass(mode, episode, cfg, rng, indices)
            state = model.adapt(params, sp)
            logits = model.logits(params, state, qx)
            loss = ad.softmax_cross_entropy(logits, qy)
            if loss.tracked:
                ad.backward(loss, params, grads)
            if mode == "lite" and not cfg.resample_per_query_batch and indices is None:
                indices = sp._fixed
            total += loss.item() * len(qy)
            correct += float(np.sum(np.argmax(logits.data, axis=1) == qy))
    m = episode.n_query
    return TaskResult(total / m, correct / m, tape.tracked_count, tape.retained_scalars, grads)


def lite_task_step(model, params, episode, cfg: LiteConfig, rng=None, grads=None) -> TaskResult:
    return task_step(model, params, episode, cfg, "lite", rng, grads)


def task_gradient(model, params, episode, cfg: LiteConfig, mode: str, rng=None) -> GradMap:
    """Fresh gradient map for one task (no accumulation into the store)."""
    return task_step(model, params, episode, cfg, mode, rng, params.new_gradmap()).grads


# ---------------------------------------------------------------------------
# meta-training and evaluation


@dataclass
class LogRow:
    iteration: int
    task_seed: int
    loss: float
    query_acc: float
    tracked_count: int
    ms_elapsed: float


def _task_rng(task_seed: int) -> np.random.Generator:
    return np.random.default_rng([task_seed, 0x11E])


def meta_train(
    model,
    params: ParamStore,
    sampler: EpisodeSampler,
    loop: TrainLoopConfig,
    cfg: LiteConfig,
    mode: str = "lite",
    on_row: Optional[Callable[[LogRow], None]] = None,
) -> list[LogRow]:
    """Sample a task, accumulate its gradient, step every ``accumulate_tasks`` tasks.

    Gradients are summed over the accumulated tasks.  With ``loop.workers``
    > 1 the tasks of one accumulation group run in threads with private
    gradient maps that are merged in task order.
    """
    opt = make_optimizer(loop.optimizer, loop.lr)
    params.zero_grad()
    rows: list[LogRow] = []
    start = time.perf_counter()
    pool = ThreadPoolExecutor(loop.workers) if loop.workers > 1 else None

    def run(it: int):
        seed = sampler.task_seed(it)
        episode = sampler.from_seed(seed, task_id=it)
        private = params.new_gradmap() if pool else params.grad
        res = task_step(model, params, episode, cfg, mode, _task_rng(seed), private)
        return it, seed, res

    try:
        it = 0
        while it < loop.iterations:
            group = range(it, min(it + loop.accumulate_tasks, loop.iterations))
            results = list(pool.map(run, group)) if pool else [run(i) for i in group]
            for i, seed, res in results:
                if not math.isfinite(res.loss):
                    raise NonFiniteLossError(i, seed, res.loss)
                if pool:
                    params.grad.merge(res.grads)
                row = LogRow(i, seed, res.loss, res.accuracy, res.tracked_count,
                             (time.perf_counter() - start) * 1e3)
                rows.append(row)
                if on_row:
                    on_row(row)
            opt.step(params, params.grad)
            params.zero_grad()
            it = group.stop
            log.debug("step at iteration %d, loss %.4f", it, rows[-1].loss)
    finally:
        if pool:
            pool.shutdown()
    return rows


def adapt_and_predict(model, params: ParamStore, episode: Episode) -> tuple[np.ndarray, float]:
    """Single no-grad forward: query class probabilities and top-1 accuracy."""
    with ad.with_grad_disabled():
        sp = FullPass(episode.support_x, episode.support_y, episode.way)
        state = model.adapt(params, sp)
        logits = model.logits(params, state, episode.query_x).data
    probs = ad.softmax(logits)
    acc = float(np.mean(np.argmax(logits, axis=1) == episode.query_y))
    return probs, acc


@dataclass
class EvalSummary:
    accuracies: np.ndarray
    task_seeds: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        n = len(self.accuracies)
        if n < 2:
            return 0.0
        return float(1.96 * np.std(self.accuracies, ddof=1) / np.sqrt(n))


def evaluate(model, params: ParamStore, sampler: EpisodeSampler, episodes: int) -> EvalSummary:
    accs, seeds = [], []
    for i in range(episodes):
        seed = sampler.task_seed(i)
        _, acc = adapt_and_predict(model, params, sampler.from_seed(seed, task_id=i))
        accs.append(acc)
        seeds.append(seed)
    return EvalSummary(np.asarray(accs), seeds)
