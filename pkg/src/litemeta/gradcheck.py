"""Gradient verification: finite differences, exact gradients, and the
LITE-versus-sub-sampled-task bias / RMSE experiment."""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .episodes import (
    Episode,
    EpisodeSampler,
    EpisodeSamplerConfig,
    SyntheticSpec,
    generate_synthetic_class_bank,
)
from .lite import LiteConfig, task_gradient
from .models import FeatureExtractorSpec, SetEncoderSpec, build_model
from .params import ParamStore, make_optimizer


def finite_difference_gradient(
    loss_fn: Callable[[], float], params: ParamStore, name: str, step: float = 1e-5
) -> np.ndarray:
    """Central differences (L(p+h) - L(p-h)) / 2h, one element at a time."""
    p = params[name]
    original = p.data
    work = original.copy()
    grad = np.zeros_like(original)
    flat_work = work.reshape(-1)
    try:
        p.data = work
        for i in range(flat_work.size):
            v = flat_work[i]
            flat_work[i] = v + step
            hi = float(loss_fn())
            flat_work[i] = v - step
            lo = float(loss_fn())
            flat_work[i] = v
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite loss while differencing {name}[{i}]")
            grad.reshape(-1)[i] = (hi - lo) / (2 * step)
    finally:
        p.data = original
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| scaled by the larger of the two max-magnitudes.

    ``floor`` bounds the denominator from below so that gradients which are
    zero up to round-off (e.g. a bias shared by every logit) compare in
    absolute terms instead of blowing up.
    """
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max() / scale)


def exact_gradient(model, params: ParamStore, episode: Episode, name: str) -> np.ndarray:
    """Full-support gradient of the mean query loss (one query batch)."""
    cfg = LiteConfig(query_batch=max(1, episode.n_query))
    return task_gradient(model, params, episode, cfg, "full")[name]


def task_loss(model, params: ParamStore, episode: Episode) -> float:
    """Mean query cross-entropy with gradients off; the differencing target."""
    from .lite import FullPass

    with ad.with_grad_disabled():
        sp = FullPass(episode.support_x, episode.support_y, episode.way)
        logits = model.logits(params, model.adapt(params, sp), episode.query_x)
        return ad.softmax_cross_entropy(logits, episode.query_y).item()


def mean_lite_gradient(
    model, params: ParamStore, episode: Episode, name: str, h: int, draws: int,
    rng: np.random.Generator, sampling_mode: str = "without_replacement", **lite_kw,
) -> np.ndarray:
    cfg = LiteConfig(H=h, query_batch=max(1, episode.n_query), sampling_mode=sampling_mode, **lite_kw)
    total = np.zeros_like(params[name].data)
    for _ in range(draws):
        total += task_gradient(model, params, episode, cfg, "lite", rng)[name]
    return total / draws


# ---------------------------------------------------------------------------
# bias / RMSE experiment


@dataclass
class GradExperimentConfig:
    way: int = 10
    shot: int = 10
    query_per_class: int = 5
    model: str = "simple_cnaps"
    image_shape: tuple[int, int, int] = (1, 8, 8)
    extractor_widths: tuple[int, ...] = (8, 8, 8)
    encoder_width: int = 8
    embed_dim: int = 8
    separation: float = 1.0
    noise: float = 0.5
    param_name: str = "encoder.conv0.weight"
    H_values: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80, 90)
    total_examples_per_H: int = 1000
    sampling_mode: str = "stratified"
    stage_subsets: str = "independent"
    warmup_steps: int = 1
    lr: float = 1e-3
    seed: int = 0


@dataclass
class GradReport:
    arm: str
    sampling_mode: str
    H: list[int] = field(default_factory=list)
    num_runs: list[int] = field(default_factory=list)
    bias_mse: list[float] = field(default_factory=list)
    avg_rmse: list[float] = field(default_factory=list)

    def row(self, h: int) -> dict:
        i = self.H.index(h)
        return {"H": h, "num_runs": self.num_runs[i], "bias_mse": self.bias_mse[i], "avg_rmse": self.avg_rmse[i]}

    def noise_floor(self, h: int) -> float:
        r = self.row(h)
        return r["avg_rmse"] ** 2 / r["num_runs"]


@dataclass
class ExperimentSetup:
    model: object
    params: ParamStore
    episode: Episode
    exact: np.ndarray


def setup_experiment(cfg: GradExperimentConfig) -> ExperimentSetup:
    """Identically initialized network and one fixed task, shared by every run.

    ``warmup_steps`` full-gradient optimizer steps on that task are taken
    first, so that gradients are measured after a training iteration rather
    than at the identity-FiLM initialization (where the set encoder receives
    no gradient at all).
    """
    rng = np.random.default_rng(cfg.seed)
    spec = SyntheticSpec("patterned_images", cfg.image_shape, separation=cfg.separation, noise=cfg.noise)
    bank = generate_synthetic_class_bank(spec, cfg.way, cfg.shot + cfg.query_per_class, rng)
    sampler = EpisodeSampler(
        EpisodeSamplerConfig((cfg.way, cfg.way), (cfg.shot, cfg.shot), (cfg.query_per_class,) * 2, cfg.seed),
        bank,
    )
    episode = sampler.episode(0)
    amortized = cfg.model != "protonets"
    extractor = FeatureExtractorSpec(
        "small_convnet", cfg.image_shape, cfg.extractor_widths, film=amortized, frozen=amortized
    )
    encoder = SetEncoderSpec(cfg.image_shape, cfg.encoder_width, cfg.embed_dim) if amortized else None
    model = build_model(cfg.model, extractor, encoder)
    params = model.init_params(np.random.default_rng(cfg.seed + 1))
    if cfg.param_name not in params.names():
        raise KeyError(f"no trainable parameter {cfg.param_name!r}")
    opt = make_optimizer("adam", cfg.lr)
    for _ in range(cfg.warmup_steps):
        g = task_gradient(model, params, episode, LiteConfig(query_batch=episode.n_query), "full")
        opt.step(params, g)
    return ExperimentSetup(model, params, episode, exact_gradient(model, params, episode, cfg.param_name))


def _run_seed(base: int, arm: str, h: int, run: int) -> np.random.Generator:
    return np.random.default_rng([base, 0 if arm == "lite" else 1, h, run])


def run_bias_variance_experiment(
    cfg: GradExperimentConfig, arm: str, setup: Optional[ExperimentSetup] = None, workers: int = 1
) -> GradReport:
    """For each H, floor(total / H) one-iteration gradient measurements.

    bias_mse: MSE between the mean estimate and the exact gradient.
    avg_rmse: mean over runs of each estimate's RMSE to the exact gradient.
    The sub-sampled arm differentiates the loss of a reduced task (at least
    one example per class) with no N/H correction.
    """
    if arm not in ("lite", "subsampled"):
        raise ValueError(f"unknown arm {arm!r}")
    setup = setup or setup_experiment(cfg)
    model, params, episode, exact = setup.model, setup.params, setup.episode, setup.exact
    mode = "lite" if arm == "lite" else "subsampled"
    report = GradReport(arm, cfg.sampling_mode if arm == "lite" else "stratified_without_replacement")
    for h in cfg.H_values:
        if h > episode.n_support:
            raise ValueError(f"H={h} exceeds N={episode.n_support}")
        if arm == "subsampled" and h < episode.way:
            raise ValueError(f"H={h} cannot keep one example of each of {episode.way} classes")
        runs = cfg.total_examples_per_H // h
        lite_cfg = LiteConfig(
            H=h, query_batch=episode.n_query, sampling_mode=cfg.sampling_mode, stage_subsets=cfg.stage_subsets
        )

        def one(r: int, h=h, lite_cfg=lite_cfg) -> np.ndarray:
            rng = _run_seed(cfg.seed, arm, h, r)
            return task_gradient(model, params, episode, lite_cfg, mode, rng)[cfg.param_name]

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                estimates = np.stack(list(pool.map(one, range(runs))))
        else:
            estimates = np.stack([one(r) for r in range(runs)])
        err = estimates - exact
        # two-pass: mean first, then deviations
        mean_est = estimates.mean(axis=0)
        report.H.append(h)
        report.num_runs.append(runs)
        report.bias_mse.append(float(np.mean((mean_est - exact) ** 2)))
        report.avg_rmse.append(float(np.mean(np.sqrt(np.mean(err.reshape(runs, -1) ** 2, axis=1)))))
    return report


REPORT_HEADER = ["H", "num_runs", "bias_mse", "avg_rmse"]


def emit_report(report: GradReport, path) -> None:
    vals = report.bias_mse + report.avg_rmse
    if not all(np.isfinite(vals)):
        raise ValueError("report contains non-finite statistics")
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for h, n, b, r in zip(report.H, report.num_runs, report.bias_mse, report.avg_rmse):
            w.writerow([h, n, f"{b:.9e}", f"{r:.9e}"])


def read_report(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"H": int(r["H"]), "num_runs": int(r["num_runs"]),
             "bias_mse": float(r["bias_mse"]), "avg_rmse": float(r["avg_rmse"])}
            for r in csv.DictReader(f)
        ]


# ---------------------------------------------------------------------------
# finite-difference sweep over primitives and model graphs


@dataclass
class FdResult:
    target: str
    param: str
    rel_err: float

    def passed(self, tol: float) -> bool:
        return self.rel_err < tol


def _primitive_cases(rng: np.random.Generator) -> dict[str, Callable[[ParamStore], Tensor]]:
    """Scalar losses exercising each primitive on parameters ``a``, ``b``."""
    w = rng.normal(size=(4, 3))  # fixed projection to make outputs scalar
    labels = np.array([0, 2, 1, 2])
    return {
        "matmul": lambda p: ad.sum_over_axis(ad.matmul(p["a"], p["b"]) * w),
        "conv2d_3x3": lambda p: ad.sum_over_axis(ad.conv2d_3x3(p["img"], p["kernel"]) * p["img_w"]),
        "add": lambda p: ad.sum_over_axis((p["a"] + p["bias"]) * w),
        "mul_elementwise": lambda p: ad.sum_over_axis(p["a"] * p["a2"] * w),
        "relu": lambda p: ad.sum_over_axis(ad.relu(p["a"]) * w),
        "neg": lambda p: ad.sum_over_axis(ad.neg(p["a"]) * w),
        "mean_over_axis": lambda p: ad.sum_over_axis(ad.mean_over_axis(p["a"], axis=0) * w[0]),
        "sum_over_axis": lambda p: ad.sum_over_axis(ad.sum_over_axis(p["a"], axis=1) * w[:, 0]),
        "global_avg_pool": lambda p: ad.sum_over_axis(ad.global_avg_pool(p["img"]) * w[:2, :2]),
        "softmax_cross_entropy": lambda p: ad.softmax_cross_entropy(p["a"], labels),
        "euclidean_sq_dist": lambda p: ad.sum_over_axis(ad.euclidean_sq_dist(p["a"], p["a2"][:2]) * w[:, :2]),
        "concat": lambda p: ad.sum_over_axis(ad.concat([p["a"], p["a2"]], axis=0) * np.vstack([w, w])),
        "transpose": lambda p: ad.sum_over_axis(ad.transpose(p["a"]) * w.T),
        "reshape": lambda p: ad.sum_over_axis(ad.reshape(p["a"], (3, 4)) * w.reshape(3, 4)),
        "index": lambda p: ad.sum_over_axis(p["a"][np.array([0, 0, 3])] * w[:3]),
        "inverse": lambda p: ad.sum_over_axis(ad.inverse(p["spd"]) * w[:3]),
        "straight_through_scaled": lambda p: ad.sum_over_axis(
            ad.straight_through_scaled(Tensor(p["a"].data), p["a"] * p["a2"], 2.5) * w
        ),
    }


def _fd_surrogates(rng: np.random.Generator) -> dict[str, Callable[[ParamStore], Tensor]]:
    """Losses to difference where the primitive's gradient is defined, not derived.

    The straight-through value ignores its tracked input, so finite
    differences are taken of ``scale * tracked`` whose gradient it must equal.
    """
    w = rng.normal(size=(4, 3))
    return {"straight_through_scaled": lambda p: ad.sum_over_axis((p["a"] * p["a2"]) * 2.5 * w)}


def primitive_params(rng: np.random.Generator) -> ParamStore:
    from .params import InitSpec

    store = ParamStore()
    spec = InitSpec("normal", 1.0)
    store.add("a", rng.normal(size=(4, 3)), spec)
    store.add("a2", rng.normal(size=(4, 3)), spec)
    store.add("b", rng.normal(size=(3, 3)), spec)
    store.add("bias", rng.normal(size=(3,)), spec)
    store.add("img", rng.normal(size=(2, 2, 5, 4)), spec)
    store.add("kernel", rng.normal(size=(3, 2, 3, 3)), spec)
    store.add("img_w", rng.normal(size=(2, 3, 5, 4)), spec)
    m = rng.normal(size=(3, 3))
    store.add("spd", m @ m.T + 3 * np.eye(3), spec)
    return store


def check_primitives(seed: int = 0, step: float = 1e-5) -> list[FdResult]:
    rng = np.random.default_rng(seed)
    params = primitive_params(rng)
    cases = _primitive_cases(np.random.default_rng(seed + 1))
    surrogates = _fd_surrogates(np.random.default_rng(seed + 1))
    out = []
    for op, fn in cases.items():
        with ad.Tape():
            loss = fn(params)
            grads = ad.backward(loss, params, params.new_gradmap())

        def value(fn=surrogates.get(op, fn)):
            with ad.with_grad_disabled():
                return fn(params).item()

        for name in params.names():
            fd = finite_difference_gradient(value, params, name, step)
            if np.abs(fd).max() == 0 and np.abs(grads[name]).max() == 0:
                continue
            out.append(FdResult(op, name, relative_error(grads[name], fd)))
    return out


def check_model(model, params: ParamStore, episode: Episode, step: float = 1e-5, target: str = "") -> list[FdResult]:
    """Backward vs central differences for every trainable parameter."""
    target = target or model.name
    cfg = LiteConfig(query_batch=episode.n_query)
    grads = task_gradient(model, params, episode, cfg, "full")
    results = []
    for name in params.names():
        fd = finite_difference_gradient(lambda: task_loss(model, params, episode), params, name, step)
        results.append(FdResult(target, name, relative_error(grads[name], fd)))
    return results


def small_fd_task(seed: int = 0, way: int = 3, shot: int = 3, query: int = 2, image=(1, 5, 5)):
    rng = np.random.default_rng(seed)
    bank = generate_synthetic_class_bank(SyntheticSpec("patterned_images", image, 1.0, 0.5), way, shot + query, rng)
    cfg = EpisodeSamplerConfig((way, way), (shot, shot), (query, query), seed)
    return EpisodeSampler(cfg, bank).episode(0)


def fd_models(seed: int = 0, warmup: int = 1, jitter: float = 0.05):
    """Tiny instances of each model family (well under 1e4 parameters).

    Amortized models get ``warmup`` Adam steps so the FiLM generators leave
    their identity initialization and every parameter carries gradient.
    Every parameter is then jittered so the check runs at a generic point:
    zero-initialized biases otherwise leave pre-activations exactly on a
    ReLU kink wherever a receptive field is all zeros.
    """
    episode = small_fd_task(seed)
    image = episode.support_x.shape[1:]
    out = []
    for kind in ("protonets", "simple_cnaps", "cnaps"):
        amortized = kind != "protonets"
        ext = FeatureExtractorSpec("small_convnet", image, (4, 4), film=amortized, frozen=amortized)
        enc = SetEncoderSpec(image, 4, 4) if amortized else None
        model = build_model(kind, ext, enc)
        params = model.init_params(np.random.default_rng(seed + 7))
        opt = make_optimizer("adam", 1e-2)
        for _ in range(warmup if amortized else 0):
            opt.step(params, task_gradient(model, params, episode, LiteConfig(query_batch=episode.n_query), "full"))
        jr = np.random.default_rng(seed + 11)
        for name in params.names(trainable_only=False):
            v = params[name].data
            params.set_value(name, v + jitter * jr.normal(size=v.shape))
        out.append((model, params, episode))
    return out
