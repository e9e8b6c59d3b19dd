"""Command-line entry point: train, eval, gradcheck, bias-variance, memstat.

Configuration is a flat ``key = value`` file (``#`` starts a comment) whose
values are overridden by ``--key value`` flags.  Every command echoes its
fully resolved configuration to ``<out>/config.txt`` and prints a one-line
JSON summary on stdout.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 non-finite training loss, 4 checkpoint does not match the model.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .episodes import (
    ClassBank,
    EpisodeSampler,
    EpisodeSamplerConfig,
    SyntheticSpec,
    generate_synthetic_class_bank,
    load_bank,
    read_checkpoint,
    write_checkpoint,
)
from .gradcheck import (
    GradExperimentConfig,
    check_model,
    check_primitives,
    emit_report,
    fd_models,
    run_bias_variance_experiment,
    setup_experiment,
)
from .lite import LiteConfig, NonFiniteLossError, TrainLoopConfig, evaluate, meta_train
from .memstat import memory_grid, write_memstat
from .models import FeatureExtractorSpec, SetEncoderSpec, build_model

log = logging.getLogger("litemeta")

EXIT_VERIFY, EXIT_CONFIG, EXIT_NONFINITE, EXIT_CHECKPOINT = 1, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


# ---------------------------------------------------------------------------
# configuration records


@dataclass
class CommonConfig:
    seed: int = 0
    out: str = "runs/out"
    workers: int = 1
    f32: bool = False


@dataclass
class ModelConfig(CommonConfig):
    model: str = "protonets"
    extractor: str = "mlp"
    extractor_widths: tuple = (64, 64, 64)
    encoder_width: int = 32
    embed_dim: int = 32
    generator_hidden: int = 32
    head_hidden: int = 32
    cov_eps: float = 1e-3
    # data: a synthetic bank unless data_file names an LTEN tensor file
    data_file: str = ""
    generator: str = "gaussian_clusters"
    input_shape: tuple = (16,)
    separation: float = 3.0
    noise: float = 0.3
    num_classes: int = 20
    per_class: int = 30
    data_seed: int = 1234
    test_classes: int = 0
    way: int = 5
    way_max: int = 0
    shot: int = 5
    shot_max: int = 0
    query: int = 5
    query_max: int = 0


@dataclass
class TrainConfig(ModelConfig):
    mode: str = "lite"
    H: int = 8
    H_fraction: float = 0.0
    query_batch: int = 40
    sampling_mode: str = "without_replacement"
    scale_mode: str = "support_path"
    aggregate_scale: str = "global"
    stage_subsets: str = "independent"
    complement_batch: int = 64
    resample_per_query_batch: bool = True
    iterations: int = 10000
    lr: float = 1e-3
    accumulate_tasks: int = 16
    optimizer: str = "adam"


@dataclass
class EvalConfig(ModelConfig):
    checkpoint: str = ""
    episodes: int = 600


@dataclass
class GradcheckConfig(CommonConfig):
    fd_step: float = 1e-5
    tolerance: float = 1e-4
    warmup: int = 1


@dataclass
class BiasVarianceConfig(CommonConfig):
    way: int = 10
    shot: int = 10
    query_per_class: int = 5
    model: str = "simple_cnaps"
    image_shape: tuple = (1, 8, 8)
    extractor_widths: tuple = (8, 8, 8)
    encoder_width: int = 8
    embed_dim: int = 8
    separation: float = 1.0
    noise: float = 0.5
    param_name: str = "encoder.conv0.weight"
    H_values: tuple = (10, 20, 30, 40, 50, 60, 70, 80, 90)
    total_examples_per_H: int = 1000
    sampling_mode: str = "stratified"
    stage_subsets: str = "independent"
    warmup_steps: int = 1
    lr: float = 1e-3


@dataclass
class MemstatConfig(CommonConfig):
    model: str = "protonets"
    extractor: str = "small_convnet"
    extractor_widths: tuple = (8, 8, 8)
    encoder_width: int = 8
    embed_dim: int = 8
    input_shape: tuple = (1, 8, 8)
    way: int = 10
    N_values: tuple = (100, 200, 400, 800)
    H_values: tuple = (10, 20, 40, 80)


COMMANDS = {
    "train": TrainConfig,
    "eval": EvalConfig,
    "gradcheck": GradcheckConfig,
    "bias-variance": BiasVarianceConfig,
    "memstat": MemstatConfig,
}


def _convert(key: str, kind, raw: str):
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
        return kind(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind.__name__}") from None


def _field_types(cls) -> dict[str, type]:
    names = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}
    return {f.name: names[f.type if isinstance(f.type, str) else f.type.__name__] for f in fields(cls)}


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(cls, file_values: dict[str, str], overrides: dict[str, str]):
    types = _field_types(cls)
    merged = {**file_values, **overrides}
    for key in merged:
        if key not in types:
            raise ConfigError(key, "unknown key")
    return cls(**{k: _convert(k, types[k], v) for k, v in merged.items()})


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def echo_config(cfg, out_dir: Path) -> None:
    lines = [f"{k} = {_format_value(v)}" for k, v in dataclasses.asdict(cfg).items()]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def _parse_overrides(cls, tokens: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs; a bare boolean flag means true."""
    types = _field_types(cls)
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "expected a --key flag")
        key, _, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in types:
            raise ConfigError(key, "unknown key")
        if not value:
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            if types[key] is bool and (nxt is None or nxt.startswith("--")):
                value = "true"
            elif nxt is None:
                raise ConfigError(key, "missing value")
            else:
                value = nxt
                i += 1
        out[key] = value
        i += 1
    return out


# ---------------------------------------------------------------------------
# builders


def _range(lo: int, hi: int) -> tuple[int, int]:
    return (lo, max(lo, hi))


def build_bank(cfg: ModelConfig) -> ClassBank:
    if cfg.data_file:
        return load_bank(cfg.data_file)
    spec = SyntheticSpec(cfg.generator, tuple(cfg.input_shape), cfg.separation, cfg.noise)
    return generate_synthetic_class_bank(spec, cfg.num_classes, cfg.per_class, np.random.default_rng(cfg.data_seed))


def split_bank(bank: ClassBank, test_classes: int, part: str) -> ClassBank:
    """Training classes first, the last ``test_classes`` held out for evaluation."""
    if test_classes <= 0:
        return bank
    if test_classes >= bank.num_classes:
        raise ConfigError("test_classes", f"must be below the {bank.num_classes} available classes")
    cut = bank.num_classes - test_classes
    sl = slice(0, cut) if part == "train" else slice(cut, None)
    x = bank.x[sl]
    return ClassBank(x, np.repeat(np.arange(len(x)), bank.per_class))


def build_sampler(cfg: ModelConfig, bank: ClassBank, seed: int) -> EpisodeSampler:
    scfg = EpisodeSamplerConfig(
        _range(cfg.way, cfg.way_max), _range(cfg.shot, cfg.shot_max), _range(cfg.query, cfg.query_max), seed
    )
    return EpisodeSampler(scfg, bank)


def build_model_from(cfg: ModelConfig, input_shape):
    amortized = cfg.model != "protonets"
    ext = FeatureExtractorSpec(
        cfg.extractor, tuple(input_shape), tuple(cfg.extractor_widths), film=amortized, frozen=amortized
    )
    if not amortized:
        return build_model(cfg.model, ext)
    enc = SetEncoderSpec(tuple(input_shape), cfg.encoder_width, cfg.embed_dim)
    extra = {"cov_eps": cfg.cov_eps} if cfg.model == "simple_cnaps" else {}
    if cfg.model == "cnaps":
        extra = {"head_hidden": cfg.head_hidden}
    return build_model(cfg.model, ext, enc, generator_hidden=cfg.generator_hidden, **extra)


def _fmt(x: float) -> str:
    return f"{x:.9e}"


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: TrainConfig, out: Path) -> dict:
    bank = split_bank(build_bank(cfg), cfg.test_classes, "train")
    sampler = build_sampler(cfg, bank, cfg.seed)
    model = build_model_from(cfg, bank.input_shape)
    params = model.init_params(np.random.default_rng(cfg.seed))
    lite_cfg = LiteConfig(
        H=cfg.H, query_batch=cfg.query_batch, sampling_mode=cfg.sampling_mode, scale_mode=cfg.scale_mode,
        aggregate_scale=cfg.aggregate_scale, complement_batch=cfg.complement_batch,
        resample_per_query_batch=cfg.resample_per_query_batch, stage_subsets=cfg.stage_subsets,
        H_fraction=cfg.H_fraction,
    )
    loop = TrainLoopConfig(cfg.iterations, cfg.lr, cfg.accumulate_tasks, cfg.optimizer, cfg.seed, cfg.workers)
    with open(out / "train_log.csv", "w", newline="") as flog, open(out / "timing.csv", "w", newline="") as ftime:
        wlog = csv.writer(flog, lineterminator="\n")
        wtime = csv.writer(ftime, lineterminator="\n")
        wlog.writerow(["iteration", "task_seed", "loss", "query_acc", "tracked_count"])
        wtime.writerow(["iteration", "ms_elapsed"])

        def on_row(r):
            wlog.writerow([r.iteration, r.task_seed, _fmt(r.loss), _fmt(r.query_acc), r.tracked_count])
            wtime.writerow([r.iteration, f"{r.ms_elapsed:.3f}"])

        rows = meta_train(model, params, sampler, loop, lite_cfg, cfg.mode, on_row)
    ckpt = out / "checkpoint.lten"
    write_checkpoint(ckpt, params.state())
    tail = rows[-min(len(rows), 50):]
    return {
        "iterations": len(rows),
        "final_loss": float(np.mean([r.loss for r in tail])) if tail else None,
        "final_query_acc": float(np.mean([r.query_acc for r in tail])) if tail else None,
        "checkpoint": str(ckpt),
    }


class CheckpointMismatch(ValueError):
    pass


def cmd_eval(cfg: EvalConfig, out: Path) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("checkpoint", "required for eval")
    bank = split_bank(build_bank(cfg), cfg.test_classes, "test")
    sampler = build_sampler(cfg, bank, cfg.seed)
    model = build_model_from(cfg, bank.input_shape)
    params = model.init_params(np.random.default_rng(cfg.seed))
    try:
        params.load(read_checkpoint(cfg.checkpoint))
    except (KeyError, ValueError) as e:
        raise CheckpointMismatch(str(e)) from e
    summary = evaluate(model, params, sampler, cfg.episodes)
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "task_seed", "accuracy"])
        for i, (seed, acc) in enumerate(zip(summary.task_seeds, summary.accuracies)):
            w.writerow([i, seed, _fmt(acc)])
        w.writerow(["mean", "", _fmt(summary.mean)])
        w.writerow(["ci95", "", _fmt(summary.ci95)])
    return {"episodes": cfg.episodes, "mean_accuracy": summary.mean, "ci95": summary.ci95}


def cmd_gradcheck(cfg: GradcheckConfig, out: Path) -> dict:
    results = check_primitives(cfg.seed, cfg.fd_step)
    for model, params, episode in fd_models(cfg.seed, cfg.warmup):
        results += check_model(model, params, episode, cfg.fd_step, target=model.name)
    with open(out / "gradcheck.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["target", "param", "rel_error", "passed"])
        for r in results:
            w.writerow([r.target, r.param, _fmt(r.rel_err), int(r.passed(cfg.tolerance))])
    failing = [f"{r.target}:{r.param}" for r in results if not r.passed(cfg.tolerance)]
    return {
        "checked": len(results),
        "max_rel_error": max(r.rel_err for r in results),
        "failing": failing,
    }


def cmd_bias_variance(cfg: BiasVarianceConfig, out: Path) -> dict:
    keys = {f.name for f in fields(GradExperimentConfig)}
    exp = GradExperimentConfig(**{k: v for k, v in dataclasses.asdict(cfg).items() if k in keys})
    setup = setup_experiment(exp)
    summary = {}
    meta = [f"seed = {cfg.seed}", f"param_name = {cfg.param_name}", f"model = {cfg.model}"]
    for arm in ("lite", "subsampled"):
        report = run_bias_variance_experiment(exp, arm, setup, workers=cfg.workers)
        path = out / f"bias_variance_{arm}.csv"
        emit_report(report, path)
        meta.append(f"{arm}.sampling_mode = {report.sampling_mode}")
        summary[arm] = str(path)
    (out / "bias_variance_meta.txt").write_text("\n".join(meta) + "\n")
    return summary


def cmd_memstat(cfg: MemstatConfig, out: Path) -> dict:
    mcfg = ModelConfig(
        model=cfg.model, extractor=cfg.extractor, extractor_widths=cfg.extractor_widths,
        encoder_width=cfg.encoder_width, embed_dim=cfg.embed_dim,
    )
    model = build_model_from(mcfg, cfg.input_shape)
    params = model.init_params(np.random.default_rng(cfg.seed))
    rows = memory_grid(model, params, cfg.N_values, cfg.H_values, cfg.way, cfg.input_shape, cfg.seed)
    write_memstat(rows, out / "memstat.csv")
    return {"rows": len(rows), "path": str(out / "memstat.csv")}


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bias-variance": cmd_bias_variance,
    "memstat": cmd_memstat,
}


# ---------------------------------------------------------------------------
# entry point


def _setup_logging() -> None:
    level = os.environ.get("LITE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=str))


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="litemeta", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="flat key = value file")
    args, rest = parser.parse_known_args(argv)
    cls = COMMANDS[args.command]
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(cls, file_values, _parse_overrides(cls, rest))
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        _emit({"command": args.command, "status": "config_error", "key": e.key})
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, out)
    previous = ad.default_dtype()
    ad.set_default_dtype(np.float32 if cfg.f32 else np.float64)
    start = time.perf_counter()
    try:
        summary = HANDLERS[args.command](cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        _emit({"command": args.command, "status": "config_error", "key": e.key})
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        _emit({"command": args.command, "status": "non_finite_loss", "iteration": e.iteration,
               "task_seed": e.task_seed})
        return EXIT_NONFINITE
    except CheckpointMismatch as e:
        print(f"error: checkpoint does not match model: {e}", file=sys.stderr)
        _emit({"command": args.command, "status": "checkpoint_mismatch"})
        return EXIT_CHECKPOINT
    except ValueError as e:
        # invalid combinations caught by the library configs
        print(f"error: {e}", file=sys.stderr)
        _emit({"command": args.command, "status": "config_error"})
        return EXIT_CONFIG
    finally:
        ad.set_default_dtype(previous)
    summary = {"command": args.command, "status": "ok", "seconds": round(time.perf_counter() - start, 3), **summary}
    failing = summary.get("failing")
    if failing:
        summary["status"] = "failed"
        print("failing parameters: " + ", ".join(failing), file=sys.stderr)
    _emit(summary)
    return EXIT_VERIFY if failing else 0


if __name__ == "__main__":
    sys.exit(main())
