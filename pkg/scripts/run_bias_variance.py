"""Bias / RMSE of LITE gradients vs sub-sampled tasks, printed as a table.

    python scripts/run_bias_variance.py --model simple_cnaps --out runs/bv
"""

import argparse
from pathlib import Path

from litemeta.gradcheck import GradExperimentConfig, emit_report, run_bias_variance_experiment, setup_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", default="simple_cnaps", choices=["protonets", "simple_cnaps", "cnaps"])
    ap.add_argument("--sampling-mode", default="stratified")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/bias_variance"))
    args = ap.parse_args()

    param = "extractor.conv0.weight" if args.model == "protonets" else "encoder.conv0.weight"
    cfg = GradExperimentConfig(model=args.model, param_name=param, sampling_mode=args.sampling_mode, seed=args.seed)
    setup = setup_experiment(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for arm in ("lite", "subsampled"):
        reports[arm] = run_bias_variance_experiment(cfg, arm, setup)
        emit_report(reports[arm], args.out / f"bias_variance_{arm}.csv")

    lite, sub = reports["lite"], reports["subsampled"]
    print(f"{'H':>4} {'runs':>5} {'lite bias':>11} {'lite rmse':>11} {'sub bias':>11} {'sub rmse':>11} {'lite bias/floor':>16}")
    for i, h in enumerate(lite.H):
        print(f"{h:>4} {lite.num_runs[i]:>5} {lite.bias_mse[i]:>11.3e} {lite.avg_rmse[i]:>11.3e} "
              f"{sub.bias_mse[i]:>11.3e} {sub.avg_rmse[i]:>11.3e} {lite.bias_mse[i] / lite.noise_floor(h):>16.2f}")


if __name__ == "__main__":
    main()
