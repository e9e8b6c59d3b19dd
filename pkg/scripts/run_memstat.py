"""Retained activation scalars for LITE and full back-propagation over an (N, H) grid."""

import argparse

import numpy as np

from litemeta.memstat import linear_r2, memory_grid
from litemeta.models import FeatureExtractorSpec, SetEncoderSpec, build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="protonets", choices=["protonets", "simple_cnaps", "cnaps"])
    args = ap.parse_args()

    shape = (1, 8, 8)
    amortized = args.model != "protonets"
    ext = FeatureExtractorSpec("small_convnet", shape, (8, 8, 8), film=amortized, frozen=amortized)
    model = build_model(args.model, ext, SetEncoderSpec(shape, 8, 8) if amortized else None)
    params = model.init_params(np.random.default_rng(0))
    rows = memory_grid(model, params, (100, 200, 400, 800), (10, 20, 40, 80), 10, shape)

    print(f"{'N':>5} {'H':>5} {'mode':>5} {'retained':>10} {'MiB':>8}")
    for r in rows:
        print(f"{r.N:>5} {r.H:>5} {r.mode:>5} {r.retained_scalars:>10} {r.estimated_bytes / 2**20:>8.2f}")
    full = [(r.N, r.retained_scalars) for r in rows if r.mode == "full"]
    print("full-backprop R2 in N: %.5f" % linear_r2(*zip(*full)))


if __name__ == "__main__":
    main()
