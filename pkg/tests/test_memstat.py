import numpy as np
import pytest

from litemeta.memstat import linear_r2, measure, memory_grid, support_episode
from litemeta.models import FeatureExtractorSpec, SetEncoderSpec, build_model


def conv_protonets():
    model = build_model("protonets", FeatureExtractorSpec("small_convnet", (1, 6, 6), (4, 4)))
    return model, model.init_params(np.random.default_rng(0))


def test_lite_memory_ignores_support_size():
    model, params = conv_protonets()
    rows = memory_grid(model, params, (8, 16, 32), (4,), 4, (1, 6, 6))
    lite = [r.retained_scalars for r in rows if r.mode == "lite"]
    full = [r.retained_scalars for r in rows if r.mode == "full"]
    assert len(set(lite)) == 1
    assert full[1] == 2 * full[0] and full[2] == 4 * full[0]


def test_lite_memory_is_proportional_to_subset():
    model, params = conv_protonets()
    ep = support_episode(32, 4, (1, 6, 6), 0)
    vals = [measure(model, params, ep, h).retained_scalars for h in (4, 8, 16)]
    assert vals[1] == 2 * vals[0] and vals[2] == 4 * vals[0]


def test_amortized_lite_memory_grows_with_subset():
    spec = FeatureExtractorSpec("small_convnet", (1, 6, 6), (4, 4), film=True, frozen=True)
    model = build_model("simple_cnaps", spec, SetEncoderSpec((1, 6, 6), 4, 4))
    params = model.init_params(np.random.default_rng(0))
    ep = support_episode(24, 4, (1, 6, 6), 0)
    small, big, full = (measure(model, params, ep, h) for h in (4, 8, None))
    assert small.retained_scalars < big.retained_scalars < full.retained_scalars
    assert full.estimated_bytes == 8 * full.retained_scalars


def test_support_episode_is_balanced():
    ep = support_episode(12, 3, (5,), 1)
    assert np.array_equal(ep.shots(), [4, 4, 4])
    with pytest.raises(ValueError):
        support_episode(10, 3, (5,), 1)


def test_linear_r2():
    x = np.arange(5.0)
    assert linear_r2(x, 3 * x + 1) == pytest.approx(1.0)
    assert linear_r2(x, [1, 1, 1, 1, 1]) == 1.0
    assert linear_r2(x, [0, 1, 0, 1, 0]) < 0.2
