import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from litemeta import autodiff as ad
from litemeta import lite
from litemeta.autodiff import Tape
from litemeta.episodes import Episode, EpisodeSampler, EpisodeSamplerConfig, SyntheticSpec, generate_synthetic_class_bank
from litemeta.lite import (
    EvalSummary,
    FullPass,
    LiteConfig,
    LitePass,
    NonFiniteLossError,
    TrainLoopConfig,
    adapt_and_predict,
    class_allocation,
    meta_train,
    sample_backprop_indices,
    subsample_support,
    task_gradient,
    task_step,
)
from litemeta.models import FeatureExtractorSpec, SetEncoderSpec, build_model


def make_model(kind, image=False):
    shape = (1, 5, 5) if image else (6,)
    ext = FeatureExtractorSpec("small_convnet" if image else "mlp", shape, (4, 3), film=kind != "protonets")
    enc = None if kind == "protonets" else SetEncoderSpec(shape, width=5, out_dim=4)
    kw = {} if kind == "protonets" else {"generator_hidden": 6}
    model = build_model(kind, ext, enc, **kw)
    return model, model.init_params(np.random.default_rng(3))


def make_episode(way=3, shot=4, query=3, shape=(6,), seed=0):
    gen = "patterned_images" if len(shape) == 3 else "gaussian_clusters"
    bank = generate_synthetic_class_bank(SyntheticSpec(gen, shape, 1.5, 0.5), way, shot + query, np.random.default_rng(seed))
    return EpisodeSampler(EpisodeSamplerConfig((way, way), (shot, shot), (query, query), seed), bank).episode(0)


def loss_and_grads(model, params, episode, sp):
    grads = params.new_gradmap()
    with Tape():
        state = model.adapt(params, sp)
        logits = model.logits(params, state, episode.query_x)
        loss = ad.softmax_cross_entropy(logits, episode.query_y)
        ad.backward(loss, params, grads)
    return loss.item(), logits.data, grads


MODELS = ["protonets", "simple_cnaps", "cnaps"]


# --- index sampling


def test_single_index_is_uniform():
    rng = np.random.default_rng(0)
    n, draws = 10, 100_000
    counts = np.bincount([sample_backprop_indices(n, 1, "without_replacement", rng)[0] for _ in range(draws)], minlength=n)
    chi2 = np.sum((counts - draws / n) ** 2 / (draws / n))
    assert chi2 < 27.88  # 0.999 quantile, 9 degrees of freedom


def test_with_replacement_duplicates_follow_birthday_rate():
    rng = np.random.default_rng(1)
    trials = 4000
    dup = sum(len(np.unique(sample_backprop_indices(365, 23, "with_replacement", rng))) < 23 for _ in range(trials))
    p = 1 - np.prod(1 - np.arange(23) / 365)
    assert abs(dup / trials - p) < 4 * np.sqrt(p * (1 - p) / trials)


@given(st.integers(1, 40), st.integers(0, 2**31))
def test_full_subset_is_all_indices(n, seed):
    idx = sample_backprop_indices(n, n, "without_replacement", np.random.default_rng(seed))
    assert np.array_equal(idx, np.arange(n))


def test_subset_larger_than_support_is_rejected():
    with pytest.raises(ValueError):
        sample_backprop_indices(5, 6, "without_replacement", np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_backprop_indices(5, 2, "bogus", np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_backprop_indices(5, 2, "stratified", np.random.default_rng(0))


@given(st.lists(st.integers(1, 6), min_size=2, max_size=6), st.integers(0, 40), st.integers(0, 2**31))
def test_class_allocation_properties(sizes, h, seed):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    rng = np.random.default_rng(seed)
    if h < len(sizes) or h > len(labels):
        with pytest.raises(ValueError):
            class_allocation(labels, h, rng)
        return
    alloc = class_allocation(labels, h, rng)
    assert alloc.sum() == h
    assert np.all(alloc >= 1) and np.all(alloc <= sizes)
    idx = sample_backprop_indices(len(labels), h, "stratified", np.random.default_rng(seed), labels)
    assert len(np.unique(idx)) == h


def test_class_allocation_splits_evenly():
    labels = np.repeat(np.arange(4), 10)
    alloc = class_allocation(labels, 10, np.random.default_rng(0))
    assert sorted(alloc) == [2, 2, 3, 3]


@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_subsampled_task_covers_every_class(way, shot, seed):
    ep = make_episode(way, shot, 1, seed=seed % 1000)
    h = np.random.default_rng(seed).integers(way, ep.n_support + 1)
    sub = subsample_support(ep, int(h), np.random.default_rng(seed))
    assert sub.n_support == h and np.all(sub.shots() >= 1)
    assert np.array_equal(sub.query_x, ep.query_x)


def test_lite_config_validation():
    with pytest.raises(ValueError):
        LiteConfig(query_batch=0)
    with pytest.raises(ValueError):
        LiteConfig(sampling_mode="sometimes")
    assert LiteConfig(H_fraction=0.2).resolve_h(100) == 20
    assert LiteConfig(H=50).resolve_h(30) == 30


# --- estimator values and gradients


@pytest.mark.parametrize("kind", MODELS)
@pytest.mark.parametrize("mode", ["without_replacement", "stratified"])
def test_forward_value_does_not_depend_on_subset(kind, mode):
    model, params = make_model(kind)
    ep = make_episode()
    full_loss, full_logits, _ = loss_and_grads(model, params, ep, FullPass(ep.support_x, ep.support_y, ep.way))
    for seed in range(3):
        cfg = LiteConfig(H=4, sampling_mode=mode)
        sp = LitePass(ep.support_x, ep.support_y, ep.way, 4, cfg, np.random.default_rng(seed))
        loss, logits, _ = loss_and_grads(model, params, ep, sp)
        assert abs(loss - full_loss) < 1e-12
        np.testing.assert_allclose(logits, full_logits, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", MODELS)
@pytest.mark.parametrize("image", [False, True])
def test_full_subset_reproduces_full_gradient(kind, image):
    model, params = make_model(kind, image)
    ep = make_episode(shape=(1, 5, 5) if image else (6,))
    full = task_gradient(model, params, ep, LiteConfig(), "full")
    g = task_gradient(model, params, ep, LiteConfig(H=ep.n_support), "lite", np.random.default_rng(0))
    for name in full:
        np.testing.assert_allclose(g[name], full[name], rtol=0, atol=1e-9)


def test_linear_protonets_single_tracked_example_matches_hand_gradient(rng):
    ext = FeatureExtractorSpec("mlp", (3,), (2,))
    model = build_model("protonets", ext)
    params = model.init_params(np.random.default_rng(0))
    params.set_value("extractor.layer0.bias", rng.normal(size=2))
    xs = rng.normal(size=(4, 3))
    ys = np.array([0, 0, 1, 1])
    xq = rng.normal(size=(3, 3))
    yq = np.array([0, 1, 1])
    ep = Episode(xs, ys, xq, yq, 2)
    W = params["extractor.layer0.weight"].data
    b = params["extractor.layer0.bias"].data

    fs, fq = xs @ W + b, xq @ W + b
    protos = np.stack([fs[ys == c].mean(0) for c in range(2)])
    diff = fq[:, None, :] - protos[None]  # (M, C, d)
    logits = -(diff**2).sum(-1)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    g = (p - np.eye(2)[yq]) / len(yq)  # dL/dlogits
    d_q = -2 * np.einsum("mc,mcd->md", g, diff)
    d_p = 2 * np.einsum("mc,mcd->cd", g, diff)

    for j in range(4):
        c = ys[j]
        # straight-through scale N/H = 4 on the only tracked row, class weight 1/2
        expect_W = xq.T @ d_q + 4 * 0.5 * np.outer(xs[j], d_p[c])
        expect_b = d_q.sum(0) + 4 * 0.5 * d_p[c]
        sp = LitePass(xs, ys, 2, 1, LiteConfig(H=1), indices=np.array([j]))
        _, _, grads = loss_and_grads(model, params, ep, sp)
        np.testing.assert_allclose(grads["extractor.layer0.weight"], expect_W, rtol=0, atol=1e-10)
        np.testing.assert_allclose(grads["extractor.layer0.bias"], expect_b, rtol=0, atol=1e-10)


class ScriptedPass(LitePass):
    """Each map() call takes the next subset from a fixed script."""

    def __init__(self, ep, cfg, subsets):
        super().__init__(ep.support_x, ep.support_y, ep.way, len(subsets[0]), cfg)
        self._script = list(subsets)

    def _draw(self):
        return np.asarray(self._script.pop(0))


def enumerated_mean(model, params, ep, cfg, subsets, stages):
    total = None
    count = 0
    for combo in itertools.product(subsets, repeat=stages):
        _, _, g = loss_and_grads(model, params, ep, ScriptedPass(ep, cfg, combo))
        if total is None:
            total = g.copy()
        else:
            total.merge(g)
        count += 1
    return {k: v / count for k, v in total.items()}


@pytest.mark.parametrize("kind,stages", [("protonets", 1), ("simple_cnaps", 2), ("cnaps", 2)])
def test_uniform_subsets_are_unbiased_by_enumeration(kind, stages):
    model, params = make_model(kind)
    ep = make_episode(way=2, shot=2, query=2)
    subsets = [list(s) for s in itertools.combinations(range(4), 2)]
    mean = enumerated_mean(model, params, ep, LiteConfig(H=2), subsets, stages)
    _, _, full = loss_and_grads(model, params, ep, FullPass(ep.support_x, ep.support_y, ep.way))
    for name in full:
        np.testing.assert_allclose(mean[name], full[name], rtol=0, atol=1e-10)


@pytest.mark.parametrize("kind,stages", [("protonets", 1), ("simple_cnaps", 2)])
def test_stratified_subsets_are_unbiased_by_enumeration(kind, stages):
    model, params = make_model(kind)
    ep = make_episode(way=2, shot=3, query=2)
    by_class = [np.flatnonzero(ep.support_y == c) for c in range(2)]
    # H = 2 gives one row per class; all pairs are equally likely
    subsets = [sorted([a, b]) for a in by_class[0] for b in by_class[1]]
    cfg = LiteConfig(H=2, sampling_mode="stratified")
    mean = enumerated_mean(model, params, ep, cfg, subsets, stages)
    _, _, full = loss_and_grads(model, params, ep, FullPass(ep.support_x, ep.support_y, ep.way))
    for name in full:
        np.testing.assert_allclose(mean[name], full[name], rtol=0, atol=1e-10)


def test_zero_subset_keeps_only_query_path():
    model, params = make_model("protonets")
    ep = make_episode()
    sp = LitePass(ep.support_x, ep.support_y, ep.way, 0, LiteConfig(H=0), np.random.default_rng(0))
    with Tape() as tape:
        state = model.adapt(params, sp)
    assert not state.tracked and tape.tracked_count == 0
    g = task_gradient(model, params, ep, LiteConfig(H=0), "lite", np.random.default_rng(0))
    assert any(np.any(v != 0) for v in g.values())


def test_lite_retains_less_than_full():
    model, params = make_model("simple_cnaps", image=True)
    ep = make_episode(shot=8, shape=(1, 5, 5))
    full = task_step(model, params, ep, LiteConfig(), "full", grads=params.new_gradmap())
    part = task_step(model, params, ep, LiteConfig(H=4), "lite", np.random.default_rng(0), params.new_gradmap())
    assert part.retained_scalars < full.retained_scalars / 3


def test_one_backward_per_query_batch(monkeypatch):
    calls = []
    real = ad.backward
    monkeypatch.setattr(ad, "backward", lambda *a, **k: calls.append(1) or real(*a, **k))
    model, params = make_model("protonets")
    ep = make_episode(way=2, shot=3, query=5)  # M = 10
    task_step(model, params, ep, LiteConfig(H=2, query_batch=4), "lite", np.random.default_rng(0), params.new_gradmap())
    assert len(calls) == 3


def test_query_batches_sum_their_mean_loss_gradients():
    model, params = make_model("protonets")
    ep = make_episode(way=2, shot=3, query=5)
    split = task_gradient(model, params, ep, LiteConfig(query_batch=4), "full")
    expect = params.new_gradmap()
    for lo, hi in [(0, 4), (4, 8), (8, 10)]:
        part = Episode(ep.support_x, ep.support_y, ep.query_x[lo:hi], ep.query_y[lo:hi], ep.way)
        expect.merge(task_gradient(model, params, part, LiteConfig(query_batch=40), "full"))
    for name in expect:
        np.testing.assert_allclose(split[name], expect[name], rtol=0, atol=1e-12)


def test_fixed_subset_across_query_batches(monkeypatch):
    drawn = []
    real = LitePass._draw
    monkeypatch.setattr(LitePass, "_draw", lambda self: drawn.append(real(self)) or drawn[-1])
    model, params = make_model("protonets")
    ep = make_episode(way=2, shot=4, query=5)
    cfg = LiteConfig(H=3, query_batch=4, resample_per_query_batch=False, stage_subsets="shared")
    task_step(model, params, ep, cfg, "lite", np.random.default_rng(0), params.new_gradmap())
    assert len(drawn) == 3 and all(np.array_equal(d, drawn[0]) for d in drawn)


# --- training and evaluation


def small_sampler(seed=0):
    bank = generate_synthetic_class_bank(SyntheticSpec("gaussian_clusters", (6,), 2.0, 0.3), 6, 10, np.random.default_rng(0))
    return EpisodeSampler(EpisodeSamplerConfig((3, 3), (3, 3), (2, 2), seed), bank)


def test_zero_learning_rate_leaves_parameters_unchanged():
    model, params = make_model("protonets")
    before = params.snapshot()
    meta_train(model, params, small_sampler(), TrainLoopConfig(4, 0.0, 2), LiteConfig(H=3))
    for name, v in params.state().items():
        assert np.array_equal(v, before[name])


def test_remainder_tasks_still_step(monkeypatch):
    steps = []

    class Counting:
        def step(self, params, grads):
            steps.append({k: v.copy() for k, v in grads.items()})

    monkeypatch.setattr(lite, "make_optimizer", lambda kind, lr: Counting())
    model, params = make_model("protonets")
    rows = meta_train(model, params, small_sampler(), TrainLoopConfig(5, 1e-3, 2), LiteConfig(H=3))
    assert len(rows) == 5 and len(steps) == 3
    assert [r.iteration for r in rows] == list(range(5))


def test_threaded_training_matches_serial():
    model, p1 = make_model("protonets")
    _, p2 = make_model("protonets")
    r1 = meta_train(model, p1, small_sampler(), TrainLoopConfig(6, 1e-2, 3), LiteConfig(H=3))
    r2 = meta_train(model, p2, small_sampler(), TrainLoopConfig(6, 1e-2, 3, workers=3), LiteConfig(H=3))
    assert [r.loss for r in r1] == [r.loss for r in r2]
    for name, v in p1.state().items():
        np.testing.assert_allclose(p2[name].data, v, rtol=0, atol=1e-14)


def test_training_reduces_loss():
    model, params = make_model("protonets")
    rows = meta_train(model, params, small_sampler(), TrainLoopConfig(120, 1e-2, 4), LiteConfig(H=3))
    assert np.mean([r.loss for r in rows[-20:]]) < np.mean([r.loss for r in rows[:20]])


def test_non_finite_loss_is_reported(monkeypatch):
    real = lite.task_step

    def poisoned(*a, **k):
        res = real(*a, **k)
        res.loss = float("nan")
        return res

    monkeypatch.setattr(lite, "task_step", poisoned)
    model, params = make_model("protonets")
    sampler = small_sampler()
    with pytest.raises(NonFiniteLossError) as err:
        meta_train(model, params, sampler, TrainLoopConfig(3, 1e-3, 1), LiteConfig(H=3))
    assert err.value.iteration == 0 and err.value.task_seed == sampler.task_seed(0)


def test_prediction_records_nothing():
    model, params = make_model("simple_cnaps")
    ep = make_episode()
    with Tape() as tape:
        probs, acc = adapt_and_predict(model, params, ep)
    assert tape.tracked_count == 0 and tape.retained_scalars == 0
    np.testing.assert_allclose(probs.sum(1), 1.0)
    assert 0.0 <= acc <= 1.0


def test_confidence_interval():
    acc = np.array([0.2, 0.4, 0.6, 0.8])
    s = EvalSummary(acc, [0, 1, 2, 3])
    assert s.mean == pytest.approx(0.5)
    assert s.ci95 == pytest.approx(1.96 * np.std(acc, ddof=1) / 2)
    assert EvalSummary(np.array([1.0]), [0]).ci95 == 0.0


def test_evaluate_is_deterministic():
    model, params = make_model("protonets")
    a = lite.evaluate(model, params, small_sampler(5), 10)
    b = lite.evaluate(model, params, small_sampler(5), 10)
    assert np.array_equal(a.accuracies, b.accuracies) and a.task_seeds == b.task_seeds
