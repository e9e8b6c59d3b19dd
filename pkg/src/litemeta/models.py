"""Feature extractors, set encoder, FiLM / head generators and classifier heads.

Three meta-learners are assembled from these parts:

* ``ProtoNets``: trainable extractor, prototypes, Euclidean head.
* ``SimpleCnaps``: frozen FiLM-modulated extractor, set encoder + FiLM
  generator, Mahalanobis head over class-wise Gaussian statistics.
* ``Cnaps``: as SimpleCnaps, but a second generator emits a linear head from
  class-pooled features.

Models never iterate over the support set themselves; they hand per-example
functions to a support pass (``litemeta.lite``) which decides which rows are
back-propagated and how aggregates are formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import InitSpec, ParamStore


class FilmArityError(ValueError):
    pass


class MissingClassError(ValueError):
    pass


class CovarianceError(ValueError):
    """Regularized covariance is not positive definite."""


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str  # "mlp" | "small_convnet"
    input_shape: tuple[int, ...]
    widths: tuple[int, ...] = (64, 64, 64)
    film: bool = False
    frozen: bool = False

    def __post_init__(self):
        if self.kind not in ("mlp", "small_convnet"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if not self.widths or min(self.widths) <= 0:
            raise ValueError("extractor widths must be positive")
        expected = 1 if self.kind == "mlp" else 3
        if len(self.input_shape) != expected:
            raise ValueError(f"{self.kind} expects a {expected}-d input shape, got {self.input_shape}")

    @property
    def film_sites(self) -> tuple[int, ...]:
        return self.widths if self.film else ()

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


@dataclass
class FilmParams:
    gammas: list[Tensor]
    betas: list[Tensor]

    def __len__(self) -> int:
        return len(self.gammas)


@dataclass
class ClassStats:
    means: Tensor  # (C, d)
    covs: Tensor  # (C, d, d)
    task_cov: Tensor  # (d, d)
    counts: np.ndarray  # (C,)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _add_linear(store, rng, name, n_in, n_out, trainable=True, std=None):
    if std is None:
        store.add(f"{name}.weight", _he(rng, (n_in, n_out), n_in), InitSpec("he_normal"), trainable)
    else:
        store.add(f"{name}.weight", rng.normal(0.0, std, (n_in, n_out)), InitSpec("normal", std), trainable)
    store.add(f"{name}.bias", np.zeros(n_out), InitSpec("zeros"), trainable)


def _add_conv(store, rng, name, c_in, c_out, trainable=True):
    store.add(f"{name}.weight", _he(rng, (c_out, c_in, 3, 3), c_in * 9), InitSpec("he_normal"), trainable)
    store.add(f"{name}.bias", np.zeros(c_out), InitSpec("zeros"), trainable)


def linear(params: ParamStore, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def conv(params: ParamStore, name: str, x: Tensor) -> Tensor:
    b = params[f"{name}.bias"]
    return ad.conv2d_3x3(x, params[f"{name}.weight"]) + ad.reshape(b, (1, b.shape[0], 1, 1))


def film_modulate(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """h -> gamma_ch * h + beta_ch over the channel axis (axis 1)."""
    shape = (1, gamma.shape[0]) + (1,) * (h.ndim - 2)
    return h * ad.reshape(gamma, shape) + ad.reshape(beta, shape)


# ---------------------------------------------------------------------------
# feature extractor


def init_extractor(store: ParamStore, spec: FeatureExtractorSpec, rng, prefix="extractor") -> None:
    trainable = not spec.frozen
    fan = spec.input_shape[0]
    for i, w in enumerate(spec.widths):
        if spec.kind == "mlp":
            _add_linear(store, rng, f"{prefix}.layer{i}", fan, w, trainable)
        else:
            _add_conv(store, rng, f"{prefix}.conv{i}", fan, w, trainable)
        fan = w


def extract_features(
    spec: FeatureExtractorSpec,
    params: ParamStore,
    film: Optional[FilmParams],
    batch,
    prefix: str = "extractor",
) -> Tensor:
    """Embed a batch; FiLM modulation (if any) follows every layer, before ReLU.

    The final MLP layer has no ReLU; the conv net ends in global average
    pooling.
    """
    sites = spec.film_sites
    if (film is None) != (not sites) or (film is not None and len(film) != len(sites)):
        got = 0 if film is None else len(film)
        raise FilmArityError(f"extractor has {len(sites)} FiLM sites, got {got} FiLM layers")
    if film is not None:
        for i, (g, ch) in enumerate(zip(film.gammas, sites)):
            if g.shape != (ch,):
                raise FilmArityError(f"FiLM site {i}: expected {ch} channels, got {g.shape}")
    h = ad.as_tensor(batch)
    last = len(spec.widths) - 1
    for i in range(len(spec.widths)):
        if spec.kind == "mlp":
            h = linear(params, f"{prefix}.layer{i}", h)
        else:
            h = conv(params, f"{prefix}.conv{i}", h)
        if film is not None:
            h = film_modulate(h, film.gammas[i], film.betas[i])
        if spec.kind == "small_convnet" or i < last:
            h = ad.relu(h)
    if spec.kind == "small_convnet":
        h = ad.global_avg_pool(h)
    return h


# ---------------------------------------------------------------------------
# set encoder and generators


@dataclass(frozen=True)
class SetEncoderSpec:
    input_shape: tuple[int, ...]
    width: int = 32
    out_dim: int = 32

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3


def init_set_encoder(store: ParamStore, spec: SetEncoderSpec, rng, prefix="encoder") -> None:
    if spec.is_image:
        _add_conv(store, rng, f"{prefix}.conv0", spec.input_shape[0], spec.width)
        _add_conv(store, rng, f"{prefix}.conv1", spec.width, spec.width)
    else:
        _add_linear(store, rng, f"{prefix}.layer0", spec.input_shape[0], spec.width)
    _add_linear(store, rng, f"{prefix}.out", spec.width, spec.out_dim)


def encode_examples(spec: SetEncoderSpec, params: ParamStore, batch, prefix="encoder") -> Tensor:
    """Per-example set-encoder embeddings, (B, out_dim)."""
    h = ad.as_tensor(batch)
    if spec.is_image:
        h = ad.relu(conv(params, f"{prefix}.conv0", h))
        h = ad.relu(conv(params, f"{prefix}.conv1", h))
        h = ad.global_avg_pool(h)
    else:
        h = ad.relu(linear(params, f"{prefix}.layer0", h))
    return linear(params, f"{prefix}.out", h)


def set_encode(spec: SetEncoderSpec, params: ParamStore, support_images) -> Tensor:
    """Permutation-invariant task embedding: mean of per-example embeddings."""
    if np.shape(support_images)[0] < 1:
        raise ValueError("set_encode: empty support set")
    return ad.mean_over_axis(encode_examples(spec, params, support_images), axis=0)


@dataclass(frozen=True)
class FilmGeneratorSpec:
    embed_dim: int
    sites: tuple[int, ...]
    hidden: int = 32


def init_film_generator(store: ParamStore, spec: FilmGeneratorSpec, rng, prefix="film") -> None:
    # zero final weights and unit gamma bias: identity modulation at step 0
    for i, ch in enumerate(spec.sites):
        _add_linear(store, rng, f"{prefix}.site{i}.hidden", spec.embed_dim, spec.hidden)
        store.add(f"{prefix}.site{i}.out.weight", np.zeros((spec.hidden, 2 * ch)), InitSpec("zeros"))
        bias = np.concatenate([np.ones(ch), np.zeros(ch)])
        store.add(f"{prefix}.site{i}.out.bias", bias, InitSpec("ones", 1.0))


def generate_film(spec: FilmGeneratorSpec, params: ParamStore, task_embedding: Tensor, prefix="film") -> FilmParams:
    z = ad.as_tensor(task_embedding)
    if z.shape != (spec.embed_dim,):
        raise ValueError(f"generate_film: embedding shape {z.shape}, expected ({spec.embed_dim},)")
    z = ad.reshape(z, (1, spec.embed_dim))
    gammas, betas = [], []
    for i, ch in enumerate(spec.sites):
        h = ad.relu(linear(params, f"{prefix}.site{i}.hidden", z))
        out = ad.reshape(linear(params, f"{prefix}.site{i}.out", h), (2 * ch,))
        gammas.append(out[:ch])
        betas.append(out[ch:])
    return FilmParams(gammas, betas)


def init_head_generator(store: ParamStore, feat_dim: int, hidden: int, rng, prefix="head") -> None:
    _add_linear(store, rng, f"{prefix}.hidden", feat_dim, hidden)
    _add_linear(store, rng, f"{prefix}.out", hidden, feat_dim + 1, std=1.0 / np.sqrt(hidden))


def generate_linear_head(params: ParamStore, class_pooled_features: Tensor, prefix="head"):
    """Shared per-class network: pooled feature (d,) -> (weight row (d,), bias)."""
    pooled = ad.as_tensor(class_pooled_features)
    if pooled.ndim != 2 or pooled.shape[0] < 2:
        raise ValueError(f"generate_linear_head: need (C>=2, d) pooled features, got {pooled.shape}")
    d = pooled.shape[1]
    out = linear(params, f"{prefix}.out", ad.relu(linear(params, f"{prefix}.hidden", pooled)))
    return out[:, :d], out[:, d]


# ---------------------------------------------------------------------------
# heads


def class_mean_weights(labels, way: int) -> np.ndarray:
    """(C, N) matrix whose row c averages the examples labelled c."""
    labels = np.asarray(labels)
    onehot = (labels[None, :] == np.arange(way)[:, None]).astype(ad.default_dtype())
    counts = onehot.sum(axis=1)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise MissingClassError(f"classes {missing} have no support examples")
    return onehot / counts[:, None]


def compute_prototypes(features, labels, way: int) -> Tensor:
    return class_mean_weights(labels, way) @ ad.as_tensor(features)


def euclidean_logits(prototypes, query_features) -> Tensor:
    return -ad.euclidean_sq_dist(query_features, prototypes)


def regularized_covariances(stats: ClassStats, eps: float = 1e-3) -> Tensor:
    """lambda_c * Sigma_c + (1 - lambda_c) * Sigma_task + eps * I, lambda_c = k_c / (k_c + 1)."""
    k = np.asarray(stats.counts, dtype=ad.default_dtype())
    lam = (k / (k + 1.0))[:, None, None]
    d = stats.means.shape[1]
    reg = stats.covs * lam + ad.reshape(stats.task_cov, (1, d, d)) * (1.0 - lam)
    return reg + eps * np.eye(d)


def mahalanobis_sq_dist(means, covs, query_features) -> Tensor:
    """(M, C) squared Mahalanobis distances of queries to each class Gaussian."""
    means, covs, q = ad.as_tensor(means), ad.as_tensor(covs), ad.as_tensor(query_features)
    try:
        np.linalg.cholesky(covs.data)
    except np.linalg.LinAlgError:
        raise CovarianceError("regularized covariance is not positive definite; raise eps") from None
    c, d = means.shape
    m = q.shape[0]
    diff = ad.reshape(q, (1, m, d)) - ad.reshape(means, (c, 1, d))  # (C, M, d)
    proj = diff @ ad.inverse(covs)  # covs symmetric
    return ad.transpose(ad.sum_over_axis(proj * diff, axis=-1))


def mahalanobis_logits(stats: ClassStats, query_features, eps: float = 1e-3) -> Tensor:
    return -mahalanobis_sq_dist(stats.means, regularized_covariances(stats, eps), query_features)


# ---------------------------------------------------------------------------
# meta-learners


@dataclass
class ProtoNets:
    extractor: FeatureExtractorSpec
    family: str = field(default="metric", init=False)
    name: str = field(default="protonets", init=False)

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        store = ParamStore()
        init_extractor(store, self.extractor, rng)
        return store

    def adapt(self, params: ParamStore, sp):
        feats = sp.map(lambda x: extract_features(self.extractor, params, None, x))
        return sp.aggregate(feats, class_mean_weights(sp.labels, sp.way))

    def logits(self, params: ParamStore, prototypes, query_x) -> Tensor:
        q = extract_features(self.extractor, params, None, query_x)
        return euclidean_logits(prototypes, q)


@dataclass
class _Amortized:
    extractor: FeatureExtractorSpec
    encoder: SetEncoderSpec
    generator_hidden: int = 32

    def __post_init__(self):
        if not self.extractor.film_sites:
            raise ValueError("amortized models need a FiLM-enabled extractor")
        self.film_spec = FilmGeneratorSpec(self.encoder.out_dim, self.extractor.film_sites, self.generator_hidden)

    def _init_common(self, rng) -> ParamStore:
        store = ParamStore()
        init_extractor(store, self.extractor, rng)
        init_set_encoder(store, self.encoder, rng)
        init_film_generator(store, self.film_spec, rng)
        return store

    def _task_features(self, params, sp):
        emb = sp.map(lambda x: encode_examples(self.encoder, params, x))
        z = sp.aggregate(emb, np.full((1, sp.n), 1.0 / sp.n, dtype=ad.default_dtype()))
        film = generate_film(self.film_spec, params, ad.reshape(z, (self.encoder.out_dim,)))
        feats = sp.map(lambda x: extract_features(self.extractor, params, film, x))
        return film, feats


@dataclass
class SimpleCnaps(_Amortized):
    cov_eps: float = 1e-3
    family: str = field(default="amortized", init=False)
    name: str = field(default="simple_cnaps", init=False)

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        return self._init_common(rng)

    def adapt(self, params: ParamStore, sp):
        film, feats = self._task_features(params, sp)
        d = self.extractor.out_dim
        outer = feats.then(lambda f: ad.reshape(ad.reshape(f, (-1, d, 1)) * ad.reshape(f, (-1, 1, d)), (-1, d * d)))
        w = np.vstack([class_mean_weights(sp.labels, sp.way), np.full((1, sp.n), 1.0 / sp.n)])
        first = sp.aggregate(feats, w)  # (C+1, d)
        second = ad.reshape(sp.aggregate(outer, w), (sp.way + 1, d, d))
        mu = ad.reshape(first, (sp.way + 1, d, 1))
        cov = second - mu @ ad.transpose(mu, (0, 2, 1))
        stats = ClassStats(
            means=first[: sp.way],
            covs=cov[: sp.way],
            task_cov=cov[sp.way],
            counts=np.bincount(sp.labels, minlength=sp.way),
        )
        return film, stats

    def logits(self, params: ParamStore, state, query_x) -> Tensor:
        film, stats = state
        q = extract_features(self.extractor, params, film, query_x)
        return mahalanobis_logits(stats, q, self.cov_eps)


@dataclass
class Cnaps(_Amortized):
    head_hidden: int = 32
    family: str = field(default="amortized", init=False)
    name: str = field(default="cnaps", init=False)

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        store = self._init_common(rng)
        init_head_generator(store, self.extractor.out_dim, self.head_hidden, rng)
        return store

    def adapt(self, params: ParamStore, sp):
        film, feats = self._task_features(params, sp)
        pooled = sp.aggregate(feats, class_mean_weights(sp.labels, sp.way))
        return film, generate_linear_head(params, pooled)

    def logits(self, params: ParamStore, state, query_x) -> Tensor:
        film, (w, b) = state
        q = extract_features(self.extractor, params, film, query_x)
        return q @ ad.transpose(w) + b


def build_model(kind: str, extractor: FeatureExtractorSpec, encoder: SetEncoderSpec | None = None, **kw):
    if kind == "protonets":
        return ProtoNets(extractor)
    if encoder is None:
        raise ValueError(f"{kind} needs a set-encoder spec")
    if kind == "simple_cnaps":
        return SimpleCnaps(extractor, encoder, **kw)
    if kind == "cnaps":
        return Cnaps(extractor, encoder, **kw)
    raise ValueError(f"unknown model {kind!r}")
