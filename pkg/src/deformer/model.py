"""The order-agnostic distribution estimating Transformer.

Each feature enters the network twice: once as its identity alone (the
``z`` row, from which that feature's distribution is predicted) and once as
identity plus observed value (the ``u`` row, context for later features).
Rows are interleaved ``z_1, u_1, z_2, u_2, ...`` so a plain lower-triangular
attention mask gives ``z_k`` access to everything before it but not to its
own value.

Features are referred to by integer index ``0..D-1``; in pixel mode the
index of pixel ``(r, c)`` is ``r * width + c``.
"""
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from deformer import numerics as nx
from deformer.transformer import TransformerConfig, encoder_stack, init_linear, init_stack_params, linear

LOG_SIGMA_MIN = math.log(1e-4)
LOG_SIGMA_MAX = math.log(1e4)
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

HEAD_KINDS = ("bernoulli", "categorical", "gmm")


@dataclass(frozen=True)
class PixelIdentity:
    row: int
    col: int


@dataclass(frozen=True)
class ColumnIdentity:
    index: int


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "bernoulli"
    num_classes: int = 2
    mixtures: int = 150

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.kind == "categorical" and self.num_classes < 2:
            raise ValueError("categorical head needs at least 2 classes")
        if self.kind == "gmm" and self.mixtures < 1:
            raise ValueError("mixture head needs at least 1 component")

    @property
    def output_width(self):
        if self.kind == "bernoulli":
            return 1
        if self.kind == "categorical":
            return self.num_classes
        return 3 * self.mixtures

    @property
    def discrete(self):
        return self.kind != "gmm"


@dataclass(frozen=True)
class ModelConfig:
    num_features: int
    identity: str = "column"           # "pixel" or "column"
    image_shape: tuple = (0, 0)        # (height, width) in pixel mode
    embedding_dim: int = 20
    mlp_hidden: tuple = (128, 256)     # the third MLP layer has width d_model
    head: HeadConfig = field(default_factory=HeadConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    precision: str = "float64"

    def __post_init__(self):
        if self.num_features < 1:
            raise ValueError("a model needs at least one feature")
        if self.identity == "pixel":
            h, w = self.image_shape
            if h * w != self.num_features:
                raise ValueError(f"image shape {self.image_shape} does not hold {self.num_features} pixels")
        elif self.identity != "column":
            raise ValueError(f"unknown identity encoding {self.identity!r}")

    @property
    def identity_width(self):
        return 2 if self.identity == "pixel" else self.embedding_dim

    @property
    def value_width(self):
        if self.head.kind == "categorical" and self.head.num_classes > 2:
            return self.head.num_classes
        return 1


@dataclass
class OrderedSample:
    """A data vector viewed through one permutation of its features."""

    ordering: np.ndarray
    values: np.ndarray  # in permuted order: values[k] belongs to feature ordering[k]

    def __post_init__(self):
        self.ordering = np.asarray(self.ordering, dtype=np.int64)
        self.values = np.asarray(self.values)
        d = len(self.ordering)
        if d < 1 or not np.array_equal(np.sort(self.ordering), np.arange(d)):
            raise ValueError("ordering must be a permutation of 0..D-1")
        if self.values.shape != (d,):
            raise ValueError(f"expected {d} values, got shape {self.values.shape}")

    @classmethod
    def from_vector(cls, x, ordering):
        x = np.asarray(x)
        return cls(ordering, x[np.asarray(ordering)])

    def pairs(self, config):
        return [(identity_of(int(f), config), v) for f, v in zip(self.ordering, self.values)]


@dataclass
class HeadOutput:
    """Predictive distribution(s); arrays carry any leading batch/feature axes."""

    kind: str
    prob: np.ndarray = None    # bernoulli: P(v = 1)
    probs: np.ndarray = None   # categorical: (..., C)
    pi: np.ndarray = None      # gmm: (..., J)
    mu: np.ndarray = None
    sigma: np.ndarray = None

    def __getitem__(self, idx):
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return HeadOutput(self.kind, pick(self.prob), pick(self.probs), pick(self.pi), pick(self.mu),
                          pick(self.sigma))


def identity_of(feature, config):
    if not 0 <= feature < config.num_features:
        raise ValueError(f"feature index {feature} outside 0..{config.num_features - 1}")
    if config.identity == "pixel":
        return PixelIdentity(*divmod(feature, config.image_shape[1]))
    return ColumnIdentity(feature)


def feature_index(identity, config):
    if isinstance(identity, PixelIdentity):
        if config.identity != "pixel":
            raise ValueError("pixel identity given to a column-identity model")
        h, w = config.image_shape
        if not (0 <= identity.row < h and 0 <= identity.col < w):
            raise ValueError(f"pixel {identity} outside {h}x{w} image")
        return identity.row * w + identity.col
    if isinstance(identity, ColumnIdentity):
        if config.identity != "column":
            raise ValueError("column identity given to a pixel-identity model")
        if not 0 <= identity.index < config.num_features:
            raise ValueError(f"column {identity.index} outside 0..{config.num_features - 1}")
        return identity.index
    return int(identity)


@lru_cache(maxsize=64)
def _mask(d):
    m = np.tril(np.ones((2 * d, 2 * d), dtype=bool))
    m.flags.writeable = False
    return m


def build_mask(d):
    """Visibility over the interleaved rows: ``mask[r, c] = c <= r``."""
    if d < 1:
        raise ValueError(f"mask needs D >= 1, got {d}")
    return _mask(int(d))


def shuffle_ordering(d, rng):
    """Uniform permutation of ``0..d-1`` (numpy's Fisher-Yates shuffle)."""
    if d < 1:
        raise ValueError(f"ordering needs D >= 1, got {d}")
    return rng.permutation(d)


def shuffle_orderings(n, d, rng):
    return np.stack([shuffle_ordering(d, rng) for _ in range(n)]) if n else np.zeros((0, d), np.int64)


class DEformer:
    def __init__(self, config, seed=0, rng=None):
        self.config = config
        self.dtype = np.dtype(config.precision)
        rng = rng if rng is not None else np.random.default_rng(seed)
        with nx.precision(config.precision):
            self.params = self._init_params(rng)
        coords = None
        if config.identity == "pixel":
            h, w = config.image_shape
            r, c = np.divmod(np.arange(config.num_features), w)
            coords = np.stack([r / max(h - 1, 1), c / max(w - 1, 1)], axis=1)
        self._pixel_coords = None if coords is None else coords.astype(self.dtype)

    def _init_params(self, rng):
        cfg = self.config
        d_model = cfg.transformer.d_model
        params = {}
        if cfg.identity == "column":
            params["identity.embedding"] = nx.Tensor(rng.standard_normal((cfg.num_features, cfg.embedding_dim)),
                                                     requires_grad=True, name="identity.embedding")
        for mlp, width_in in (("g_z", cfg.identity_width), ("g_u", cfg.identity_width + cfg.value_width)):
            widths = (width_in, *cfg.mlp_hidden, d_model)
            for i in range(len(widths) - 1):
                params.update(init_linear(rng, widths[i], widths[i + 1], f"{mlp}.{i}"))
        params.update(init_stack_params(cfg.transformer, rng))
        params.update(init_linear(rng, d_model, cfg.head.output_width, "head"))
        return params

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    def state_arrays(self):
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            a = np.asarray(arrays[k], dtype=self.dtype)
            if a.shape != p.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != {p.shape}")
            p.data = a.copy()

    def _const(self, a):
        return nx.Tensor(np.asarray(a, dtype=self.dtype))

    # ------------------------------------------------------------------
    # input encoding
    # ------------------------------------------------------------------

    def encode_identity(self, identity):
        """e(i): scaled pixel coordinates, or the column's embedding row."""
        f = feature_index(identity, self.config)
        if self.config.identity == "pixel":
            return self._pixel_coords[f].copy()
        return self.params["identity.embedding"].data[f].copy()

    def _identity_rows(self, features):
        if self.config.identity == "pixel":
            return self._const(self._pixel_coords[features])
        return nx.embedding_lookup(self.params["identity.embedding"], features)

    def _value_rows(self, values):
        cfg = self.config
        values = np.asarray(values)
        if cfg.value_width > 1:
            labels = values.astype(np.int64)
            return self._const(np.eye(cfg.value_width)[labels])
        return self._const(values[..., None])

    def _mlp(self, x, name):
        n = len(self.config.mlp_hidden) + 1
        for i in range(n):
            x = linear(x, self.params, f"{name}.{i}")
            if i < n - 1:
                x = nx.relu(x)
        return x

    def build_interleaved(self, orderings, values):
        """Rows ``2k`` hold ``z_{k+1}`` and rows ``2k+1`` hold ``u_{k+1}`` (0-based)."""
        orderings = np.asarray(orderings, dtype=np.int64)
        if orderings.shape[-1] < 1:
            raise ValueError("zero-feature input")
        ids = self._identity_rows(orderings)
        z = self._mlp(ids, "g_z")
        u = self._mlp(nx.concat_cols([ids, self._value_rows(values)]), "g_u")
        *lead, d, f = z.shape
        return nx.reshape(nx.concat_cols([z, u]), (*lead, 2 * d, f))

    def head_raw(self, orderings, values, training=False, rng=None):
        """Final linear layer applied to the processed z rows: shape (..., D, width)."""
        x = self.build_interleaved(orderings, values)
        d = x.shape[-2] // 2
        h = encoder_stack(x, build_mask(d), self.config.transformer, self.params, training=training, rng=rng)
        *lead, _, f = h.shape
        z_rows = nx.slice_cols(nx.reshape(h, (*lead, d, 2 * f)), 0, f)
        return linear(z_rows, self.params, "head")

    # ------------------------------------------------------------------
    # likelihoods
    # ------------------------------------------------------------------

    def _check_values(self, values):
        head = self.config.head
        values = np.asarray(values)
        if head.discrete:
            limit = 2 if head.kind == "bernoulli" else head.num_classes
            if not np.issubdtype(values.dtype, np.integer) and not np.all(values == np.round(values)):
                raise ValueError(f"{head.kind} head needs integer labels")
            if values.size and (values.min() < 0 or values.max() >= limit):
                raise ValueError(f"labels must lie in [0, {limit})")
        return values

    def log_probs(self, orderings, values, training=False, rng=None):
        """Per-feature log-probability (or log-density) tensor of shape (..., D)."""
        head = self.config.head
        values = self._check_values(values)
        raw = self.head_raw(orderings, values, training, rng)
        if head.kind == "bernoulli":
            p = nx.sigmoid(nx.reshape(raw, raw.shape[:-1]))
            v = values.astype(self.dtype)
            q = nx.add(nx.mul(p, self._const(2 * v - 1)), self._const(1 - v))
            return nx.log(q)
        if head.kind == "categorical":
            return nx.log(nx.gather_last(nx.softmax_rows(raw), values.astype(np.int64)))
        j = head.mixtures
        log_pi = nx.log_softmax_rows(nx.slice_cols(raw, 0, j))
        log_sigma = nx.clip(nx.slice_cols(raw, j, 2 * j), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        mu = nx.slice_cols(raw, 2 * j, 3 * j)
        v = self._const(np.asarray(values, dtype=self.dtype)[..., None])
        zscore = nx.mul(nx.add(v, nx.scale(mu, -1.0)), nx.exp(nx.scale(log_sigma, -1.0)))
        log_c = nx.add(nx.scale(nx.add(log_sigma, nx.scale(nx.mul(zscore, zscore), 0.5)), -1.0),
                       self._const(-HALF_LOG_2PI))
        return nx.logsumexp_rows(nx.add(log_pi, log_c))

    def nll(self, orderings, values, training=False, rng=None):
        """Per-sample NLL in nats, shape (...,); ``values`` are in permuted order."""
        return nx.scale(nx.sum(self.log_probs(orderings, values, training, rng), axis=-1), -1.0)

    def nll_of(self, x, orderings, training=False, rng=None):
        """Like :meth:`nll` but ``x`` is given in natural feature order."""
        x = np.asarray(x)
        orderings = np.asarray(orderings, dtype=np.int64)
        return self.nll(orderings, np.take_along_axis(x, orderings, axis=-1), training, rng)

    def head_outputs(self, orderings, values):
        """Predictive distributions for every feature position, without recording."""
        head = self.config.head
        with nx.no_grad():
            raw = self.head_raw(orderings, values).data
        if head.kind == "bernoulli":
            logit = raw[..., 0]
            return HeadOutput("bernoulli", prob=nx.sigmoid(nx.Tensor(logit, dtype=raw.dtype)).data)
        if head.kind == "categorical":
            with nx.no_grad():
                probs = nx.softmax_rows(nx.Tensor(raw, dtype=raw.dtype)).data
            return HeadOutput("categorical", probs=probs)
        j = head.mixtures
        with nx.no_grad():
            pi = nx.softmax_rows(nx.Tensor(raw[..., :j], dtype=raw.dtype)).data
        sigma = np.exp(np.clip(raw[..., j:2 * j], LOG_SIGMA_MIN, LOG_SIGMA_MAX))
        return HeadOutput("gmm", pi=pi, mu=raw[..., 2 * j:], sigma=sigma)


def forward_heads(sample, model):
    """List of D per-position HeadOutputs for one ordered sample."""
    out = model.head_outputs(sample.ordering[None], sample.values[None])
    return [out[0, k] for k in range(len(sample.ordering))]


def nll_discrete(sample, model):
    if not model.config.head.discrete:
        raise ValueError("nll_discrete needs a Bernoulli or categorical head")
    return nx.sum(model.nll(sample.ordering[None], sample.values[None]))


def nll_continuous(sample, model):
    if model.config.head.kind != "gmm":
        raise ValueError("nll_continuous needs a Gaussian-mixture head")
    return nx.sum(model.nll(sample.ordering[None], sample.values[None]))


def mixture_log_density(v, pi, mu, sigma):
    """log sum_j pi_j N(v; mu_j, sigma_j) computed by log-sum-exp over components."""
    v = np.asarray(v, dtype=float)[..., None]
    terms = np.log(pi) - np.log(sigma) - HALF_LOG_2PI - 0.5 * ((v - mu) / sigma) ** 2
    m = terms.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(terms - m).sum(axis=-1, keepdims=True)))[..., 0]
