"""Order-averaged likelihoods, ancestral sampling, imputation and OOD scoring."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from deformer import numerics as nx
from deformer.model import mixture_log_density, shuffle_orderings
from deformer.training import STREAM_ORDERING, stream


@dataclass
class EvalEntry:
    mean: float
    std: float
    nlls: np.ndarray


@dataclass
class EvalReport:
    mean_nll: np.ndarray        # per sample, over K orderings
    std_nll: np.ndarray
    orderings: int

    @property
    def aggregate(self):
        return float(math.fsum(self.mean_nll)) / len(self.mean_nll)

    def write_csv(self, path, ids=None):
        ids = range(len(self.mean_nll)) if ids is None else ids
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "mean_nll", "std_nll"])
            for i, m, s in zip(ids, self.mean_nll, self.std_nll):
                w.writerow([i, repr(float(m)), repr(float(s))])


def _nll_rows(model, x, orderings, batch_size):
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.nll_of(x[i:i + batch_size], orderings[i:i + batch_size]).data)
    return np.concatenate(out).astype(np.float64)


def _stats(nlls):
    mean = math.fsum(nlls) / len(nlls)
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in nlls) / len(nlls))
    return mean, std


def average_nll(model, x, k=10, seed=0, orderings=None, batch_size=256):
    """NLL of one sample averaged over ``k`` seeded uniform orderings."""
    if k < 1:
        raise ValueError("need at least one ordering")
    x = np.asarray(x)
    d = x.shape[-1]
    if orderings is None:
        orderings = shuffle_orderings(k, d, np.random.default_rng(seed))
    nlls = _nll_rows(model, np.broadcast_to(x, (len(orderings), d)), orderings, batch_size)
    mean, std = _stats(nlls)
    return EvalEntry(mean, std, nlls)


def sample_orderings(n, k, d, seed):
    """``k`` orderings per sample; sample ``i`` draws from its own stream so results do not depend on batching."""
    return np.stack([shuffle_orderings(k, d, stream(seed, STREAM_ORDERING, 3, i)) for i in range(n)]) \
        if n else np.zeros((0, k, d), np.int64)


def evaluate(model, x, k=10, seed=0, batch_size=256):
    x = np.asarray(x)
    n, d = x.shape
    orders = sample_orderings(n, k, d, seed)
    nlls = _nll_rows(model, np.repeat(x, k, axis=0), orders.reshape(n * k, d), batch_size).reshape(n, k)
    stats = np.array([_stats(row) for row in nlls]).reshape(n, 2)
    return EvalReport(stats[:, 0], stats[:, 1], k)


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------

def _draw(head, rng, clamp=10.0):
    """Draw one value per row from a per-row HeadOutput; returns (values, log-prob)."""
    if head.kind == "bernoulli":
        p = head.prob
        v = (rng.random(p.shape) < p).astype(np.int64)
        return v, np.log(np.maximum(np.where(v == 1, p, 1 - p), nx.LOG_FLOOR))
    if head.kind == "categorical":
        cdf = np.cumsum(head.probs, axis=-1)
        u = rng.random(cdf.shape[:-1])[..., None] * cdf[..., -1:]
        v = np.minimum((u >= cdf).sum(axis=-1), cdf.shape[-1] - 1)
        p = np.take_along_axis(head.probs, v[..., None], axis=-1)[..., 0]
        return v, np.log(np.maximum(p, nx.LOG_FLOOR))
    cdf = np.cumsum(head.pi, axis=-1)
    u = rng.random(cdf.shape[:-1])[..., None] * cdf[..., -1:]
    comp = np.minimum((u >= cdf).sum(axis=-1), cdf.shape[-1] - 1)
    mu = np.take_along_axis(head.mu, comp[..., None], axis=-1)[..., 0]
    sigma = np.take_along_axis(head.sigma, comp[..., None], axis=-1)[..., 0]
    v = mu + sigma * rng.standard_normal(mu.shape)
    if clamp is not None:
        v = np.clip(v, -clamp, clamp)
    return v, mixture_log_density(v, head.pi, head.mu, head.sigma)


def _argmax(head):
    if head.kind == "bernoulli":
        v = (head.prob > 0.5).astype(np.int64)
        return v, np.log(np.maximum(np.where(v == 1, head.prob, 1 - head.prob), nx.LOG_FLOOR))
    if head.kind == "categorical":
        v = head.probs.argmax(axis=-1)
        return v, np.log(np.maximum(np.take_along_axis(head.probs, v[..., None], axis=-1)[..., 0], nx.LOG_FLOOR))
    # mean of the heaviest component
    comp = head.pi.argmax(axis=-1)
    v = np.take_along_axis(head.mu, comp[..., None], axis=-1)[..., 0]
    return v, mixture_log_density(v, head.pi, head.mu, head.sigma)


def _empty_values(model, shape):
    return np.zeros(shape, dtype=np.int64 if model.config.head.discrete else model.dtype)


def _complete(model, orderings, values, start, rng, mode="sample", clamp=10.0):
    """Fill permuted positions ``start..D-1`` in place, one prefix forward pass each."""
    logp = np.zeros(len(orderings))
    for k in range(start, orderings.shape[1]):
        # position k's own value is a placeholder: row z_k cannot see u_k
        head = model.head_outputs(orderings[:, :k + 1], values[:, :k + 1])[:, k]
        v, lp = _draw(head, rng, clamp) if mode == "sample" else _argmax(head)
        values[:, k] = v
        logp += lp
    return logp


def _unpermute(orderings, values):
    x = np.empty_like(values)
    np.put_along_axis(x, orderings, values, axis=1)
    return x


@dataclass
class Generated:
    samples: np.ndarray      # natural feature order
    orderings: np.ndarray
    log_prob: np.ndarray     # accumulated while drawing


def generate(model, n, rng, orderings=None, clamp=10.0, batch_size=4096):
    """Ancestral sampling under the given (default: fresh random) orderings."""
    d = model.config.num_features
    if orderings is None:
        orderings = shuffle_orderings(n, d, rng)
    orderings = np.asarray(orderings, dtype=np.int64).reshape(n, d)
    out, lps = [], []
    for i in range(0, n, batch_size):
        o = orderings[i:i + batch_size]
        values = _empty_values(model, o.shape)
        lps.append(_complete(model, o, values, 0, rng, "sample", clamp))
        out.append(_unpermute(o, values))
    return Generated(np.concatenate(out) if out else np.zeros((0, d)), orderings,
                     np.concatenate(lps) if lps else np.zeros(0))


# ----------------------------------------------------------------------------
# imputation
# ----------------------------------------------------------------------------

@dataclass
class ImputationTask:
    observed: dict                          # feature index -> value
    missing: list = field(default_factory=list)
    mode: str = "sample"                    # or "argmax"

    def validate(self, d):
        obs = set(self.observed)
        miss = set(self.missing)
        if obs & miss:
            raise ValueError(f"features both observed and missing: {sorted(obs & miss)}")
        if len(miss) != len(self.missing):
            raise ValueError("duplicate missing features")
        if obs | miss != set(range(d)):
            raise ValueError(f"observed and missing sets must cover all {d} features exactly once")
        if self.mode not in ("sample", "argmax"):
            raise ValueError(f"unknown fill mode {self.mode!r}")


@dataclass
class Imputed:
    values: np.ndarray
    ordering: np.ndarray


def imputation_ordering(observed, missing, rng, mode):
    """Observed features first, missing after.

    Sample mode shuffles within each group; argmax mode keeps ascending
    feature order so the fill does not depend on the generator.
    """
    observed = np.sort(np.asarray(list(observed), dtype=np.int64))
    missing = np.sort(np.asarray(list(missing), dtype=np.int64))
    if mode == "sample":
        observed = rng.permutation(observed)
        missing = rng.permutation(missing)
    return np.concatenate([observed, missing])


def impute(model, task, rng=None):
    d = model.config.num_features
    task.validate(d)
    if not task.missing:
        x = np.array([task.observed[f] for f in range(d)])
        return Imputed(x, np.arange(d))
    x = _empty_values(model, (d,))
    for f, v in task.observed.items():
        x[f] = v
    order = imputation_ordering(task.observed, task.missing, rng, task.mode)
    values = x[order][None].copy()
    _complete(model, order[None], values, len(task.observed), rng, task.mode)
    return Imputed(_unpermute(order[None], values)[0], order)


def impute_batch(model, x, missing_mask, rng=None, mode="sample"):
    """Impute every row of ``x`` where ``missing_mask`` is True; observed cells pass through."""
    x = np.asarray(x)
    missing_mask = np.asarray(missing_mask, dtype=bool)
    if missing_mask.shape != x.shape:
        raise ValueError(f"mask shape {missing_mask.shape} != data shape {x.shape}")
    out = x.copy()
    orders = np.zeros(x.shape, dtype=np.int64)
    counts = missing_mask.sum(axis=1)
    for c in np.unique(counts):
        rows = np.flatnonzero(counts == c)
        if c == 0:
            orders[rows] = np.arange(x.shape[1])
            continue
        o = np.stack([imputation_ordering(np.flatnonzero(~missing_mask[r]), np.flatnonzero(missing_mask[r]), rng, mode)
                      for r in rows])
        values = np.take_along_axis(x[rows], o, axis=1).copy()
        if not model.config.head.discrete:
            values = values.astype(model.dtype)
        _complete(model, o, values, x.shape[1] - c, rng, mode)
        out[rows] = _unpermute(o, values)
        orders[rows] = o
    return out, orders


# ----------------------------------------------------------------------------
# out-of-distribution scoring
# ----------------------------------------------------------------------------

def summarize(nlls):
    nlls = np.asarray(nlls, dtype=np.float64)
    q = np.percentile(nlls, [5, 25, 50, 75, 95])
    return {
        "n": int(len(nlls)), "mean": float(nlls.mean()), "std": float(nlls.std()),
        "min": float(nlls.min()), "p05": float(q[0]), "p25": float(q[1]), "median": float(q[2]),
        "p75": float(q[3]), "p95": float(q[4]), "max": float(nlls.max()),
    }


@dataclass
class OODResult:
    in_dist: EvalReport
    out_dist: EvalReport
    in_summary: dict
    out_summary: dict
    bin_edges: np.ndarray
    in_hist: np.ndarray
    out_hist: np.ndarray

    @property
    def gap(self):
        return self.out_summary["mean"] - self.in_summary["mean"]


def ood_score(model, in_x, out_x, k=10, seed=0, bins=50, batch_size=256):
    """Per-sample average NLLs for two datasets plus summaries; higher NLL means more anomalous."""
    in_x, out_x = np.asarray(in_x), np.asarray(out_x)
    d = model.config.num_features
    if in_x.ndim != 2 or out_x.ndim != 2 or in_x.shape[1] != d or out_x.shape[1] != d:
        raise ValueError(f"both datasets must be N x {d}; got {in_x.shape} and {out_x.shape}")
    a = evaluate(model, in_x, k, seed, batch_size)
    b = evaluate(model, out_x, k, seed, batch_size)
    both = np.concatenate([a.mean_nll, b.mean_nll])
    edges = np.histogram_bin_edges(both, bins=bins)
    return OODResult(a, b, summarize(a.mean_nll), summarize(b.mean_nll), edges,
                     np.histogram(a.mean_nll, edges)[0], np.histogram(b.mean_nll, edges)[0])


def write_summary_csv(path, summary, hist=None, edges=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["statistic", "value"])
        for key, val in summary.items():
            w.writerow([key, repr(val)])
        if hist is not None:
            for lo, hi, c in zip(edges[:-1], edges[1:], hist):
                w.writerow([f"hist[{float(lo)!r},{float(hi)!r})", int(c)])
