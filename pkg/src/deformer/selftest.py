"""Bundled quick checks: primitive gradients, mask rules, normalization, model gradients."""
import math
import time

import numpy as np

from deformer import numerics as nx
from deformer.data import configurations
from deformer.model import DEformer, HeadConfig, ModelConfig, build_mask
from deformer.transformer import TransformerConfig


def rule_visibility(d):
    """Visibility between interleaved rows derived directly from the two look rules."""
    seq = []
    for k in range(1, d + 1):
        seq += [("z", k), ("u", k)]
    vis = np.zeros((2 * d, 2 * d), dtype=bool)
    for r, (kind_r, k2) in enumerate(seq):
        for c, (kind_c, k1) in enumerate(seq):
            if kind_r == "z":
                vis[r, c] = k1 <= k2 if kind_c == "z" else k1 < k2
            else:
                vis[r, c] = k1 <= k2
    return vis


def tiny_model(head="bernoulli", d=3, seed=0, precision="float64", d_model=8, n_layers=2, mixtures=2):
    cfg = ModelConfig(num_features=d, identity="column", embedding_dim=4, mlp_hidden=(8, 8),
                      head=HeadConfig(head, num_classes=3, mixtures=mixtures),
                      transformer=TransformerConfig(d_model=d_model, n_heads=2, d_ff=2 * d_model, n_layers=n_layers),
                      precision=precision)
    return DEformer(cfg, seed=seed)


def check_primitives(rng, tol=1e-5):
    t = lambda *s: nx.Tensor(rng.standard_normal(s))  # noqa: E731
    mask = rng.random((3, 4)) < 0.3
    mask[:, 0] = False
    idx = rng.integers(0, 4, size=(3,))
    cases = {
        "matmul": (lambda a, b: nx.sum(nx.matmul(a, b)), [t(3, 4), t(4, 2)]),
        "batched_matmul": (lambda a, b: nx.sum(nx.mul(nx.matmul(a, b), nx.matmul(a, b))), [t(2, 3, 4), t(2, 4, 3)]),
        "add": (lambda a, b: nx.sum(nx.mul(nx.add(a, b), a)), [t(3, 4), t(4)]),
        "mul": (lambda a, b: nx.sum(nx.mul(a, b)), [t(3, 4), t(3, 4)]),
        "scale": (lambda a: nx.sum(nx.mul(nx.scale(a, -2.5), a)), [t(3, 4)]),
        "relu": (lambda a: nx.sum(nx.mul(nx.relu(a), a)), [t(3, 4)]),
        "sigmoid": (lambda a: nx.sum(nx.sigmoid(a)), [t(3, 4)]),
        "exp": (lambda a: nx.sum(nx.exp(a)), [t(3, 4)]),
        "log": (lambda a: nx.sum(nx.log(nx.exp(a))), [t(3, 4)]),
        "softmax_rows": (lambda a, w: nx.sum(nx.mul(nx.softmax_rows(a), w)), [t(3, 4), t(3, 4)]),
        "log_softmax_rows": (lambda a, w: nx.sum(nx.mul(nx.log_softmax_rows(a), w)), [t(3, 4), t(3, 4)]),
        "logsumexp_rows": (lambda a: nx.sum(nx.logsumexp_rows(a)), [t(3, 4)]),
        "layer_norm_rows": (lambda a, g, b, w: nx.sum(nx.mul(nx.layer_norm_rows(a, g, b), w)),
                            [t(3, 5), t(5), t(5), t(3, 5)]),
        "masked_fill": (lambda a, w: nx.sum(nx.mul(nx.softmax_rows(nx.masked_fill(a, mask)), w)), [t(3, 4), t(3, 4)]),
        "slice_cols": (lambda a: nx.sum(nx.exp(nx.slice_cols(a, 1, 3))), [t(3, 4)]),
        "concat_cols": (lambda a, b: nx.sum(nx.exp(nx.concat_cols([a, b]))), [t(3, 2), t(3, 3)]),
        "embedding_lookup": (lambda e: nx.sum(nx.exp(nx.embedding_lookup(e, np.array([[0, 2], [2, 2]])))), [t(3, 4)]),
        "transpose": (lambda a, w: nx.sum(nx.mul(nx.transpose(a), w)), [t(2, 3, 4), t(2, 4, 3)]),
        "reshape": (lambda a, w: nx.sum(nx.mul(nx.reshape(a, (4, 3)), w)), [t(3, 4), t(4, 3)]),
        "gather_last": (lambda a: nx.sum(nx.exp(nx.gather_last(a, idx))), [t(3, 4)]),
        "clip": (lambda a: nx.sum(nx.exp(nx.clip(a, -0.5, 0.5))), [t(3, 4)]),
        "dropout_off": (lambda a: nx.sum(nx.exp(nx.dropout(a, 0.5, training=False))), [t(3, 4)]),
    }
    out = []
    for name, (f, point) in cases.items():
        err = nx.finite_difference_check(f, point, 1e-5)
        out.append((f"grad {name}", err < tol, f"max rel err {err:.2e}"))
    return out


def check_mask_rules(max_d=8):
    bad = [d for d in range(1, max_d + 1) if not np.array_equal(build_mask(d), rule_visibility(d))]
    return [("mask rules D=1..%d" % max_d, not bad, f"mismatching D: {bad}" if bad else "exact")]


def check_normalization(seeds=3, ds=(3, 4, 5, 6), tol=1e-6):
    worst = 0.0
    for d in ds:
        for s in range(seeds):
            model = tiny_model("bernoulli", d=d, seed=s, d_model=16)
            xs = configurations(d)
            order = np.random.default_rng(s).permutation(d)
            with nx.no_grad():
                nll = model.nll_of(xs, np.broadcast_to(order, xs.shape)).data
            worst = max(worst, abs(math.fsum(np.exp(-nll)) - 1.0))
    return [("normalization", worst < tol, f"max |sum p - 1| = {worst:.2e}")]


def check_model_gradients(tol=1e-5):
    out = []
    rng = np.random.default_rng(0)
    for head in ("bernoulli", "gmm"):
        model = tiny_model(head, seed=1)
        x = rng.integers(0, 2, (2, 3)) if head == "bernoulli" else rng.standard_normal((2, 3))
        orders = np.stack([rng.permutation(3) for _ in range(2)])
        err = nx.finite_difference_check(lambda *_: nx.sum(model.nll_of(x, orders)), model.parameters(), 1e-5,
                                         numeric_dtype=np.longdouble)
        out.append((f"model gradient ({head})", err < tol, f"max rel err {err:.2e}"))
    return out


def run_all(log=print):
    t0 = time.monotonic()
    results = []
    with nx.precision("float64"):
        results += check_primitives(np.random.default_rng(1))
        results += check_mask_rules()
        results += check_normalization()
        results += check_model_gradients()
    for name, ok, detail in results:
        log(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    log(f"selftest finished in {time.monotonic() - t0:.1f}s")
    return all(ok for _, ok, _ in results)

