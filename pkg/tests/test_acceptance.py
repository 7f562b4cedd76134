"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``. Criterion 9 needs the
binarized-MNIST IDX files (DEFORMER_MNIST_DIR) and a notMNIST IDX subset
(DEFORMER_NOTMNIST_IDX); without them it fails and says why.
"""
import itertools
import math
import os
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from deformer import numerics as nx
from deformer.data import DataError, SyntheticJoint, binarize, configurations, load_binarized_images, parse_idx, read_idx
from deformer.inference import evaluate, generate, impute_batch
from deformer.model import DEformer, HeadConfig, ModelConfig, build_mask, mixture_log_density
from deformer.selftest import check_model_gradients, rule_visibility
from deformer.training import (Checkpoint, TrainConfig, make_checkpoint, mean_nll, model_from_checkpoint,
                               restore_best, train, validation_orderings)
from deformer.transformer import TransformerConfig

UNIFORM_784 = 784 * math.log(2)  # 543.43 nats: every pixel a fair coin


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def model_for(d, head="bernoulli", seed=0, d_model=16, dropout=0.0, mixtures=3):
    cfg = ModelConfig(num_features=d, embedding_dim=4, mlp_hidden=(8, 8), head=HeadConfig(head, mixtures=mixtures),
                      transformer=TransformerConfig(d_model, 2, 2 * d_model, 2, dropout), precision="float64")
    return DEformer(cfg, seed=seed)


def test_c01_mask_rules(capsys):
    t0 = time.monotonic()
    bad = [(d, int((build_mask(d) != rule_visibility(d)).sum())) for d in range(1, 9)]
    mismatches = sum(n for _, n in bad)
    dt = time.monotonic() - t0
    report(capsys, 1, mismatches == 0 and dt < 1.0, f"{mismatches} mismatching entries over D=1..8 in {dt:.3f}s")


def test_c02_normalization(capsys):
    t0 = time.monotonic()
    worst = 0.0
    for d in range(3, 9):
        xs = configurations(d)
        for s in range(20):
            m = model_for(d, seed=s)
            rng = np.random.default_rng(1000 * d + s)
            for p in m.parameters():
                p.data += rng.normal(0.0, 0.5, p.data.shape)
            order = rng.permutation(d)
            with nx.no_grad():
                nll = m.nll_of(xs, np.broadcast_to(order, xs.shape)).data
            worst = max(worst, abs(math.fsum(np.exp(-nll)) - 1.0))
    dt = time.monotonic() - t0
    report(capsys, 2, worst <= 1e-6 and dt < 60, f"max |sum exp(-NLL) - 1| = {worst:.2e} over 120 models in {dt:.1f}s")


def test_c03_causality(capsys):
    t0 = time.monotonic()
    worst, probes = 0.0, 0
    for d in (3, 5, 8):
        models = {h: model_for(d, h, seed=d, dropout=0.1) for h in ("bernoulli", "gmm")}
        rng = np.random.default_rng(d)
        for p in range(100):
            head = ("bernoulli", "gmm")[p % 2]
            draw = (lambda n: rng.integers(0, 2, n)) if head == "bernoulli" else (lambda n: rng.standard_normal(n))
            order, vals = rng.permutation(d), draw(d)
            k = int(rng.integers(0, d))  # 0-based position of the head under test
            order2 = np.concatenate([order[:k + 1], rng.permutation(order[k + 1:])])
            vals2 = vals.copy()
            vals2[k:] = draw(d - k)
            with nx.no_grad():
                a = models[head].head_raw(order[None], vals[None]).data[0, :k + 1]
                b = models[head].head_raw(order2[None], vals2[None]).data[0, :k + 1]
            worst = max(worst, float(np.abs(a - b).max()))
            probes += 1
    dt = time.monotonic() - t0
    report(capsys, 3, worst == 0.0 and dt < 60, f"max abs diff {worst:g} over {probes} probes in {dt:.1f}s")


def test_c04_gradients(capsys):
    t0 = time.monotonic()
    res = check_model_gradients(tol=1e-5)
    dt = time.monotonic() - t0
    detail = "; ".join(f"{name} {info}" for name, _, info in res)
    report(capsys, 4, all(ok for _, ok, _ in res) and dt < 120, f"{detail} in {dt:.1f}s")


def _all_orderings_nll(model, d):
    xs = configurations(d)
    with nx.no_grad():
        return np.stack([model.nll_of(xs, np.broadcast_to(p, xs.shape)).data
                         for p in itertools.permutations(range(d))])


def test_c05_oracle_recovery(joint4, capsys):
    t0 = time.monotonic()
    nll = _all_orderings_nll(joint4.model, 4)          # (24 orderings, 16 configurations)
    idx = joint4.joint.index(joint4.test)
    per_sample = nll[:, idx]
    gap = per_sample.mean() - joint4.joint.entropy()
    std = per_sample.std(axis=0)
    dt = joint4.seconds + time.monotonic() - t0
    ok = abs(gap) < 0.05 and std.max() < 0.05 and dt < 900
    report(capsys, 5, ok, f"test NLL - entropy = {gap:+.4f}; per-sample std over 24 orderings max {std.max():.4f} "
                          f"mean {std.mean():.4f} median {np.median(std):.4f}; {dt:.0f}s")


def test_c06_generation(joint4, capsys):
    t0 = time.monotonic()
    g = generate(joint4.model, 100000, np.random.default_rng(5))
    emp = np.bincount(joint4.joint.index(g.samples), minlength=16) / 100000
    tv = 0.5 * np.abs(emp - joint4.joint.table).sum()
    with nx.no_grad():
        tf = joint4.model.nll_of(g.samples, g.orderings).data
    cons = float(np.abs(tf + g.log_prob).max())
    dt = time.monotonic() - t0
    report(capsys, 6, tv < 0.02 and cons < 1e-5 and dt < 600,
           f"TV to the joint {tv:.4f}; max |teacher-forced NLL + generation log-prob| {cons:.1e}; {dt:.0f}s")


def test_c07_imputation(xor3, capsys):
    t0 = time.monotonic()
    acc = []
    for f in range(3):
        mask = np.zeros(xor3.test.shape, bool)
        mask[:, f] = True
        out, _ = impute_batch(xor3.model, xor3.test, mask, mode="argmax")
        acc.append(float((out[:, f] == xor3.test[:, f]).mean()))
    dt = xor3.seconds + time.monotonic() - t0
    report(capsys, 7, min(acc) > 0.95 and dt < 600,
           f"argmax fill accuracy per missing feature {[round(a, 4) for a in acc]}; {dt:.0f}s")


def test_c08_continuous_head(capsys):
    t0 = time.monotonic()
    w, mu, sd = np.array([0.3, 0.7]), np.array([-2.0, 1.5]), np.array([0.5, 1.0])
    grid = np.linspace(-12, 12, 240001)
    lp = mixture_log_density(grid, w, mu, sd)
    truth = -np.trapezoid(np.exp(lp) * lp, grid)
    rng = np.random.default_rng(0)

    def draw(n):
        c = rng.random(n) < w[0]
        return np.where(c, mu[0] + sd[0] * rng.standard_normal(n), mu[1] + sd[1] * rng.standard_normal(n))[:, None]

    tr, va, te = draw(100000), draw(5000), draw(100000)
    cfg = ModelConfig(num_features=1, head=HeadConfig("gmm", mixtures=10), embedding_dim=8, mlp_hidden=(16, 16),
                      transformer=TransformerConfig(16, 2, 32, 1), precision="float64")
    m = DEformer(cfg, seed=0)
    res = train(m, tr, va, TrainConfig(batch_size=1000, max_epochs=40, lr=1e-2, patience=3, seed=0))
    restore_best(m, res)
    zeros = np.zeros((len(te), 1), int)
    with nx.no_grad():
        nll = m.nll_of(te, zeros).data.mean()
    # a single feature: the head sees only its own identity, so one forward gives the density
    h = m.head_outputs(np.zeros((1, 1), int), np.zeros((1, 1)))[0, 0]
    lo = float((h.mu - 40 * h.sigma).min())
    hi = float((h.mu + 40 * h.sigma).max())
    step = float(h.sigma.min()) / 50
    xs = np.linspace(lo, hi, min(int((hi - lo) / step) + 1, 4_000_001))
    mass = np.trapezoid(np.exp(mixture_log_density(xs, h.pi, h.mu, h.sigma)), xs)
    dt = time.monotonic() - t0
    report(capsys, 8, abs(nll - truth) < 0.05 and abs(mass - 1) < 1e-4 and dt < 900,
           f"test NLL {nll:.4f} vs quadrature {truth:.4f} (diff {nll - truth:+.4f}); "
           f"density integral {mass:.8f}; {dt:.0f}s")


def _mnist_paths():
    root = os.environ.get("DEFORMER_MNIST_DIR")
    ood = os.environ.get("DEFORMER_NOTMNIST_IDX")
    if not root or not ood:
        return None
    names = {}
    for split, stem in (("train", "train-images-idx3-ubyte"), ("test", "t10k-images-idx3-ubyte")):
        found = [p for p in (Path(root) / stem, Path(root) / f"{stem}.gz") if p.exists()]
        if not found:
            return None
        names[split] = found[0]
    return names["train"], names["test"], Path(ood)


def test_c09_mnist_desk_run(capsys, tmp_path):
    paths = _mnist_paths()
    if paths is None:
        report(capsys, 9, False, "binarized-MNIST / notMNIST IDX files not available in this environment "
                                 "(set DEFORMER_MNIST_DIR and DEFORMER_NOTMNIST_IDX); the 2-hour run was not attempted")
    train_path, test_path, ood_path = paths
    ds = load_binarized_images(train_path, test_path)
    flat = lambda a: a.reshape(len(a), -1)  # noqa: E731
    cfg = ModelConfig(num_features=784, identity="pixel", image_shape=(28, 28), embedding_dim=20,
                      mlp_hidden=(64, 128), head=HeadConfig("bernoulli"),
                      transformer=TransformerConfig(64, 4, 256, 2), precision="float32")
    with nx.precision("float32"):
        m = DEformer(cfg, seed=0)
        # attention scores cost 4 x 1568^2 floats per image, so batches stay small
        res = train(m, flat(ds.train), flat(ds.validation),
                    TrainConfig(batch_size=8, max_epochs=50, lr=1e-3, time_limit=7200, eval_batch_size=8,
                                output_dir=str(tmp_path)))
        restore_best(m, res)
        in_nll = evaluate(m, flat(ds.test), k=1, batch_size=8).mean_nll
        notmnist = binarize(read_idx(ood_path))
        out_nll = evaluate(m, flat(notmnist), k=1, batch_size=8).mean_nll
    margin = UNIFORM_784 - in_nll.mean()
    gap = out_nll.mean() - in_nll.mean()
    ok = margin >= 300 and gap > 5 * in_nll.std()
    report(capsys, 9, ok, f"MNIST test NLL {in_nll.mean():.2f} (uniform {UNIFORM_784:.2f}, margin {margin:.2f}); "
                          f"notMNIST gap {gap:.2f} vs 5 x std {5 * in_nll.std():.2f}")


def _official_header_file(n=60000, rows=28, cols=28):
    body = np.random.default_rng(0).integers(0, 256, n * rows * cols, dtype=np.uint8).tobytes()
    return struct.pack(">IIII", 0x00000803, n, rows, cols) + body


def test_c10_checkpoint_and_idx(capsys, tmp_path):
    t0 = time.monotonic()
    j = SyntheticJoint.random(5, seed=2)
    rng = np.random.default_rng(0)
    m = model_for(5, seed=1)
    train(m, j.sample(1024, rng), j.sample(128, rng), TrainConfig(batch_size=64, max_epochs=2, lr=1e-2))
    make_checkpoint(m).save(tmp_path / "m.ckpt")
    loaded = model_from_checkpoint(Checkpoint.load(tmp_path / "m.ckpt"))
    x = j.sample(500, rng)
    orders = validation_orderings(500, 5, 3)
    exact = mean_nll(loaded, x, orders) == mean_nll(m, x, orders)
    exact &= np.array_equal(evaluate(loaded, x, k=10).mean_nll, evaluate(m, x, k=10).mean_nll)

    good = _official_header_file()
    imgs = parse_idx(good)
    accepted = imgs.shape == (60000, 28, 28) and imgs.dtype == np.uint8 and imgs.tobytes() == good[16:]
    header = good[:16]
    corrupt = {
        "empty": b"",
        "three bytes": good[:3],
        "byte-swapped magic": struct.pack("<I", 0x803) + good[4:],
        "float type code": struct.pack(">I", 0x00000D03) + good[4:],
        "non-zero leading bytes": b"\x01\x00" + good[2:],
        "rank 4 magic": struct.pack(">I", 0x00000804) + good[4:],
        "header cut after two dims": header[:12],
        "payload short by one byte": good[:-1],
        "one trailing byte": good + b"\x00",
        "count says 60001": struct.pack(">IIII", 0x803, 60001, 28, 28) + good[16:],
    }
    rejected = []
    for name, buf in corrupt.items():
        try:
            parse_idx(buf)
        except DataError:
            rejected.append(name)
    missed = sorted(set(corrupt) - set(rejected))
    dt = time.monotonic() - t0
    report(capsys, 10, exact and accepted and not missed and dt < 60,
           f"bit-exact reload {bool(exact)}; official header accepted {accepted}; "
           f"rejected {len(rejected)}/{len(corrupt)} corrupted files{' missed ' + str(missed) if missed else ''}; "
           f"{dt:.1f}s")
