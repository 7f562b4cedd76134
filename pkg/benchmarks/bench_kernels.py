"""Numba vs pure-numpy row kernels, plus one end-to-end training step per backend.

    python benchmarks/bench_kernels.py [--repeat N]

Kernel timings call both implementations in this process. The training
step runs in two subprocesses, one with DEFORMER_DISABLE_NUMBA=1, so the
whole library picks the matching backend.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from deformer import _kernels as K

SHAPES = [(256, 16), (4096, 64), (65536, 8), (2048, 512)]

STEP = r"""
import json, time, numpy as np
from deformer import _kernels, numerics as nx
from deformer.model import DEformer, ModelConfig
from deformer.transformer import TransformerConfig
from deformer.training import AdamState, adam_step
cfg = ModelConfig(num_features=16, embedding_dim=8, mlp_hidden=(32, 32),
                  transformer=TransformerConfig(32, 4, 64, 2))
m = DEformer(cfg, seed=0)
rng = np.random.default_rng(0)
x = rng.integers(0, 2, (128, 16))
adam = AdamState(lr=1e-3)
def step():
    orders = np.stack([rng.permutation(16) for _ in range(128)])
    loss = nx.scale(nx.sum(m.nll_of(x, orders)), 1 / 128)
    for p in m.parameters():
        p.grad = None
    nx.backward(loss)
    adam_step({k: p.data for k, p in m.params.items()}, {k: p.grad for k, p in m.params.items()}, adam)
step()  # compile / warm up
t = time.perf_counter()
for _ in range(REPEAT):
    step()
print(json.dumps({"backend": _kernels.backend(), "ms": 1e3 * (time.perf_counter() - t) / REPEAT}))
"""


def bench_kernels(repeat):
    rows = []
    for shape in SHAPES:
        x = np.ascontiguousarray(np.random.default_rng(0).standard_normal(shape))
        g = np.ascontiguousarray(np.random.default_rng(1).standard_normal(shape))
        y = K.np_softmax_rows(x)
        xhat, inv = K.np_layer_norm_rows(x, 1e-5)
        cases = {
            "softmax_rows": ((x,), K.nb_softmax_rows, K.np_softmax_rows),
            "softmax_rows_backward": ((y, g), K.nb_softmax_rows_backward, K.np_softmax_rows_backward),
            "log_softmax_rows": ((x,), K.nb_log_softmax_rows, K.np_log_softmax_rows),
            "logsumexp_rows": ((x,), K.nb_logsumexp_rows, K.np_logsumexp_rows),
            "layer_norm_rows": ((x, 1e-5), K.nb_layer_norm_rows, K.np_layer_norm_rows),
            "layer_norm_rows_backward": ((xhat, inv, g), K.nb_layer_norm_rows_backward,
                                         K.np_layer_norm_rows_backward),
        }
        for name, (args, fast, slow) in cases.items():
            fast(*args)  # JIT compile outside the timing
            t_nb = min(timeit.repeat(lambda: fast(*args), number=1, repeat=repeat))
            t_np = min(timeit.repeat(lambda: slow(*args), number=1, repeat=repeat))
            rows.append((name, shape, t_nb, t_np))
    return rows


def bench_step(repeat):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, DEFORMER_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP.replace("REPEAT", str(repeat))], env=env,
                             capture_output=True, text=True, check=True)
        r = json.loads(res.stdout.strip().splitlines()[-1])
        out[r["backend"]] = r["ms"]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is unavailable (or disabled); nothing to compare")
    print(f"{'kernel':<26} {'shape':>12} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, shape, t_nb, t_np in bench_kernels(args.repeat):
        print(f"{name:<26} {str(shape):>12} {1e3 * t_nb:>10.3f} {1e3 * t_np:>10.3f} {t_np / t_nb:>7.2f}x")
    step = bench_step(max(3, args.repeat // 2))
    print("\ntraining step (batch 128, D=16, d_model=32, 2 layers):")
    for backend, ms in sorted(step.items()):
        print(f"  {backend:<6} {ms:8.2f} ms")


if __name__ == "__main__":
    main()
