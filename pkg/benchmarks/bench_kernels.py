"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Per-kernel timings run both implementations in one process (numba times
exclude JIT compilation). The end-to-end row trains one FSL epoch in a
subprocess per backend, selected through ``SPLITBENCH_NUMBA``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from splitbench._kernels import _numba, _numpy

E2E = """
import time
from splitbench.data import DatasetSpec, make_dataset, partition_dataset
from splitbench.privacy import PrivacyConfig
from splitbench.profiles import digits_cnn
from splitbench.protocols import TrainConfig, train
spec = DatasetSpec(samples_per_client=200, test_per_client=50)
tr, te = make_dataset(spec, 2, 0)
clients = partition_dataset(tr, te, 2, spec, 0)
cfg = TrainConfig("FSL", 2, 3, 1, 16, 0.1)
priv = PrivacyConfig("nopeek", loss_multiplier=1.0)
train(cfg, digits_cnn(), clients, privacy=priv)  # warm-up / JIT
t = time.perf_counter()
train(cfg, digits_cnn(), clients, privacy=priv)
print(time.perf_counter() - t)
"""


def cases(rng):
    x = rng.normal(size=(32, 16, 16, 16))
    cols = _numpy.im2col(x, 3, 3, 1, 1)
    out, idx = _numpy.maxpool_forward(x, 2, 2, 2, 2)
    z = rng.normal(size=(64, 256))
    dist = _numpy.pairwise_distances(z)
    g = rng.normal(size=dist.shape)
    return {
        "im2col": lambda m: m.im2col(x, 3, 3, 1, 1),
        "col2im": lambda m: m.col2im(cols, 16, 16, 16, 3, 3, 1, 1),
        "maxpool_forward": lambda m: m.maxpool_forward(x, 2, 2, 2, 2),
        "maxpool_backward": lambda m: m.maxpool_backward(out, idx, 16, 16),
        "pairwise_distances": lambda m: m.pairwise_distances(z),
        "pairwise_distances_backward": lambda m: m.pairwise_distances_backward(z, dist, g),
    }


def end_to_end(flag: str) -> float:
    env = dict(os.environ, SPLITBENCH_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)

    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        fn(_numba)  # compile
        t_np = min(timeit.repeat(lambda: fn(_numpy), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(_numba), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<30}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>10.2f}")
    if not args.skip_e2e:
        t_np, t_nb = end_to_end("0"), end_to_end("1")
        print(f"{'FSL epoch (digits_cnn, NoPeek)':<30}{t_np * 1e3:>12.1f}{t_nb * 1e3:>12.1f}{t_np / t_nb:>10.2f}")


if __name__ == "__main__":
    main()
