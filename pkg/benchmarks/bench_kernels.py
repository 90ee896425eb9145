"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py            # kernels only
    python benchmarks/bench_kernels.py --train    # plus a toy training run per backend

Every timed pair is first checked for agreement, so a fast but wrong
kernel fails loudly instead of producing a number.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mgrnet import _kernels as K


def workloads(rng):
    x = rng.normal(size=(64, 3 * 9, 16))
    d = K.NUMPY_IMPL["pdist"](x)
    g = rng.normal(size=d.shape)
    z = rng.normal(size=(256, 48))
    labels = rng.integers(0, 32, size=256)
    dz = K.NUMPY_IMPL["pdist"](z[None])[0]
    groups = rng.integers(0, 4, size=256)
    return {
        "pdist (64x27x16)": ("pdist", (x,)),
        "pdist_backward": ("pdist_backward", (x, d, g)),
        "batch_hard (256)": ("batch_hard", (dz, labels)),
        "retrieval (256x256)": ("retrieval", (dz, labels, groups, labels, groups)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12, equal_nan=True)


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, (name, args) in workloads(rng).items():
        f_np, f_nb = K.NUMPY_IMPL[name], K.NUMBA_IMPL[name]
        if not _same(f_np(*args), f_nb(*args)):  # also triggers compilation
            raise SystemExit(f"{name}: numba and numpy disagree")
        t_np = min(timeit.repeat(lambda: f_np(*args), number=5, repeat=repeat)) / 5
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=5, repeat=repeat)) / 5
        print(f"{label:<22}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


TRAIN_SNIPPET = """
import time
from mgrnet import gen_bank, split_bank
from mgrnet.experiment import preset
from mgrnet.training import train
from mgrnet import _kernels
c = preset("toy")
tr, _ = split_bank(gen_bank(c.data), c.holdout_per_identity)
train(tr, c.train.__class__(epochs=1, batch_size=6, identities_per_batch=2), c.model)  # warm-up
t = time.perf_counter()
train(tr, c.train, c.model, c.pipeline)
print(_kernels.backend(), time.perf_counter() - t)
"""


def bench_training() -> None:
    for flag in ("0", "1"):
        env = {**os.environ, "MGRNET_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"toy training, {backend:<6} backend: {float(secs):.2f}s")


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--train", action="store_true", help="also time a full toy training run per backend")
    args = p.parse_args(argv)
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed")
    bench_kernels(args.repeat)
    if args.train:
        bench_training()


if __name__ == "__main__":
    main()
