"""Compare the numba and numpy kernel backends, and time forward scaling.

    python benchmarks/bench_backends.py [--batch 256] [--length 64] [--repeats 3]

For each (bot, q) the script checks that both backends give the same Born
pairs and gradients, then reports the best-of-N time of a batched forward and
backward pass.  It finishes with the forward wall time of single sequences
against length and the fitted log-log exponent.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from tnseq import kernels
from tnseq.bench import BENCH_LENGTHS, scaling
from tnseq.data import Vocabulary
from tnseq.evaluator import Model, ModelConfig, forward_batch


def run_backend(model, prepared, name, repeats):
    kernels.set_backend(name)
    dp = np.linspace(-1, 1, 2 * len(prepared)).reshape(-1, 2)
    res = forward_batch(model, prepared, need_grad=True)
    grads = res.backward(dp)  # also triggers compilation
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        forward_batch(model, prepared, need_grad=True).backward(dp)
        best = min(best, time.perf_counter() - t0)
    return res.probs, grads, best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--length", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--family", default="tree", choices=["path", "tree"])
    a = ap.parse_args()

    vocab = Vocabulary.from_tokens("acgt")
    rng = np.random.default_rng(0)
    seqs = [list(rng.choice(list("acgt"), a.length)) for _ in range(a.batch)]
    print(f"{a.family}, batch {a.batch} x {a.length} tokens, forward+backward")
    print(f"{'bot':<11}{'q':>2} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for bot in ("postselect", "discard"):
        for q in (1, 2):
            model = Model.create(ModelConfig(a.family, "uniform", bot, q, 2), vocab, seed=1)
            prepared = [model.prepare(s) for s in seqs]
            p_nb, g_nb, t_nb = run_backend(model, prepared, "numba", a.repeats)
            p_np, g_np, t_np = run_backend(model, prepared, "numpy", a.repeats)
            diff = max(np.abs(p_nb - p_np).max(), max(np.abs(g_nb[k] - g_np[k]).max() for k in g_nb))
            print(f"{bot:<11}{q:>2} {t_nb * 1e3:10.2f} {t_np * 1e3:10.2f} {t_np / t_nb:8.1f} {diff:11.2e}")
    kernels.set_backend("numba")

    print("\nsingle-sequence forward wall time (ms), q=1")
    print(f"{'family':<7}{'bot':<11}" + "".join(f"{n:>8}" for n in BENCH_LENGTHS) + "  exponent")
    for fam in ("tree", "path"):
        for bot in ("postselect", "discard"):
            rows, exp = scaling(fam, bot)
            print(f"{fam:<7}{bot:<11}" + "".join(f"{r.seconds * 1e3:8.3f}" for r in rows) + f"  {exp:8.3f}")


if __name__ == "__main__":
    main()
