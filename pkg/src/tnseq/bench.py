"""Wall-clock measurements of forward evaluation and kernel backends."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import Vocabulary
from .evaluator import Model, ModelConfig, forward, forward_batch

BENCH_LENGTHS = (8, 16, 32, 64, 128, 256)


@dataclass(frozen=True)
class Timing:
    family: str
    bot: str
    q: int
    length: int
    seconds: float  # best-of-repeats time of one forward call


def _model(family: str, bot: str, q: int, seed: int) -> Model:
    vocab = Vocabulary.from_tokens(["a", "b", "c", "d"])
    cfg = ModelConfig(family, "uniform", bot, q, 1, window=4 if family == "ctns" else None)
    return Model.create(cfg, vocab, seed)


def time_forward(family: str, bot: str, q: int, length: int, repeats: int = 5,
                 seed: int = 0, min_time: float = 0.02) -> Timing:
    """Best-of-``repeats`` seconds for one ``forward`` call on a fresh sequence.

    Each repeat loops until ``min_time`` has elapsed so that short calls are
    not dominated by timer resolution.
    """
    model = _model(family, bot, q, seed)
    rng = np.random.default_rng(seed)
    tokens = list(rng.choice(["a", "b", "c", "d"], length))
    forward(model, tokens)  # warm-up (JIT, caches)
    best = np.inf
    for _ in range(repeats):
        n = 0
        t0 = time.perf_counter()
        while True:
            model._prepared.clear()  # include scheme construction in every call
            forward(model, tokens)
            n += 1
            dt = time.perf_counter() - t0
            if dt >= min_time:
                break
        best = min(best, dt / n)
    return Timing(family, bot, q, length, best)


def fit_exponent(lengths, seconds) -> float:
    """Slope of the least-squares line through (log length, log time)."""
    return float(np.polyfit(np.log(lengths), np.log(seconds), 1)[0])


def scaling(family: str, bot: str, q: int = 1, lengths=BENCH_LENGTHS, repeats: int = 5,
            seed: int = 0) -> tuple[list[Timing], float]:
    rows = [time_forward(family, bot, q, n, repeats, seed) for n in lengths]
    return rows, fit_exponent([r.length for r in rows], [r.seconds for r in rows])


def time_backends(family: str = "tree", bot: str = "postselect", q: int = 1, length: int = 64,
                  batch: int = 256, repeats: int = 3, seed: int = 0) -> dict[str, float]:
    """Seconds for one batched forward+backward pass under each available backend."""
    model = _model(family, bot, q, seed)
    rng = np.random.default_rng(seed)
    prepared = [model.prepare(list(rng.choice(["a", "b", "c", "d"], length))) for _ in range(batch)]
    previous = kernels.backend()
    out = {}
    try:
        for name in kernels.BACKENDS:
            try:
                kernels.set_backend(name)
            except RuntimeError:
                continue
            dp = np.ones((batch, 2))
            forward_batch(model, prepared, need_grad=True).backward(dp)  # warm-up
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                forward_batch(model, prepared, need_grad=True).backward(dp)
                best = min(best, time.perf_counter() - t0)
            out[name] = best
    finally:
        kernels.set_backend(previous)
    return out
