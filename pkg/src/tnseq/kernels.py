"""Merge-schedule replay kernels for the factorisable families.

A batch of sequences is laid out on an ``(B, N)`` register of word states.
Step ``s`` of item ``b`` merges slot ``steps[b, s, 1]`` into slot
``steps[b, s, 0]`` with merge operator ``ops[op_idx[b, s]]``; inactive steps
(padding) are skipped.  Pure states are renormalised after every projected
merge, which leaves the final Born probabilities unchanged.

Two interchangeable backends implement every kernel: explicit loops compiled
with numba, and a pure-numpy path vectorised over the batch.  The backend is
picked from the ``TNSEQ_BACKEND`` environment variable (``numba`` or
``numpy``), defaulting to numba when it is importable.  ``TNSEQ_THREADS``
caps numba's worker threads.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
else:
    # try OpenMP before TBB: an outdated TBB otherwise triggers a warning on first launch
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

BACKENDS = ("numba", "numpy")
_backend = os.environ.get("TNSEQ_BACKEND", "numba" if numba is not None else "numpy").lower()
if _backend not in BACKENDS or (_backend == "numba" and numba is None):
    _backend = "numpy"

if numba is not None and os.environ.get("TNSEQ_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["TNSEQ_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    name = name.lower()
    if name not in BACKENDS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _backend = name


# ---------------------------------------------------------------- numba

if numba is not None:

    @njit(cache=True)
    def _merge_pure_nb(a, b, M, out):
        d = a.shape[0]
        n2 = 0.0
        for r in range(d):
            acc = 0j
            for u in range(d):
                au = a[u]
                for v in range(d):
                    acc += M[r, u * d + v] * (au * b[v])
            out[r] = acc
            n2 += acc.real * acc.real + acc.imag * acc.imag
        return n2

    @njit(cache=True)
    def _normalize_nb(out, n2, y):
        if n2 > 0.0:
            n = np.sqrt(n2)
            for r in range(out.shape[0]):
                y[r] = out[r] / n
            return n
        for r in range(out.shape[0]):
            y[r] = 0.0
        return 0.0

    @njit(cache=True)
    def _kron_into(A, Bm, R):
        d = A.shape[0]
        for i in range(d):
            for j in range(d):
                for k in range(d):
                    for m in range(d):
                        R[i * d + k, j * d + m] = A[i, j] * Bm[k, m]

    @njit(cache=True)
    def _matmul_into(A, Bm, out):
        n, m = A.shape
        p = Bm.shape[1]
        for i in range(n):
            for j in range(p):
                out[i, j] = 0j
            for k in range(m):
                a = A[i, k]
                for j in range(p):
                    out[i, j] += a * Bm[k, j]

    @njit(cache=True)
    def _merge_mixed_nb(ra, rb, U, out, R, T):
        """out = Tr_closed[U (ra x rb) U^dagger]; R and T are dd x dd scratch."""
        d = ra.shape[0]
        _kron_into(ra, rb, R)
        _matmul_into(U, R, T)
        for r in range(d):
            for rp in range(d):
                acc = 0j
                for k in range(d):
                    for y in range(d * d):
                        acc += T[r * d + k, y] * np.conj(U[rp * d + k, y])
                out[r, rp] = acc

    @njit(cache=True)
    def _forward_pure_item(b, reg, ops, steps, op_idx, active, xa, xb, ys, nrm, prob):
        d = reg.shape[2]
        out = np.empty(d, dtype=np.complex128)
        for s in range(steps.shape[1]):
            if not active[b, s]:
                continue
            i = steps[b, s, 0]
            j = steps[b, s, 1]
            xa[b, s] = reg[b, i]
            xb[b, s] = reg[b, j]
            n2 = _merge_pure_nb(reg[b, i], reg[b, j], ops[op_idx[b, s]], out)
            prob[b, s] = n2
            nrm[b, s] = _normalize_nb(out, n2, ys[b, s])
            reg[b, i] = ys[b, s]

    @njit(cache=True)
    def _pure_buffers(leaves, S):
        B, N, d = leaves.shape
        return (leaves.copy(), np.zeros((B, S, d), dtype=np.complex128),
                np.zeros((B, S, d), dtype=np.complex128), np.zeros((B, S, d), dtype=np.complex128),
                np.ones((B, S)), np.ones((B, S)))

    @njit(cache=True, parallel=True)
    def _forward_pure_nb(leaves, ops, steps, op_idx, active):
        reg, xa, xb, ys, nrm, prob = _pure_buffers(leaves, steps.shape[1])
        for b in prange(leaves.shape[0]):
            _forward_pure_item(b, reg, ops, steps, op_idx, active, xa, xb, ys, nrm, prob)
        return reg[:, 0].copy(), xa, xb, ys, nrm, prob

    @njit(cache=True)
    def _forward_pure_nb_serial(leaves, ops, steps, op_idx, active):
        reg, xa, xb, ys, nrm, prob = _pure_buffers(leaves, steps.shape[1])
        for b in range(leaves.shape[0]):
            _forward_pure_item(b, reg, ops, steps, op_idx, active, xa, xb, ys, nrm, prob)
        return reg[:, 0].copy(), xa, xb, ys, nrm, prob

    @njit(cache=True)
    def _backward_pure_nb(g_root, ops, steps, op_idx, active, xa, xb, ys, nrm, n_slots):
        B, d = g_root.shape
        S = steps.shape[1]
        K = ops.shape[0]
        g_reg = np.zeros((B, n_slots, d), dtype=np.complex128)
        g_ops = np.zeros((K, d, d * d), dtype=np.complex128)
        gx = np.empty(d * d, dtype=np.complex128)
        gy = np.empty(d, dtype=np.complex128)
        for b in range(B):
            for r in range(d):
                g_reg[b, 0, r] = g_root[b, r]
            for s in range(S - 1, -1, -1):
                if not active[b, s] or nrm[b, s] == 0.0:
                    continue
                i = steps[b, s, 0]
                j = steps[b, s, 1]
                k = op_idx[b, s]
                re = 0.0
                for r in range(d):
                    re += (np.conj(ys[b, s, r]) * g_reg[b, i, r]).real
                for r in range(d):
                    gy[r] = (g_reg[b, i, r] - re * ys[b, s, r]) / nrm[b, s]
                for u in range(d):
                    for v in range(d):
                        x = xa[b, s, u] * xb[b, s, v]
                        acc = 0j
                        for r in range(d):
                            g_ops[k, r, u * d + v] += gy[r] * np.conj(x)
                            acc += np.conj(ops[k, r, u * d + v]) * gy[r]
                        gx[u * d + v] = acc
                for u in range(d):
                    acc = 0j
                    for v in range(d):
                        acc += gx[u * d + v] * np.conj(xb[b, s, v])
                    g_reg[b, i, u] = acc
                for v in range(d):
                    acc = 0j
                    for u in range(d):
                        acc += gx[u * d + v] * np.conj(xa[b, s, u])
                    g_reg[b, j, v] += acc
        return g_reg, g_ops

    @njit(cache=True)
    def _forward_mixed_item(b, reg, ops, steps, op_idx, active, ra, rb):
        d = reg.shape[2]
        out = np.empty((d, d), dtype=np.complex128)
        R = np.empty((d * d, d * d), dtype=np.complex128)
        T = np.empty((d * d, d * d), dtype=np.complex128)
        for s in range(steps.shape[1]):
            if not active[b, s]:
                continue
            i = steps[b, s, 0]
            j = steps[b, s, 1]
            ra[b, s] = reg[b, i]
            rb[b, s] = reg[b, j]
            _merge_mixed_nb(reg[b, i], reg[b, j], ops[op_idx[b, s]], out, R, T)
            reg[b, i] = out

    @njit(cache=True, parallel=True)
    def _forward_mixed_nb(leaves, ops, steps, op_idx, active):
        B, N, d, _ = leaves.shape
        S = steps.shape[1]
        reg = leaves.copy()
        ra = np.zeros((B, S, d, d), dtype=np.complex128)
        rb = np.zeros((B, S, d, d), dtype=np.complex128)
        for b in prange(B):
            _forward_mixed_item(b, reg, ops, steps, op_idx, active, ra, rb)
        return reg[:, 0].copy(), ra, rb

    @njit(cache=True)
    def _forward_mixed_nb_serial(leaves, ops, steps, op_idx, active):
        B, N, d, _ = leaves.shape
        S = steps.shape[1]
        reg = leaves.copy()
        ra = np.zeros((B, S, d, d), dtype=np.complex128)
        rb = np.zeros((B, S, d, d), dtype=np.complex128)
        for b in range(B):
            _forward_mixed_item(b, reg, ops, steps, op_idx, active, ra, rb)
        return reg[:, 0].copy(), ra, rb

    @njit(cache=True)
    def _backward_mixed_nb(g_root, ops, steps, op_idx, active, ra, rb, n_slots):
        # with Gk = g (x) I on the kept/closed split of the merge output:
        #   dU += Gk U R^H + Gk^H U R,   dR = U^H Gk U,   R = ra (x) rb
        B, d, _ = g_root.shape
        S = steps.shape[1]
        K = ops.shape[0]
        dd = d * d
        g_reg = np.zeros((B, n_slots, d, d), dtype=np.complex128)
        g_ops = np.zeros((K, dd, dd), dtype=np.complex128)
        R = np.empty((dd, dd), dtype=np.complex128)
        UR = np.empty((dd, dd), dtype=np.complex128)
        URh = np.empty((dd, dd), dtype=np.complex128)
        GU = np.empty((dd, dd), dtype=np.complex128)
        gR = np.empty((dd, dd), dtype=np.complex128)
        for b in range(B):
            g_reg[b, 0] = g_root[b]
            for s in range(S - 1, -1, -1):
                if not active[b, s]:
                    continue
                i = steps[b, s, 0]
                j = steps[b, s, 1]
                k = op_idx[b, s]
                U = ops[k]
                G = g_reg[b, i]
                _kron_into(ra[b, s], rb[b, s], R)
                _matmul_into(U, R, UR)
                _matmul_into(U, R.conj().T.copy(), URh)
                for r in range(d):
                    for c in range(d):
                        for y in range(dd):
                            acc_a = 0j
                            acc_b = 0j
                            acc_u = 0j
                            for rp in range(d):
                                acc_a += G[r, rp] * URh[rp * d + c, y]
                                acc_b += np.conj(G[rp, r]) * UR[rp * d + c, y]
                                acc_u += G[r, rp] * U[rp * d + c, y]
                            g_ops[k, r * d + c, y] += acc_a + acc_b
                            GU[r * d + c, y] = acc_u
                for x in range(dd):
                    for y in range(dd):
                        acc = 0j
                        for z in range(dd):
                            acc += np.conj(U[z, x]) * GU[z, y]
                        gR[x, y] = acc
                for i1 in range(d):
                    for i2 in range(d):
                        acc = 0j
                        for j1 in range(d):
                            for j2 in range(d):
                                acc += gR[i1 * d + j1, i2 * d + j2] * np.conj(rb[b, s, j1, j2])
                        g_reg[b, i, i1, i2] = acc
                for j1 in range(d):
                    for j2 in range(d):
                        acc = 0j
                        for i1 in range(d):
                            for i2 in range(d):
                                acc += gR[i1 * d + j1, i2 * d + j2] * np.conj(ra[b, s, i1, i2])
                        g_reg[b, j, j1, j2] += acc
        return g_reg, g_ops


# ---------------------------------------------------------------- numpy

def _merge_pure_np(a, b, M):
    B, d = a.shape
    x = (a[:, :, None] * b[:, None, :]).reshape(B, d * d)
    out = np.einsum("brx,bx->br", M, x)
    return out, x, np.einsum("br,br->b", out.conj(), out).real


def _merge_mixed_np(ra, rb, U):
    B, d, _ = ra.shape
    R = np.einsum("bij,bkl->bikjl", ra, rb).reshape(B, d * d, d * d)
    T = U @ R
    T = T.reshape(B, d, d, d * d)
    Ur = U.reshape(B, d, d, d * d)
    return np.einsum("brky,bsky->brs", T, Ur.conj()), R


def _normalize_np(out, n2):
    ok = n2 > 0.0
    n = np.where(ok, np.sqrt(n2), 0.0)
    y = np.zeros_like(out)
    y[ok] = out[ok] / n[ok, None]
    return y, n


def _forward_pure_np(leaves, ops, steps, op_idx, active):
    B, N, d = leaves.shape
    S = steps.shape[1]
    reg = leaves.copy()
    xa = np.zeros((B, S, d), dtype=np.complex128)
    xb = np.zeros((B, S, d), dtype=np.complex128)
    ys = np.zeros((B, S, d), dtype=np.complex128)
    nrm = np.ones((B, S))
    prob = np.ones((B, S))
    ar = np.arange(B)
    for s in range(S):
        act = active[:, s]
        if not act.any():
            continue
        i, j = steps[:, s, 0], steps[:, s, 1]
        a, b = reg[ar, i], reg[ar, j]
        out, _, n2 = _merge_pure_np(a[act], b[act], ops[op_idx[act, s]])
        y, n = _normalize_np(out, n2)
        xa[act, s], xb[act, s], ys[act, s] = a[act], b[act], y
        prob[act, s] = n2
        nrm[act, s] = n
        reg[ar[act], i[act]] = y
    return reg[:, 0].copy(), xa, xb, ys, nrm, prob


def _backward_pure_np(g_root, ops, steps, op_idx, active, xa, xb, ys, nrm, n_slots):
    B, d = g_root.shape
    S = steps.shape[1]
    g_reg = np.zeros((B, n_slots, d), dtype=np.complex128)
    g_reg[:, 0] = g_root
    g_ops = np.zeros((B,) + ops.shape[1:] + (ops.shape[0],), dtype=np.complex128)
    ar = np.arange(B)
    for s in range(S - 1, -1, -1):
        act = active[:, s] & (nrm[:, s] > 0.0)
        if not act.any():
            continue
        bi, i, j, k = ar[act], steps[act, s, 0], steps[act, s, 1], op_idx[act, s]
        g = g_reg[bi, i]
        y = ys[act, s]
        re = np.einsum("br,br->b", y.conj(), g).real
        gy = (g - re[:, None] * y) / nrm[act, s][:, None]
        x = (xa[act, s][:, :, None] * xb[act, s][:, None, :]).reshape(-1, d * d)
        g_ops[bi, :, :, k] += gy[:, :, None] * x.conj()[:, None, :]
        gx = np.einsum("brx,br->bx", ops[k].conj(), gy).reshape(-1, d, d)
        g_reg[bi, i] = np.einsum("buv,bv->bu", gx, xb[act, s].conj())
        g_reg[bi, j] += np.einsum("buv,bu->bv", gx, xa[act, s].conj())
    return g_reg, np.moveaxis(g_ops.sum(axis=0), -1, 0)


def _forward_mixed_np(leaves, ops, steps, op_idx, active):
    B, N, d, _ = leaves.shape
    S = steps.shape[1]
    reg = leaves.copy()
    ra = np.zeros((B, S, d, d), dtype=np.complex128)
    rb = np.zeros((B, S, d, d), dtype=np.complex128)
    ar = np.arange(B)
    for s in range(S):
        act = active[:, s]
        if not act.any():
            continue
        bi, i, j = ar[act], steps[act, s, 0], steps[act, s, 1]
        a, b = reg[bi, i], reg[bi, j]
        out, _ = _merge_mixed_np(a, b, ops[op_idx[act, s]])
        ra[act, s], rb[act, s] = a, b
        reg[bi, i] = out
    return reg[:, 0].copy(), ra, rb


def _backward_mixed_np(g_root, ops, steps, op_idx, active, ra, rb, n_slots):
    B, d, _ = g_root.shape
    dd = d * d
    S = steps.shape[1]
    g_reg = np.zeros((B, n_slots, d, d), dtype=np.complex128)
    g_reg[:, 0] = g_root
    g_ops = np.zeros((B, dd, dd, ops.shape[0]), dtype=np.complex128)
    ar = np.arange(B)
    for s in range(S - 1, -1, -1):
        act = active[:, s]
        if not act.any():
            continue
        bi, i, j, k = ar[act], steps[act, s, 0], steps[act, s, 1], op_idx[act, s]
        U = ops[k]
        a, b = ra[act, s], rb[act, s]
        Gk = np.einsum("brs,kl->brksl", g_reg[bi, i], np.eye(d)).reshape(-1, dd, dd)
        R = np.einsum("bij,bkl->bikjl", a, b).reshape(-1, dd, dd)
        Uh = U.conj().transpose(0, 2, 1)
        g_ops[bi, :, :, k] += Gk @ (U @ R.conj().transpose(0, 2, 1)) + Gk.conj().transpose(0, 2, 1) @ (U @ R)
        gR = (Uh @ (Gk @ U)).reshape(-1, d, d, d, d)
        g_reg[bi, i] = np.einsum("bijkl,bjl->bik", gR, b.conj())
        g_reg[bi, j] += np.einsum("bijkl,bik->bjl", gR, a.conj())
    return g_reg, np.moveaxis(g_ops.sum(axis=0), -1, 0)


# ---------------------------------------------------------------- dispatch

def _prep(steps, op_idx, active):
    return (np.ascontiguousarray(steps, dtype=np.int64),
            np.ascontiguousarray(op_idx, dtype=np.int64),
            np.ascontiguousarray(active, dtype=np.bool_))


# below this batch size thread start-up costs more than the work it spreads
PARALLEL_MIN_BATCH = 16


def _pick(parallel, serial, numpy_fn, batch):
    if _backend != "numba":
        return numpy_fn
    return parallel if batch >= PARALLEL_MIN_BATCH else serial


def forward_pure(leaves, ops, steps, op_idx, active):
    """Returns (root, saved) with saved = (xa, xb, ys, nrm, prob)."""
    steps, op_idx, active = _prep(steps, op_idx, active)
    leaves = np.ascontiguousarray(leaves, dtype=np.complex128)
    ops = np.ascontiguousarray(ops, dtype=np.complex128)
    fn = _pick(_forward_pure_nb, _forward_pure_nb_serial, _forward_pure_np, leaves.shape[0])
    root, *saved = fn(leaves, ops, steps, op_idx, active)
    return root, tuple(saved)


def backward_pure(g_root, ops, steps, op_idx, active, saved, n_slots):
    """Returns (g_leaves, g_ops) for cotangent ``g_root`` of the root states."""
    steps, op_idx, active = _prep(steps, op_idx, active)
    xa, xb, ys, nrm, _ = saved
    fn = _backward_pure_nb if _backend == "numba" else _backward_pure_np
    return fn(np.ascontiguousarray(g_root, dtype=np.complex128), np.ascontiguousarray(ops),
              steps, op_idx, active, xa, xb, ys, nrm, n_slots)


def forward_mixed(leaves, ops, steps, op_idx, active):
    """Returns (root, saved) with saved = (ra, rb)."""
    steps, op_idx, active = _prep(steps, op_idx, active)
    leaves = np.ascontiguousarray(leaves, dtype=np.complex128)
    ops = np.ascontiguousarray(ops, dtype=np.complex128)
    fn = _pick(_forward_mixed_nb, _forward_mixed_nb_serial, _forward_mixed_np, leaves.shape[0])
    root, *saved = fn(leaves, ops, steps, op_idx, active)
    return root, tuple(saved)


def backward_mixed(g_root, ops, steps, op_idx, active, saved, n_slots):
    steps, op_idx, active = _prep(steps, op_idx, active)
    ra, rb = saved
    fn = _backward_mixed_nb if _backend == "numba" else _backward_mixed_np
    return fn(np.ascontiguousarray(g_root, dtype=np.complex128), np.ascontiguousarray(ops),
              steps, op_idx, active, ra, rb, n_slots)


def merge_pure(a, b, M):
    """One projected merge (M @ kron(a, b)) with the active backend's arithmetic.

    Returns the renormalised output (zero if the merge annihilates the state)
    and the squared norm before renormalisation.
    """
    a = np.ascontiguousarray(a, dtype=np.complex128)
    b = np.ascontiguousarray(b, dtype=np.complex128)
    M = np.ascontiguousarray(M, dtype=np.complex128)
    if _backend == "numba":
        out = np.empty(a.shape[0], dtype=np.complex128)
        y = np.empty_like(out)
        n2 = _merge_pure_nb(a, b, M, out)
        _normalize_nb(out, n2, y)
        return y, n2
    out, _, n2 = _merge_pure_np(a[None], b[None], M[None])
    y, _ = _normalize_np(out, n2)
    return y[0], float(n2[0])


def merge_mixed(ra, rb, U):
    """Tr_closed[U (ra x rb) U^dagger] with the active backend's arithmetic."""
    ra = np.ascontiguousarray(ra, dtype=np.complex128)
    rb = np.ascontiguousarray(rb, dtype=np.complex128)
    U = np.ascontiguousarray(U, dtype=np.complex128)
    if _backend == "numba":
        dd = ra.shape[0] ** 2
        out = np.empty_like(ra)
        _merge_mixed_nb(ra, rb, U, out, np.empty((dd, dd), np.complex128), np.empty((dd, dd), np.complex128))
        return out
    return _merge_mixed_np(ra[None], rb[None], U[None])[0][0]
