"""Reverse-mode differentiation over pairwise complex einsums.

Cotangents follow the convention g = dL/dRe(z) + i dL/dIm(z) for a real loss
L.  For a holomorphic product C = einsum("X,Y->Z", A, B) this gives
g_A = einsum("Z,Y->X", g_C, conj(B)), so every recorded op only needs its
operands.  Operands must not repeat an index, and every index of an operand
must appear in the other operand or in the output; partial traces and
projections are written as contractions with constant identity or basis
tensors to stay inside that form.
"""
from __future__ import annotations

import numpy as np


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self._ops: list = []  # None for leaves/constants
        self.leaf_ids: dict = {}

    def _push(self, value, op) -> int:
        self.values.append(value)
        self._ops.append(op)
        return len(self.values) - 1

    def leaf(self, tag, value) -> int:
        """Differentiable input identified by ``tag`` (created once per tag)."""
        if tag not in self.leaf_ids:
            self.leaf_ids[tag] = self._push(np.asarray(value, dtype=np.complex128), None)
        return self.leaf_ids[tag]

    def const(self, value) -> int:
        return self._push(np.asarray(value, dtype=np.complex128), None)

    def einsum(self, spec: str, a: int, b: int) -> int:
        ins, out = spec.split("->")
        xa, xb = ins.split(",")
        for x, y in ((xa, xb), (xb, xa)):
            assert len(set(x)) == len(x), spec
            assert set(x) <= set(y) | set(out), spec
        value = np.einsum(spec, self.values[a], self.values[b])
        return self._push(value, ("einsum", xa, xb, out, a, b))

    def conj(self, a: int) -> int:
        return self._push(self.values[a].conj(), ("conj", a))

    def normalize(self, a: int) -> tuple[int, float]:
        """Unit-norm copy of node ``a``; also returns the squared norm."""
        v = self.values[a]
        n2 = float(np.vdot(v, v).real)
        n = np.sqrt(n2)
        return self._push(v / n if n2 > 0.0 else np.zeros_like(v), ("normalize", a, n)), n2

    def backward(self, node: int, grad) -> dict:
        """Propagate ``grad`` from ``node``; returns {leaf tag: cotangent}."""
        grads: list = [None] * len(self.values)
        grads[node] = np.asarray(grad, dtype=np.complex128)
        for k in range(node, -1, -1):
            g = grads[k]
            op = self._ops[k]
            if g is None or op is None:
                continue
            if op[0] == "einsum":
                _, xa, xb, out, a, b = op
                if self._ops[a] is not None or a in self._leaf_nodes():
                    ga = np.einsum(f"{out},{xb}->{xa}", g, self.values[b].conj())
                    grads[a] = ga if grads[a] is None else grads[a] + ga
                if self._ops[b] is not None or b in self._leaf_nodes():
                    gb = np.einsum(f"{out},{xa}->{xb}", g, self.values[a].conj())
                    grads[b] = gb if grads[b] is None else grads[b] + gb
            elif op[0] == "conj":
                a = op[1]
                grads[a] = g.conj() if grads[a] is None else grads[a] + g.conj()
            else:
                _, a, n = op
                if n == 0.0:
                    continue
                y = self.values[k]
                ga = (g - np.vdot(y, g).real * y) / n
                grads[a] = ga if grads[a] is None else grads[a] + ga
        return {tag: grads[i] for tag, i in self.leaf_ids.items() if grads[i] is not None}

    def _leaf_nodes(self) -> set:
        cache = getattr(self, "_leaf_cache", None)
        if cache is None or len(cache) != len(self.leaf_ids):
            cache = set(self.leaf_ids.values())
            self._leaf_cache = cache
        return cache
