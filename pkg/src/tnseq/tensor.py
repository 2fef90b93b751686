"""Dense complex tensor arithmetic for pure states and density operators.

Conventions: row-major index order, wire 0 is the most significant index.
A state over ``n`` wires is an ndarray whose shape lists the wire extents
(2 for a qubit, 2**q for a bundle of q qubits).  A density operator over the
same wires has shape ``extents + extents`` (row indices, then column indices).
"""
from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ArgumentError, DegenerateStateError, DimensionError

LETTERS = string.ascii_letters
ATOL = 1e-10


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True, eq=False)
class PureState:
    tensor: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.complex128)
        if not all(_is_pow2(e) for e in t.shape):
            raise DimensionError(f"wire extents must be powers of two, got {t.shape}")
        object.__setattr__(self, "tensor", t)

    @property
    def n_wires(self) -> int:
        return self.tensor.ndim

    @property
    def extents(self) -> tuple[int, ...]:
        return self.tensor.shape

    def norm2(self) -> float:
        return float(np.vdot(self.tensor, self.tensor).real)

    def vector(self) -> np.ndarray:
        return self.tensor.reshape(-1)

    @classmethod
    def zeros(cls, n_wires: int, extent: int = 2) -> "PureState":
        t = np.zeros((extent,) * n_wires, dtype=np.complex128)
        t[(0,) * n_wires] = 1.0
        return cls(t)

    @classmethod
    def from_vector(cls, vec, extents: Sequence[int], normalized=True) -> "PureState":
        return cls(np.asarray(vec, dtype=np.complex128).reshape(tuple(extents)), normalized)


@dataclass(frozen=True, eq=False)
class DensityOperator:
    tensor: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.complex128)
        n = t.ndim // 2
        if t.ndim % 2 or t.shape[:n] != t.shape[n:]:
            raise DimensionError(f"density tensor must have shape E+E, got {t.shape}")
        if not all(_is_pow2(e) for e in t.shape):
            raise DimensionError(f"wire extents must be powers of two, got {t.shape}")
        object.__setattr__(self, "tensor", t)

    @property
    def n_wires(self) -> int:
        return self.tensor.ndim // 2

    @property
    def extents(self) -> tuple[int, ...]:
        return self.tensor.shape[: self.n_wires]

    def matrix(self) -> np.ndarray:
        dim = int(np.prod(self.extents, dtype=np.int64))
        return self.tensor.reshape(dim, dim)

    def trace(self) -> complex:
        return complex(np.trace(self.matrix()))

    @classmethod
    def from_matrix(cls, mat, extents: Sequence[int]) -> "DensityOperator":
        ext = tuple(extents)
        return cls(np.asarray(mat, dtype=np.complex128).reshape(ext + ext))


def density_from_pure(psi: PureState) -> DensityOperator:
    """|psi><psi|, normalised by the squared norm of ``psi``."""
    v = psi.vector()
    n2 = psi.norm2()
    if n2 <= 0.0:
        raise DegenerateStateError("cannot form a density operator from a zero state")
    return DensityOperator.from_matrix(np.outer(v, v.conj()) / n2, psi.extents)


def _check_wires(wires: Sequence[int], n: int) -> list[int]:
    wires = [int(w) for w in wires]
    if len(set(wires)) != len(wires):
        raise ArgumentError(f"repeated wire in {wires}")
    for w in wires:
        if not 0 <= w < n:
            raise ArgumentError(f"wire {w} out of range for {n} wires")
    return wires


def contract(a, b, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over paired axes of ``a`` and ``b``.

    The result keeps the free axes of ``a`` followed by those of ``b``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    axes_a = [int(p[0]) for p in pairs]
    axes_b = [int(p[1]) for p in pairs]
    if len(set(axes_a)) != len(axes_a) or len(set(axes_b)) != len(axes_b):
        raise ArgumentError(f"axis repeated in pairs {list(pairs)}")
    for i, j in zip(axes_a, axes_b):
        if not (0 <= i < a.ndim and 0 <= j < b.ndim):
            raise ArgumentError(f"axis pair ({i}, {j}) out of range")
        if a.shape[i] != b.shape[j]:
            raise DimensionError(f"extent mismatch on pair ({i}, {j}): {a.shape[i]} != {b.shape[j]}")
    return np.tensordot(a, b, axes=(axes_a, axes_b))


def unitary_spec(n: int, wires: Sequence[int], offset: int = 0) -> tuple[str, str, str]:
    """Einsum index strings (gate, tensor, result) for acting on ``wires``.

    The tensor has ``n`` axes labelled from ``offset``; the gate carries output
    labels first, then input labels.
    """
    k = len(wires)
    axes = list(LETTERS[offset : offset + n])
    fresh = LETTERS[offset + n : offset + n + k]
    gate = "".join(fresh) + "".join(axes[w] for w in wires)
    out = axes.copy()
    for w, f in zip(wires, fresh):
        out[w] = f
    return gate, "".join(axes), "".join(out)


def _gate_tensor(U, extents: Sequence[int]) -> np.ndarray:
    U = np.asarray(U, dtype=np.complex128)
    dim = int(np.prod(extents, dtype=np.int64))
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise DimensionError(f"unitary must be square, got shape {U.shape}")
    if U.shape[0] != dim:
        raise DimensionError(f"unitary of size {U.shape[0]} does not match wires of total extent {dim}")
    return U.reshape(tuple(extents) * 2)


def apply_unitary(state, U, wires: Sequence[int]):
    """Apply ``U`` to ``wires``: U psi for pure states, U rho U^dagger for densities."""
    if isinstance(state, PureState):
        n = state.n_wires
        wires = _check_wires(wires, n)
        G = _gate_tensor(U, [state.extents[w] for w in wires])
        g, t, o = unitary_spec(n, wires)
        return PureState(np.einsum(f"{g},{t}->{o}", G, state.tensor), state.normalized)
    if isinstance(state, DensityOperator):
        n = state.n_wires
        wires = _check_wires(wires, n)
        G = _gate_tensor(U, [state.extents[w] for w in wires])
        g, t, o = unitary_spec(2 * n, wires)
        rho = np.einsum(f"{g},{t}->{o}", G, state.tensor)
        g, t, o = unitary_spec(2 * n, [w + n for w in wires])
        rho = np.einsum(f"{g},{t}->{o}", G.conj(), rho)
        return DensityOperator(rho)
    raise ArgumentError(f"unsupported state type {type(state).__name__}")


def partial_trace(rho: DensityOperator, keep: Sequence[int]) -> DensityOperator | complex:
    """Reduced density operator on ``keep`` (original relative order).

    Keeping no wires returns the scalar trace.
    """
    n = rho.n_wires
    keep = sorted(_check_wires(keep, n))
    rows = list(LETTERS[:n])
    cols = list(LETTERS[n : 2 * n])
    for w in range(n):
        if w not in keep:
            cols[w] = rows[w]
    out = "".join(rows[w] for w in keep) + "".join(cols[w] for w in keep)
    res = np.einsum(f"{''.join(rows)}{''.join(cols)}->{out}", rho.tensor)
    if not keep:
        return complex(res)
    return DensityOperator(res)


def project_all_zero(state: PureState, wires: Sequence[int]) -> PureState:
    """Fix ``wires`` to basis index 0 and drop them; the result is unnormalised."""
    wires = _check_wires(wires, state.n_wires)
    index = tuple(0 if w in wires else slice(None) for w in range(state.n_wires))
    return PureState(state.tensor[index].copy(), normalized=False)


def born_readout(state, wire: int) -> tuple[float, float]:
    """Born probabilities (p0, p1) of a qubit wire, all other wires marginalised.

    Unnormalised pure states are renormalised by their squared norm and
    density operators by their trace.
    """
    n = state.n_wires
    if n < 1:
        raise ArgumentError("state has no wires")
    (wire,) = _check_wires([wire], n)
    if state.extents[wire] != 2:
        raise DimensionError(f"readout wire must be a qubit, extent is {state.extents[wire]}")
    if isinstance(state, PureState):
        t = np.moveaxis(state.tensor, wire, 0).reshape(2, -1)
        p = np.einsum("ij,ij->i", t.conj(), t).real
    elif isinstance(state, DensityOperator):
        m = np.moveaxis(state.tensor, (wire, wire + n), (0, 1))
        dim = m.size // 4
        rest = int(round(np.sqrt(dim)))
        p = np.einsum("aaii->a", m.reshape(2, 2, rest, rest)).real
    else:
        raise ArgumentError(f"unsupported state type {type(state).__name__}")
    total = float(p.sum())
    if not total > 0.0:
        raise DegenerateStateError("readout on a zero-norm state")
    return float(p[0] / total), float(p[1] / total)
