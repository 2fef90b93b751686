"""Parameterised circuits attached to scheme boxes.

Every box kind maps to the same layered ansatz.  On n >= 2 wires a layer is
an RY on every wire followed by a ring of CRX gates (control i, target
i+1 mod n, ascending control); a single wire uses an RZ RY RZ Euler layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ArgumentError

BOX_KINDS = ("word", "merge", "filter", "classifier")

_I2 = np.eye(2, dtype=np.complex128)
_P0 = np.array([[1, 0], [0, 0]], dtype=np.complex128)
_P1 = np.array([[0, 0], [0, 1]], dtype=np.complex128)


@dataclass(frozen=True)
class GateSpec:
    kind: str  # "RY", "RZ" or "CRX"
    wires: tuple[int, ...]
    param_slot: int

    def __post_init__(self):
        if self.kind == "CRX":
            if len(self.wires) != 2 or self.wires[0] == self.wires[1]:
                raise ArgumentError(f"CRX needs distinct (control, target), got {self.wires}")
        elif self.kind in ("RY", "RZ"):
            if len(self.wires) != 1:
                raise ArgumentError(f"{self.kind} acts on one wire, got {self.wires}")
        else:
            raise ArgumentError(f"unknown gate {self.kind!r}")


@dataclass(frozen=True)
class CircuitLayout:
    box_kind: str
    n_wires: int
    gates: tuple[GateSpec, ...]
    arity: int
    closed_wires: tuple[int, ...] = ()  # outputs consumed by the bottom effect
    measured_wire: int | None = None

    @property
    def dim(self) -> int:
        return 2**self.n_wires


@lru_cache(maxsize=None)
def build_box_circuit(kind: str, q: int, n_layers: int) -> CircuitLayout:
    """Gate layout of a ``kind`` box with ``q`` qubits per wire and ``n_layers`` layers."""
    if kind not in BOX_KINDS:
        raise ArgumentError(f"unknown box kind {kind!r}")
    if q < 1 or n_layers < 1:
        raise ArgumentError(f"need q >= 1 and n_layers >= 1, got q={q}, n_layers={n_layers}")
    n = q if kind in ("word", "classifier") else 2 * q
    gates = []
    slot = 0
    for _ in range(n_layers):
        if n == 1:
            for g in ("RZ", "RY", "RZ"):
                gates.append(GateSpec(g, (0,), slot))
                slot += 1
            continue
        for w in range(n):
            gates.append(GateSpec("RY", (w,), slot))
            slot += 1
        for c in range(n):
            gates.append(GateSpec("CRX", (c, (c + 1) % n), slot))
            slot += 1
    closed = tuple(range(q, 2 * q)) if kind == "merge" else ()
    measured = 0 if kind == "classifier" else None
    return CircuitLayout(kind, n, tuple(gates), slot, closed, measured)


def ry(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def rz(theta: float) -> np.ndarray:
    e = np.exp(-0.5j * theta)
    return np.array([[e, 0], [0, e.conjugate()]], dtype=np.complex128)


def rx(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)


def _dry(theta):
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return 0.5 * np.array([[-s, -c], [c, -s]], dtype=np.complex128)


def _drz(theta):
    e = np.exp(-0.5j * theta)
    return np.array([[-0.5j * e, 0], [0, 0.5j * e.conjugate()]], dtype=np.complex128)


def _drx(theta):
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return 0.5 * np.array([[-s, -1j * c], [-1j * c, -s]], dtype=np.complex128)


def _embed(n: int, ops: dict) -> np.ndarray:
    out = np.ones((1, 1), dtype=np.complex128)
    for w in range(n):
        out = np.kron(out, ops.get(w, _I2))
    return out


def gate_matrix(gate: GateSpec, n: int, theta: float, derivative: bool = False) -> np.ndarray:
    """Full 2**n matrix of ``gate`` (or its derivative in ``theta``)."""
    if gate.kind == "RY":
        return _embed(n, {gate.wires[0]: (_dry if derivative else ry)(theta)})
    if gate.kind == "RZ":
        return _embed(n, {gate.wires[0]: (_drz if derivative else rz)(theta)})
    c, t = gate.wires
    if derivative:
        return _embed(n, {c: _P1, t: _drx(theta)})
    return _embed(n, {c: _P0}) + _embed(n, {c: _P1, t: rx(theta)})


def _check_params(layout: CircuitLayout, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.shape[0] != layout.arity:
        raise ArgumentError(f"{layout.box_kind} circuit takes {layout.arity} parameters, got {params.shape[0]}")
    return params


def _apply_local(T: np.ndarray, n: int, gate: GateSpec, theta: float) -> np.ndarray:
    """Act with ``gate`` on the first ``n`` (qubit) axes of ``T``."""
    if gate.kind == "CRX":
        c, t = gate.wires
        T = T.copy()
        idx = [slice(None)] * T.ndim
        idx[c] = 1
        sub = T[tuple(idx)]  # control axis removed; target index shifts if after control
        ax = t - (t > c)
        T[tuple(idx)] = np.moveaxis(np.tensordot(rx(theta), sub, axes=(1, ax)), 0, ax)
        return T
    m = ry(theta) if gate.kind == "RY" else rz(theta)
    w = gate.wires[0]
    return np.moveaxis(np.tensordot(m, T, axes=(1, w)), 0, w)


def materialize_unitary(layout: CircuitLayout, params) -> np.ndarray:
    """The 2**n x 2**n unitary; gates earlier in the layout act first."""
    params = _check_params(layout, params)
    n = layout.n_wires
    T = np.eye(layout.dim, dtype=np.complex128).reshape((2,) * n + (layout.dim,))
    for g in layout.gates:
        T = _apply_local(T, n, g, params[g.param_slot])
    return T.reshape(layout.dim, layout.dim)


def unitary_vjp(layout: CircuitLayout, params, grad_unitary) -> np.ndarray:
    """Pull a unitary cotangent back to the real parameters.

    ``grad_unitary`` is dL/dRe(U) + i dL/dIm(U) for a real loss L; the result
    is dL/dtheta.
    """
    params = _check_params(layout, params)
    n = layout.n_wires
    mats = [gate_matrix(g, n, params[g.param_slot]) for g in layout.gates]
    prefix = [np.eye(layout.dim, dtype=np.complex128)]
    for m in mats[:-1]:
        prefix.append(m @ prefix[-1])
    out = np.zeros(layout.arity)
    # env = (G_m ... G_{k+1})^H gU, walked from the last gate down
    env = np.asarray(grad_unitary, dtype=np.complex128)
    for k in range(len(mats) - 1, -1, -1):
        g = layout.gates[k]
        dG = gate_matrix(g, n, params[g.param_slot], derivative=True)
        B = env @ prefix[k].conj().T
        out[g.param_slot] += float(np.real(np.vdot(B, dG)))
        env = mats[k].conj().T @ env
    return out
