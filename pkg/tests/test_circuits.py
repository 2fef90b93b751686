import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnseq.circuits import (
    GateSpec,
    build_box_circuit,
    gate_matrix,
    materialize_unitary,
    ry,
    unitary_vjp,
)
from tnseq.errors import ArgumentError

Z = np.diag([1.0, -1.0])


def test_documented_arities():
    assert build_box_circuit("word", 1, 1).arity == 3
    arities = [build_box_circuit(k, 1, 1).arity for k in ("merge", "filter", "classifier")]
    assert arities == [4, 4, 3]
    assert sum(arities) == 11
    layout = build_box_circuit("merge", 2, 2)
    assert layout.n_wires == 4 and layout.arity == 16


@pytest.mark.parametrize("q", [1, 2, 3])
@pytest.mark.parametrize("depth", [1, 2])
@pytest.mark.parametrize("kind", ["word", "merge", "filter", "classifier"])
def test_arity_formula(kind, q, depth):
    layout = build_box_circuit(kind, q, depth)
    n = q if kind in ("word", "classifier") else 2 * q
    assert layout.n_wires == n
    assert layout.arity == (3 * depth if n == 1 else 2 * n * depth)
    slots = {g.param_slot for g in layout.gates}
    assert slots == set(range(layout.arity))


def test_layout_metadata():
    merge = build_box_circuit("merge", 2, 1)
    assert merge.closed_wires == (2, 3)
    assert build_box_circuit("classifier", 3, 1).measured_wire == 0
    ring = [g.wires for g in build_box_circuit("filter", 2, 1).gates if g.kind == "CRX"]
    assert ring == [(0, 1), (1, 2), (2, 3), (3, 0)]


def test_bad_arguments():
    with pytest.raises(ArgumentError):
        build_box_circuit("merge", 0, 1)
    with pytest.raises(ArgumentError):
        build_box_circuit("word", 1, 0)
    with pytest.raises(ArgumentError):
        GateSpec("CRX", (1, 1), 0)
    with pytest.raises(ArgumentError):
        materialize_unitary(build_box_circuit("word", 1, 1), [0.0, 1.0])


@pytest.mark.parametrize("kind,q", [("word", 1), ("merge", 1), ("filter", 2), ("classifier", 2)])
def test_zero_params_give_identity(kind, q):
    layout = build_box_circuit(kind, q, 2)
    np.testing.assert_array_equal(materialize_unitary(layout, np.zeros(layout.arity)), np.eye(layout.dim))


def test_euler_block_ry_pi():
    U = materialize_unitary(build_box_circuit("word", 1, 1), [0.0, np.pi, 0.0])
    np.testing.assert_allclose(U, [[0, -1], [1, 0]], atol=1e-15)


def test_gate_order_earlier_first(rng):
    layout = build_box_circuit("merge", 1, 1)
    theta = rng.uniform(0, 2 * np.pi, layout.arity)
    expected = np.eye(4, dtype=complex)
    for g in layout.gates:
        expected = gate_matrix(g, 2, theta[g.param_slot]) @ expected
    np.testing.assert_allclose(materialize_unitary(layout, theta), expected, atol=1e-13)


def test_crx_matrix():
    th = 0.7
    m = gate_matrix(GateSpec("CRX", (0, 1), 0), 2, th)
    c, s = np.cos(th / 2), np.sin(th / 2)
    expected = np.eye(4, dtype=complex)
    expected[2:, 2:] = [[c, -1j * s], [-1j * s, c]]
    np.testing.assert_allclose(m, expected, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["word", "merge", "filter", "classifier"]),
       q=st.integers(1, 3), depth=st.integers(1, 2))
def test_unitarity(seed, kind, q, depth):
    layout = build_box_circuit(kind, q, depth)
    theta = np.random.default_rng(seed).uniform(-10, 10, layout.arity)
    U = materialize_unitary(layout, theta)
    assert np.abs(U.conj().T @ U - np.eye(layout.dim)).max() < 1e-12


def _global_phase_equal(a, b):
    k = np.unravel_index(np.argmax(np.abs(a)), a.shape)
    phase = b[k] / a[k]
    return abs(abs(phase) - 1) < 1e-12 and np.abs(a * phase - b).max() < 1e-12


@pytest.mark.parametrize("kind,q", [("word", 1), ("merge", 1), ("filter", 2), ("classifier", 2)])
def test_two_pi_shift(kind, q, rng):
    """Single-qubit rotations are 2pi-periodic up to a global sign.

    A controlled rotation picks up the sign only on its control=1 block, so a
    2pi shift of a CRX slot equals a Z on the control wire; its true period is 4pi.
    """
    layout = build_box_circuit(kind, q, 1)
    theta = rng.uniform(0, 2 * np.pi, layout.arity)
    U = materialize_unitary(layout, theta)
    for g in layout.gates:
        shifted = theta.copy()
        shifted[g.param_slot] += 2 * np.pi
        V = materialize_unitary(layout, shifted)
        if g.kind == "CRX":
            once = theta.copy()
            once[g.param_slot] += 4 * np.pi
            np.testing.assert_allclose(materialize_unitary(layout, once), U, atol=1e-12)
            zc = gate_matrix(GateSpec("RZ", (g.wires[0],), 0), layout.n_wires, np.pi)  # Z up to phase
            before = theta.copy()
            # Z on the control commutes with the CRX itself, so inserting it next to the gate is exact
            mats = [gate_matrix(h, layout.n_wires, before[h.param_slot]) for h in layout.gates]
            k = layout.gates.index(g)
            W = np.eye(layout.dim, dtype=complex)
            for i, m in enumerate(mats):
                W = m @ W
                if i == k:
                    W = zc @ W
            assert _global_phase_equal(W, V)
        else:
            assert _global_phase_equal(U, V)


def test_ry_matches_exponential():
    th = 1.3
    Y = np.array([[0, -1j], [1j, 0]])
    w, v = np.linalg.eigh(Y)
    expm = v @ np.diag(np.exp(-0.5j * th * w)) @ v.conj().T
    np.testing.assert_allclose(ry(th), expm, atol=1e-14)


@pytest.mark.parametrize("kind,q,depth", [("word", 1, 2), ("merge", 1, 1), ("filter", 2, 1), ("classifier", 2, 2)])
def test_unitary_vjp_finite_differences(kind, q, depth, rng):
    layout = build_box_circuit(kind, q, depth)
    theta = rng.uniform(0, 2 * np.pi, layout.arity)
    C = rng.normal(size=(layout.dim, layout.dim)) + 1j * rng.normal(size=(layout.dim, layout.dim))

    def loss(t):  # L = Re <C, U>, so dL/dRe U + i dL/dIm U = C
        return float(np.real(np.vdot(C, materialize_unitary(layout, t))))

    g = unitary_vjp(layout, theta, C)
    h = 1e-6
    for k in range(layout.arity):
        e = np.zeros(layout.arity)
        e[k] = h
        fd = (loss(theta + e) - loss(theta - e)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-6, abs=1e-8)
