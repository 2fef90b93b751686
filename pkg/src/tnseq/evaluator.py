"""Binding circuits to schemes and contracting the resulting networks.

Factorisable families (path/tree/syntax) are evaluated by replaying a merge
schedule over a register of per-branch states (``kernels``).  The filter
families (conv/syntaxconv, and CTNS windows) cannot be factorised, so they are
contracted by a sweep that visits boxes in order of their rightmost leaf and
keeps one joint state over the wires that are still open; every contraction
is recorded on a ``Tape`` for the backward pass.

Postselected pure states are renormalised after every merge; the final Born
pair is renormalised as well, so this only guards against underflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .circuits import build_box_circuit, materialize_unitary, unitary_vjp
from .data import Vocabulary
from .errors import ArgumentError, ContractionSizeError, DegenerateStateError
from .schemes import (FACTORISABLE, FAMILIES, SPECIES, TREE_FAMILIES, Box, ParseTree, Scheme,
                      box_kind_of_key, build_scheme, merge_schedule, sharing_key)
from .tape import Tape
from .tokens import PAD, UNK, log2_int, next_pow2

MODEL_FAMILIES = FAMILIES + ("ctns",)
BOTS = ("postselect", "discard")
# squared norm below which a postselected branch counts as annihilated
DEGENERATE_TOL = 1e-30
# largest joint state (complex entries) a filter-family sweep may hold
MAX_FRONTIER_ELEMENTS = 2**22


@dataclass(frozen=True)
class ModelConfig:
    family: str
    species: str = "uniform"
    bot: str = "discard"
    q: int = 1
    n_layers: int = 1
    window: int | None = None  # CTNS only
    max_len: int | None = None  # hierarchical species: longest supported sequence
    rules: tuple[str, ...] = ()  # rule species: known rule labels

    def __post_init__(self):
        if self.family not in MODEL_FAMILIES:
            raise ArgumentError(f"unknown family {self.family!r}")
        if self.species not in SPECIES:
            raise ArgumentError(f"unknown species {self.species!r}")
        if self.bot not in BOTS:
            raise ArgumentError(f"unknown bot {self.bot!r}; expected postselect or discard")
        if self.q < 1 or self.n_layers < 1:
            raise ArgumentError("q and n_layers must be >= 1")
        if self.family == "ctns":
            if self.window is None:
                raise ArgumentError("ctns needs a window size")
            log2_int(self.window)
        elif self.window is not None:
            raise ArgumentError("window is only meaningful for ctns")
        if self.species == "rule" and self.family not in TREE_FAMILIES:
            raise ArgumentError("rule species needs a syntax family")
        if self.species == "hierarchical" and self.family != "ctns" and not self.max_len:
            raise ArgumentError("hierarchical species needs max_len")
        object.__setattr__(self, "rules", tuple(sorted(set(self.rules))))

    @property
    def dim(self) -> int:
        return 2**self.q

    @property
    def scheme_family(self) -> str:
        return "conv" if self.family == "ctns" else self.family

    def to_dict(self) -> dict:
        return {"family": self.family, "species": self.species, "bot": self.bot, "q": self.q,
                "n_layers": self.n_layers, "window": self.window, "max_len": self.max_len,
                "rules": list(self.rules)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(d["family"], d["species"], d["bot"], int(d["q"]), int(d["n_layers"]),
                   d.get("window"), d.get("max_len"), tuple(d.get("rules", ())))


def _depth_keys(cfg: ModelConfig) -> tuple[list[int], list[int]]:
    """Merge and filter depth indices a hierarchical model must cover."""
    fam = cfg.scheme_family
    n = cfg.window if cfg.family == "ctns" else cfg.max_len
    if fam in ("tree", "conv"):
        top = log2_int(next_pow2(n))
    else:
        top = n - 1
    merges = list(range(1, top + 1))
    filters = list(range(1, top)) if fam in ("conv", "syntaxconv") else []
    return merges, filters


def model_keys(cfg: ModelConfig, vocab: Vocabulary) -> list[str]:
    """All sharing keys of a model, in parameter-initialisation order.

    Word keys follow vocabulary id order, then merge keys, filter keys and
    the classifier.
    """
    keys = [f"w:{t}" for t in vocab.trainable_tokens()]
    has_f = cfg.scheme_family in ("conv", "syntaxconv")
    if cfg.species == "uniform":
        keys.append("m")
        if has_f:
            keys.append("f")
    elif cfg.species == "hierarchical":
        m, f = _depth_keys(cfg)
        keys += [f"m:i={i}" for i in m] + [f"f:i={i}" for i in f]
    else:
        rules = list(cfg.rules) + [UNK]
        keys += [f"m:r={r}" for r in rules]
        if has_f:
            keys += [f"f:r={r}" for r in rules]
    keys.append("c")
    return keys


def key_arity(cfg: ModelConfig, key: str) -> int:
    return build_box_circuit(box_kind_of_key(key), cfg.q, cfg.n_layers).arity


def init_parameters(cfg: ModelConfig, vocab: Vocabulary, seed: int) -> dict[str, np.ndarray]:
    """Uniform draws from [0, 2pi) for every key, in ``model_keys`` order."""
    rng = np.random.default_rng(seed)
    return {k: rng.uniform(0.0, 2 * np.pi, key_arity(cfg, k)) for k in model_keys(cfg, vocab)}


@dataclass
class Model:
    config: ModelConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]
    _prepared: dict = field(default_factory=dict, repr=False, compare=False)
    _unitaries: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for k, v in self.params.items():
            if np.shape(v) != (key_arity(self.config, k),):
                raise ArgumentError(f"parameter {k!r} has shape {np.shape(v)}, "
                                    f"expected ({key_arity(self.config, k)},)")

    @classmethod
    def create(cls, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> "Model":
        return cls(cfg, vocab, init_parameters(cfg, vocab, seed))

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        m = Model(self.config, self.vocab, params)
        m._prepared = self._prepared  # structure does not depend on values
        return m

    def copy(self) -> "Model":
        return self.with_params({k: v.copy() for k, v in self.params.items()})

    # -- key resolution
    def word_key(self, token: str) -> str | None:
        if token == PAD:
            return None
        return f"w:{self.vocab.resolve(token)}"

    def box_key(self, box: Box) -> str:
        if box.kind == "word":
            raise ArgumentError("word boxes resolve through word_key")
        key = sharing_key(box, self.config.species)
        if key in self.params:
            return key
        if self.config.species == "rule":
            return f"{key.split('=', 1)[0]}={UNK}"
        raise ArgumentError(f"model has no parameters for {key!r}; the sequence is deeper than "
                            f"the model supports (max_len={self.config.max_len})")

    def prepare(self, tokens: Sequence[str], tree: ParseTree | None = None) -> "Prepared":
        cache_key = (tuple(tokens), tree)
        p = self._prepared.get(cache_key)
        if p is None:
            p = _prepare(self, list(tokens), tree)
            if len(self._prepared) < 200_000:
                self._prepared[cache_key] = p
        return p


# ---------------------------------------------------------------- prepared items

@dataclass(frozen=True, eq=False)
class _Factorised:
    scheme: Scheme
    word_keys: tuple  # distinct word keys of the item
    slot_word: np.ndarray  # (n,) index into word_keys per register slot, -1 for PAD
    op_keys: tuple  # distinct merge keys
    steps: np.ndarray  # (n-1, 2) slot pairs (i, j): j merges into i
    step_op: np.ndarray  # (n-1,) index into op_keys
    step_box: np.ndarray  # (n-1,) scheme box index

    @property
    def n_slots(self) -> int:
        return len(self.slot_word)


@dataclass(frozen=True)
class _Swept:
    scheme: Scheme
    order: tuple  # boxes in sweep order, classifier excluded
    keys: tuple  # key per box in ``order`` (word keys may be None)
    purify: bool = False  # discard via a pure state that keeps closed wires until the readout


@dataclass(frozen=True)
class Prepared:
    family: str
    parts: tuple  # one _Factorised, or one _Swept per window


def _local_index(keys) -> tuple[tuple, np.ndarray]:
    """Distinct non-None keys in first-seen order and each entry's position (-1 for None)."""
    pos: dict = {}
    idx = np.array([-1 if k is None else pos.setdefault(k, len(pos)) for k in keys], dtype=np.int64)
    return tuple(pos), idx


def _prepare_factorised(model: Model, scheme: Scheme) -> _Factorised:
    sched = merge_schedule(scheme, len(scheme.leaves))
    real = [s for s in sched.steps if not s.pad]
    word_keys, slot_word = _local_index([model.word_key(t) for t in scheme.leaves])
    op_keys, step_op = _local_index([model.box_key(s.box) for s in real])
    steps = np.array([(s.i, s.j) for s in real], dtype=np.int64).reshape(-1, 2)
    boxes = np.array([s.box.index for s in real], dtype=np.int64)
    return _Factorised(scheme, word_keys, slot_word, op_keys, steps, step_op, boxes)


def sweep_order(scheme: Scheme) -> list[Box]:
    """Boxes (classifier excluded) ordered by rightmost leaf, then by index."""
    right: dict[int, int] = {}
    keyed = []
    for b in scheme.boxes[:-1]:
        r = b.position if b.kind == "word" else max(right[w] for w in b.inputs)
        for w in b.outputs:
            right[w] = r
        keyed.append((r, b.index, b))
    keyed.sort(key=lambda t: t[:2])
    return [b for _, _, b in keyed]


def frontier_width(order: Sequence[Box]) -> int:
    """Most wires open at once while contracting boxes in ``order``."""
    open_wires: set[int] = set()
    width = 0
    for b in order:
        open_wires.difference_update(b.inputs)
        open_wires.update(b.outputs)
        width = max(width, len(open_wires))
    return width


def _prepare_swept(model: Model, scheme: Scheme) -> _Swept:
    order = tuple(sweep_order(scheme))
    cfg = model.config
    axes = frontier_width(order)
    purify = False
    if cfg.bot == "discard":
        # a density over the open wires, or a pure state over every leaf: whichever is smaller
        purify = len(scheme.leaves) < 2 * axes
        axes = min(2 * axes, len(scheme.leaves))
    if cfg.dim**axes > MAX_FRONTIER_ELEMENTS:
        raise ContractionSizeError(
            f"{cfg.family} network over {len(scheme.leaves)} leaves needs a {cfg.dim}^{axes}-entry "
            f"intermediate (limit {MAX_FRONTIER_ELEMENTS}); use a shorter sequence, smaller q, "
            f"postselect, or the ctns family")
    keys = tuple(model.word_key(b.token) if b.kind == "word" else model.box_key(b) for b in order)
    return _Swept(scheme, order, keys, purify)


def ctns_windows(tokens: Sequence[str], w: int) -> list[list[str]]:
    """Length-``w`` windows at stride 1; shorter sequences give one padded window."""
    log2_int(w)
    tokens = list(tokens)
    if len(tokens) <= w:
        return [tokens + [PAD] * (w - len(tokens))]
    return [tokens[i : i + w] for i in range(len(tokens) - w + 1)]


def _prepare(model: Model, tokens: list[str], tree: ParseTree | None) -> Prepared:
    cfg = model.config
    if not tokens:
        raise ArgumentError("cannot evaluate an empty sequence")
    if cfg.family in TREE_FAMILIES and tree is None:
        raise ArgumentError(f"family {cfg.family!r} needs a parse tree")
    if cfg.family == "ctns":
        parts = tuple(_prepare_swept(model, build_scheme("conv", win)) for win in ctns_windows(tokens, cfg.window))
        return Prepared("ctns", parts)
    scheme = build_scheme(cfg.family, tokens, tree if cfg.family in TREE_FAMILIES else None)
    if cfg.family in FACTORISABLE:
        return Prepared(cfg.family, (_prepare_factorised(model, scheme),))
    return Prepared(cfg.family, (_prepare_swept(model, scheme),))


# ---------------------------------------------------------------- unitaries

class _Unitaries:
    """Lazily materialised unitaries of one parameter store.

    Materialised matrices are memoised on the model together with the bytes
    of the parameters they came from, so in-place edits are picked up.
    """

    def __init__(self, model: Model):
        self.model = model
        self.cache: dict[str, np.ndarray] = {}

    def __getitem__(self, key: str) -> np.ndarray:
        U = self.cache.get(key)
        if U is None:
            try:
                params = self.model.params[key]
            except KeyError:
                raise ArgumentError(f"model has no parameters for {key!r}") from None
            raw = np.asarray(params, dtype=np.float64).tobytes()
            hit = self.model._unitaries.get(key)
            if hit is not None and hit[0] == raw:
                U = hit[1]
            else:
                cfg = self.model.config
                layout = build_box_circuit(box_kind_of_key(key), cfg.q, cfg.n_layers)
                U = materialize_unitary(layout, params)
                U.setflags(write=False)
                self.model._unitaries[key] = (raw, U)
            self.cache[key] = U
        return U

    def word_state(self, key: str | None) -> np.ndarray:
        if key is None:
            e = np.zeros(self.model.config.dim, dtype=np.complex128)
            e[0] = 1.0
            return e
        return self[key][:, 0]


def _add(grads: dict, key: str, g: np.ndarray, shape) -> None:
    if key not in grads:
        grads[key] = np.zeros(shape, dtype=np.complex128)
    grads[key] += g


# ---------------------------------------------------------------- readout

def _readout_pure(phi: np.ndarray, Uc: np.ndarray, bot: str):
    """Unnormalised outcome weights (B, 2) of the measured qubit and the rotated state."""
    chi = phi @ Uc.T
    h = chi.shape[1] // 2
    if bot == "postselect":
        pu = np.abs(chi[:, [0, h]]) ** 2
    else:
        a = np.abs(chi) ** 2
        pu = np.stack([a[:, :h].sum(axis=1), a[:, h:].sum(axis=1)], axis=1)
    return pu, chi


def _readout_pure_backward(dpu, phi, chi, Uc, bot):
    h = chi.shape[1] // 2
    if bot == "postselect":
        gchi = np.zeros_like(chi)
        gchi[:, 0] = 2 * dpu[:, 0] * chi[:, 0]
        gchi[:, h] = 2 * dpu[:, 1] * chi[:, h]
    else:
        w = np.repeat(dpu, h, axis=1)
        gchi = 2 * w * chi
    gphi = gchi @ Uc.conj()
    gUc = gchi.T @ phi.conj()
    return gphi, gUc


def _readout_mixed(rho: np.ndarray, Uc: np.ndarray):
    sigma = Uc @ rho @ Uc.conj().T
    diag = np.einsum("bii->bi", sigma).real
    h = diag.shape[1] // 2
    return np.stack([diag[:, :h].sum(axis=1), diag[:, h:].sum(axis=1)], axis=1)


def _readout_mixed_backward(dpu, rho, Uc):
    h = Uc.shape[0] // 2
    w = np.repeat(dpu, h, axis=1).astype(np.complex128)
    G = np.einsum("bi,ij->bij", w, np.eye(Uc.shape[0]))  # real diagonal, Hermitian
    gUc =(G @ (Uc @ rho.conj().transpose(0, 2, 1)) + G @ (Uc @ rho)).sum(axis=0)
    grho = Uc.conj().T @ G @ Uc
    return grho, gUc


def _normalise_probs(pu: np.ndarray):
    total = pu[:, 0] + pu[:, 1]
    ok = total > DEGENERATE_TOL
    if ok.all():
        return pu / total[:, None], total, ok
    probs = np.full_like(pu, np.nan)
    probs[ok] = pu[ok] / total[ok, None]
    return probs, total, ok


def _pu_cotangent(dp, probs, total):
    """Cotangent of the unnormalised weights from that of the normalised pair."""
    return (dp - (dp * probs).sum(axis=1, keepdims=True)) / total[:, None]


# ---------------------------------------------------------------- batch results

class BatchResult:
    """Born pairs of a batch, with a handle for reverse-mode gradients.

    ``degenerate[b]`` marks items whose postselection annihilated the state;
    their probabilities are NaN and they receive no gradient.  ``bad_box[b]``
    is the offending box index (-1 when none).
    """

    def __init__(self, probs, degenerate, bad_box, backward):
        self.probs = probs
        self.degenerate = degenerate
        self.bad_box = bad_box
        self._backward = backward

    def backward(self, dprobs: np.ndarray) -> dict[str, np.ndarray]:
        """Unitary cotangents per key for the probability cotangent ``dprobs``."""
        if self._backward is None:
            raise ArgumentError("forward was run without gradient support")
        dprobs = np.where(self.degenerate[:, None], 0.0, np.asarray(dprobs, dtype=np.float64))
        return self._backward(dprobs)


def _factorised_batch(model: Model, parts: list[_Factorised], U: _Unitaries, need_grad: bool):
    cfg = model.config
    d = cfg.dim
    B = len(parts)
    N = max(p.n_slots for p in parts)
    S = N - 1
    mixed = cfg.bot == "discard"

    wkeys: list[str] = []
    widx_of: dict = {}
    okeys: list[str] = []
    oidx_of: dict = {}
    widx = np.full((B, N), -1, dtype=np.int64)
    Sp = max(S, 1)
    steps = np.zeros((B, Sp, 2), dtype=np.int64)
    op_idx = np.zeros((B, Sp), dtype=np.int64)
    active = np.zeros((B, Sp), dtype=np.bool_)
    box_of = np.full((B, Sp), -1, dtype=np.int64)
    for b, p in enumerate(parts):
        lut = np.array([widx_of.setdefault(k, len(widx_of)) for k in p.word_keys] + [-1], dtype=np.int64)
        widx[b, : p.n_slots] = lut[p.slot_word]
        n = len(p.step_op)
        if n:
            lut = np.array([oidx_of.setdefault(k, len(oidx_of)) for k in p.op_keys], dtype=np.int64)
            steps[b, :n] = p.steps
            op_idx[b, :n] = lut[p.step_op]
            active[b, :n] = True
            box_of[b, :n] = p.step_box
    wkeys = list(widx_of)
    okeys = list(oidx_of)
    table = np.zeros((len(wkeys) + 1, d), dtype=np.complex128)
    for i, k in enumerate(wkeys):
        table[i] = U.word_state(k)
    table[-1] = U.word_state(None)
    psi = table[widx]

    Us = np.stack([U[k] for k in okeys]) if okeys else np.zeros((1, d * d, d * d), dtype=np.complex128)
    Uc = U["c"]
    bad_box = np.full(B, -1, dtype=np.int64)

    if mixed:
        leaves = psi[..., :, None] * psi.conj()[..., None, :]
        if S > 0:
            root, saved = kernels.forward_mixed(leaves, Us, steps, op_idx, active)
        else:
            root, saved = leaves[:, 0].copy(), None
        pu = _readout_mixed(root, Uc)
        probs, total, ok = _normalise_probs(pu)
    else:
        ops = np.ascontiguousarray(Us.reshape(-1, d, d, d * d)[:, :, 0, :])
        if S > 0:
            root, saved = kernels.forward_pure(psi, ops, steps, op_idx, active)
            local = saved[4]
            if local.min() <= DEGENERATE_TOL:
                hit = active & (local <= DEGENERATE_TOL)
                for b in np.flatnonzero(hit.any(axis=1)):
                    bad_box[b] = box_of[b, np.flatnonzero(hit[b])[0]]
        else:
            root, saved = psi[:, 0].copy(), None
        pu, chi = _readout_pure(root, Uc, cfg.bot)
        probs, total, ok = _normalise_probs(pu)
        if (bad_box >= 0).any():
            ok &= bad_box < 0
            probs[~ok] = np.nan
    if not ok.all():
        bad_box = np.where(ok | (bad_box >= 0), bad_box, [p.scheme.classifier.index for p in parts])
    degenerate = ~ok

    if not need_grad:
        return BatchResult(probs, degenerate, bad_box, None)

    def backward(dp):
        grads: dict[str, np.ndarray] = {}
        safe_total = np.where(ok, total, 1.0)
        dpu = _pu_cotangent(dp, np.nan_to_num(probs), safe_total)
        dpu[~ok] = 0.0
        if mixed:
            groot, gUc = _readout_mixed_backward(dpu, root, Uc)
            if S > 0:
                gleaves, gops = kernels.backward_mixed(groot, Us, steps, op_idx, active, saved, N)
            else:
                gleaves = np.zeros(leaves.shape, dtype=np.complex128)
                gleaves[:, 0] = groot
                gops = np.zeros_like(Us)
            gpsi = np.einsum("bnij,bnj->bni", gleaves, psi) + np.einsum("bnji,bnj->bni", gleaves.conj(), psi)
            for k, key in enumerate(okeys):
                _add(grads, key, gops[k], (d * d, d * d))
        else:
            groot, gUc = _readout_pure_backward(dpu, root, chi, Uc, cfg.bot)
            if S > 0:
                gpsi, gops = kernels.backward_pure(groot, ops, steps, op_idx, active, saved, N)
            else:
                gpsi = np.zeros(psi.shape, dtype=np.complex128)
                gpsi[:, 0] = groot
                gops = np.zeros_like(ops)
            for k, key in enumerate(okeys):
                g = np.zeros((d, d, d * d), dtype=np.complex128)
                g[:, 0, :] = gops[k]
                _add(grads, key, g.reshape(d * d, d * d), (d * d, d * d))
        _add(grads, "c", gUc, (d, d))
        gw = np.zeros((len(wkeys) + 1, d), dtype=np.complex128)
        np.add.at(gw, widx.reshape(-1), gpsi.reshape(-1, d))
        for i, key in enumerate(wkeys):
            g = np.zeros((d, d), dtype=np.complex128)
            g[:, 0] = gw[i]
            _add(grads, key, g, (d, d))
        return grads

    return BatchResult(probs, degenerate, bad_box, backward)


# ---------------------------------------------------------------- sweep contraction

def _fresh(used: Iterable[str]) -> str:
    used = set(used)
    for c in "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ":
        if c not in used:
            return c
    raise ArgumentError("contraction frontier exceeds the einsum index alphabet")


def _sweep(part: _Swept, cfg: ModelConfig, U: _Unitaries):
    """Contract one filter-family network; returns (tape, root node, bad box or -1)."""
    d = cfg.dim
    mixed = cfg.bot == "discard" and not part.purify
    tape = Tape()
    e0 = np.zeros(d, dtype=np.complex128)
    e0[0] = 1.0
    e0_node = tape.const(e0)
    eye_node = tape.const(np.eye(d))
    state = tape.const(np.ones(()))
    wires: list = []  # wire id per axis (rows, then columns when mixed); None marks a closed wire
    rows: list[str] = []
    cols: list[str] = []

    def spec_state():
        return "".join(rows) + "".join(cols)

    def gate(key, pos, conj):
        nonlocal state
        tag = ("Uc" if conj else "U", key)
        G = U[key].reshape(d, d, d, d)
        node = tape.leaf(tag, G.conj() if conj else G)
        labels = cols if conj else rows
        a, b = labels[pos[0]], labels[pos[1]]
        x = _fresh(rows + cols)
        y = _fresh(rows + cols + [x])
        before = spec_state()
        labels[pos[0]], labels[pos[1]] = x, y
        state = tape.einsum(f"{before},{x}{y}{a}{b}->{spec_state()}", state, node)

    for box, key in zip(part.order, part.keys):
        if box.kind == "word":
            if key is None:
                psi = e0_node
                psic = e0_node
            else:
                psi = tape.leaf(("w", key), U.word_state(key))
                psic = tape.leaf(("wc", key), U.word_state(key).conj()) if mixed else None
            x = _fresh(rows + cols)
            if mixed:
                y = _fresh(rows + cols + [x])
                sig = tape.einsum(f"{x},{y}->{x}{y}", psi, psic)
                before = spec_state()
                rows.append(x)
                cols.append(y)
                state = tape.einsum(f"{before},{x}{y}->{spec_state()}", state, sig)
            else:
                before = spec_state()
                rows.append(x)
                state = tape.einsum(f"{before},{x}->{spec_state()}", state, psi)
            wires.append(box.outputs[0])
            continue
        pos = (wires.index(box.inputs[0]), wires.index(box.inputs[1]))
        gate(key, pos, False)
        if mixed:
            gate(key, pos, True)
        if box.kind == "filter":
            wires[pos[0]], wires[pos[1]] = box.outputs
            continue
        if part.purify:
            # the closed wire keeps its axis; it is traced out against the conjugate at the end
            wires[pos[1]] = None
            wires[pos[0]] = box.outputs[0]
            continue
        before = spec_state()
        r = rows.pop(pos[1])
        if mixed:
            c = cols.pop(pos[1])
            state = tape.einsum(f"{before},{r}{c}->{spec_state()}", state, eye_node)
        else:
            state = tape.einsum(f"{before},{r}->{spec_state()}", state, e0_node)
            state, n2 = tape.normalize(state)
            if n2 <= DEGENERATE_TOL:
                return tape, state, box.index
        wires.pop(pos[1])
        wires[pos[0]] = box.outputs[0]
    if part.purify:
        (k,) = [i for i, w in enumerate(wires) if w is not None]
        r = rows[k]
        c = _fresh(rows)
        other = "".join(rows).replace(r, c)
        state = tape.einsum(f"{''.join(rows)},{other}->{r}{c}", state, tape.conj(state))
    else:
        assert len(wires) == 1
    return tape, state, -1


def _swept_batch(model: Model, items: list[tuple], U: _Unitaries, need_grad: bool):
    """``items`` are (prepared, weight tuple) groups: one Born pair per group of windows."""
    cfg = model.config
    d = cfg.dim
    mixed = cfg.bot == "discard"
    Uc = U["c"]
    B = len(items)
    probs = np.zeros((B, 2))
    bad_box = np.full(B, -1, dtype=np.int64)
    records = []
    for b, parts in enumerate(items):
        recs = []
        for part in parts:
            tape, node, bad = _sweep(part, cfg, U)
            if bad >= 0:
                bad_box[b] = bad
                break
            root = tape.values[node][None]
            if mixed:
                pu = _readout_mixed(root, Uc)
                chi = None
            else:
                pu, chi = _readout_pure(root, Uc, cfg.bot)
            p, total, ok = _normalise_probs(pu)
            if not ok[0]:
                bad_box[b] = part.scheme.classifier.index
                break
            recs.append((tape, node, root, chi, p, total))
            probs[b] += p[0] / len(parts)
        records.append(recs)
    degenerate = bad_box >= 0
    probs[degenerate] = np.nan
    if not need_grad:
        return BatchResult(probs, degenerate, bad_box, None)

    def backward(dp):
        grads: dict[str, np.ndarray] = {}
        for b, recs in enumerate(records):
            if degenerate[b]:
                continue
            for tape, node, root, chi, p, total in recs:
                dpu = _pu_cotangent(dp[b : b + 1] / len(recs), p, total)
                if mixed:
                    groot, gUc = _readout_mixed_backward(dpu, root, Uc)
                else:
                    groot, gUc = _readout_pure_backward(dpu, root, chi, Uc, cfg.bot)
                _add(grads, "c", gUc, (d, d))
                for (kind, key), g in tape.backward(node, groot[0]).items():
                    if kind in ("U", "Uc"):
                        g = g.reshape(d * d, d * d)
                        _add(grads, key, g.conj() if kind == "Uc" else g, (d * d, d * d))
                    else:
                        gU = np.zeros((d, d), dtype=np.complex128)
                        gU[:, 0] = g.conj() if kind == "wc" else g
                        _add(grads, key, gU, (d, d))
        return grads

    return BatchResult(probs, degenerate, bad_box, backward)


# ---------------------------------------------------------------- public API

def forward_batch(model: Model, prepared: Sequence[Prepared], need_grad: bool = False,
                  unitaries: _Unitaries | None = None) -> BatchResult:
    """Evaluate many prepared sequences; items of a batch are independent."""
    if not prepared:
        raise ArgumentError("empty batch")
    U = unitaries or _Unitaries(model)
    if model.config.family in FACTORISABLE:
        return _factorised_batch(model, [p.parts[0] for p in prepared], U, need_grad)
    return _swept_batch(model, [p.parts for p in prepared], U, need_grad)


def _raise_degenerate(res: BatchResult, offset: int = 0):
    if res.degenerate.any():
        b = int(np.flatnonzero(res.degenerate)[0])
        box = int(res.bad_box[b])
        raise DegenerateStateError(f"postselection annihilated the state at box {box} (item {b + offset})",
                                   box=box, item=b + offset)


def forward(model: Model, tokens: Sequence[str], tree: ParseTree | None = None) -> tuple[float, float]:
    """Born pair (p0, p1) of one sequence."""
    res = forward_batch(model, [model.prepare(tokens, tree)])
    _raise_degenerate(res)
    return float(res.probs[0, 0]), float(res.probs[0, 1])


def forward_ctns(model: Model, tokens: Sequence[str], w: int | None = None) -> tuple[float, float]:
    """Mean Born pair over stride-1 windows of ``w`` tokens under the conv scheme."""
    cfg = model.config
    if w is not None and w != cfg.window:
        if cfg.family not in ("ctns", "conv"):
            raise ArgumentError("sliding windows need a conv or ctns model")
        cfg = ModelConfig("ctns", cfg.species, cfg.bot, cfg.q, cfg.n_layers, window=w)
        model = Model(cfg, model.vocab, model.params)
    elif cfg.family != "ctns":
        raise ArgumentError("forward_ctns needs a window size")
    return forward(model, tokens)


def param_gradients(model: Model, unitary_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Chain unitary cotangents through the circuits; keys without one get zeros."""
    cfg = model.config
    out = {}
    for key, theta in model.params.items():
        g = unitary_grads.get(key)
        if g is None:
            out[key] = np.zeros_like(theta)
            continue
        layout = build_box_circuit(box_kind_of_key(key), cfg.q, cfg.n_layers)
        out[key] = unitary_vjp(layout, theta, g)
    return out


def forward_recursive(model: Model, tokens: Sequence[str], tree: ParseTree | None = None) -> tuple[float, float]:
    """Reference evaluation of a factorisable scheme by direct recursion over its boxes.

    Uses the same single-merge arithmetic as the schedule replay, so the two
    agree bit for bit.
    """
    cfg = model.config
    if cfg.family not in FACTORISABLE:
        raise ArgumentError("recursive evaluation is defined for path/tree/syntax")
    scheme = build_scheme(cfg.family, tokens, tree if cfg.family in TREE_FAMILIES else None)
    U = _Unitaries(model)
    d = cfg.dim
    mixed = cfg.bot == "discard"
    val: dict[int, np.ndarray] = {}
    for box in scheme.boxes[:-1]:
        if box.kind == "word":
            psi = U.word_state(model.word_key(box.token))
            val[box.outputs[0]] = psi[:, None] * psi.conj()[None, :] if mixed else psi
            continue
        a, b = val.pop(box.inputs[0]), val.pop(box.inputs[1])
        Um = U[model.box_key(box)]
        if mixed:
            val[box.outputs[0]] = kernels.merge_mixed(a, b, Um)
        else:
            y, n2 = kernels.merge_pure(a, b, Um.reshape(d, d, d * d)[:, 0, :])
            if n2 <= DEGENERATE_TOL:
                raise DegenerateStateError(f"postselection annihilated the state at box {box.index}",
                                           box=box.index, item=0)
            val[box.outputs[0]] = y
    (root,) = val.values()
    if mixed:
        pu = _readout_mixed(root[None], U["c"])
    else:
        pu, _ = _readout_pure(root[None], U["c"], cfg.bot)
    probs, _, ok = _normalise_probs(pu)
    if not ok[0]:
        raise DegenerateStateError("readout on a zero-norm state", box=scheme.classifier.index, item=0)
    return float(probs[0, 0]), float(probs[0, 1])


def contraction_cost(family: str, bot: str, q: int, seq_len: int, window: int | None = None) -> float:
    """Asymptotic contraction-cost bound with wire dimension chi = 2**q.

    A single token costs only the classifier: chi**2 pure, chi**3 mixed.
    """
    if family not in MODEL_FAMILIES:
        raise ArgumentError(f"unknown family {family!r}")
    if bot not in BOTS:
        raise ArgumentError(f"unknown bot {bot!r}")
    if seq_len < 1 or q < 1:
        raise ArgumentError("need seq_len >= 1 and q >= 1")
    chi = 2.0**q
    if family == "ctns":
        if window is None:
            raise ArgumentError("ctns cost needs a window size")
        n_win = max(1, seq_len - window + 1)
        return n_win * contraction_cost("conv", bot, q, window)
    if seq_len == 1:
        return chi**3 if bot == "discard" else chi**2
    if family in ("conv", "syntaxconv"):
        L = math.log2(next_pow2(seq_len))
        base = chi**2 if bot == "discard" else chi
        return base ** (2 * L)
    if bot == "postselect":
        return seq_len * chi**3
    return seq_len * (chi**4 if family == "path" else chi**6)
