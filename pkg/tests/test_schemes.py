import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnseq.circuits import build_box_circuit
from tnseq.data import random_parse_tree
from tnseq.errors import ArgumentError, ParseError
from tnseq.schemes import (
    FAMILIES,
    Leaf,
    Node,
    balanced_tree,
    build_scheme,
    chain_tree,
    count_parameters,
    merge_schedule,
    parse_tree_from_text,
    sharing_key,
    tree_to_text,
)
from tnseq.tokens import PAD


def _tokens(n):
    return [f"t{i}" for i in range(n)]


def _scheme(family, n, rng=None):
    toks = _tokens(n)
    tree = None
    if family in ("syntax", "syntaxconv"):
        tree = random_parse_tree(toks, rng or np.random.default_rng(n))
    return build_scheme(family, toks, tree)


# ---------------------------------------------------------------- parse trees

def test_parse_leaf_and_node():
    assert parse_tree_from_text("w") == Leaf("w")
    t = parse_tree_from_text("(FA (BA a b) c)")
    assert t == Node("FA", Node("BA", Leaf("a"), Leaf("b")), Leaf("c"))
    assert t.leaves() == ["a", "b", "c"]


@pytest.mark.parametrize("text", ["", "   ", "(FA a b", "FA a b)", "(FA a)", "(FA a b c)", "(FA a b) c", "()"])
def test_parse_errors(text):
    with pytest.raises(ParseError):
        parse_tree_from_text(text)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 20), seed=st.integers(0, 2**32 - 1))
def test_tree_text_round_trip(n, seed):
    t = random_parse_tree(_tokens(n), np.random.default_rng(seed))
    assert parse_tree_from_text(tree_to_text(t)) == t


def _shape(scheme, with_order):
    """Canonical form of the merge tree: depth-annotated, leaves anonymous."""
    made = {}
    for b in scheme.boxes:
        if b.kind == "word":
            made[b.outputs[0]] = "L"
        elif b.kind == "merge":
            kids = [made[w] for w in b.inputs]
            if not with_order:
                kids.sort()
            made[b.outputs[0]] = f"M{b.depth}({','.join(kids)})"
        elif b.kind == "classifier":
            return made[b.inputs[0]]


def test_right_branching_syntax_is_path():
    tree = parse_tree_from_text("(R a (R b (R c d)))")
    syn = build_scheme("syntax", list("abcd"), tree)
    path = build_scheme("path", list("abcd"))
    assert _shape(syn, with_order=False) == _shape(path, with_order=False)


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_balanced_syntax_is_tree(n):
    toks = _tokens(n)
    syn = build_scheme("syntax", toks, balanced_tree(toks))
    assert _shape(syn, True) == _shape(build_scheme("tree", toks), True)


# ---------------------------------------------------------------- build_scheme

def test_tree_eight_tokens():
    s = build_scheme("tree", _tokens(8))
    assert len(s.merges) == 7 and s.depth == 3
    assert sorted(b.depth for b in s.merges) == [1] * 4 + [2] * 2 + [3]


def test_conv_eight_tokens():
    s = build_scheme("conv", _tokens(8))
    assert len(s.merges) == 7
    assert [sum(f.depth == d for f in s.filters) for d in (1, 2, 3)] == [3, 1, 0]


def test_single_token_path():
    s = build_scheme("path", ["x"])
    assert len(s.merges) == 0 and [b.kind for b in s.boxes] == ["word", "classifier"]


def test_path_depths_follow_positions():
    s = build_scheme("path", _tokens(5))
    assert [m.depth for m in s.merges] == [1, 2, 3, 4]
    assert _shape(s, True) == "M4(M3(M2(M1(L,L),L),L),L)"


def test_tree_pads_to_power_of_two():
    s = build_scheme("tree", _tokens(5))
    assert s.leaves[5:] == (PAD,) * 3 and s.n_tokens == 5 and len(s.merges) == 7


def test_build_scheme_errors():
    with pytest.raises(ArgumentError):
        build_scheme("syntax", ["a", "b"])
    with pytest.raises(ArgumentError):
        build_scheme("syntax", ["a", "b"], parse_tree_from_text("(R a c)"))
    with pytest.raises(ArgumentError):
        build_scheme("tree", [])
    with pytest.raises(ArgumentError):
        build_scheme("mps", ["a"])


@pytest.mark.parametrize("family", FAMILIES)
def test_structure_for_all_lengths(family):
    rng = np.random.default_rng(0)
    for n in range(1, 65):
        s = _scheme(family, n, rng)
        s.validate()
        padded = len(s.leaves)
        assert len(s.merges) == padded - 1
        if family in ("path", "tree", "syntax"):
            assert not s.filters


@pytest.mark.parametrize("k", range(0, 9))
def test_conv_filter_count_up_to_256(k):
    n = 2**k
    s = build_scheme("conv", _tokens(n))
    assert len(s.merges) == n - 1
    assert len(s.filters) == n - (k + 1)
    for d in range(1, k + 1):
        m = sum(b.depth == d for b in s.merges)
        f = sum(b.depth == d for b in s.filters)
        assert f == m - 1


@pytest.mark.parametrize("family", ["conv", "syntaxconv"])
def test_filters_never_straddle_one_merge(family):
    rng = np.random.default_rng(7)
    for n in range(2, 33):
        s = _scheme(family, n, rng)
        # map each wire to the box that consumes it
        consumer = {w: b for b in s.boxes for w in b.inputs}
        producer = {w: b for b in s.boxes for w in b.outputs}
        for f in s.filters:
            a, b = (consumer[w] for w in f.outputs)
            assert not (a is b and a.kind == "merge"), f
            # filters precede the layer's merges
            for w in f.outputs:
                assert producer[w].index == f.index
        for layer_d in {m.depth for m in s.merges}:
            last_f = max((f.index for f in s.filters if f.depth == layer_d), default=-1)
            first_m = min(m.index for m in s.merges if m.depth == layer_d)
            assert last_f < first_m


def test_syntaxconv_filters_left_to_right():
    tree = parse_tree_from_text("(X (A a b) (B (C c d) e))")
    s = build_scheme("syntaxconv", list("abcde"), tree)
    # layer 1 merges (a b) and (c d); filters go on the pairs straddling them
    layer1 = [f for f in s.filters if f.depth == 1]
    wire_token = {b.outputs[0]: b.token for b in s.words}
    assert [tuple(wire_token[w] for w in f.inputs) for f in layer1] == [("b", "c"), ("d", "e")]
    assert [f.rule for f in layer1] == ["A", "C"]
    # filters sharing a wire: the one on earlier words comes first
    idx = [f.index for f in s.filters]
    assert idx == sorted(idx)


# ---------------------------------------------------------------- sharing keys

def test_sharing_key_examples():
    s = build_scheme("syntaxconv", list("abcd"), parse_tree_from_text("(FA (BA a b) (FA c d))"))
    top = [m for m in s.merges if m.depth == 2][0]
    assert sharing_key(top, "uniform") == "m"
    assert sharing_key(top, "rule") == "m:r=FA"
    f = s.filters[0]
    assert sharing_key(f, "hierarchical") == "f:i=1"
    assert sharing_key(s.words[0], "rule") == "w:a"
    assert sharing_key(s.classifier, "hierarchical") == "c"
    conv = build_scheme("conv", _tokens(8))
    f2 = [f for f in conv.filters if f.depth == 2][0]
    assert sharing_key(f2, "hierarchical") == "f:i=2"


def test_rule_species_needs_rules():
    s = build_scheme("tree", list("ab"))
    with pytest.raises(ArgumentError):
        sharing_key(s.merges[0], "rule")


@pytest.mark.parametrize("family", FAMILIES)
def test_uniform_has_one_merge_key(family):
    s = _scheme(family, 8)
    keys = {sharing_key(b, "uniform") for b in s.boxes if b.kind in ("merge", "filter")}
    assert keys == ({"m", "f"} if family in ("conv", "syntaxconv") else {"m"})


# ---------------------------------------------------------------- parameter counts

def test_reported_counts():
    assert count_parameters("conv", "uniform", 1, 1, 4) == 3 * 4 + 11 == 23
    assert count_parameters("ctns", "uniform", 1, 1, 4) == 23
    assert count_parameters("path", "uniform", 1, 1, 10) == 37
    for v in (4, 10):
        assert count_parameters("conv", "hierarchical", 1, 1, v, seq_len=64) == 3 * v + 47
    assert count_parameters("tree", "uniform", 1, 1, 4, seq_len=1) == 3 * 4 + 3


def _brute_force(family, species, q, depth, vocab, schemes):
    keys = set()
    for s in schemes:
        keys |= {sharing_key(b, species) for b in s.boxes if b.token != PAD}
    keys |= {f"w:{t}" for t in vocab}
    kind = {"w": "word", "m": "merge", "f": "filter", "c": "classifier"}
    return sum(build_box_circuit(kind[k.split(":")[0]], q, depth).arity for k in keys)


@pytest.mark.parametrize("q", [1, 2, 3])
@pytest.mark.parametrize("depth", [1, 2])
def test_counts_match_key_enumeration(q, depth):
    vocab = _tokens(6)
    rng = np.random.default_rng(q * 10 + depth)
    for family in FAMILIES:
        for n in (1, 2, 3, 5, 8, 16):
            for species in ("uniform", "hierarchical", "rule"):
                if species == "rule" and family not in ("syntax", "syntaxconv"):
                    continue
                if family in ("syntax", "syntaxconv"):
                    tree = random_parse_tree(vocab[:1] * n, rng, rules=("FA", "BA", "FC"))
                    s = build_scheme(family, vocab[:1] * n, tree)
                    got = count_parameters(family, species, q, depth, len(vocab), tree=tree)
                else:
                    s = build_scheme(family, vocab[:1] * n)
                    got = count_parameters(family, species, q, depth, len(vocab), seq_len=n)
                assert got == _brute_force(family, species, q, depth, vocab, [s]), (family, species, n)


def test_hierarchical_syntax_bound_covers_every_tree():
    rng = np.random.default_rng(3)
    for n in (2, 5, 9):
        bound = count_parameters("syntax", "hierarchical", 1, 1, 4, seq_len=n)
        for _ in range(20):
            tree = random_parse_tree(_tokens(n), rng)
            assert count_parameters("syntax", "hierarchical", 1, 1, 4, tree=tree) <= bound
        assert count_parameters("syntax", "hierarchical", 1, 1, 4, tree=chain_tree(_tokens(n))) == bound


@pytest.mark.parametrize("family", FAMILIES)
def test_species_ordering(family):
    rng = np.random.default_rng(1)
    for n in (2, 4, 8, 16):
        s = _scheme(family, n, rng)
        tree = None
        if family in ("syntax", "syntaxconv"):
            tree = random_parse_tree(list(s.leaves), rng)
            s = build_scheme(family, list(s.leaves), tree)
        kw = {"tree": tree} if tree is not None else {"seq_len": n}
        u = count_parameters(family, "uniform", 1, 1, 4, **kw)
        h = count_parameters(family, "hierarchical", 1, 1, 4, **kw)
        untied = 3 * 4 + 4 * (len(s.merges) + len(s.filters)) + 3
        assert u <= h <= untied


def test_count_errors():
    with pytest.raises(ArgumentError):
        count_parameters("tree", "rule", 1, 1, 4, seq_len=4)
    with pytest.raises(ArgumentError):
        count_parameters("path", "hierarchical", 1, 1, 4)


# ---------------------------------------------------------------- merge schedules

def test_schedule_examples():
    assert merge_schedule(build_scheme("path", list("abc")), 3).pairs() == [(0, 1), (0, 2)]
    assert merge_schedule(build_scheme("tree", list("abcd")), 4).pairs() == [(0, 1), (2, 3), (0, 2)]
    tree = parse_tree_from_text("(R a (R b c))")
    sched = merge_schedule(build_scheme("syntax", list("abc"), tree), 4)
    assert sched.pairs() == [(1, 2), (0, 1), (2, 3)]
    assert [s.pad for s in sched.steps] == [False, False, True]
    assert sched.leaves == ("a", "b", "c", PAD)


def test_schedule_rejects_conv():
    with pytest.raises(ArgumentError):
        merge_schedule(build_scheme("conv", list("abcd")), 4)
    with pytest.raises(ArgumentError):
        merge_schedule(build_scheme("path", list("abcd")), 3)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 24), extra=st.integers(0, 8), seed=st.integers(0, 2**32 - 1),
       family=st.sampled_from(["path", "tree", "syntax"]))
def test_schedule_invariants(n, extra, seed, family):
    s = _scheme(family, n, np.random.default_rng(seed))
    N = len(s.leaves) + extra
    sched = merge_schedule(s, N)
    assert len(sched.steps) == N - 1
    real = [st_ for st_ in sched.steps if not st_.pad]
    assert len(real) == len(s.merges)
    consumed = [st_.j for st_ in real]
    assert len(set(consumed)) == len(consumed) and 0 not in consumed
    # lineage of slot 0 is the real merges only: simulate on leaf sets
    sets = {i: {i} for i in range(N)}
    for st_ in real:
        sets[st_.i] = sets[st_.i] | sets.pop(st_.j)
    assert sets[0] == set(range(len(s.leaves)))
    # pad steps trail the real ones and never read a slot holding live data
    flags = [st_.pad for st_ in sched.steps]
    assert flags == sorted(flags)
    assert all(st_.j >= len(s.leaves) for st_ in sched.steps if st_.pad)
