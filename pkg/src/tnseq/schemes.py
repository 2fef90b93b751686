"""Compositional schemes: typed box DAGs over a token sequence.

Five families are supported.  ``path`` merges in reading order, ``tree`` is a
balanced binary tree, ``syntax`` follows a supplied binary parse tree, and
``conv`` / ``syntaxconv`` add filter boxes in front of each layer of merges of
``tree`` / ``syntax``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

from .circuits import build_box_circuit
from .errors import ArgumentError, ParseError
from .tokens import PAD, log2_int, next_pow2, pad_pow2

FAMILIES = ("path", "tree", "syntax", "conv", "syntaxconv")
TREE_FAMILIES = ("syntax", "syntaxconv")
FACTORISABLE = ("path", "tree", "syntax")
FILTER_FAMILIES = ("conv", "syntaxconv")
SPECIES = ("uniform", "hierarchical", "rule")


# ---------------------------------------------------------------- parse trees

@dataclass(frozen=True)
class Leaf:
    token: str

    def leaves(self) -> list[str]:
        return [self.token]


@dataclass(frozen=True)
class Node:
    rule: str
    left: "ParseTree"
    right: "ParseTree"

    def leaves(self) -> list[str]:
        return self.left.leaves() + self.right.leaves()


ParseTree = Union[Leaf, Node]

_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def parse_tree_from_text(text: str) -> ParseTree:
    """Read ``leaf`` or ``(rule left right)`` s-expressions."""
    toks = _TOKEN_RE.findall(text)
    if not toks:
        raise ParseError("empty parse tree")
    pos = 0

    def expr():
        nonlocal pos
        if pos >= len(toks):
            raise ParseError("unbalanced parentheses: unexpected end of input")
        tok = toks[pos]
        pos += 1
        if tok == ")":
            raise ParseError(f"unbalanced parentheses: unexpected ')' at token {pos}")
        if tok != "(":
            return Leaf(tok)
        if pos >= len(toks) or toks[pos] in "()":
            raise ParseError("node must start with a rule label")
        rule = toks[pos]
        pos += 1
        children = []
        while pos < len(toks) and toks[pos] != ")":
            children.append(expr())
        if pos >= len(toks):
            raise ParseError("unbalanced parentheses: missing ')'")
        pos += 1
        if len(children) != 2:
            raise ParseError(f"node {rule!r} has {len(children)} children, expected 2")
        return Node(rule, children[0], children[1])

    tree = expr()
    if pos != len(toks):
        raise ParseError(f"trailing input after tree at token {pos + 1}")
    return tree


def tree_to_text(tree: ParseTree) -> str:
    if isinstance(tree, Leaf):
        return tree.token
    return f"({tree.rule} {tree_to_text(tree.left)} {tree_to_text(tree.right)})"


def tree_height(tree: ParseTree) -> int:
    if isinstance(tree, Leaf):
        return 0
    return 1 + max(tree_height(tree.left), tree_height(tree.right))


def tree_rules(tree: ParseTree) -> set[str]:
    if isinstance(tree, Leaf):
        return set()
    return {tree.rule} | tree_rules(tree.left) | tree_rules(tree.right)


def balanced_tree(tokens: Sequence[str], rule: str = "B") -> ParseTree:
    """Balanced tree pairing leaves left to right; len(tokens) must be a power of two."""
    layer: list[ParseTree] = [Leaf(t) for t in tokens]
    log2_int(len(layer))
    while len(layer) > 1:
        layer = [Node(rule, layer[i], layer[i + 1]) for i in range(0, len(layer), 2)]
    return layer[0]


def chain_tree(tokens: Sequence[str], rule: str = "P") -> ParseTree:
    """Left-branching chain ((w1 w2) w3) ... in reading order."""
    tree: ParseTree = Leaf(tokens[0])
    for t in tokens[1:]:
        tree = Node(rule, tree, Leaf(t))
    return tree


# ---------------------------------------------------------------- boxes

@dataclass(frozen=True)
class Box:
    kind: str  # word | merge | filter | classifier
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    index: int = -1
    token: str | None = None
    position: int | None = None  # leaf position of a word box
    depth: int | None = None  # distance from the leaves (merge/filter)
    rule: str | None = None


@dataclass(frozen=True)
class Scheme:
    family: str
    boxes: tuple[Box, ...]
    leaves: tuple[str, ...]  # tokens after any padding
    n_tokens: int  # unpadded length
    depth: int = 0

    @property
    def words(self) -> list[Box]:
        return [b for b in self.boxes if b.kind == "word"]

    @property
    def merges(self) -> list[Box]:
        return [b for b in self.boxes if b.kind == "merge"]

    @property
    def filters(self) -> list[Box]:
        return [b for b in self.boxes if b.kind == "filter"]

    @property
    def classifier(self) -> Box:
        return self.boxes[-1]

    def validate(self) -> None:
        """Check structural invariants; raises AssertionError on violation."""
        kinds = [b.kind for b in self.boxes]
        assert kinds.count("classifier") == 1 and kinds[-1] == "classifier"
        produced: set[int] = set()
        consumed: set[int] = set()
        arity = {"word": (0, 1), "merge": (2, 1), "filter": (2, 2), "classifier": (1, 1)}
        for b in self.boxes:
            assert (len(b.inputs), len(b.outputs)) == arity[b.kind], b
            for w in b.inputs:
                assert w in produced and w not in consumed, (b, w)
                consumed.add(w)
            for w in b.outputs:
                assert w not in produced, (b, w)
                produced.add(w)
        assert produced - consumed == set(self.classifier.outputs)


@dataclass(eq=False)
class _INode:
    """Node of an index tree; leaves have ``left is None``."""

    rule: str | None
    left: "_INode | None"
    right: "_INode | None"
    depth: int = 0
    first: int = 0  # leftmost leaf index

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _index_tree(tree: ParseTree, leaves: list, start: int = 0):
    if isinstance(tree, Leaf):
        node = _INode(None, None, None, 0, start)
        leaves.append(node)
        return node, start + 1
    left, mid = _index_tree(tree.left, leaves, start)
    right, end = _index_tree(tree.right, leaves, mid)
    return _INode(tree.rule, left, right, 1 + max(left.depth, right.depth), start), end


def _internal_nodes(n: _INode) -> Iterator[_INode]:
    if n.is_leaf:
        return
    yield from _internal_nodes(n.left)
    yield from _internal_nodes(n.right)
    yield n


@dataclass
class _Layer:
    depth: int
    filters: list[tuple[int, int, str | None]] = field(default_factory=list)  # frontier positions
    merges: list[_INode] = field(default_factory=list)


def _layers(root: _INode, leaves: list, with_filters: bool) -> list[_Layer]:
    """Bottom-up layers of merges, each preceded by its filter pairs.

    Filter pairs are adjacent frontier positions with at least one merge input
    of the layer, excluding the two inputs of a single merge; they are listed
    left to right, which is also their application order.
    """
    nodes = sorted(_internal_nodes(root), key=lambda n: (n.depth, n.first))
    frontier = list(leaves)
    layers = []
    i = 0
    while i < len(nodes):
        d = nodes[i].depth
        layer = _Layer(d)
        while i < len(nodes) and nodes[i].depth == d:
            layer.merges.append(nodes[i])
            i += 1
        if with_filters:
            owner = {}
            for m in layer.merges:
                owner[m.left] = m
                owner[m.right] = m
            for p in range(len(frontier) - 1):
                a, b = owner.get(frontier[p]), owner.get(frontier[p + 1])
                if (a is None and b is None) or a is b:
                    continue
                rule = (a if a is not None else b).rule
                layer.filters.append((p, p + 1, rule))
        for m in layer.merges:
            k = next(p for p, x in enumerate(frontier) if x is m.left)
            assert frontier[k + 1] is m.right
            frontier[k : k + 2] = [m]
        layers.append(layer)
    return layers


def build_scheme(family: str, tokens: Sequence[str], tree: ParseTree | None = None) -> Scheme:
    """Build the box DAG of ``family`` for ``tokens``.

    ``tree`` and ``conv`` pad on the right with PAD to a power of two.
    """
    if family not in FAMILIES:
        raise ArgumentError(f"unknown family {family!r}")
    tokens = list(tokens)
    if not tokens:
        raise ArgumentError("cannot build a scheme for an empty sequence")
    if family in ("tree", "conv"):
        leaves = pad_pow2(tokens)
        ptree = balanced_tree(leaves)
    elif family == "path":
        leaves = tokens
        ptree = chain_tree(leaves)
    else:
        if tree is None:
            raise ArgumentError(f"family {family!r} requires a parse tree")
        if tree.leaves() != tokens:
            raise ArgumentError(f"parse tree leaves {tree.leaves()} do not match tokens {tokens}")
        leaves = tokens
        ptree = tree
    rules = family in TREE_FAMILIES
    leaf_nodes: list[_INode] = []
    root, _ = _index_tree(ptree, leaf_nodes)

    boxes: list[Box] = []

    def add(**kw):
        boxes.append(Box(index=len(boxes), **kw))

    n = len(leaves)
    for pos, tok in enumerate(leaves):
        add(kind="word", inputs=(), outputs=(pos,), token=tok, position=pos)
    wire_of = {node: pos for pos, node in enumerate(leaf_nodes)}  # index-tree node -> current wire
    frontier = list(leaf_nodes)
    next_wire = n
    for layer in _layers(root, leaf_nodes, family in FILTER_FAMILIES):
        for p, p2, rule in layer.filters:
            a, b = frontier[p], frontier[p2]
            ins = (wire_of[a], wire_of[b])
            outs = (next_wire, next_wire + 1)
            next_wire += 2
            add(kind="filter", inputs=ins, outputs=outs, depth=layer.depth, rule=rule if rules else None)
            wire_of[a], wire_of[b] = outs
        for m in layer.merges:
            ins = (wire_of[m.left], wire_of[m.right])
            add(kind="merge", inputs=ins, outputs=(next_wire,), depth=m.depth, rule=m.rule if rules else None)
            wire_of[m] = next_wire
            next_wire += 1
            k = next(i for i, x in enumerate(frontier) if x is m.left)
            frontier[k : k + 2] = [m]
    (last,) = frontier
    add(kind="classifier", inputs=(wire_of[last],), outputs=(next_wire,))
    return Scheme(family, tuple(boxes), tuple(leaves), len(tokens), root.depth)


# ---------------------------------------------------------------- parameter sharing

def sharing_key(box: Box, species: str) -> str:
    """Parameter-set key of ``box`` under ``species``."""
    if species not in SPECIES:
        raise ArgumentError(f"unknown species {species!r}")
    if box.kind == "word":
        return f"w:{box.token}"
    if box.kind == "classifier":
        return "c"
    prefix = "m" if box.kind == "merge" else "f"
    if species == "uniform":
        return prefix
    if species == "hierarchical":
        return f"{prefix}:i={box.depth}"
    if box.rule is None:
        raise ArgumentError("rule species needs rule-annotated boxes (syntax families only)")
    return f"{prefix}:r={box.rule}"


def box_kind_of_key(key: str) -> str:
    return {"w": "word", "m": "merge", "f": "filter", "c": "classifier"}[key.split(":", 1)[0]]


def _merge_filter_groups(family, species, seq_len, n_rules, tree) -> tuple[int, int]:
    """Number of distinct merge and filter parameter sets."""
    if family == "ctns":
        family = "conv"
    has_filters = family in FILTER_FAMILIES
    if species == "rule" and family not in TREE_FAMILIES:
        raise ArgumentError("rule species is only defined for syntax families")
    if tree is not None and seq_len is None:
        seq_len = len(tree.leaves())
    if seq_len is not None and seq_len < 1:
        raise ArgumentError("sequence length must be >= 1")
    if family in ("tree", "conv") and seq_len is not None:
        seq_len = next_pow2(seq_len)
    if seq_len is not None and seq_len == 1:
        return 0, 0
    if species == "uniform":
        n_f = int(has_filters and (seq_len is None or seq_len >= 3))
        return 1, n_f
    if tree is not None and family in TREE_FAMILIES:
        leaf_nodes: list[_INode] = []
        root, _ = _index_tree(tree, leaf_nodes)
        layers = _layers(root, leaf_nodes, has_filters)
        if species == "hierarchical":
            return len(layers), sum(1 for layer in layers if layer.filters)
        m_rules = {m.rule for layer in layers for m in layer.merges}
        f_rules = {f[2] for layer in layers for f in layer.filters}
        return len(m_rules), len(f_rules)
    if species == "rule":
        if n_rules is None:
            raise ArgumentError("rule species needs n_rules or a tree")
        return n_rules, n_rules if has_filters else 0
    if seq_len is None:
        raise ArgumentError("hierarchical species needs the sequence length")
    if family == "path" or family in TREE_FAMILIES:
        # syntax depth is at most |S|-1 (right- or left-branching parse)
        return seq_len - 1, (seq_len - 2) if has_filters else 0
    n_layers = log2_int(seq_len)
    return n_layers, (n_layers - 1) if has_filters else 0


def count_parameters(family: str, species: str, q: int, n_layers: int, vocab_size: int,
                     seq_len: int | None = None, n_rules: int | None = None,
                     tree: ParseTree | None = None) -> int:
    """Total number of real parameters of a model species.

    Counts ``vocab_size`` word sets, the merge/filter sets implied by the
    species, and one classifier set.  For syntax families a supplied ``tree``
    gives the exact count; otherwise the depth bound |S|-1 (and |S|-2 for
    filters) or ``n_rules`` is used.  ``seq_len`` of 1 excludes merges and
    filters; omitting it for uniform species assumes they exist.
    """
    if vocab_size < 0:
        raise ArgumentError("vocab_size must be >= 0")
    n_m, n_f = _merge_filter_groups(family, species, seq_len, n_rules, tree)
    word = build_box_circuit("word", q, n_layers).arity
    merge = build_box_circuit("merge", q, n_layers).arity
    filt = build_box_circuit("filter", q, n_layers).arity
    clf = build_box_circuit("classifier", q, n_layers).arity
    return word * vocab_size + merge * n_m + filt * n_f + clf


# ---------------------------------------------------------------- merge schedules

@dataclass(frozen=True)
class MergeStep:
    i: int
    j: int
    box: Box | None
    pad: bool = False

    def pair(self) -> tuple[int, int]:
        return self.i, self.j


@dataclass(frozen=True)
class MergeSchedule:
    n_slots: int
    steps: tuple[MergeStep, ...]
    leaves: tuple[str, ...]  # slot contents, PAD-filled to n_slots

    def pairs(self) -> list[tuple[int, int]]:
        return [s.pair() for s in self.steps]


def merge_schedule(scheme: Scheme, n_slots: int) -> MergeSchedule:
    """Linearise a factorisable scheme onto an ``n_slots`` register.

    Each step merges slot j into slot i; the result ends in slot 0.  Pad steps
    (flagged) fill the schedule up to ``n_slots - 1`` steps on the last two
    slots and never touch the result.
    """
    if scheme.family not in FACTORISABLE:
        raise ArgumentError(f"{scheme.family!r} schemes cannot be factorised into a merge schedule")
    n = len(scheme.leaves)
    if n_slots < n:
        raise ArgumentError(f"register of {n_slots} slots is shorter than the sequence ({n})")
    slot = {b.outputs[0]: b.position for b in scheme.words}
    steps = []
    for b in scheme.merges:
        i, j = slot[b.inputs[0]], slot[b.inputs[1]]
        slot[b.outputs[0]] = i
        steps.append(MergeStep(i, j, b))
    while len(steps) < n_slots - 1:
        steps.append(MergeStep(n_slots - 2, n_slots - 1, None, pad=True))
    leaves = tuple(scheme.leaves) + (PAD,) * (n_slots - n)
    return MergeSchedule(n_slots, tuple(steps), leaves)
