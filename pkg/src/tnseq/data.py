"""Labelled token-sequence corpora, vocabularies and a synthetic task.

Corpus files are UTF-8 TSV: ``label<TAB>space separated tokens`` with an
optional third column holding the parse tree as an s-expression.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, DataError, ParseError
from .schemes import Leaf, Node, ParseTree, parse_tree_from_text, tree_to_text
from .tokens import PAD, RESERVED, UNK, pad_pow2

__all__ = ["Example", "Vocabulary", "load_dataset", "save_dataset", "build_vocab", "pad_pow2",
           "majority_dataset", "random_parse_tree"]


@dataclass(frozen=True)
class Example:
    label: int
    tokens: tuple[str, ...]
    tree: ParseTree | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.label not in (0, 1):
            raise ArgumentError(f"label must be 0 or 1, got {self.label!r}")
        if not self.tokens:
            raise ArgumentError("example has no tokens")
        bad = [t for t in self.tokens if t in RESERVED]
        if bad:
            raise ArgumentError(f"reserved token {bad[0]!r} used as content")
        if self.tree is not None and tuple(self.tree.leaves()) != self.tokens:
            raise ArgumentError("parse tree leaves do not match the tokens")


@dataclass(frozen=True)
class Vocabulary:
    """Token ids: PAD is 0, UNK is 1, content tokens follow in first-seen order.

    With ``trainable_unk`` the UNK token owns word parameters and absorbs
    unseen tokens; otherwise unseen tokens are rejected.
    """

    tokens: tuple[str, ...]
    trainable_unk: bool = True

    def __post_init__(self):
        toks = tuple(self.tokens)
        if toks[:2] != (PAD, UNK) or any(t in RESERVED for t in toks[2:]):
            raise ArgumentError("vocabulary must start with PAD, UNK and contain them once")
        if len(set(toks)) != len(toks):
            raise ArgumentError("duplicate vocabulary entry")
        object.__setattr__(self, "tokens", toks)
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(toks)})

    @classmethod
    def from_tokens(cls, content: Iterable[str], trainable_unk: bool = True) -> "Vocabulary":
        seen = dict.fromkeys(content)
        for t in seen:
            if t in RESERVED:
                raise ArgumentError(f"reserved token {t!r} used as content")
        return cls((PAD, UNK) + tuple(seen), trainable_unk)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, 1)

    @property
    def content_tokens(self) -> tuple[str, ...]:
        return self.tokens[2:]

    def trainable_tokens(self) -> tuple[str, ...]:
        """Tokens that own word parameters, in id order."""
        return ((UNK,) if self.trainable_unk else ()) + self.content_tokens

    def resolve(self, token: str) -> str:
        """The token whose word parameters represent ``token``."""
        if token in self._ids and token != PAD:
            if token == UNK and not self.trainable_unk:
                raise ArgumentError("vocabulary has no UNK parameters")
            return token
        if token == PAD:
            raise ArgumentError("PAD has a fixed word state")
        if not self.trainable_unk:
            raise ArgumentError(f"token {token!r} is not in the closed vocabulary")
        return UNK

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "trainable_unk": self.trainable_unk}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tuple(d["tokens"]), bool(d.get("trainable_unk", True)))


def build_vocab(train: Sequence[Example]) -> Vocabulary:
    if not train:
        raise ArgumentError("cannot build a vocabulary from an empty split")
    return Vocabulary.from_tokens(t for ex in train for t in ex.tokens)


def _parse_row(line: str, lineno: int, has_trees: bool | None) -> Example:
    cols = line.split("\t")
    expected = {None: (2, 3), True: (3,), False: (2,)}[has_trees]
    if len(cols) not in expected:
        raise DataError(f"expected {' or '.join(map(str, expected))} tab-separated columns, got {len(cols)}", lineno)
    if cols[0].strip() not in ("0", "1"):
        raise DataError(f"label must be 0 or 1, got {cols[0]!r}", lineno)
    tokens = cols[1].split()
    if not tokens:
        raise DataError("no tokens", lineno)
    tree = None
    if len(cols) == 3:
        try:
            tree = parse_tree_from_text(cols[2])
        except ParseError as e:
            raise DataError(f"bad parse tree: {e}", lineno) from None
        if tree.leaves() != tokens:
            raise DataError(f"parse tree leaves {tree.leaves()} do not match tokens {tokens}", lineno)
    try:
        return Example(int(cols[0]), tuple(tokens), tree)
    except ArgumentError as e:
        raise DataError(str(e), lineno) from None


def load_dataset(path: str | Path, has_trees: bool | None = None) -> list[Example]:
    """Read a TSV corpus in file order; blank lines are skipped.

    ``has_trees`` forces (True) or forbids (False) the tree column; None
    accepts either per row.
    """
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            out.append(_parse_row(line, lineno, has_trees))
    return out


def save_dataset(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            row = [str(ex.label), " ".join(ex.tokens)]
            if ex.tree is not None:
                row.append(tree_to_text(ex.tree))
            fh.write("\t".join(row) + "\n")


def random_parse_tree(tokens: Sequence[str], rng: np.random.Generator,
                      rules: Sequence[str] = ("FA", "BA")) -> ParseTree:
    """Uniformly split binary tree with rule labels drawn from ``rules``."""
    if len(tokens) == 1:
        return Leaf(tokens[0])
    k = int(rng.integers(1, len(tokens)))
    rule = rules[int(rng.integers(len(rules)))]
    return Node(rule, random_parse_tree(tokens[:k], rng, rules), random_parse_tree(tokens[k:], rng, rules))


def majority_dataset(n: int, length: int = 8, seed: int = 0, alphabet: tuple[str, str] = ("a", "b"),
                     with_trees: bool = False) -> list[Example]:
    """Binary sequences labelled 1 when ``alphabet[1]`` is the majority token.

    Tied sequences (even lengths) are redrawn so every label is unambiguous.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        bits = rng.integers(0, 2, length)
        ones = int(bits.sum())
        if 2 * ones == length:
            continue
        toks = tuple(alphabet[b] for b in bits)
        tree = random_parse_tree(toks, rng) if with_trees else None
        out.append(Example(int(2 * ones > length), toks, tree))
    return out
