"""Reserved tokens and power-of-two padding."""
from .errors import ArgumentError

PAD = "<pad>"
UNK = "<unk>"
RESERVED = (PAD, UNK)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


def log2_int(n: int) -> int:
    """Exact log2 of a power of two."""
    if n < 1 or n & (n - 1):
        raise ArgumentError(f"{n} is not a power of two")
    return n.bit_length() - 1


def pad_pow2(tokens):
    """Right-pad with PAD to the smallest power of two >= len(tokens)."""
    tokens = list(tokens)
    if not tokens:
        raise ArgumentError("cannot pad an empty sequence")
    return tokens + [PAD] * (next_pow2(len(tokens)) - len(tokens))
