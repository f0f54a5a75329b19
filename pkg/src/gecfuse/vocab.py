"""Word-level vocabulary with five reserved ids."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN = "<pad>", "<s>", "</s>", "<unk>", "<mask>"
RESERVED = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, MASK_TOKEN)
N_RESERVED = len(RESERVED)


class Vocab:
    """Bijection between tokens and ids; ids 0..4 are ``<pad> <s> </s> <unk> <mask>``."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_RESERVED]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos: list[str] = tokens
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = False) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def to_list(self) -> list[str]:
        return list(self.itos)


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int) -> Vocab:
    """Most frequent tokens (ties broken lexicographically) after the reserved five."""
    counts: Counter[str] = Counter()
    n_sent = 0
    for sent in corpus:
        n_sent += 1
        counts.update(t for t in sent if t not in RESERVED)
    if n_sent == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < N_RESERVED:
        raise ValueError(f"max_size must be at least {N_RESERVED}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(RESERVED) + [t for t, _ in ranked[: max_size - N_RESERVED]])
