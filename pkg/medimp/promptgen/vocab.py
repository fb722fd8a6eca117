"""Word-level vocabulary and fixed-length tokenization for prompts."""
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from nltk.tokenize import wordpunct_tokenize

from medimp.exceptions import PromptError
from medimp.schemas import Prompt

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)
PAD_ID, UNK_ID, CLS_ID, SEP_ID = range(4)


def split_words(text: str) -> list[str]:
    """Lowercased word and punctuation tokens."""
    return [token.lower() for token in wordpunct_tokenize(text)]


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise PromptError(f"vocabulary must start with {SPECIALS}, got {tuple(tokens[:4])}")
        self.tokens = list(tokens)
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise PromptError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def to_list(self) -> list[str]:
        return list(self.tokens)


@dataclass(frozen=True)
class TokenizedText:
    ids: np.ndarray  # int64, length T
    mask: np.ndarray  # bool, true on non-pad positions

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(corpus: Iterable[Prompt | str]) -> Vocabulary:
    """Specials first, then tokens by descending frequency, ties broken lexicographically."""
    counts: Counter[str] = Counter()
    seen_any = False
    for item in corpus:
        seen_any = True
        counts.update(split_words(item.text if isinstance(item, Prompt) else item))
    if not seen_any:
        raise PromptError("cannot build a vocabulary from an empty corpus")
    ordered = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ordered)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> TokenizedText:
    if max_len < 3:
        raise PromptError(f"max_len must be at least 3, got {max_len}")
    body = [vocab.id_of(t) for t in split_words(text)][: max_len - 2]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(body) + 2] = [CLS_ID, *body, SEP_ID]
    return TokenizedText(ids=ids, mask=ids != PAD_ID)


def tokenize_batch(texts: Sequence[str], vocab: Vocabulary, max_len: int) -> TokenizedText:
    rows = [tokenize(t, vocab, max_len) for t in texts]
    return TokenizedText(ids=np.stack([r.ids for r in rows]), mask=np.stack([r.mask for r in rows]))


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Tokens of an id sequence without [PAD], [CLS] and [SEP]."""
    return [vocab.tokens[i] for i in ids if i not in (PAD_ID, CLS_ID, SEP_ID)]
