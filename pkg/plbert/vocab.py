"""Phoneme and grapheme vocabularies.

Phonemes are the only input alphabet of the encoder; graphemes (whole,
case-folded words) exist only as P2G prediction targets.
"""

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Union

import regex

from .errors import ConfigError, DataError, FormatError

VOCAB_MAGIC = "PLBERT-VOCAB"
VOCAB_VERSION = "v1"

PAD_TOKEN = "<pad>"
MSK_TOKEN = "<msk>"
UNK_P_TOKEN = "<unk>"
PHONEME_SPECIALS = (PAD_TOKEN, MSK_TOKEN, UNK_P_TOKEN)
PAD, MSK, UNK_P = 0, 1, 2

PAD_G_TOKEN = "<pad>"
UNK_G_TOKEN = "<unk>"
GRAPHEME_SPECIALS = (PAD_G_TOKEN, UNK_G_TOKEN)
PAD_G, UNK_G = 0, 1

_WORDLIKE = regex.compile(r"[\p{L}\p{N}]")


def _check_token(token: str) -> None:
    if not token or any(ch.isspace() for ch in token):
        raise DataError(f"vocabulary tokens must be non-empty and whitespace-free: {token!r}")


@dataclass(frozen=True)
class _Vocab:
    tokens: tuple
    id_of: Dict[str, int] = field(init=False, repr=False, compare=False)

    kind = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        id_of = {}
        for i, token in enumerate(self.tokens):
            if token in id_of:
                raise DataError(f"duplicate {self.kind} token: {token!r}")
            id_of[token] = i
        object.__setattr__(self, "id_of", id_of)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class PhonemeVocab(_Vocab):
    """Phoneme inventory with PAD=0, MSK=1, UNK_P=2."""

    kind = "phoneme"

    @property
    def first_regular_id(self) -> int:
        return len(PHONEME_SPECIALS)

    def encode(self, phonemes: Iterable[str]) -> List[int]:
        return [self.id_of.get(p, UNK_P) for p in phonemes]


@dataclass(frozen=True)
class GraphemeVocab(_Vocab):
    """Whole-word vocabulary with PAD_G=0, UNK_G=1.

    Args:
        tokens: Specials followed by words in id order
        cutoff: Minimum corpus frequency a word needed to be included
    """

    cutoff: int = 1
    kind = "grapheme"

    def lookup(self, word: str) -> int:
        return self.id_of.get(word.casefold(), UNK_G)

    def encode(self, words: Iterable[str]) -> List[int]:
        return [self.lookup(w) for w in words]


Vocab = Union[PhonemeVocab, GraphemeVocab]


def build_phoneme_vocab(lexicon: Mapping[str, Sequence[str]]) -> PhonemeVocab:
    """Induce the phoneme inventory from every pronunciation in the lexicon."""
    if not lexicon:
        raise DataError("empty lexicon")

    symbols = set()
    for pronunciation in lexicon.values():
        symbols.update(pronunciation)
    for symbol in symbols:
        _check_token(symbol)
        if symbol in PHONEME_SPECIALS:
            raise DataError(f"lexicon uses a reserved phoneme symbol: {symbol!r}")

    return PhonemeVocab(tokens=PHONEME_SPECIALS + tuple(sorted(symbols)))


def build_grapheme_vocab(corpus: Iterable[str], cutoff: int = 1) -> GraphemeVocab:
    """Count case-folded words and keep those seen at least `cutoff` times.

    Words are ordered by descending frequency, then lexicographically.
    Punctuation-only tokens never enter the vocabulary.
    """
    if cutoff < 1:
        raise ConfigError(f"cutoff must be >= 1, got {cutoff}")

    counts = Counter(
        word.casefold() for word in corpus
        if word and _WORDLIKE.search(word) and word.casefold() not in GRAPHEME_SPECIALS
    )
    kept = sorted((w for w, c in counts.items() if c >= cutoff), key=lambda w: (-counts[w], w))
    for word in kept:
        _check_token(word)
    return GraphemeVocab(tokens=GRAPHEME_SPECIALS + tuple(kept), cutoff=cutoff)


def save_vocab(vocab: Vocab, path: Path) -> None:
    """Write `PLBERT-VOCAB v1 <kind> <size>` then one token per line in id order."""
    header = f"{VOCAB_MAGIC} {VOCAB_VERSION} {vocab.kind} {vocab.size}"
    if isinstance(vocab, GraphemeVocab):
        header += f" cutoff={vocab.cutoff}"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(header + "\n")
        for token in vocab.tokens:
            f.write(token + "\n")


def load_vocab(path: Path, kind: str = None) -> Vocab:
    """Read a vocabulary file written by `save_vocab`.

    Args:
        path: Vocabulary file
        kind: Expected kind ("phoneme" or "grapheme"); None accepts either

    Returns:
        PhonemeVocab or GraphemeVocab
    """
    try:
        with open(path, 'r', encoding='utf-8', newline='\n') as f:
            text = f.read()
    except UnicodeDecodeError as e:
        raise FormatError(f"vocabulary file is not UTF-8: {path}") from e

    lines = text.split("\n")
    fields = lines[0].split(" ")
    if len(fields) < 4 or fields[0] != VOCAB_MAGIC:
        raise FormatError(f"not a vocabulary file (bad magic): {path}")
    if fields[1] != VOCAB_VERSION:
        raise FormatError(f"unsupported vocabulary format version {fields[1]!r} (expected {VOCAB_VERSION}): {path}")
    file_kind = fields[2]
    if file_kind not in ("phoneme", "grapheme"):
        raise FormatError(f"unknown vocabulary kind {file_kind!r}: {path}")
    if kind is not None and file_kind != kind:
        raise FormatError(f"expected a {kind} vocabulary, found {file_kind}: {path}")
    try:
        size = int(fields[3])
    except ValueError as e:
        raise FormatError(f"bad vocabulary size {fields[3]!r}: {path}") from e

    cutoff = 1
    for extra in fields[4:]:
        key, _, value = extra.partition("=")
        if key == "cutoff":
            try:
                cutoff = int(value)
            except ValueError as e:
                raise FormatError(f"bad cutoff {value!r}: {path}") from e

    # every token line ends with a newline, so a complete file splits into size + 2 parts
    body = lines[1:]
    if len(body) < size + 1 or body[size] != "" or any(body[size + 1:]):
        raise FormatError(f"vocabulary file truncated or has trailing data (expected {size} tokens): {path}")
    tokens = tuple(body[:size])

    specials = PHONEME_SPECIALS if file_kind == "phoneme" else GRAPHEME_SPECIALS
    if tokens[:len(specials)] != specials:
        raise FormatError(f"special tokens missing or out of order: {path}")

    try:
        if file_kind == "phoneme":
            return PhonemeVocab(tokens=tokens)
        return GraphemeVocab(tokens=tokens, cutoff=cutoff)
    except DataError as e:
        raise FormatError(f"{e}: {path}") from e
