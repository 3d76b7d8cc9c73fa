"""Corpus preparation: lexicon G2P, phoneme/grapheme alignment and the example file.

A sentence becomes a sequence of whole words, each carrying one grapheme id
and its pronunciation. Flattened, that is an ExampleRecord: phoneme ids plus
word spans that partition [0, N).
"""

import logging
import struct
import zlib
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .config import OovPolicy
from .errors import DataError, FormatError
from .normalize import normalize
from .vocab import GraphemeVocab, PhonemeVocab

logger = logging.getLogger(__name__)

CORPUS_MAGIC = b"PLBERT-CORPUS"
CORPUS_VERSION = b"v1"
CORPUS_HEADER = CORPUS_MAGIC + b" " + CORPUS_VERSION + b"\n"
DEFAULT_MAX_LEN = 512

_RECORD_PREFIX = struct.Struct("<II")   # payload length, crc32
_PAYLOAD_HEAD = struct.Struct("<II")    # N, number of words
MAX_RECORD_BYTES = 64 * 1024 * 1024


class Lexicon(Mapping):
    """Pronunciation dictionary: case-folded word -> tuple of phoneme strings."""

    def __init__(self, entries: Optional[Dict[str, Sequence[str]]] = None):
        self._entries: Dict[str, Tuple[str, ...]] = {}
        for word, pronunciation in (entries or {}).items():
            self.add(word, pronunciation)

    def add(self, word: str, pronunciation: Sequence[str]) -> None:
        pronunciation = tuple(pronunciation)
        if not word:
            raise DataError("lexicon word must be non-empty")
        if not pronunciation or any(not p for p in pronunciation):
            raise DataError(f"lexicon entry {word!r} has an empty pronunciation or phoneme")
        self._entries.setdefault(word.casefold(), pronunciation)

    def __getitem__(self, word: str) -> Tuple[str, ...]:
        return self._entries[word]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)


def load_lexicon(path: Path) -> Lexicon:
    """Parse `word<TAB>ph1 ph2 ...` lines.

    Lines starting with `;;;` are comments; `word(2)` alternates are skipped so
    the first pronunciation wins.
    """
    lexicon = Lexicon()
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith(";;;"):
                continue
            word, sep, phones = line.partition("\t")
            if not sep or not word or not phones.split():
                raise FormatError(f"{path}:{line_no}: expected 'word<TAB>ph1 ph2 ...'")
            if word.endswith(")") and "(" in word:
                continue
            lexicon.add(word.strip(), phones.split())
    return lexicon


def g2p(word: str, lexicon: Lexicon) -> Optional[Tuple[str, ...]]:
    """Exact lexicon lookup; None signals an out-of-vocabulary word."""
    return lexicon.get(word)


class AlignedWord(NamedTuple):
    grapheme_id: int
    phoneme_ids: Tuple[int, ...]


@dataclass(frozen=True)
class AlignedSentence:
    words: Tuple[AlignedWord, ...]

    @property
    def n_phonemes(self) -> int:
        return sum(len(w.phoneme_ids) for w in self.words)


class WordSpan(NamedTuple):
    start: int
    length: int
    grapheme_id: int


@dataclass(frozen=True)
class ExampleRecord:
    """Flattened phoneme ids with word spans partitioning [0, N)."""

    phoneme_ids: Tuple[int, ...]
    word_spans: Tuple[WordSpan, ...]
    N: int = field(default=-1)

    def __post_init__(self):
        object.__setattr__(self, "phoneme_ids", tuple(int(i) for i in self.phoneme_ids))
        object.__setattr__(self, "word_spans", tuple(WordSpan(*map(int, s)) for s in self.word_spans))
        if self.N < 0:
            object.__setattr__(self, "N", len(self.phoneme_ids))
        if self.N != len(self.phoneme_ids):
            raise DataError(f"N={self.N} does not match {len(self.phoneme_ids)} phoneme ids")
        cursor = 0
        for span in self.word_spans:
            if span.start != cursor or span.length < 1:
                raise DataError(f"word spans must partition [0, {self.N}) in order; bad span {tuple(span)}")
            cursor += span.length
        if cursor != self.N:
            raise DataError(f"word spans cover [0, {cursor}) but N={self.N}")

    @property
    def n_words(self) -> int:
        return len(self.word_spans)

    def grapheme_targets(self) -> np.ndarray:
        """y_g: the grapheme id of the word each position belongs to."""
        y_g = np.empty(self.N, dtype=np.int64)
        for span in self.word_spans:
            y_g[span.start:span.start + span.length] = span.grapheme_id
        return y_g


def align_sentence(
    words: Sequence[str],
    lexicon: Lexicon,
    pvocab: PhonemeVocab,
    gvocab: GraphemeVocab,
    oov_policy: OovPolicy = OovPolicy.SKIP_SENTENCE,
    max_len: int = DEFAULT_MAX_LEN,
) -> Optional[AlignedSentence]:
    """Pair every word with its grapheme id and phoneme ids.

    Returns None when the sentence is skipped: an OOV word under
    skip_sentence, or no alignable word at all. Sentences longer than
    `max_len` phonemes are cut at the last word boundary that fits.
    """
    aligned = []
    for word in words:
        pronunciation = g2p(word, lexicon)
        phoneme_ids = None
        if pronunciation is not None:
            phoneme_ids = tuple(pvocab.id_of.get(p, -1) for p in pronunciation)
            if -1 in phoneme_ids:
                phoneme_ids = None
        if phoneme_ids is None:
            if OovPolicy(oov_policy) is OovPolicy.SKIP_SENTENCE:
                return None
            continue
        aligned.append(AlignedWord(gvocab.lookup(word), phoneme_ids))

    kept = []
    total = 0
    for word in aligned:
        if total + len(word.phoneme_ids) > max_len:
            break
        kept.append(word)
        total += len(word.phoneme_ids)

    if not kept:
        return None
    return AlignedSentence(words=tuple(kept))


def flatten(sentence: AlignedSentence) -> ExampleRecord:
    phoneme_ids = []
    spans = []
    for word in sentence.words:
        spans.append(WordSpan(len(phoneme_ids), len(word.phoneme_ids), word.grapheme_id))
        phoneme_ids.extend(word.phoneme_ids)
    return ExampleRecord(phoneme_ids=tuple(phoneme_ids), word_spans=tuple(spans))


@dataclass
class PrepareStats:
    """Counters reported by `prepare_corpus`."""

    sentences_total: int = 0
    sentences_kept: int = 0
    sentences_skipped: int = 0
    sentences_truncated: int = 0
    words_total: int = 0
    words_oov: int = 0
    words_dropped: int = 0

    @property
    def oov_rate(self) -> float:
        return self.words_oov / self.words_total if self.words_total else 0.0

    def to_dict(self) -> dict:
        return {
            'sentences_total': self.sentences_total,
            'sentences_kept': self.sentences_kept,
            'sentences_skipped': self.sentences_skipped,
            'sentences_truncated': self.sentences_truncated,
            'words_total': self.words_total,
            'words_oov': self.words_oov,
            'words_dropped': self.words_dropped,
            'oov_rate': self.oov_rate,
        }


def prepare_corpus(
    lines: Iterable[str],
    lexicon: Lexicon,
    pvocab: PhonemeVocab,
    gvocab: GraphemeVocab,
    oov_policy: OovPolicy = OovPolicy.SKIP_SENTENCE,
    max_len: int = DEFAULT_MAX_LEN,
    workers: int = 1,
    chunk_size: int = 256,
    progress: bool = False,
) -> Tuple[List[ExampleRecord], PrepareStats]:
    """Normalize and align every line; output order follows input order for any worker count."""
    oov_policy = OovPolicy(oov_policy)

    def align_chunk(chunk: List[str]) -> List[tuple]:
        results = []
        for line in chunk:
            words = normalize(line)
            n_oov = sum(1 for w in words if g2p(w, lexicon) is None)
            sentence = align_sentence(words, lexicon, pvocab, gvocab, oov_policy, max_len)
            results.append((len(words), n_oov, sentence))
        return results

    lines = list(lines)
    chunks = [lines[i:i + chunk_size] for i in range(0, len(lines), chunk_size)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunk_results = list(pool.map(align_chunk, chunks))
    else:
        chunk_results = [align_chunk(c) for c in tqdm(chunks, desc="align", disable=not progress)]

    stats = PrepareStats()
    records = []
    for results in chunk_results:
        for n_words, n_oov, sentence in results:
            stats.sentences_total += 1
            stats.words_total += n_words
            stats.words_oov += n_oov
            if sentence is None:
                stats.sentences_skipped += 1
                continue
            stats.sentences_kept += 1
            if oov_policy is OovPolicy.DROP_WORD:
                stats.words_dropped += n_oov
            if len(sentence.words) < n_words - (n_oov if oov_policy is OovPolicy.DROP_WORD else 0):
                stats.sentences_truncated += 1
            records.append(flatten(sentence))

    logger.info(
        "Prepared %d/%d sentences (%d skipped, %d truncated), OOV rate %.4f",
        stats.sentences_kept, stats.sentences_total, stats.sentences_skipped,
        stats.sentences_truncated, stats.oov_rate,
    )
    return records, stats


def split_records(n: int, eval_ratio: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic disjoint (train, eval) index split over n records."""
    if n < 2:
        raise DataError(f"need at least 2 records to split, got {n}")
    n_eval = min(n - 1, max(1, int(round(n * eval_ratio))))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


def encode_record(record: ExampleRecord) -> bytes:
    spans = np.asarray(record.word_spans, dtype='<u4').reshape(-1, 3)
    return (
        _PAYLOAD_HEAD.pack(record.N, record.n_words)
        + np.asarray(record.phoneme_ids, dtype='<u4').tobytes()
        + spans.tobytes()
    )


def decode_record(payload: bytes, index: int) -> ExampleRecord:
    if len(payload) < _PAYLOAD_HEAD.size:
        raise FormatError("payload shorter than its header", record_index=index)
    n, n_words = _PAYLOAD_HEAD.unpack_from(payload)
    expected = _PAYLOAD_HEAD.size + 4 * n + 12 * n_words
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}", record_index=index)
    phoneme_ids = np.frombuffer(payload, dtype='<u4', count=n, offset=_PAYLOAD_HEAD.size)
    spans = np.frombuffer(payload, dtype='<u4', count=3 * n_words, offset=_PAYLOAD_HEAD.size + 4 * n)
    try:
        return ExampleRecord(
            phoneme_ids=tuple(phoneme_ids.tolist()),
            word_spans=tuple(tuple(s) for s in spans.reshape(-1, 3).tolist()),
            N=n,
        )
    except DataError as e:
        raise FormatError(str(e), record_index=index) from e


class ExampleWriter:
    """Length-prefixed, checksummed record stream."""

    def __init__(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.file = open(path, 'wb')
        self.file.write(CORPUS_HEADER)
        self.count = 0

    def write(self, record: ExampleRecord) -> None:
        payload = encode_record(record)
        self.file.write(_RECORD_PREFIX.pack(len(payload), zlib.crc32(payload)))
        self.file.write(payload)
        self.count += 1

    def close(self) -> None:
        self.file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()


class ExampleReader:
    """Streaming reader; holds one record in memory at a time."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.file = open(self.path, 'rb')
        header = self.file.readline()
        if not header.startswith(CORPUS_MAGIC + b" "):
            self.file.close()
            raise FormatError(f"not an example file (bad magic): {self.path}")
        version = header[len(CORPUS_MAGIC) + 1:].rstrip(b"\n")
        if version != CORPUS_VERSION or not header.endswith(b"\n"):
            self.file.close()
            raise FormatError(
                f"unsupported example file version {version.decode('utf-8', 'replace')!r} "
                f"(expected {CORPUS_VERSION.decode()}): {self.path}"
            )

    def __iter__(self) -> Iterator[ExampleRecord]:
        index = 0
        while True:
            prefix = self.file.read(_RECORD_PREFIX.size)
            if not prefix:
                return
            if len(prefix) != _RECORD_PREFIX.size:
                raise FormatError("truncated record prefix", record_index=index)
            length, checksum = _RECORD_PREFIX.unpack(prefix)
            if length > MAX_RECORD_BYTES:
                raise FormatError(f"implausible record length {length}", record_index=index)
            payload = self.file.read(length)
            if len(payload) != length:
                raise FormatError(f"truncated record: got {len(payload)} of {length} bytes", record_index=index)
            if zlib.crc32(payload) != checksum:
                raise FormatError("checksum mismatch", record_index=index)
            yield decode_record(payload, index)
            index += 1

    def close(self) -> None:
        self.file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()


def write_examples(records: Iterable[ExampleRecord], path: Path) -> int:
    """Write records; returns the number written."""
    with ExampleWriter(path) as writer:
        for record in records:
            writer.write(record)
        return writer.count


def read_examples(path: Path) -> Iterator[ExampleRecord]:
    """Yield records one at a time."""
    with ExampleReader(path) as reader:
        yield from reader
