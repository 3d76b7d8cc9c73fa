"""Whole-word masking and batch collation."""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .config import MaskPolicy
from .corpus import ExampleRecord
from .errors import DataError
from .vocab import MSK, PAD, PHONEME_SPECIALS

IGNORE_INDEX = -100

OUTCOME_NONE = 0
OUTCOME_MASK = 1
OUTCOME_RANDOM = 2
OUTCOME_KEEP = 3


def record_rng(seed: int, epoch: int, record_index: int) -> np.random.Generator:
    """Per-record generator, so masking never depends on worker count or batch layout."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, record_index]))


@dataclass(frozen=True)
class MaskedExample:
    """Model inputs and labels for one record (unpadded, length N).

    Attributes:
        x: Phoneme ids after masking
        y_p: Original phoneme ids
        y_g: Grapheme id of the word each position belongs to
        I: Sorted masked position indices
        N: Valid length
        outcome: Per-position OUTCOME_* code (OUTCOME_NONE outside I)
    """

    x: np.ndarray
    y_p: np.ndarray
    y_g: np.ndarray
    I: np.ndarray
    N: int
    outcome: np.ndarray


def apply_mask(
    record: ExampleRecord,
    policy: MaskPolicy,
    rng: np.random.Generator,
    n_phonemes: int,
) -> MaskedExample:
    """Select whole words with probability select_prob and replace them.

    One outcome (MSK / RANDOM / KEEP) is drawn per selected word and applied
    to all of its phonemes; RANDOM draws a replacement id per position from
    the non-special phoneme ids. Every position of a selected word enters I.
    """
    if record.n_words == 0:
        raise DataError("cannot mask a record with zero words")
    first_regular = len(PHONEME_SPECIALS)
    if n_phonemes <= first_regular:
        raise DataError(f"phoneme vocabulary of size {n_phonemes} has no regular phonemes")

    y_p = np.asarray(record.phoneme_ids, dtype=np.int64)
    x = y_p.copy()
    outcome = np.zeros(record.N, dtype=np.int8)
    random_cut = policy.mask_prob + policy.random_prob

    for span in record.word_spans:
        if rng.random() >= policy.select_prob:
            continue
        positions = slice(span.start, span.start + span.length)
        draw = rng.random()
        if draw < policy.mask_prob:
            outcome[positions] = OUTCOME_MASK
            x[positions] = MSK
        elif draw < random_cut:
            outcome[positions] = OUTCOME_RANDOM
            x[positions] = rng.integers(first_regular, n_phonemes, size=span.length)
        else:
            outcome[positions] = OUTCOME_KEEP

    return MaskedExample(
        x=x,
        y_p=y_p,
        y_g=record.grapheme_targets(),
        I=np.flatnonzero(outcome),
        N=record.N,
        outcome=outcome,
    )


def mask_records(
    records: Sequence[ExampleRecord],
    record_indices: Sequence[int],
    policy: MaskPolicy,
    seed: int,
    epoch: int,
    n_phonemes: int,
) -> List[MaskedExample]:
    return [
        apply_mask(record, policy, record_rng(seed, epoch, int(index)), n_phonemes)
        for record, index in zip(records, record_indices)
    ]


@dataclass(frozen=True)
class BatchTensors:
    """Right-padded batch.

    Attributes:
        input_ids: (B, W) masked phoneme ids, PAD beyond N
        validity: (B, W) True inside [0, N)
        phoneme_labels: (B, W) y_p, IGNORE_INDEX beyond N
        grapheme_labels: (B, W) y_g, IGNORE_INDEX beyond N
        masked: (B, W) True at positions in I
        outcome: (B, W) OUTCOME_* codes
        lengths: (B,) valid lengths N
    """

    input_ids: np.ndarray
    validity: np.ndarray
    phoneme_labels: np.ndarray
    grapheme_labels: np.ndarray
    masked: np.ndarray
    outcome: np.ndarray
    lengths: np.ndarray

    @property
    def width(self) -> int:
        return self.input_ids.shape[1]

    def mlm_targets(self, score_only_msk: bool = False) -> np.ndarray:
        """Positions scored by the MLM loss."""
        if score_only_msk:
            return self.outcome == OUTCOME_MASK
        return self.masked


def collate(batch: Sequence[MaskedExample], width: int = None) -> BatchTensors:
    """Right-pad a batch to `width` (default: the longest N)."""
    if len(batch) == 0:
        raise DataError("cannot collate an empty batch")
    longest = max(ex.N for ex in batch)
    if width is None:
        width = longest
    if longest > width:
        raise DataError(f"example of length {longest} does not fit batch width {width}")

    size = (len(batch), width)
    input_ids = np.full(size, PAD, dtype=np.int64)
    phoneme_labels = np.full(size, IGNORE_INDEX, dtype=np.int64)
    grapheme_labels = np.full(size, IGNORE_INDEX, dtype=np.int64)
    masked = np.zeros(size, dtype=bool)
    outcome = np.zeros(size, dtype=np.int8)
    lengths = np.array([ex.N for ex in batch], dtype=np.int64)

    for row, ex in enumerate(batch):
        n = ex.N
        input_ids[row, :n] = ex.x
        phoneme_labels[row, :n] = ex.y_p
        grapheme_labels[row, :n] = ex.y_g
        masked[row, ex.I] = True
        outcome[row, :n] = ex.outcome

    validity = np.arange(width)[None, :] < lengths[:, None]
    return BatchTensors(
        input_ids=input_ids,
        validity=validity,
        phoneme_labels=phoneme_labels,
        grapheme_labels=grapheme_labels,
        masked=masked,
        outcome=outcome,
        lengths=lengths,
    )
