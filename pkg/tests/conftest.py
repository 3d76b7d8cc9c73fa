"""Shared fixtures: the fixture lexicon/corpus and small model configs."""

from pathlib import Path

import numpy as np
import pytest

from plbert.config import MaskPolicy, ModelConfig, TrainConfig
from plbert.corpus import ExampleRecord, WordSpan, load_lexicon, prepare_corpus
from plbert.normalize import normalize
from plbert.vocab import build_grapheme_vocab, build_phoneme_vocab

FIXTURES = Path(__file__).parent / "fixtures"
LEXICON_PATH = FIXTURES / "lexicon.tsv"
CORPUS_PATH = FIXTURES / "corpus.txt"


def read_corpus_lines():
    return CORPUS_PATH.read_text(encoding='utf-8').splitlines()


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon(LEXICON_PATH)


@pytest.fixture(scope="session")
def pvocab(lexicon):
    return build_phoneme_vocab(lexicon)


@pytest.fixture(scope="session")
def gvocab():
    words = [w for line in read_corpus_lines() for w in normalize(line)]
    return build_grapheme_vocab(words)


@pytest.fixture(scope="session")
def records(lexicon, pvocab, gvocab):
    records, _ = prepare_corpus(read_corpus_lines(), lexicon, pvocab, gvocab)
    return records


@pytest.fixture
def tiny_config():
    """Gradient-check sized model: 2 layers, H=8, F=16, A=2, V_p=10, V_g=7, float64."""
    return ModelConfig(
        n_layers=2,
        hidden=8,
        intermediate=16,
        heads=2,
        embed=4,
        max_len=8,
        phoneme_vocab_size=10,
        grapheme_vocab_size=7,
        dropout=0.0,
        precision="float64",
        init_std=0.5,
    )


@pytest.fixture
def small_config(pvocab, gvocab):
    """Fast model sized to the fixture vocabularies."""
    return ModelConfig(
        n_layers=2,
        hidden=16,
        intermediate=32,
        heads=2,
        embed=8,
        max_len=64,
        phoneme_vocab_size=pvocab.size,
        grapheme_vocab_size=gvocab.size,
        dropout=0.0,
        precision="float64",
    )


@pytest.fixture
def toy_config(pvocab, gvocab):
    """Overfit preset: 2 layers, H=64."""
    return ModelConfig(
        n_layers=2,
        hidden=64,
        intermediate=128,
        heads=4,
        embed=32,
        max_len=64,
        phoneme_vocab_size=pvocab.size,
        grapheme_vocab_size=gvocab.size,
        dropout=0.0,
        precision="float64",
    )


@pytest.fixture
def mask_policy():
    return MaskPolicy()


@pytest.fixture
def train_config():
    return TrainConfig(batch_size=8, max_steps=20, learning_rate=1e-3, checkpoint_every=5)


def random_records(rng, n, n_phonemes=10, n_graphemes=7, max_words=4, max_word_len=3):
    """Random records with ids drawn from the regular ranges."""
    out = []
    for _ in range(n):
        spans, ids = [], []
        for _ in range(int(rng.integers(1, max_words + 1))):
            length = int(rng.integers(1, max_word_len + 1))
            spans.append(WordSpan(len(ids), length, int(rng.integers(1, n_graphemes))))
            ids.extend(int(i) for i in rng.integers(3, n_phonemes, size=length))
        out.append(ExampleRecord(phoneme_ids=tuple(ids), word_spans=tuple(spans)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
