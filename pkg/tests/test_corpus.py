"""Tests for lexicon parsing, alignment, preparation and the example file format."""

import struct
import zlib

import numpy as np
import pytest

from plbert.config import OovPolicy
from plbert.corpus import (
    CORPUS_HEADER,
    DEFAULT_MAX_LEN,
    ExampleRecord,
    ExampleWriter,
    Lexicon,
    WordSpan,
    align_sentence,
    flatten,
    g2p,
    load_lexicon,
    prepare_corpus,
    read_examples,
    split_records,
    write_examples,
)
from plbert.errors import DataError, FormatError

from tests.conftest import random_records, read_corpus_lines


def test_load_lexicon_skips_comments_and_alternates(lexicon):
    assert lexicon["the"] == ("dh", "ah")
    assert "the(2)" not in lexicon
    assert lexicon["don't"] == ("d", "ow", "n", "t")
    assert len(lexicon) == 159


def test_load_lexicon_reports_bad_line(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("cat\tk ae t\nbroken line\n", encoding="utf-8")
    with pytest.raises(FormatError, match=r"bad.tsv:2"):
        load_lexicon(path)


def test_lexicon_keeps_first_pronunciation():
    lexicon = Lexicon()
    lexicon.add("Read", ["r", "iy", "d"])
    lexicon.add("read", ["r", "eh", "d"])
    assert g2p("read", lexicon) == ("r", "iy", "d")
    assert g2p("unknown", lexicon) is None


def test_align_cat_example(lexicon, pvocab, gvocab):
    sentence = align_sentence(["the", "cat"], lexicon, pvocab, gvocab)
    record = flatten(sentence)
    assert record.N == 5
    assert record.word_spans == (
        WordSpan(0, 2, gvocab.lookup("the")),
        WordSpan(2, 3, gvocab.lookup("cat")),
    )
    assert pvocab.decode(record.phoneme_ids) == ["dh", "ah", "k", "ae", "t"]
    y_g = record.grapheme_targets()
    assert list(y_g) == [gvocab.lookup("the")] * 2 + [gvocab.lookup("cat")] * 3


def test_oov_skip_sentence(lexicon, pvocab, gvocab):
    assert align_sentence(["the", "zyzzyva"], lexicon, pvocab, gvocab, OovPolicy.SKIP_SENTENCE) is None


def test_oov_drop_word(lexicon, pvocab, gvocab):
    sentence = align_sentence(["the", "zyzzyva", "cat"], lexicon, pvocab, gvocab, OovPolicy.DROP_WORD)
    assert len(sentence.words) == 2
    assert sentence.n_phonemes == 5


def test_all_oov_sentence_is_skipped_under_drop_word(lexicon, pvocab, gvocab):
    assert align_sentence(["zyzzyva"], lexicon, pvocab, gvocab, OovPolicy.DROP_WORD) is None


def test_lexicon_word_missing_from_corpus_vocab_maps_to_unk(lexicon, pvocab, gvocab):
    assert "juice" not in gvocab.id_of
    sentence = align_sentence(["juice"], lexicon, pvocab, gvocab)
    assert sentence.words[0].grapheme_id == 1


def test_truncation_at_word_boundary(lexicon, pvocab, gvocab):
    # the=2, cat=3, sat=3 phonemes
    sentence = align_sentence(["the", "cat", "sat"], lexicon, pvocab, gvocab, max_len=6)
    assert [len(w.phoneme_ids) for w in sentence.words] == [2, 3]
    sentence = align_sentence(["the", "cat", "sat"], lexicon, pvocab, gvocab, max_len=4)
    assert len(sentence.words) == 1


def test_long_sentence_truncated_to_default_max_len(lexicon, pvocab, gvocab):
    # 200 x "cat" is 600 phonemes
    sentence = align_sentence(["cat"] * 200, lexicon, pvocab, gvocab)
    record = flatten(sentence)
    assert DEFAULT_MAX_LEN == 512
    assert record.N == 510
    assert record.n_words == 170
    assert all(span.length == 3 for span in record.word_spans)


def test_record_spans_must_partition():
    with pytest.raises(DataError):
        ExampleRecord(phoneme_ids=(3, 4, 5), word_spans=(WordSpan(0, 2, 2),))
    with pytest.raises(DataError):
        ExampleRecord(phoneme_ids=(3, 4), word_spans=(WordSpan(0, 1, 2), WordSpan(0, 1, 2)))


def test_prepare_fixture_corpus(lexicon, pvocab, gvocab):
    records, stats = prepare_corpus(read_corpus_lines(), lexicon, pvocab, gvocab)
    assert len(records) == 50
    assert stats.sentences_kept == 50
    assert stats.sentences_skipped == 0
    assert stats.oov_rate == 0.0
    for record in records:
        assert sum(span.length for span in record.word_spans) == record.N


def test_prepare_counts_skips(lexicon, pvocab, gvocab):
    lines = ["The cat sat.", "The zyzzyva sat.", "", "A dog."]
    records, stats = prepare_corpus(lines, lexicon, pvocab, gvocab)
    assert len(records) == 2
    assert stats.sentences_total == 4
    assert stats.sentences_skipped == 2
    assert stats.words_oov == 1
    assert stats.oov_rate == pytest.approx(1 / 8)


def test_prepare_is_worker_count_invariant(lexicon, pvocab, gvocab):
    lines = read_corpus_lines()
    serial, _ = prepare_corpus(lines, lexicon, pvocab, gvocab, workers=1, chunk_size=7)
    parallel, _ = prepare_corpus(lines, lexicon, pvocab, gvocab, workers=4, chunk_size=7)
    assert serial == parallel


def test_split_records_is_disjoint_and_deterministic():
    train, held_out = split_records(50, 0.2, seed=3)
    assert len(held_out) == 10
    assert len(np.intersect1d(train, held_out)) == 0
    assert sorted(np.concatenate([train, held_out])) == list(range(50))
    again = split_records(50, 0.2, seed=3)
    assert np.array_equal(train, again[0])


def test_split_needs_two_records():
    with pytest.raises(DataError):
        split_records(1, 0.5, seed=0)


def test_example_file_preserves_records(tmp_path, rng):
    records = random_records(rng, 30)
    path = tmp_path / "examples.bin"
    assert write_examples(records, path) == 30
    assert list(read_examples(path)) == records


def test_example_file_checksum_mismatch(tmp_path, rng):
    records = random_records(rng, 3)
    path = tmp_path / "examples.bin"
    write_examples(records, path)
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="record 2: checksum mismatch"):
        list(read_examples(path))


def test_example_file_truncation_names_record(tmp_path, rng):
    records = random_records(rng, 4)
    path = tmp_path / "examples.bin"
    write_examples(records, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="record 3: truncated"):
        list(read_examples(path))


def test_example_file_version_check(tmp_path):
    path = tmp_path / "examples.bin"
    path.write_bytes(b"PLBERT-CORPUS v2\n")
    with pytest.raises(FormatError, match="version"):
        list(read_examples(path))


def test_example_file_rejects_bad_spans(tmp_path):
    # hand-built payload: N=2, one word of length 1 does not cover the record
    payload = struct.pack("<II", 2, 1) + struct.pack("<2I", 3, 4) + struct.pack("<3I", 0, 1, 2)
    path = tmp_path / "examples.bin"
    path.write_bytes(CORPUS_HEADER + struct.pack("<II", len(payload), zlib.crc32(payload)) + payload)
    with pytest.raises(FormatError, match="record 0"):
        list(read_examples(path))


def test_writer_counts(tmp_path, rng):
    with ExampleWriter(tmp_path / "x.bin") as writer:
        for record in random_records(rng, 5):
            writer.write(record)
    assert writer.count == 5
