from collections import Counter

import numpy as np
import pytest
from scipy.stats import chi2, chisquare

from datagen import (
    PATTERN_KINDS,
    CorpusSource,
    PatternSpec,
    RepeatedRandomSource,
    SyntheticSource,
    annotated_positions,
    dyck_close_positions,
    ingest_corpus,
    model_generator_source,
    nested_dyck_source,
    repeated_random_batch,
    sample_batch,
    unnested_dyck_source,
)
from head_analysis import is_balanced
from tokenizer import ByteTokenizer
from transformer import ModelConfig, init_params

SPEC = PatternSpec.default(512)
K = 64


def test_default_spec_reserves_disjoint_tokens():
    reserved = SPEC.reserved_tokens()
    assert len(reserved) == len(set(reserved))
    assert max(reserved) < SPEC.filler_start
    assert SPEC.vocab_size - SPEC.filler_start >= 8


def test_spec_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        SPEC.with_weights({"ngram": 0.5, "dyck": 0.2})
    with pytest.raises(ValueError, match="unknown"):
        SPEC.with_weights({"ngram": 0.5, "words": 0.5})
    with pytest.raises(ValueError, match="filler"):
        PatternSpec.default(20)


def test_spec_save_and_load(tmp_path):
    path = str(tmp_path / "spec.json")
    SPEC.save(path)
    assert PatternSpec.load(path) == SPEC


def test_batches_are_pure_functions_of_seed_stream_and_index():
    source = SyntheticSource(SPEC, K, seed=3)
    a = sample_batch(source, 8, index=5, stream=1)
    b = SyntheticSource(SPEC, K, seed=3).sample_batch(8, index=5, stream=1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, source.sample_batch(8, index=6, stream=1))
    assert not np.array_equal(a, source.sample_batch(8, index=5, stream=2))
    assert a.shape == (8, K)
    assert a.min() >= 0 and a.max() < 512


def test_pattern_mixture_matches_weights():
    source = SyntheticSource(SPEC, K, seed=0)
    _, notes = source.sample_annotated(2000)
    counts = Counter(annotations[0].kind for annotations in notes)
    kinds = [k for k in PATTERN_KINDS if SPEC.mixture[k] > 0]
    observed = [counts[k] for k in kinds]
    expected = [SPEC.mixture[k] * 2000 for k in kinds]
    assert chisquare(observed, expected).pvalue > 1e-3


def test_planted_annotations_match_tokens():
    source = SyntheticSource(SPEC, K, seed=1)
    tokens, notes = source.sample_annotated(200)
    alphabet = SPEC.bracket_alphabet
    for row, annotations in zip(tokens, notes):
        for note in annotations:
            assert 0 <= note.start < note.end <= K
            if note.kind == "dyck":
                block = [int(t) for t in row[note.start:note.end]]
                assert is_balanced(block, alphabet)
                for open_pos, close_pos, _, _ in note.detail["pairs"]:
                    kind_open, is_open = alphabet[int(row[open_pos])]
                    kind_close, is_close_open = alphabet[int(row[close_pos])]
                    assert is_open and not is_close_open and kind_open == kind_close
            elif note.kind == "induction":
                first, second, length = note.detail["first"], note.detail["second"], note.detail["length"]
                assert np.array_equal(row[first:first + length], row[second:second + length])
            elif note.kind == "skip_ngram":
                template = SPEC.skip_templates[note.detail["template"]]
                assert row[note.detail["head"]] == template.head
                tail = row[note.detail["tail_start"]:note.end]
                assert tuple(int(t) for t in tail) == template.tail
            else:
                assert tuple(int(t) for t in row[note.start:note.end]) == SPEC.ngrams[note.detail["entry"]]


def test_filler_stays_out_of_reserved_range():
    source = SyntheticSource(SPEC.with_weights({"induction": 1.0}), K, seed=2)
    tokens = source.sample_batch(50)
    assert tokens.min() >= SPEC.filler_start


def test_nested_and_unnested_dyck_sources():
    nested = nested_dyck_source(SPEC, K, seed=0)
    _, notes = nested.sample_annotated(50)
    assert all(a.detail["nested"] for annotations in notes for a in annotations)
    flat = unnested_dyck_source(SPEC, K, seed=0)
    _, notes = flat.sample_annotated(50)
    for annotations in notes:
        assert dyck_close_positions(annotations, nested=True) == []
        assert len(dyck_close_positions(annotations, nested=False)) > 0


def test_annotated_positions_point_before_completions():
    source = SyntheticSource(SPEC.with_weights({"skip_ngram": 1.0}), K, seed=4)
    tokens, notes = source.sample_annotated(20)
    for row, annotations in zip(tokens, notes):
        positions = annotated_positions(annotations, "skip_ngram")
        assert positions
        tails = {t for template in SPEC.skip_templates for t in template.tail}
        assert all(int(row[p + 1]) in tails for p in positions)


def test_repeated_random_halves():
    batch = repeated_random_batch(100, 4, 10, seed=1, low=20)
    assert np.array_equal(batch[:, :5], batch[:, 5:])
    assert batch.min() >= 20
    with pytest.raises(ValueError, match="even"):
        RepeatedRandomSource(100, 9)


def test_model_generator_source_is_deterministic():
    config = ModelConfig(vocab_size=16, context_length=8, d_model=8, n_heads=2, n_layers=1, init_scale=0.5)
    params = init_params(config, seed=0)
    source = model_generator_source(params, seed=2)
    a = source.sample_batch(5, index=1)
    assert a.shape == (5, 8)
    assert a.min() >= 0 and a.max() < 16
    assert np.array_equal(a, model_generator_source(params, seed=2).sample_batch(5, index=1))
    with pytest.raises(ValueError, match="temperature"):
        model_generator_source(params, temperature=0.0)


def test_zero_layer_generator_reproduces_its_bigram_table():
    config = ModelConfig(vocab_size=6, context_length=8, d_model=4, n_heads=1, n_layers=0, init_scale=0.8)
    params = init_params(config, seed=4)
    logits = params.view("embed") @ params.view("unembed")
    table = np.exp(logits - logits.max(axis=1, keepdims=True))
    table /= table.sum(axis=1, keepdims=True)
    seqs = model_generator_source(params, seed=9).sample_batch(10_000, index=0)
    counts = np.zeros((6, 6))
    np.add.at(counts, (seqs[:, :-1].ravel(), seqs[:, 1:].ravel()), 1)
    expected = counts.sum(axis=1, keepdims=True) * table
    statistic = float(((counts - expected) ** 2 / expected).sum())
    assert chi2.sf(statistic, df=6 * 5) > 0.01


def test_corpus_round_trip_through_binary(tmp_path):
    text = "the cat sat on the mat. " * 40
    text_path = tmp_path / "corpus.txt"
    text_path.write_text(text, encoding="utf-8")
    tokenizer = ByteTokenizer.train(text, vocab_size=270)
    count = ingest_corpus(str(text_path), tokenizer, str(tmp_path / "corpus.bin"))
    source = CorpusSource.from_file(str(tmp_path / "corpus.bin"), context_length=16)
    assert source.tokens.size == count
    batch = source.sample_batch(3)
    assert batch.shape == (3, 16)
    text_source = CorpusSource.from_file(str(text_path), 16, tokenizer=tokenizer)
    assert np.array_equal(text_source.tokens, source.tokens)
    with pytest.raises(ValueError, match="tokenizer"):
        CorpusSource.from_file(str(text_path), 16)
