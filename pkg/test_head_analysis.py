import json

import numpy as np
import pandas as pd
import pytest

from ablation import TokenInContext
from datagen import PatternSpec, SyntheticSource, annotated_positions
from head_analysis import (
    HeadReport,
    PatternMatcher,
    Thresholds,
    attention_scores,
    classify_head,
    classify_position,
    composition_score,
    composition_scores,
    current_token_score,
    export_reports,
    induction_score,
    is_balanced,
    k_composition_trajectory,
    previous_token_score,
    type_head,
)
from transformer import Checkpoint, ModelConfig, init_params

SPEC = PatternSpec.default(512)
ALPHABET = {10: (0, True), 11: (0, False), 20: (1, True), 21: (1, False)}


def reduce_pairs(tokens):
    """Reference check: repeatedly delete adjacent matching open/close pairs."""
    brackets = [ALPHABET[t] for t in tokens if t in ALPHABET]
    changed = True
    while changed:
        changed = False
        for i in range(len(brackets) - 1):
            (k1, open1), (k2, open2) = brackets[i], brackets[i + 1]
            if open1 and not open2 and k1 == k2:
                del brackets[i:i + 2]
                changed = True
                break
    return not brackets


def one_hot(length, index):
    row = np.zeros(length)
    row[index] = 1.0
    return row


def item(sequence_id, context, position, attend):
    return TokenInContext(sequence_id=sequence_id, position=position, token=int(context[position]),
                          target=int(context[position + 1]), loss_delta=1.0,
                          attention=one_hot(position + 1, attend))


def test_is_balanced_examples():
    assert is_balanced([], ALPHABET)
    assert is_balanced([10, 5, 20, 21, 11], ALPHABET)
    assert not is_balanced([10, 21], ALPHABET)
    assert not is_balanced([11, 10], ALPHABET)
    assert not is_balanced([10, 20, 11, 21], ALPHABET)


def test_is_balanced_agrees_with_pair_removal():
    rng = np.random.default_rng(0)
    symbols = np.array([10, 11, 20, 21, 99])
    for _ in range(100_000):
        tokens = [int(t) for t in rng.choice(symbols, size=rng.integers(0, 9))]
        assert is_balanced(tokens, ALPHABET) == reduce_pairs(tokens), tokens


def test_matcher_recognises_every_planted_pattern():
    source = SyntheticSource(SPEC, 64, seed=7)
    tokens, notes = source.sample_annotated(200)
    contexts = [row for row in tokens] + [row for row in tokens]
    matcher = PatternMatcher.from_spec(SPEC)
    items, expected = [], []
    for copy in range(2):
        for s, (row, annotations) in enumerate(zip(tokens, notes)):
            sequence_id = s + copy * len(tokens)
            for note in annotations:
                if note.kind == "induction":
                    first, second = note.detail["first"], note.detail["second"]
                    for p in annotated_positions([note], "induction"):
                        items.append(item(sequence_id, row, p, first + (p - second) + 1))
                elif note.kind == "ngram":
                    for p in annotated_positions([note], "ngram"):
                        items.append(item(sequence_id, row, p, note.start))
                else:
                    for p in annotated_positions([note], note.kind):
                        items.append(item(sequence_id, row, p, 0))
                expected.extend([note.kind] * (len(items) - len(expected)))
    counts = {}
    for it in items:
        span = PatternMatcher.ngram_span(it, contexts[it.sequence_id])
        counts[span] = counts.get(span, 0) + 1
    labels = [matcher.classify(it, contexts[it.sequence_id], counts).label for it in items]
    assert set(expected) == {"induction", "dyck", "skip_ngram", "ngram"}
    assert labels == expected


def test_induction_match_example():
    # x Q R y Q -> R, attending to the first R
    context = [50, 60, 70, 80, 60, 70]
    matcher = PatternMatcher(SPEC.brackets, SPEC.skip_templates)
    verdict = classify_position(item(0, context, 4, 2), context, matcher)
    assert verdict.label == "induction"
    assert verdict.evidence["first_a"] == 1


def test_dyck_match_needs_the_matching_open_bracket():
    matcher = PatternMatcher([(0, 1), (2, 3)], [])
    context = [0, 40, 2, 41, 3, 42, 1]
    assert matcher.classify(item(0, context, 5, 0), context).label == "dyck"
    mismatched = [2, 40, 41, 1]
    assert matcher.classify(item(0, mismatched, 2, 0), mismatched).label == "unexplained"


def test_skip_match_respects_gap_range():
    template = SPEC.skip_templates[0]
    matcher = PatternMatcher.from_spec(SPEC)
    context = [template.head, 300, 301, template.tail[0]]
    verdict = matcher.classify(item(0, context, 2, 0), context)
    assert verdict.label == "skip_ngram"
    assert verdict.evidence["gap"] == 2
    too_far = [template.head] + [300] * (template.max_gap + 1) + [template.tail[0]]
    assert matcher.classify(item(0, too_far, len(too_far) - 2, 0), too_far).label == "unexplained"


def test_attention_scores_on_hand_built_patterns():
    t = 10
    previous = np.zeros((2, t, t))
    previous[:, 0, 0] = 1.0
    previous[:, np.arange(1, t), np.arange(t - 1)] = 1.0
    assert previous_token_score(previous) == pytest.approx(1.0)
    assert current_token_score(np.broadcast_to(np.eye(t), (2, t, t))) == pytest.approx(1.0)
    half = np.zeros((1, t, t))
    half[0, 0, 0] = 1.0
    for row in range(1, t):
        half[0, row, row - 1:row + 1] = 0.5
    assert previous_token_score(half) == pytest.approx(0.5)
    period = 5
    induction = np.zeros((1, t, t))
    for row in range(t):
        induction[0, row, row - period + 1 if row >= period else 0] = 1.0
    assert induction_score(induction, period) == pytest.approx(1.0)


def test_attention_scores_of_a_model_are_fractions():
    config = ModelConfig(vocab_size=30, context_length=12, d_model=8, n_heads=2, n_layers=2, init_scale=0.3)
    params = init_params(config, seed=0)
    rng = np.random.default_rng(0)
    natural = rng.integers(0, 30, size=(4, 12))
    half = rng.integers(0, 30, size=(4, 6))
    scores = attention_scores(params, (1, 0), natural, np.concatenate([half, half], axis=1))
    assert all(0.0 <= s <= 1.0 for s in scores)


def test_type_head_prefers_attention_types():
    percentages = {"dyck": 30.0, "ngram": 20.0, "skip_ngram": 0.0, "induction": 0.0}
    assert type_head(percentages, (0.1, 0.1, 0.1)) == ("multigram", "dyck")
    assert type_head(percentages, (0.7, 0.1, 0.1)) == ("previous_token", None)
    assert type_head(percentages, (0.1, 0.6, 0.1)) == ("current_token", None)
    assert type_head(percentages, (0.1, 0.1, 0.4)) == ("induction", None)
    assert type_head(percentages, (0.1, 0.1, 0.4), Thresholds(induction=0.5)) == ("multigram", "dyck")
    assert type_head({}, (0.0, 0.0, 0.0)) == ("multigram", None)


def test_classify_head_percentages_and_multigram_count():
    matcher = PatternMatcher([(0, 1)], [])
    contexts = [[0, 40, 1, 41, 42], [0, 43, 1, 44, 45]]
    items = [item(0, contexts[0], 1, 0), item(1, contexts[1], 1, 0),
             item(0, contexts[0], 3, 3), item(1, contexts[1], 3, 3)]
    report = classify_head((0, 1), items, contexts, matcher, (0.1, 0.1, 0.1))
    assert report.percentages["dyck"] == pytest.approx(50.0)
    assert report.explained_fraction == pytest.approx(0.5)
    assert report.multigram_count == 1
    assert report.type_label == "multigram" and report.subtype == "dyck"
    shuffled = classify_head((0, 1), items[::-1], contexts, matcher, (0.1, 0.1, 0.1))
    assert shuffled.percentages == report.percentages
    with pytest.raises(ValueError):
        classify_head((0, 1), [], contexts, matcher, (0.1, 0.1, 0.1))


def test_composition_of_identities():
    for d in (4, 16, 64):
        score, degenerate = composition_score(np.eye(d), np.eye(d))
        assert score == pytest.approx(1.0 / np.sqrt(d), abs=1e-15)
        assert not degenerate


def test_composition_scores_match_dense_reference():
    config = ModelConfig(vocab_size=20, context_length=8, d_model=8, n_heads=2, n_layers=2, init_scale=0.4)
    params = init_params(config, seed=3)
    v1, o1 = params.view("head_0_1_V"), params.view("head_0_1_O")
    q2, k2 = params.view("head_1_0_Q"), params.view("head_1_0_K")
    v2, o2 = params.view("head_1_0_V"), params.view("head_1_0_O")
    ov1 = o1.T @ v1.T
    qk2 = q2 @ k2.T
    ov2 = o2.T @ v2.T

    def reference(m):
        return np.sqrt(np.sum((m @ ov1) ** 2)) / (np.sqrt(np.sum(m ** 2)) * np.sqrt(np.sum(ov1 ** 2)))

    scores = composition_scores(params, (0, 1), (1, 0))
    assert scores.k == pytest.approx(reference(qk2), abs=1e-12)
    assert scores.q == pytest.approx(reference(qk2.T), abs=1e-12)
    assert scores.v == pytest.approx(reference(ov2), abs=1e-12)
    assert all(0.0 <= s <= 1.0 for s in (scores.q, scores.k, scores.v))
    with pytest.raises(ValueError):
        composition_scores(params, (1, 0), (0, 1))


def test_zero_output_weights_are_degenerate():
    config = ModelConfig(vocab_size=20, context_length=8, d_model=8, n_heads=2, n_layers=2)
    params = init_params(config).with_regions({"head_0_0_V": np.zeros((8, 4))})
    scores = composition_scores(params, (0, 0), (1, 1))
    assert scores.degenerate
    assert scores.k == 0.0


def test_composition_trajectory_rows():
    config = ModelConfig(vocab_size=20, context_length=8, d_model=8, n_heads=2, n_layers=2)
    checkpoint = Checkpoint(step=0, config=config, params=init_params(config))
    rows = pd.DataFrame(k_composition_trajectory([checkpoint], [((0, 0), (1, 1))]))
    k_rows = rows[rows["metric"] == "k_composition"]
    assert len(k_rows) == 1
    assert k_rows.iloc[0]["target"] == "head_0_0->head_1_1"


def test_export_reports(tmp_path):
    report = HeadReport(head=(1, 0), percentages={"induction": 80.0, "dyck": 0.0, "skip_ngram": 0.0, "ngram": 5.0},
                        type_label="induction", subtype=None, multigram_count=2, previous_token_score=0.1,
                        current_token_score=0.05, induction_score=0.6, explained_fraction=0.85, items=20)
    assert HeadReport.from_dict(report.to_dict()) == report
    json_path, csv_path = export_reports([report], str(tmp_path), step=100, config_hash="cafe", tool_version="9.9.9")
    with open(json_path) as f:
        data = json.load(f)
    assert data["reports"][0]["type_label"] == "induction"
    assert (data["config_hash"], data["tool_version"]) == ("cafe", "9.9.9")
    frame = pd.read_csv(csv_path)
    assert frame.loc[0, "head"] == "head_1_0"
    assert frame.loc[0, "config_hash"] == "cafe"
    assert frame.loc[0, "tool_version"] == "9.9.9"
