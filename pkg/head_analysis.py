"""
Behavioural classification of attention heads from their tokens in context,
attention-pattern scores, and Q/K/V composition between layers.
"""
import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ablation import TokenInContext
from autodiff import ParameterStore
from datagen import PatternSpec, SkipTemplate
from transformer import Checkpoint, HeadId, head_region, run_with_cache

logger = logging.getLogger(__name__)

LABELS = ("induction", "dyck", "skip_ngram", "ngram", "unexplained")
MULTIGRAM_LABELS = ("dyck", "skip_ngram", "ngram")


@dataclass(frozen=True)
class Thresholds:
    previous_token: float = 0.5
    current_token: float = 0.5
    induction: float = 0.3


@dataclass
class PatternVerdict:
    sequence_id: int
    position: int
    label: str
    evidence: Dict = field(default_factory=dict)


@dataclass
class HeadReport:
    head: HeadId
    percentages: Dict[str, float]
    type_label: str
    subtype: Optional[str]
    multigram_count: int
    previous_token_score: float
    current_token_score: float
    induction_score: float
    explained_fraction: float
    items: int = 0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["head"] = list(self.head)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "HeadReport":
        return cls(**{**data, "head": tuple(data["head"])})

    @property
    def name(self) -> str:
        return f"head_{self.head[0]}_{self.head[1]}"


@dataclass
class CompositionScores:
    q: float
    k: float
    v: float
    degenerate: bool = False


def is_balanced(tokens: Sequence[int], alphabet: Mapping[int, Tuple[int, bool]]) -> bool:
    """
    True iff the bracket tokens in ``tokens`` are balanced and properly nested.

    ``alphabet`` maps bracket tokens to (kind, is_open); other tokens are ignored.
    """
    stack = []
    for token in tokens:
        entry = alphabet.get(int(token))
        if entry is None:
            continue
        kind, is_open = entry
        if is_open:
            stack.append(kind)
        elif not stack or stack.pop() != kind:
            return False
    return not stack


class PatternMatcher:
    """
    Serial matcher over one sequence: induction, then Dyck, then
    skip-n-gram, then n-gram.
    """

    def __init__(self, brackets: Sequence[Tuple[int, int]], skip_templates: Sequence[SkipTemplate]):
        self.alphabet = {}
        for kind, (open_tok, close_tok) in enumerate(brackets):
            self.alphabet[open_tok] = (kind, True)
            self.alphabet[close_tok] = (kind, False)
        self.skip_templates = list(skip_templates)

    @classmethod
    def from_spec(cls, spec: PatternSpec) -> "PatternMatcher":
        return cls(spec.brackets, spec.skip_templates)

    @staticmethod
    def max_attention(item: TokenInContext) -> int:
        return int(np.argmax(item.attention))

    def match_induction(self, item: TokenInContext, context: Sequence[int]) -> Optional[Dict]:
        p, target = item.position, item.target
        attended = self.max_attention(item)
        for q in range(p - 1, -1, -1):
            if context[q] == context[p] and context[q + 1] == target and attended in (p, q + 1):
                return {"first_a": q, "first_b": q + 1, "attended": attended}
        return None

    def match_dyck(self, item: TokenInContext, context: Sequence[int]) -> Optional[Dict]:
        entry = self.alphabet.get(item.target)
        if entry is None or entry[1]:
            return None
        kind = entry[0]
        pending = []
        for q in range(item.position, -1, -1):
            bracket = self.alphabet.get(int(context[q]))
            if bracket is None:
                continue
            b_kind, is_open = bracket
            if not is_open:
                pending.append(b_kind)
            elif pending:
                if pending.pop() != b_kind:
                    return None
            elif b_kind == kind:
                return {"open": q, "pair": [int(context[q]), item.target]}
            else:
                return None
        return None

    def match_skip(self, item: TokenInContext, context: Sequence[int]) -> Optional[Dict]:
        p = item.position
        for index, template in enumerate(self.skip_templates):
            for j, tail_token in enumerate(template.tail):
                if tail_token != item.target:
                    continue
                tail_start = p + 1 - j
                if tail_start < 1 or list(context[tail_start:p + 1]) != list(template.tail[:j]):
                    continue
                for gap in range(template.min_gap, template.max_gap + 1):
                    head_pos = tail_start - 1 - gap
                    if head_pos >= 0 and context[head_pos] == template.head:
                        return {"template": index, "head": head_pos, "gap": gap,
                                "key": [template.head, *template.tail]}
        return None

    @staticmethod
    def ngram_span(item: TokenInContext, context: Sequence[int]) -> Tuple[int, ...]:
        """Tokens from the max-attention position through the predicted token."""
        start = PatternMatcher.max_attention(item)
        return tuple(int(t) for t in context[start:item.position + 1]) + (item.target,)

    def classify(self, item: TokenInContext, context: Sequence[int],
                 ngram_counts: Optional[Mapping[Tuple[int, ...], int]] = None) -> PatternVerdict:
        for label, matcher in (("induction", self.match_induction), ("dyck", self.match_dyck),
                               ("skip_ngram", self.match_skip)):
            evidence = matcher(item, context)
            if evidence is not None:
                return PatternVerdict(item.sequence_id, item.position, label, evidence)
        span = self.ngram_span(item, context)
        if ngram_counts is not None and ngram_counts.get(span, 0) >= 2:
            return PatternVerdict(item.sequence_id, item.position, "ngram", {"span": list(span)})
        return PatternVerdict(item.sequence_id, item.position, "unexplained", {})


def ngram_counts(items: Sequence[TokenInContext], contexts) -> Counter:
    """How many items share each max-attention-to-next-token span."""
    return Counter(PatternMatcher.ngram_span(item, contexts[item.sequence_id]) for item in items)


def classify_position(item: TokenInContext, context: Sequence[int], matcher: PatternMatcher,
                      counts: Optional[Mapping[Tuple[int, ...], int]] = None) -> PatternVerdict:
    return matcher.classify(item, context, counts)


def previous_token_score(attention: np.ndarray) -> float:
    """Mean attention on offset -1 over positions 1..T-1 of (batch, T, T) patterns."""
    t = attention.shape[-1]
    return float(attention[:, np.arange(1, t), np.arange(0, t - 1)].mean())


def current_token_score(attention: np.ndarray) -> float:
    t = attention.shape[-1]
    return float(attention[:, np.arange(t), np.arange(t)].mean())


def induction_score(attention: np.ndarray, period: int) -> float:
    """
    Mean attention from each position k >= period to k - period + 1 on
    sequences made of one random block repeated with the given period.
    """
    t = attention.shape[-1]
    rows = np.arange(period, t)
    return float(attention[:, rows, rows - period + 1].mean())


def attention_scores(params: ParameterStore, head: HeadId, natural_tokens,
                     repeated_tokens) -> Tuple[float, float, float]:
    """(previous-token, current-token, induction) scores for one head."""
    _, cache = run_with_cache(params, natural_tokens)
    pattern = cache[("attn",) + tuple(head)]
    _, repeated_cache = run_with_cache(params, repeated_tokens)
    period = np.asarray(repeated_tokens).shape[-1] // 2
    induction = induction_score(repeated_cache[("attn",) + tuple(head)], period)
    return previous_token_score(pattern), current_token_score(pattern), induction


def multigram_count(verdicts: Sequence[PatternVerdict]) -> int:
    """Unique Dyck pairs + unique skip-n-gram tuples + unique n-gram strings."""
    dyck = {tuple(v.evidence["pair"]) for v in verdicts if v.label == "dyck"}
    skip = {tuple(v.evidence["key"]) for v in verdicts if v.label == "skip_ngram"}
    ngram = {tuple(v.evidence["span"]) for v in verdicts if v.label == "ngram"}
    return len(dyck) + len(skip) + len(ngram)


def type_head(percentages: Mapping[str, float], scores: Tuple[float, float, float],
              thresholds: Thresholds = Thresholds()) -> Tuple[str, Optional[str]]:
    """
    Attention-score types first (previous, current, induction), otherwise
    multigram with the plurality multigram label as subtype.
    """
    previous, current, induction = scores
    if previous >= thresholds.previous_token:
        return "previous_token", None
    if current >= thresholds.current_token:
        return "current_token", None
    if induction >= thresholds.induction:
        return "induction", None
    subtype = max(MULTIGRAM_LABELS, key=lambda label: (percentages.get(label, 0.0), -MULTIGRAM_LABELS.index(label)))
    if percentages.get(subtype, 0.0) == 0.0:
        subtype = None
    return "multigram", subtype


def classify_head(head: HeadId, items: Sequence[TokenInContext], contexts, matcher: PatternMatcher,
                  scores: Tuple[float, float, float], thresholds: Thresholds = Thresholds()) -> HeadReport:
    """
    Build a HeadReport from a head's tokens in context and attention scores.

    ``contexts`` indexes sequences by ``item.sequence_id``.
    """
    if not items:
        raise ValueError(f"head {head} has no tokens in context to classify")
    counts = ngram_counts(items, contexts)
    verdicts = [matcher.classify(item, contexts[item.sequence_id], counts) for item in items]
    tally = Counter(v.label for v in verdicts)
    percentages = {label: 100.0 * tally.get(label, 0) / len(verdicts) for label in LABELS if label != "unexplained"}
    explained = sum(percentages.values()) / 100.0
    type_label, subtype = type_head(percentages, scores, thresholds)
    report = HeadReport(
        head=tuple(head),
        percentages=percentages,
        type_label=type_label,
        subtype=subtype,
        multigram_count=multigram_count(verdicts),
        previous_token_score=scores[0],
        current_token_score=scores[1],
        induction_score=scores[2],
        explained_fraction=explained,
        items=len(verdicts),
    )
    logger.info(f"Head {head}: {type_label}{f' ({subtype})' if subtype else ''}, "
                f"explained {explained:.0%}, multigram count {report.multigram_count}")
    return report


def qk_ov(params: ParameterStore, layer: int, head: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    W_QK and W_OV of one head in column-vector convention (both d_model x d_model).
    """
    w_q = params.view(head_region(layer, head, "Q"))
    w_k = params.view(head_region(layer, head, "K"))
    w_v = params.view(head_region(layer, head, "V"))
    w_o = params.view(head_region(layer, head, "O"))
    return w_q @ w_k.T, (w_v @ w_o).T


def composition_score(m: np.ndarray, w_ov: np.ndarray) -> Tuple[float, bool]:
    """||M W_OV||_F / (||M||_F ||W_OV||_F); returns (0, True) when a norm vanishes."""
    denominator = np.linalg.norm(m) * np.linalg.norm(w_ov)
    if denominator == 0.0:
        return 0.0, True
    return float(np.linalg.norm(m @ w_ov) / denominator), False


def composition_scores(params: ParameterStore, h1: HeadId, h2: HeadId) -> CompositionScores:
    """Q, K and V composition of layer-1 head ``h2`` with layer-0 head ``h1``."""
    if h1[0] != 0 or h2[0] != 1:
        raise ValueError(f"composition needs a layer-0 head and a layer-1 head, got {h1} and {h2}")
    _, ov1 = qk_ov(params, *h1)
    qk2, ov2 = qk_ov(params, *h2)
    q, dq = composition_score(qk2.T, ov1)
    k, dk = composition_score(qk2, ov1)
    v, dv = composition_score(ov2, ov1)
    return CompositionScores(q, k, v, degenerate=dq or dk or dv)


def k_composition_trajectory(checkpoints: Sequence[Checkpoint], pairs: Sequence[Tuple[HeadId, HeadId]]) -> List[dict]:
    """Composition scores per (checkpoint, pair) in trajectory-row form."""
    rows = []
    for checkpoint in checkpoints:
        for h1, h2 in pairs:
            scores = composition_scores(checkpoint.params, h1, h2)
            target = f"head_{h1[0]}_{h1[1]}->head_{h2[0]}_{h2[1]}"
            for metric, value in (("k_composition", scores.k), ("q_composition", scores.q),
                                  ("v_composition", scores.v)):
                rows.append({"step": checkpoint.step, "target": target, "source": "weights",
                             "metric": metric, "value": value})
    return rows


def taxonomy_frame(reports: Sequence[HeadReport]) -> pd.DataFrame:
    """One row per head, the columns of the attention-head taxonomy table."""
    rows = []
    for r in reports:
        rows.append({
            "head": f"head_{r.head[0]}_{r.head[1]}",
            "type": r.type_label,
            "subtype": r.subtype or "",
            "multigram_count": r.multigram_count,
            "previous_token_score": r.previous_token_score,
            "current_token_score": r.current_token_score,
            "induction_score": r.induction_score,
            "explained_fraction": r.explained_fraction,
            **{f"pct_{label}": r.percentages.get(label, 0.0) for label in MULTIGRAM_LABELS + ("induction",)},
        })
    return pd.DataFrame(rows)


def export_reports(reports: Sequence[HeadReport], out_dir: str, step: int, config_hash: str,
                   tool_version: str) -> Tuple[str, str]:
    """HeadReport JSON for one checkpoint plus the taxonomy CSV."""
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, f"head_reports_step_{step:08d}.json")
    with open(json_path, "w") as f:
        document = {"config_hash": config_hash, "tool_version": tool_version, "step": step,
                    "reports": [r.to_dict() for r in reports]}
        json.dump(document, f, indent=2, sort_keys=True)
    csv_path = os.path.join(out_dir, f"taxonomy_step_{step:08d}.csv")
    frame = taxonomy_frame(reports)
    frame["config_hash"] = config_hash
    frame["tool_version"] = tool_version
    frame.to_csv(csv_path, index=False, float_format="%.17g")
    logger.info(f"Exported {len(reports)} head reports for step {step} to {out_dir}")
    return json_path, csv_path
