"""
Interventions on head outputs: zero / mean / resample ablations, ablation
scores, tokens-in-context extraction, path patching and the ICL score.

All interventions replace a head's output after its O projection, before it
joins the residual stream.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import ParameterStore
from transformer import HeadHook, HeadId, per_token_loss, run_with_cache, validate_tokens

logger = logging.getLogger(__name__)

ABLATION_KINDS = ("zero", "mean", "resample", "none")


@dataclass(frozen=True)
class AblationSpec:
    targets: Tuple[HeadId, ...]
    kind: str = "mean"
    stats_size: int = 64
    roll_offset: int = 1
    position_independent: bool = True

    def __post_init__(self):
        if self.kind not in ABLATION_KINDS:
            raise ValueError(f"ablation kind must be one of {ABLATION_KINDS}, got {self.kind}")
        if self.kind != "none" and not self.targets:
            raise ValueError("ablation targets cannot be empty")
        object.__setattr__(self, "targets", tuple(tuple(t) for t in self.targets))


@dataclass
class TokenInContext:
    sequence_id: int
    position: int
    token: int
    target: int
    loss_delta: float
    attention: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "position": self.position,
            "token": self.token,
            "target": self.target,
            "loss_delta": self.loss_delta,
            "attention": [float(a) for a in self.attention],
        }


def _check_heads(params: ParameterStore, heads: Iterable[HeadId]):
    config = params.config
    for layer, head in heads:
        if not (0 <= layer < config.n_layers and 0 <= head < config.n_heads):
            raise ValueError(f"head {(layer, head)} does not exist in a {config.n_layers}-layer, "
                             f"{config.n_heads}-head model")


def mean_head_outputs(params: ParameterStore, heads: Iterable[HeadId], stats_tokens,
                      position_independent: bool = True) -> Dict[HeadId, np.ndarray]:
    """
    Mean output of each head over a statistics batch.

    The batch mean is taken per position; by default those are averaged again
    over positions to a single vector.
    """
    heads = list(heads)
    _, cache = run_with_cache(params, stats_tokens)
    means = {}
    for head in heads:
        per_position = cache[("head_out",) + tuple(head)].mean(axis=0)
        means[head] = per_position.mean(axis=0) if position_independent else per_position
    return means


def ablation_hooks(params: ParameterStore, spec: AblationSpec, batch_size: int,
                   stats_tokens=None) -> Dict[HeadId, HeadHook]:
    _check_heads(params, spec.targets)
    if spec.kind == "none":
        return {}
    if spec.kind == "zero":
        return {head: (lambda out: np.zeros_like(out)) for head in spec.targets}
    if spec.kind == "resample":
        if batch_size < 2:
            raise ValueError("resample ablation needs a batch of at least 2 sequences")
        offset = spec.roll_offset
        return {head: (lambda out: np.roll(out, offset, axis=0)) for head in spec.targets}
    if stats_tokens is None:
        raise ValueError("mean ablation requires a statistics batch")
    means = mean_head_outputs(params, spec.targets, stats_tokens, spec.position_independent)
    return {head: _constant_hook(vector) for head, vector in means.items()}


def _constant_hook(vector: np.ndarray) -> HeadHook:
    def hook(out):
        if vector.ndim == 2:
            return np.broadcast_to(vector[:out.shape[1]], out.shape)
        return np.broadcast_to(vector, out.shape)

    return hook


def ablation_score(params: ParameterStore, spec: AblationSpec, eval_tokens, stats_tokens=None) -> float:
    """
    Loss after the intervention minus the clean loss, on the same batch.
    """
    tokens = validate_tokens(params.config, eval_tokens)
    hooks = ablation_hooks(params, spec, tokens.shape[0], stats_tokens)
    clean = float(per_token_loss(params, tokens).mean())
    ablated = float(per_token_loss(params, tokens, hooks=hooks).mean())
    return ablated - clean


def tokens_in_context(params: ParameterStore, head: HeadId, pool_tokens, top_k: int,
                      stats_tokens) -> List[TokenInContext]:
    """
    The ``top_k`` positions whose loss rises most when ``head`` is mean-ablated.

    Ties break by (sequence id, position). Each item carries the head's clean
    attention row at its position.
    """
    tokens = validate_tokens(params.config, pool_tokens)
    pool = tokens.shape[0] * (tokens.shape[1] - 1)
    if top_k > pool:
        raise ValueError(f"top_k ({top_k}) exceeds the pool of {pool} positions")
    spec = AblationSpec(targets=(tuple(head),), kind="mean")
    hooks = ablation_hooks(params, spec, tokens.shape[0], stats_tokens)
    clean = per_token_loss(params, tokens)
    ablated = per_token_loss(params, tokens, hooks=hooks)
    deltas = ablated - clean
    _, cache = run_with_cache(params, tokens[:, :-1])
    attention = cache[("attn",) + tuple(head)]
    seq_ids, positions = np.meshgrid(np.arange(deltas.shape[0]), np.arange(deltas.shape[1]), indexing="ij")
    order = np.lexsort((positions.ravel(), seq_ids.ravel(), -deltas.ravel()))[:top_k]
    items = []
    for flat_index in order:
        s, p = int(seq_ids.ravel()[flat_index]), int(positions.ravel()[flat_index])
        items.append(TokenInContext(
            sequence_id=s, position=p, token=int(tokens[s, p]), target=int(tokens[s, p + 1]),
            loss_delta=float(deltas[s, p]), attention=attention[s, p, :p + 1].copy(),
        ))
    return items


def path_patch_per_token(params: ParameterStore, sources: Iterable[HeadId], receiver: HeadId,
                         eval_tokens, stats_tokens) -> np.ndarray:
    """
    Per-position loss change from routing mean-ablated source heads into the
    receiver only.

    Run A is clean. Run B mean-ablates the sources and captures the
    receiver's output. Run C is clean except that the receiver's output is
    replaced by the run-B capture. Returns loss(C) - loss(A).
    """
    sources = [tuple(s) for s in sources]
    receiver = tuple(receiver)
    _check_heads(params, sources + [receiver])
    if receiver[0] != 1 or any(layer != 0 for layer, _ in sources):
        raise ValueError(f"path patching needs layer-0 sources and a layer-1 receiver, "
                         f"got sources {sources} and receiver {receiver}")
    tokens = validate_tokens(params.config, eval_tokens)
    clean = per_token_loss(params, tokens)
    if not sources:
        return np.zeros_like(clean)
    spec = AblationSpec(targets=tuple(sources), kind="mean")
    hooks = ablation_hooks(params, spec, tokens.shape[0], stats_tokens)
    _, cache = run_with_cache(params, tokens[:, :-1], hooks=hooks)
    captured = cache[("head_out",) + receiver]
    patched = per_token_loss(params, tokens, hooks={receiver: lambda out: captured})
    return patched - clean


def path_patch(params: ParameterStore, sources: Iterable[HeadId], receiver: HeadId,
               eval_tokens, stats_tokens, positions: Optional[np.ndarray] = None) -> float:
    """
    Mean loss delta of the three-pass path patch; ``positions`` is an optional
    boolean (batch, T-1) selector for annotation-filtered evaluation.
    """
    deltas = path_patch_per_token(params, sources, receiver, eval_tokens, stats_tokens)
    if positions is not None:
        selected = deltas[np.asarray(positions, dtype=bool)]
        return float(selected.mean()) if selected.size else 0.0
    return float(deltas.mean())


def icl_score(params: ParameterStore, eval_tokens, early: int = 8, late: int = 56,
              hooks: Optional[Mapping[HeadId, HeadHook]] = None) -> float:
    """
    Mean loss on the token at index ``late`` minus the mean loss on the token
    at index ``early``; negative values mean later tokens are easier.
    """
    tokens = validate_tokens(params.config, eval_tokens)
    if tokens.shape[1] <= late:
        raise ValueError(f"context length {tokens.shape[1]} must exceed late position {late}")
    if early < 1 or early > late:
        raise ValueError(f"need 1 <= early <= late, got early={early}, late={late}")
    if early == late:
        return 0.0
    losses = per_token_loss(params, tokens, hooks=hooks)
    return float(losses[:, late - 1].mean() - losses[:, early - 1].mean())


def ablated_icl_score(params: ParameterStore, head: HeadId, eval_tokens, stats_tokens,
                      early: int = 8, late: int = 56) -> float:
    """ICL score with one head mean-ablated."""
    spec = AblationSpec(targets=(tuple(head),), kind="mean")
    tokens = validate_tokens(params.config, eval_tokens)
    hooks = ablation_hooks(params, spec, tokens.shape[0], stats_tokens)
    return icl_score(params, tokens, early, late, hooks=hooks)


def export_tokens_in_context(items: Sequence[TokenInContext], pool_tokens, path: str, config_hash: str,
                             tool_version: str, decode=None, window: int = 16):
    """
    Write one JSON object per line with a detokenised +/- ``window`` context.

    ``decode`` maps a list of token ids to text; ids are rendered as ``<id>``
    when it is omitted.
    """
    tokens = np.asarray(pool_tokens)
    render = decode or (lambda ids: " ".join(f"<{int(i)}>" for i in ids))
    with open(path, "w") as f:
        for item in items:
            row = tokens[item.sequence_id]
            lo = max(0, item.position - window)
            hi = min(len(row), item.position + window + 1)
            record = item.to_dict()
            record["context_before"] = render(row[lo:item.position + 1])
            record["context_after"] = render(row[item.position + 1:hi])
            record["config_hash"] = config_hash
            record["tool_version"] = tool_version
            f.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"Exported {len(items)} tokens in context to {path}")
