"""
Attention-only transformer with a named per-head parameter partition,
its empirical and reference-KL losses, and the on-disk checkpoint store.
"""
import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from autodiff import (
    LossFn,
    ParameterStore,
    Tensor,
    add,
    cross_entropy,
    embedding,
    kl_divergence,
    layer_norm,
    matmul,
    scale,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
HEAD_BLOCKS = ("Q", "K", "V", "O")
MANIFEST_NAME = "manifest.json"
PARAMS_NAME = "params.bin"

HeadId = Tuple[int, int]
HeadHook = Callable[[np.ndarray], np.ndarray]


class TokenRangeError(ValueError):
    """Raised when a token id falls outside the vocabulary."""

    def __init__(self, position: int, token: int, vocab_size: int):
        self.position = position
        self.token = token
        super().__init__(f"token {token} at position {position} is outside vocab of size {vocab_size}")


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, step: int, last_good: "Checkpoint"):
        self.step = step
        self.last_good = last_good
        super().__init__(f"training loss became non-finite at step {step}; "
                         f"last good checkpoint is step {last_good.step}")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    context_length: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    layer_norm: bool = True
    init_scale: float = 0.02
    layer_norm_position: str = "pre"
    positional: str = "shortformer"

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.context_length < 2:
            raise ValueError(f"context_length must be at least 2, got {self.context_length}")
        if self.n_layers not in (0, 1, 2):
            raise ValueError(f"n_layers must be 0, 1 or 2, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.init_scale <= 0:
            raise ValueError(f"init_scale must be positive, got {self.init_scale}")
        if self.layer_norm_position != "pre":
            raise ValueError(f"only pre-attention layer norm is supported, got {self.layer_norm_position}")
        if self.positional != "shortformer":
            raise ValueError(f"only shortformer positions are supported, got {self.positional}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def heads(self) -> List[HeadId]:
        return [(layer, head) for layer in range(self.n_layers) for head in range(self.n_heads)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        return cls(**dict(data))


@dataclass
class Checkpoint:
    step: int
    config: ModelConfig
    params: ParameterStore
    rng_state: Dict[str, int] = field(default_factory=dict)
    loss_at_save: Optional[float] = None
    metadata: Dict[str, object] = field(default_factory=dict)


def head_region(layer: int, head: int, block: str) -> str:
    return f"head_{layer}_{head}_{block}"


def head_regions(layer: int, head: int) -> List[str]:
    """Names of the four weight blocks of one head."""
    return [head_region(layer, head, block) for block in HEAD_BLOCKS]


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Region layout in flat order."""
    d, dh = config.d_model, config.d_head
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (config.vocab_size, d)}
    if config.n_layers > 0:
        shapes["pos"] = (config.context_length, d)
    for layer in range(config.n_layers):
        if config.layer_norm:
            shapes[f"ln_{layer}"] = (2, d)
        for head in range(config.n_heads):
            shapes[head_region(layer, head, "Q")] = (d, dh)
            shapes[head_region(layer, head, "K")] = (d, dh)
            shapes[head_region(layer, head, "V")] = (d, dh)
            shapes[head_region(layer, head, "O")] = (dh, d)
    shapes["unembed"] = (d, config.vocab_size)
    return shapes


def init_params(config: ModelConfig, seed: int = 0) -> ParameterStore:
    """Gaussian initialisation at ``config.init_scale``; layer-norm gains 1, biases 0."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    shapes = parameter_shapes(config)
    store = ParameterStore.from_shapes(shapes, config=config)
    flat = rng.normal(0.0, config.init_scale, size=len(store))
    for layer in range(config.n_layers):
        name = f"ln_{layer}"
        if name in store.regions:
            region = store.regions[name]
            d = config.d_model
            flat[region.start:region.start + d] = 1.0
            flat[region.start + d:region.stop] = 0.0
    return store.with_flat(flat)


def validate_tokens(config: ModelConfig, tokens) -> np.ndarray:
    """Coerce tokens to a 2-D int array and check ids and length."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
    if tokens.shape[1] > config.context_length:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds context length {config.context_length}")
    if tokens.size:
        bad = np.argwhere((tokens < 0) | (tokens >= config.vocab_size))
        if bad.size:
            row, position = bad[0]
            raise TokenRangeError(int(position), int(tokens[row, position]), config.vocab_size)
    return tokens.astype(np.int64)


def run_model(weights: Mapping[str, Tensor], config: ModelConfig, tokens: np.ndarray,
              hooks: Optional[Mapping[HeadId, HeadHook]] = None,
              cache: Optional[Dict] = None) -> Tensor:
    """
    Logits for a (batch, T) token array.

    Each head's output (after its O projection, before it is added to the
    residual stream) can be replaced through ``hooks``. Replaced outputs are
    constants. When ``cache`` is given, attention patterns and head outputs
    are stored under ``("attn", layer, head)`` and ``("head_out", layer, head)``.
    """
    seq_len = tokens.shape[1]
    x = embedding(weights["embed"], tokens)
    if config.n_layers > 0:
        positions = embedding(weights["pos"], np.arange(seq_len))
        causal = np.triu(np.full((seq_len, seq_len), MASK_VALUE), k=1)
        inv_sqrt = 1.0 / np.sqrt(config.d_head)
    for layer in range(config.n_layers):
        normed = layer_norm(x, weights[f"ln_{layer}"]) if config.layer_norm else x
        qk_input = add(normed, positions)
        layer_out = None
        for head in range(config.n_heads):
            q = matmul(qk_input, weights[head_region(layer, head, "Q")])
            k = matmul(qk_input, weights[head_region(layer, head, "K")])
            v = matmul(normed, weights[head_region(layer, head, "V")])
            scores = add(scale(matmul(q, transpose(k)), inv_sqrt), causal)
            pattern = softmax(scores)
            out = matmul(matmul(pattern, v), weights[head_region(layer, head, "O")])
            if cache is not None:
                cache[("attn", layer, head)] = pattern.data
            if hooks and (layer, head) in hooks:
                replaced = np.asarray(hooks[(layer, head)](out.data), dtype=np.float64)
                if replaced.shape != out.shape:
                    raise ValueError(f"hook for head {(layer, head)} returned shape "
                                     f"{replaced.shape}, expected {out.shape}")
                out = Tensor(np.broadcast_to(replaced, out.shape).copy())
            if cache is not None:
                cache[("head_out", layer, head)] = out.data
            layer_out = out if layer_out is None else add(layer_out, out)
        x = add(x, layer_out)
    return matmul(x, weights["unembed"])


def logits(params: ParameterStore, tokens) -> np.ndarray:
    config = params.config
    tokens = validate_tokens(config, tokens)
    return run_model(params.bind(), config, tokens).data


def forward(params: ParameterStore, tokens) -> np.ndarray:
    """
    Next-token distributions at every position.

    Args:
        params: Weights carrying their ModelConfig.
        tokens: A sequence of length <= K, or a (batch, T) array.

    Returns:
        Array of shape (T, vocab) for one sequence or (batch, T, vocab).
    """
    single = np.asarray(tokens).ndim == 1
    out = logits(params, tokens)
    shifted = out - out.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs[0] if single else probs


def run_with_cache(params: ParameterStore, tokens,
                   hooks: Optional[Mapping[HeadId, HeadHook]] = None) -> Tuple[np.ndarray, Dict]:
    """Logits plus the attention/head-output cache, with optional head-output hooks."""
    config = params.config
    tokens = validate_tokens(config, tokens)
    cache: Dict = {}
    out = run_model(params.bind(), config, tokens, hooks=hooks, cache=cache)
    return out.data, cache


def per_token_loss(params: ParameterStore, tokens,
                   hooks: Optional[Mapping[HeadId, HeadHook]] = None) -> np.ndarray:
    """Cross-entropy for predicting token k+1 from the prefix ending at k, shape (batch, T-1)."""
    config = params.config
    tokens = validate_tokens(config, tokens)
    out = run_model(params.bind(), config, tokens[:, :-1], hooks=hooks)
    return cross_entropy(out, tokens[:, 1:], reduction="none").data


def _check_batch(batch) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise ValueError("batch must contain at least one context")
    if batch.shape[1] < 2:
        raise ValueError(f"contexts need at least 2 tokens, got {batch.shape[1]}")
    return batch


def make_loss_fn(config: ModelConfig, batch) -> LossFn:
    """Empirical loss over a fixed batch as a function of bound weights."""
    batch = validate_tokens(config, _check_batch(batch))
    inputs, targets = batch[:, :-1], batch[:, 1:]

    def loss_fn(weights):
        return cross_entropy(run_model(weights, config, inputs), targets)

    return loss_fn


def empirical_loss(params: ParameterStore, batch) -> float:
    """
    Mean next-token cross-entropy over all contexts and positions 1..K-1.

    Raises:
        ValueError: if the batch is empty.
    """
    return make_loss_fn(params.config, batch)(params.bind()).item()


def _reference_probs(reference: ParameterStore, inputs: np.ndarray) -> np.ndarray:
    return forward(reference, inputs)


def make_kl_loss_fn(config: ModelConfig, reference: ParameterStore, batch) -> LossFn:
    """Mean D_KL(reference || model) over positions, the nonnegative model-refined loss."""
    if reference.config.vocab_size != config.vocab_size:
        raise ValueError(f"reference vocab {reference.config.vocab_size} does not match "
                         f"model vocab {config.vocab_size}")
    batch = validate_tokens(config, _check_batch(batch))
    inputs = batch[:, :-1]
    ref_probs = _reference_probs(reference, inputs)

    def loss_fn(weights):
        return kl_divergence(ref_probs, run_model(weights, config, inputs))

    return loss_fn


def kl_loss_vs_reference(params: ParameterStore, reference: ParameterStore, batch) -> float:
    """
    Negated mean KL divergence from a reference model's predictions.

    Returns -(1/n) sum_i (1/(K-1)) sum_k D_KL(M(S_<=k) || f_w(S_<=k)); zero when the
    two models agree and negative otherwise.
    """
    loss = make_kl_loss_fn(params.config, reference, batch)(params.bind()).item()
    return -loss


def save_checkpoint(root: str, checkpoint: Checkpoint, tokenizer_hash: Optional[str] = None) -> str:
    """
    Write ``root/checkpoints/step_<08d>/`` atomically.

    The directory holds manifest.json and params.bin (little-endian float64
    in region-table order).
    """
    base = os.path.join(root, "checkpoints")
    os.makedirs(base, exist_ok=True)
    target = checkpoint_path(root, checkpoint.step)
    manifest = {
        "step": checkpoint.step,
        "config": checkpoint.config.to_dict(),
        "regions": checkpoint.params.region_table(),
        "rng_state": checkpoint.rng_state,
        "loss_at_save": checkpoint.loss_at_save,
        "metadata": checkpoint.metadata,
        "tokenizer_hash": tokenizer_hash,
    }
    staging = tempfile.mkdtemp(prefix=".step_", dir=base)
    try:
        with open(os.path.join(staging, PARAMS_NAME), "wb") as f:
            f.write(checkpoint.params.flat.astype("<f8").tobytes())
        with open(os.path.join(staging, MANIFEST_NAME), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        if os.path.isdir(target):
            shutil.rmtree(target)
        os.replace(staging, target)
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    logger.info(f"Saved checkpoint step {checkpoint.step} to {target}")
    return target


def load_checkpoint(path: str) -> Checkpoint:
    with open(os.path.join(path, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    config = ModelConfig.from_dict(manifest["config"])
    flat = np.fromfile(os.path.join(path, PARAMS_NAME), dtype="<f8").astype(np.float64)
    expected = ParameterStore.from_shapes(parameter_shapes(config), config=config)
    if manifest["regions"] != expected.region_table():
        raise ValueError(f"region table in {path} does not match the layout for its config")
    params = ParameterStore(flat, expected.regions, config=config)
    return Checkpoint(
        step=int(manifest["step"]),
        config=config,
        params=params,
        rng_state=manifest.get("rng_state", {}),
        loss_at_save=manifest.get("loss_at_save"),
        metadata=manifest.get("metadata", {}),
    )


def checkpoint_path(root: str, step: int) -> str:
    return os.path.join(root, "checkpoints", f"step_{step:08d}")


def list_checkpoints(root: str) -> List[int]:
    """Steps of complete checkpoints under ``root``, ascending."""
    base = os.path.join(root, "checkpoints")
    if not os.path.isdir(base):
        return []
    steps = []
    for name in os.listdir(base):
        if not name.startswith("step_"):
            continue
        if not os.path.exists(os.path.join(base, name, MANIFEST_NAME)):
            continue
        try:
            steps.append(int(name[len("step_"):]))
        except ValueError:
            logger.warning(f"Ignoring unexpected checkpoint directory {name}")
    return sorted(steps)


def load_all(root: str) -> List[Checkpoint]:
    return [load_checkpoint(checkpoint_path(root, step)) for step in list_checkpoints(root)]
