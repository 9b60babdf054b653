"""
Local learning coefficient estimation with SGLD.

The posterior is localised at w* and restricted to a weight mask; the loss
can be the empirical loss of any data source (data refinement) or the KL
divergence from a reference model. A full mask on the training source gives
the plain LLC, a head mask gives the weight-refined LLC, and so on.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from autodiff import LossFn, ParameterStore, value_and_grad
from datagen import DataSource
from results_store import CellKey, run_grid
from transformer import Checkpoint, ModelConfig, head_regions, make_kl_loss_fn, make_loss_fn

logger = logging.getLogger(__name__)

EVAL_STREAM = 1
CHAIN_STREAM_BASE = 16


class EstimationError(RuntimeError):
    """Raised when every SGLD chain failed."""


@dataclass(frozen=True)
class SgldConfig:
    step_size: float = 1e-3
    n_beta: float = 30.0
    gamma: float = 200.0
    chains: int = 4
    draws: int = 200
    burn_in: int = 0
    minibatch_size: int = 32
    eval_tokens: int = 2 ** 14
    seed: int = 0

    def __post_init__(self):
        for name in ("step_size", "n_beta", "gamma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.chains < 1 or self.draws < 1:
            raise ValueError(f"chains and draws must be positive, got {self.chains} and {self.draws}")
        if self.burn_in < 0:
            raise ValueError(f"burn_in must be nonnegative, got {self.burn_in}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be positive, got {self.minibatch_size}")


@dataclass(frozen=True)
class WeightMask:
    """Sorted flat indices SGLD may move; everything else stays at w*."""
    indices: np.ndarray
    size: int
    name: str = "mask"

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size == 0:
            raise ValueError(f"weight mask '{self.name}' is empty")
        if idx[0] < 0 or idx[-1] >= self.size:
            raise ValueError(f"weight mask '{self.name}' has indices outside [0, {self.size})")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return self.indices.size

    @classmethod
    def full(cls, params: ParameterStore, name: str = "all") -> "WeightMask":
        return cls(np.arange(len(params)), len(params), name)

    @classmethod
    def from_regions(cls, params: ParameterStore, regions: Iterable[str], name: Optional[str] = None) -> "WeightMask":
        regions = list(regions)
        return cls(params.indices(regions), len(params), name or "+".join(regions))

    @classmethod
    def head(cls, params: ParameterStore, layer: int, head: int) -> "WeightMask":
        """All four weight blocks of one head."""
        return cls.from_regions(params, head_regions(layer, head), name=f"head_{layer}_{head}")

    def restrict(self, vector: np.ndarray) -> np.ndarray:
        """Copy of ``vector`` with every coordinate outside the mask set to zero."""
        out = np.zeros_like(vector)
        out[self.indices] = vector[self.indices]
        return out


@dataclass
class ChainResult:
    chain: int
    trace: np.ndarray
    failed: bool = False
    final: Optional[ParameterStore] = None


@dataclass
class LlcEstimate:
    value: float
    per_chain: List[float]
    traces: List[List[float]]
    init_loss: float
    chains_ok: int
    chains_failed: int
    hyperparameters: Dict = field(default_factory=dict)

    @property
    def negative(self) -> bool:
        return self.value < 0

    @property
    def chain_std(self) -> float:
        return float(np.std(self.per_chain)) if self.per_chain else 0.0

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "per_chain": self.per_chain,
            "traces": self.traces,
            "init_loss": self.init_loss,
            "chains_ok": self.chains_ok,
            "chains_failed": self.chains_failed,
            "chain_std": self.chain_std,
            "negative": self.negative,
            "hyperparameters": self.hyperparameters,
        }


class BoundLoss:
    """
    A loss bound to its data: fresh minibatch losses for SGLD gradients and
    an optional fixed evaluation loss for the recorded trace.
    """

    def minibatch(self, chain: int, step: int) -> LossFn:
        raise NotImplementedError

    def evaluation(self) -> Optional[LossFn]:
        return None


class PotentialLoss(BoundLoss):
    """A data-free potential, used for constructed test landscapes."""

    def __init__(self, fn: LossFn):
        self.fn = fn

    def minibatch(self, chain, step):
        return self.fn

    def evaluation(self):
        return self.fn


class DatasetLoss(BoundLoss):
    """Empirical next-token loss over a data source."""

    def __init__(self, source: DataSource, config: ModelConfig, minibatch_size: int = 32,
                 eval_sequences: Optional[int] = None):
        if source.context_length > config.context_length:
            raise ValueError(f"source context {source.context_length} exceeds model context {config.context_length}")
        self.source = source
        self.config = config
        self.minibatch_size = minibatch_size
        self.eval_sequences = eval_sequences
        self._eval_fn: Optional[LossFn] = None

    def _make(self, batch) -> LossFn:
        return make_loss_fn(self.config, batch)

    def minibatch(self, chain, step):
        batch = self.source.sample_batch(self.minibatch_size, index=step, stream=CHAIN_STREAM_BASE + chain)
        return self._make(batch)

    def evaluation_batch(self) -> Optional[np.ndarray]:
        if not self.eval_sequences:
            return None
        return self.source.sample_batch(self.eval_sequences, index=0, stream=EVAL_STREAM)

    def evaluation(self):
        if self._eval_fn is None and self.eval_sequences:
            self._eval_fn = self._make(self.evaluation_batch())
        return self._eval_fn


class KlLoss(DatasetLoss):
    """Mean KL divergence from a reference model, the model-refined loss."""

    def __init__(self, reference: ParameterStore, source: DataSource, config: ModelConfig, **kwargs):
        super().__init__(source, config, **kwargs)
        self.reference = reference

    def _make(self, batch):
        return make_kl_loss_fn(self.config, self.reference, batch)


def eval_sequences_for(config: SgldConfig, context_length: int) -> int:
    """Sequences in the fixed evaluation batch of ``eval_tokens`` tokens."""
    return max(1, math.ceil(config.eval_tokens / context_length))


def kl_loss(reference, source: DataSource, config: ModelConfig, cfg: SgldConfig = SgldConfig()) -> KlLoss:
    """Bind the model-refined loss against a reference checkpoint or parameter store."""
    ref_params = getattr(reference, "params", reference)
    return KlLoss(ref_params, source, config, minibatch_size=cfg.minibatch_size,
                  eval_sequences=eval_sequences_for(cfg, source.context_length))


def bind_loss(data: Union[DataSource, BoundLoss], params: ParameterStore, cfg: SgldConfig = SgldConfig()) -> BoundLoss:
    if isinstance(data, BoundLoss):
        return data
    if params.config is None:
        raise ValueError("binding a data source requires parameters that carry a ModelConfig")
    return DatasetLoss(data, params.config, minibatch_size=cfg.minibatch_size,
                       eval_sequences=eval_sequences_for(cfg, data.context_length))


def _evaluate(loss_fn: LossFn, params: ParameterStore) -> float:
    return loss_fn(params.bind()).item()


def sgld_chain(w_star: ParameterStore, mask: WeightMask, loss: BoundLoss, cfg: SgldConfig,
               chain: int = 0) -> ChainResult:
    """
    Run one localised SGLD chain and record a loss per draw.

    Each step applies, on masked coordinates only,
    w <- w - (eps / 2) * (n_beta * grad + gamma * (w - w*)) + N(0, eps).
    The recorded loss is the evaluation loss when one is bound, otherwise the
    minibatch loss at the pre-step point.
    """
    if mask.size != len(w_star):
        raise ValueError(f"mask covers {mask.size} parameters but w* has {len(w_star)}")
    if not np.all(np.isfinite(w_star.flat)):
        raise ValueError("w* must be finite")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, chain]))
    idx = mask.indices
    anchor = w_star.flat[idx].copy()
    flat = w_star.flat.copy()
    evaluation = loss.evaluation()
    eps = cfg.step_size
    noise_scale = math.sqrt(eps)
    trace = []
    total_steps = cfg.burn_in + cfg.draws
    for step in range(total_steps):
        current = w_star.with_flat(flat)
        batch_loss, grad = value_and_grad(loss.minibatch(chain, step), current)
        drift = cfg.n_beta * grad[idx] + cfg.gamma * (flat[idx] - anchor)
        flat[idx] = flat[idx] - 0.5 * eps * drift + noise_scale * rng.standard_normal(idx.size)
        if step >= cfg.burn_in:
            recorded = batch_loss if evaluation is None else _evaluate(evaluation, w_star.with_flat(flat))
            if not math.isfinite(recorded):
                logger.debug(f"Chain {chain} produced a non-finite loss at step {step}; marking failed")
                return ChainResult(chain, np.array(trace), failed=True)
            trace.append(recorded)
        if not np.all(np.isfinite(flat[idx])):
            logger.debug(f"Chain {chain} diverged at step {step}; marking failed")
            return ChainResult(chain, np.array(trace), failed=True)
    return ChainResult(chain, np.array(trace), final=w_star.with_flat(flat))


def estimate_llc(w_star: ParameterStore, mask: WeightMask, data: Union[DataSource, BoundLoss],
                 cfg: SgldConfig = SgldConfig(), workers: int = 1) -> LlcEstimate:
    """
    lambda_hat = n_beta * (mean posterior loss - loss at w*).

    The posterior mean pools every surviving chain's post-burn-in trace. The
    loss at w* is evaluated on the bound evaluation batch (or potential).

    Raises:
        EstimationError: if every chain failed.
    """
    loss = bind_loss(data, w_star, cfg)
    reference = loss.evaluation() or loss.minibatch(0, 0)
    init_loss = _evaluate(reference, w_star)

    def run(chain):
        try:
            return sgld_chain(w_star, mask, loss, cfg, chain)
        except FloatingPointError as e:
            logger.debug(f"Chain {chain} failed: {e}")
            return ChainResult(chain, np.zeros(0), failed=True)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(cfg.chains)))
    else:
        results = [run(c) for c in range(cfg.chains)]

    ok = [r for r in results if not r.failed]
    failed = len(results) - len(ok)
    if not ok:
        raise EstimationError(f"all {cfg.chains} SGLD chains failed for mask '{mask.name}'")
    per_chain = [cfg.n_beta * (float(r.trace.mean()) - init_loss) for r in ok]
    pooled = float(np.mean(np.concatenate([r.trace for r in ok])))
    value = cfg.n_beta * (pooled - init_loss)
    if value < 0:
        logger.warning(f"Negative LLC estimate {value:.4f} for mask '{mask.name}' (w* is likely not a local minimum)")
    if failed:
        logger.warning(f"{failed} of {cfg.chains} chains failed for mask '{mask.name}'")
    return LlcEstimate(
        value=value,
        per_chain=per_chain,
        traces=[r.trace.tolist() for r in ok],
        init_loss=init_loss,
        chains_ok=len(ok),
        chains_failed=failed,
        hyperparameters=asdict(cfg),
    )


SourceSpec = Union[DataSource, BoundLoss, Callable[[Checkpoint], BoundLoss]]


def resolve_loss(source: SourceSpec, checkpoint: Checkpoint, cfg: SgldConfig) -> BoundLoss:
    """Source entries may be data sources, bound losses, or per-checkpoint factories."""
    if isinstance(source, (DataSource, BoundLoss)):
        return bind_loss(source, checkpoint.params, cfg)
    return source(checkpoint)


def llc_cell(checkpoint: Checkpoint, mask: WeightMask, source: SourceSpec, cfg: SgldConfig) -> dict:
    estimate = estimate_llc(checkpoint.params, mask, resolve_loss(source, checkpoint, cfg), cfg)
    return estimate.to_dict()


def trajectory(checkpoints: Sequence[Checkpoint], targets: Mapping[str, WeightMask],
               sources: Mapping[str, SourceSpec], cfg: SgldConfig = SgldConfig(), store=None,
               workers: int = 1, config_hash: str = "", progress: bool = False) -> List[dict]:
    """
    lambda_hat for every (checkpoint, target, source) cell.

    Completed cells found in ``store`` are reused; a failing cell is logged
    and reported with ``value=None`` without stopping the grid.

    Returns:
        One row per cell, in (step, target, source) order.
    """
    if not checkpoints:
        raise ValueError("trajectory needs at least one checkpoint")
    by_step = {c.step: c for c in checkpoints}
    keys = [CellKey(config_hash, c.step, target, source, "llc")
            for c in checkpoints for target in targets for source in sources]

    def compute(key):
        return llc_cell(by_step[key.step], targets[key.target], sources[key.source], cfg)

    results = run_grid(keys, compute, store=store, workers=workers, progress=progress)
    return [llc_row(key, value) for key, value in results]


def llc_row(key, value: Optional[dict]) -> dict:
    row = {"step": key.step, "target": key.target, "source": key.source, "metric": key.metric}
    if value is None:
        row.update(value=None, init_loss=None, chains_ok=0, chains_failed=None, negative=None)
    else:
        row.update(value=value["value"], init_loss=value["init_loss"], chains_ok=value["chains_ok"],
                   chains_failed=value["chains_failed"], negative=value["negative"])
    return row


def head_targets(params: ParameterStore, include_full: bool = True) -> Dict[str, WeightMask]:
    """Named masks: the full model and each head's four blocks."""
    targets = {}
    if include_full:
        targets["all"] = WeightMask.full(params)
    config = params.config
    for layer, head in config.heads:
        mask = WeightMask.head(params, layer, head)
        targets[mask.name] = mask
    return targets
