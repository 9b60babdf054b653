"""
Matrix-free curvature metrics built on Hessian-vector products: Hutchinson
trace, Fisher trace on self-generated data, power iteration for the
spectral radius, and a Chebyshev step-filter estimate of the number of
eigenvalues above a threshold.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Union

import numpy as np

from autodiff import ParameterStore, hvp
from datagen import DataSource, model_generator_source
from llc import BoundLoss, DatasetLoss, WeightMask

logger = logging.getLogger(__name__)

MatVec = Callable[[np.ndarray], np.ndarray]
PROBE_STREAM = 7


class SpectrumRangeError(RuntimeError):
    """Raised when the Chebyshev trace exceeds what the dimension allows."""


@dataclass(frozen=True)
class TraceConfig:
    samples: int = 100
    probes: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or self.probes < 1:
            raise ValueError(f"samples and probes must be positive, got {self.samples} and {self.probes}")


FIM_TRACE_CONFIG = TraceConfig(samples=30, probes=5)


@dataclass(frozen=True)
class RankConfig:
    degree: int = 100
    lower: float = -1000.0
    upper: float = 6000.0
    threshold: float = 500.0
    method: str = "fixed"
    adaptive_range: float = 1.2
    adaptive_threshold: float = 0.07
    probes: int = 50
    samples: int = 100
    power_iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("fixed", "adaptive"):
            raise ValueError(f"method must be 'fixed' or 'adaptive', got {self.method}")
        if self.degree < 2:
            raise ValueError(f"degree must be at least 2, got {self.degree}")
        if self.method == "fixed" and not self.lower < self.threshold < self.upper:
            raise ValueError(f"need lower < threshold < upper, got {self.lower}, {self.threshold}, {self.upper}")


@dataclass
class TraceEstimate:
    value: float
    stderr: float
    probes: int
    samples: Optional[int] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RankEstimate:
    value: float
    raw: float
    stderr: float
    lower: float
    upper: float
    threshold: float
    method: str
    damping: str = "jackson"

    def to_dict(self) -> dict:
        return asdict(self)


def _bound(data: Union[DataSource, BoundLoss], params: ParameterStore, samples: int) -> BoundLoss:
    if isinstance(data, BoundLoss):
        return data
    return DatasetLoss(data, params.config, eval_sequences=samples)


def restricted_operator(w: ParameterStore, mask: WeightMask, data: Union[DataSource, BoundLoss],
                        samples: int = 100) -> MatVec:
    """
    The Hessian sub-block on masked coordinates, acting on vectors of length ``len(mask)``.
    """
    loss_fn = _bound(data, w, samples).evaluation()
    if loss_fn is None:
        raise ValueError("curvature metrics need a loss with a fixed evaluation batch")
    idx = mask.indices
    size = len(w)

    def matvec(v_sub: np.ndarray) -> np.ndarray:
        v = np.zeros(size)
        v[idx] = v_sub
        return hvp(loss_fn, w, v)[idx]

    return matvec


def rademacher_probes(dim: int, count: int, seed: int) -> np.ndarray:
    """
    ``count`` Rademacher vectors of length ``dim``; the same seed gives the
    same probes, so trajectories share probes across checkpoints.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, PROBE_STREAM, dim]))
    return rng.choice(np.array([-1.0, 1.0]), size=(count, dim))


def hutchinson(matvec: MatVec, dim: int, probes: int, seed: int = 0, workers: int = 1) -> TraceEstimate:
    """Mean of v^T A v over Rademacher probes, with its standard error."""
    if probes < 1:
        raise ValueError(f"probes must be positive, got {probes}")
    vectors = rademacher_probes(dim, probes, seed)

    def quad(v):
        return float(v @ matvec(v))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = np.array(list(pool.map(quad, vectors)))
    else:
        samples = np.array([quad(v) for v in vectors])
    stderr = float(samples.std(ddof=1) / math.sqrt(probes)) if probes > 1 else float("nan")
    return TraceEstimate(float(samples.mean()), stderr, probes)


def hessian_trace(w_star: ParameterStore, mask: WeightMask, data: Union[DataSource, BoundLoss],
                  cfg: TraceConfig = TraceConfig(), workers: int = 1) -> TraceEstimate:
    """
    Hutchinson estimate of the trace of the masked Hessian sub-block.

    The loss is the empirical loss over ``cfg.samples`` sequences of ``data``
    (or a bound potential).
    """
    if cfg.probes < 2:
        raise ValueError(f"hessian_trace needs at least 2 probes, got {cfg.probes}")
    matvec = restricted_operator(w_star, mask, data, cfg.samples)
    estimate = hutchinson(matvec, len(mask), cfg.probes, cfg.seed, workers)
    estimate.samples = cfg.samples
    return estimate


def fim_trace(w_star: ParameterStore, cfg: TraceConfig = FIM_TRACE_CONFIG, seed: int = 0,
              mask: Optional[WeightMask] = None, workers: int = 1) -> TraceEstimate:
    """
    Fisher-information trace: the Hessian trace of the empirical loss on a
    batch sampled from the model itself.
    """
    mask = mask or WeightMask.full(w_star)
    source = model_generator_source(w_star, seed=seed)
    estimate = hessian_trace(w_star, mask, source, cfg, workers)
    if estimate.value < -3 * estimate.stderr:
        logger.warning(f"FIM trace {estimate.value:.4g} is below -3 standard errors ({estimate.stderr:.3g})")
    return estimate


def power_iteration(matvec: MatVec, dim: int, iterations: int = 50, seed: int = 0) -> float:
    """
    Largest |eigenvalue| as ||A v|| for the final unit iterate v.

    The sign of the dominant eigenvalue is not recovered. Only the magnitude
    is used, to size the symmetric adaptive Chebyshev range.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be positive, got {iterations}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, PROBE_STREAM + 1, dim]))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    norm = 0.0
    for _ in range(iterations):
        w = matvec(v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
    return norm


def max_abs_eigenvalue(w_star: ParameterStore, mask: WeightMask, data: Union[DataSource, BoundLoss],
                       iterations: int = 50, samples: int = 100, seed: int = 0) -> float:
    return power_iteration(restricted_operator(w_star, mask, data, samples), len(mask), iterations, seed)


def jackson_kernel(degree: int) -> np.ndarray:
    """Damping factors g_0..g_degree."""
    n = degree + 1
    m = np.arange(n)
    return ((n - m) * np.cos(np.pi * m / n) + np.sin(np.pi * m / n) / np.tan(np.pi / n)) / n


def step_coefficients(degree: int, lower: float, upper: float, threshold: float,
                      damped: bool = True) -> np.ndarray:
    """
    Chebyshev coefficients of the unit step at ``threshold`` on [lower, upper],
    mapped to [-1, 1]; with Jackson damping by default.
    """
    t0 = (2.0 * threshold - (lower + upper)) / (upper - lower)
    theta0 = math.acos(min(1.0, max(-1.0, t0)))
    k = np.arange(1, degree + 1)
    coeffs = np.concatenate([[theta0 / np.pi], 2.0 * np.sin(k * theta0) / (k * np.pi)])
    if damped:
        coeffs = coeffs * jackson_kernel(degree)
    return coeffs


def chebyshev_trace(matvec: MatVec, dim: int, coeffs: np.ndarray, lower: float, upper: float,
                    probes: int, seed: int = 0) -> TraceEstimate:
    """Hutchinson estimate of Tr(p(A)) with p evaluated by the Clenshaw recurrence."""
    centre = (upper + lower) / 2.0
    half_width = (upper - lower) / 2.0

    def scaled(v):
        return (matvec(v) - centre * v) / half_width

    def apply_poly(v):
        b1 = np.zeros(dim)
        b2 = np.zeros(dim)
        for c in coeffs[:0:-1]:
            b1, b2 = c * v + 2.0 * scaled(b1) - b2, b1
        return coeffs[0] * v + scaled(b1) - b2

    return hutchinson(apply_poly, dim, probes, seed)


def chebyshev_rank(matvec: MatVec, dim: int, cfg: RankConfig, lower: float, upper: float,
                   threshold: float) -> RankEstimate:
    coeffs = step_coefficients(cfg.degree, lower, upper, threshold)
    estimate = chebyshev_trace(matvec, dim, coeffs, lower, upper, cfg.probes, cfg.seed)
    raw = estimate.value
    if raw > 1.1 * dim + 1 or raw < -0.1 * dim - 1:
        raise SpectrumRangeError(f"Chebyshev trace {raw:.4g} is outside [0, {dim}]: the spectrum likely "
                                 f"leaves [{lower}, {upper}]; widen the approximation range")
    return RankEstimate(value=float(min(max(raw, 0.0), dim)), raw=raw, stderr=estimate.stderr,
                        lower=lower, upper=upper, threshold=threshold, method=cfg.method)


def hessian_rank(w_star: ParameterStore, mask: WeightMask, data: Union[DataSource, BoundLoss],
                 cfg: RankConfig = RankConfig()) -> RankEstimate:
    """
    Approximate count of Hessian eigenvalues above the threshold.

    The fixed method uses the configured range and threshold. The adaptive
    method first finds |lambda_max| by power iteration and uses
    [-1.2 |lambda_max|, 1.2 |lambda_max|] with threshold 0.07 |lambda_max|.
    """
    matvec = restricted_operator(w_star, mask, data, cfg.samples)
    dim = len(mask)
    if cfg.method == "fixed":
        lower, upper, threshold = cfg.lower, cfg.upper, cfg.threshold
    else:
        top = power_iteration(matvec, dim, cfg.power_iterations, cfg.seed)
        if top == 0.0:
            logger.info("Hessian block is zero; rank is 0")
            return RankEstimate(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, cfg.method)
        lower, upper = -cfg.adaptive_range * top, cfg.adaptive_range * top
        threshold = cfg.adaptive_threshold * top
    logger.debug(f"Chebyshev rank on [{lower:.4g}, {upper:.4g}] above {threshold:.4g}, degree {cfg.degree}")
    return chebyshev_rank(matvec, dim, cfg, lower, upper, threshold)

