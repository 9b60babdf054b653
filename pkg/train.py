"""
Training loop for the attention-only transformer and its reference models.
"""
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from autodiff import value_and_grad
from datagen import DataSource, PatternSpec, SyntheticSource
from results_store import TOOL_VERSION
from transformer import (
    Checkpoint,
    DivergenceError,
    ModelConfig,
    init_params,
    make_loss_fn,
    save_checkpoint,
)

logger = logging.getLogger(__name__)

LOSS_CURVE_NAME = "loss_curve.csv"


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.name}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be nonnegative, got {self.warmup_steps}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")


class Optimizer:
    """Plain SGD or Adam over a flat parameter vector, with warmup and clipping."""

    def __init__(self, settings: OptimizerConfig, size: int):
        self.settings = settings
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray) -> np.ndarray:
        s = self.settings
        self.t += 1
        if s.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > s.clip_norm:
                grad = grad * (s.clip_norm / norm)
        lr = s.lr * min(1.0, self.t / s.warmup_steps) if s.warmup_steps else s.lr
        if s.name == "sgd":
            return flat - lr * grad
        self.m = s.beta1 * self.m + (1 - s.beta1) * grad
        self.v = s.beta2 * self.v + (1 - s.beta2) * grad ** 2
        m_hat = self.m / (1 - s.beta1 ** self.t)
        v_hat = self.v / (1 - s.beta2 ** self.t)
        return flat - lr * m_hat / (np.sqrt(v_hat) + s.eps)


def log_schedule(steps: int, per_decade: int = 20) -> List[int]:
    """
    Log-spaced checkpoint steps in [0, steps], base 10, always including both ends.
    """
    if steps < 0:
        raise ValueError(f"steps must be nonnegative, got {steps}")
    schedule = {0, steps}
    if steps > 0:
        points = int(math.floor(per_decade * math.log10(steps))) + 1
        for i in range(points):
            schedule.add(int(round(10 ** (i / per_decade))))
    return sorted(s for s in schedule if s <= steps)


def train(config: ModelConfig, data: DataSource, steps: int, batch_size: int,
          optimizer: OptimizerConfig = OptimizerConfig(), schedule: Optional[Sequence[int]] = None,
          seed: int = 0, out_dir: Optional[str] = None, tokenizer_hash: Optional[str] = None,
          progress: bool = False, config_hash: Optional[str] = None) -> List[Checkpoint]:
    """
    Train from a seeded initialisation and checkpoint on a schedule.

    Args:
        config: Model architecture.
        data: Training distribution; step ``s`` uses batch index ``s - 1``.
        steps: Number of optimizer steps; 0 returns only the initialisation.
        batch_size: Sequences per step.
        optimizer: Optimizer settings, recorded in checkpoint metadata.
        schedule: Steps to checkpoint at; defaults to ``log_schedule(steps)``.
        seed: Initialisation seed.
        out_dir: When given, checkpoints and ``loss_curve.csv`` are written here.
        config_hash: Stamped on every row of ``loss_curve.csv`` and in checkpoint metadata.

    Returns:
        The checkpoints in step order.

    Raises:
        DivergenceError: if the loss becomes non-finite, carrying the last good checkpoint.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if data.context_length != config.context_length:
        raise ValueError(f"data context length {data.context_length} does not match model "
                         f"context length {config.context_length}")
    schedule = set(log_schedule(steps) if schedule is None else schedule)
    schedule.update({0, steps})
    params = init_params(config, seed)
    opt = Optimizer(optimizer, len(params))
    metadata = {"optimizer": asdict(optimizer), "batch_size": batch_size, "steps": steps,
                "data": data.describe(), "layer_norm_position": config.layer_norm_position,
                "config_hash": config_hash, "tool_version": TOOL_VERSION}
    rng_state = {"init_seed": seed, "data_seed": data.seed}

    def snapshot(step, loss):
        ckpt = Checkpoint(step=step, config=config, params=params, rng_state=rng_state,
                          loss_at_save=loss, metadata=metadata)
        if out_dir is not None:
            save_checkpoint(out_dir, ckpt, tokenizer_hash=tokenizer_hash)
        return ckpt

    checkpoints = [snapshot(0, None)]
    curve = []
    bar = tqdm(range(1, steps + 1), desc="train", disable=not progress or not sys.stderr.isatty())
    for step in bar:
        batch = data.sample_batch(batch_size, index=step - 1)
        loss, grad = value_and_grad(make_loss_fn(config, batch), params)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            logger.error(f"Non-finite loss at step {step}; aborting")
            _write_curve(out_dir, curve, config_hash)
            raise DivergenceError(step, checkpoints[-1])
        params = params.with_flat(opt.step(params.flat, grad))
        curve.append((step, loss))
        if step in schedule:
            checkpoints.append(snapshot(step, loss))
        if step % 100 == 0:
            bar.set_postfix(loss=f"{loss:.4f}")
            logger.debug(f"step {step}/{steps} loss {loss:.6f}")
    _write_curve(out_dir, curve, config_hash)
    logger.info(f"Training finished: {steps} steps, {len(checkpoints)} checkpoints")
    return checkpoints


def _write_curve(out_dir: Optional[str], curve, config_hash: Optional[str]):
    if out_dir is None:
        return
    os.makedirs(out_dir, exist_ok=True)
    frame = pd.DataFrame(curve, columns=["step", "train_loss"])
    frame["config_hash"] = config_hash
    frame["tool_version"] = TOOL_VERSION
    frame.to_csv(os.path.join(out_dir, LOSS_CURVE_NAME), index=False, float_format="%.17g")


def train_reference(config: ModelConfig, n_layers: int, data: DataSource, steps: int, batch_size: int,
                    optimizer: OptimizerConfig = OptimizerConfig(), seed: int = 0,
                    out_dir: Optional[str] = None, config_hash: Optional[str] = None) -> Checkpoint:
    """Train a zero- or one-layer reference with the same vocabulary and context."""
    reference_config = replace(config, n_layers=n_layers)
    checkpoints = train(reference_config, data, steps, batch_size, optimizer,
                        schedule=[steps], seed=seed, out_dir=out_dir, config_hash=config_hash)
    return checkpoints[-1]


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')

    CONFIG = ModelConfig()  # desk scale: vocab 512, K 64, d_model 64, 4 heads per layer
    STEPS = 10000
    BATCH_SIZE = 16
    OUT_DIR = "runs/desk"

    source = SyntheticSource(PatternSpec.default(CONFIG.vocab_size), CONFIG.context_length, seed=0)
    train(CONFIG, source, STEPS, BATCH_SIZE, OptimizerConfig(name="adam", lr=1e-3, warmup_steps=100),
          out_dir=OUT_DIR, progress=True)
