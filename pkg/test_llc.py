import logging

import numpy as np
import pytest

from autodiff import ParameterStore, Tensor, mul, scale, total
from datagen import CorpusSource
from llc import (
    DatasetLoss,
    EstimationError,
    PotentialLoss,
    SgldConfig,
    WeightMask,
    estimate_llc,
    head_targets,
    kl_loss,
    sgld_chain,
    trajectory,
)
from results_store import ResultsStore
from transformer import Checkpoint, ModelConfig, init_params


def column_store(d: int) -> ParameterStore:
    return ParameterStore.from_shapes({"w": (d, 1)})


def half_square(sign: float = 1.0):
    def loss_fn(weights):
        w = weights["w"]
        return scale(total(mul(w, w)), 0.5 * sign)

    return PotentialLoss(loss_fn)


def quartic():
    def loss_fn(weights):
        w = weights["w"]
        sq = mul(w, w)
        return total(mul(sq, sq))

    return PotentialLoss(loss_fn)


def gaussian_oracle(d, cfg):
    return cfg.n_beta * (d / 2) / (cfg.n_beta + cfg.gamma)


@pytest.mark.parametrize("d,chains,draws", [(2, 32, 1000), (10, 16, 1000), (100, 4, 200)])
def test_quadratic_potential_matches_closed_form(d, chains, draws):
    cfg = SgldConfig(step_size=1e-3, n_beta=30.0, gamma=200.0, chains=chains, draws=draws, seed=d)
    w_star = column_store(d)
    estimate = estimate_llc(w_star, WeightMask.full(w_star), half_square(), cfg)
    expected = gaussian_oracle(d, cfg)
    assert abs(estimate.value - expected) <= 0.1 * expected
    assert estimate.chains_ok == chains
    assert len(estimate.traces[0]) == draws
    assert estimate.init_loss == 0.0


def test_weak_localisation_recovers_half_dimension():
    cfg = SgldConfig(step_size=1e-4, n_beta=3000.0, gamma=20.0, chains=8, draws=500, seed=1)
    w_star = column_store(10)
    estimate = estimate_llc(w_star, WeightMask.full(w_star), half_square(), cfg)
    assert abs(estimate.value - 5.0) <= 0.25 * 5.0


@pytest.mark.parametrize("d", [10, 50])
def test_mask_restricts_the_estimate(d):
    cfg = SgldConfig(step_size=1e-4, n_beta=3000.0, gamma=20.0, chains=8, draws=500, seed=2)
    w_star = column_store(d)
    mask = WeightMask(np.array([0, 3, 7]), d, "three")
    estimate = estimate_llc(w_star, mask, half_square(), cfg)
    assert abs(estimate.value - 1.5) <= 0.25 * 1.5


def test_quartic_potential_has_coefficient_one_quarter():
    cfg = SgldConfig(step_size=3e-4, n_beta=1e4, gamma=1e-2, chains=16, draws=3000, burn_in=300, seed=3)
    w_star = column_store(1)
    estimate = estimate_llc(w_star, WeightMask.full(w_star), quartic(), cfg)
    assert abs(estimate.value - 0.25) <= 0.25 * 0.25


def test_negative_estimate_at_a_maximum():
    cfg = SgldConfig(chains=2, draws=100)
    w_star = column_store(4)
    estimate = estimate_llc(w_star, WeightMask.full(w_star), half_square(sign=-1.0), cfg)
    assert estimate.negative
    assert estimate.to_dict()["negative"] is True


def test_estimates_are_deterministic_per_seed():
    cfg = SgldConfig(chains=3, draws=50, seed=11)
    w_star = column_store(5)
    a = estimate_llc(w_star, WeightMask.full(w_star), half_square(), cfg)
    b = estimate_llc(w_star, WeightMask.full(w_star), half_square(), cfg, workers=3)
    assert a.value == b.value
    assert a.per_chain == b.per_chain


def test_all_chains_failing_raises():
    def loss_fn(weights):
        return total(mul(weights["w"], Tensor(np.full((3, 1), np.nan))))

    w_star = column_store(3)
    with pytest.raises(EstimationError):
        estimate_llc(w_star, WeightMask.full(w_star), PotentialLoss(loss_fn), SgldConfig(chains=2, draws=5))


def test_invalid_inputs_are_rejected():
    with pytest.raises(ValueError):
        SgldConfig(step_size=0.0)
    with pytest.raises(ValueError, match="empty"):
        WeightMask(np.array([], dtype=int), 4)
    with pytest.raises(ValueError, match="outside"):
        WeightMask(np.array([4]), 4)
    w_star = ParameterStore.from_shapes({"w": (2, 1)}, values=np.array([np.nan, 0.0]))
    with pytest.raises(ValueError, match="finite"):
        estimate_llc(w_star, WeightMask.full(w_star), half_square(), SgldConfig(chains=1, draws=2))


def test_restriction_leaves_unmasked_weights_at_w_star():
    w_star = ParameterStore.from_shapes({"w": (6, 1)}, values=np.arange(6.0))
    mask = WeightMask(np.array([1, 4]), 6)
    result = sgld_chain(w_star, mask, half_square(), SgldConfig(draws=20))
    final = result.final.flat
    assert np.array_equal(final[[0, 2, 3, 5]], w_star.flat[[0, 2, 3, 5]])
    assert not np.array_equal(final[[1, 4]], w_star.flat[[1, 4]])
    assert np.array_equal(mask.restrict(np.ones(6)), [0, 1, 0, 0, 1, 0])


TINY = ModelConfig(vocab_size=16, context_length=8, d_model=8, n_heads=2, n_layers=2, init_scale=0.3)


def tiny_source(seed=0):
    rng = np.random.default_rng(seed)
    return CorpusSource(rng.integers(0, 16, size=500), context_length=8, seed=seed)


def test_head_targets_cover_every_head():
    params = init_params(TINY)
    targets = head_targets(params)
    assert list(targets) == ["all", "head_0_0", "head_0_1", "head_1_0", "head_1_1"]
    assert len(targets["head_1_0"]) == 4 * TINY.d_model * TINY.d_head
    assert len(targets["all"]) == len(params)


def test_dataset_and_kl_losses_give_finite_estimates():
    params = init_params(TINY, seed=1)
    cfg = SgldConfig(chains=2, draws=10, minibatch_size=4, eval_tokens=64)
    source = tiny_source()
    estimate = estimate_llc(params, WeightMask.head(params, 1, 0), source, cfg)
    assert np.isfinite(estimate.value)
    bound = kl_loss(params, source, TINY, cfg)
    assert bound.evaluation_batch().shape == (8, 8)
    refined = estimate_llc(params, WeightMask.full(params), bound, cfg)
    assert refined.init_loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(refined.value)


def test_dataset_loss_rejects_longer_contexts():
    with pytest.raises(ValueError, match="exceeds"):
        DatasetLoss(CorpusSource(np.zeros(100, dtype=int), 16), TINY)


def test_trajectory_reuses_stored_cells(tmp_path):
    checkpoints = [Checkpoint(step=s, config=TINY, params=init_params(TINY, seed=s)) for s in (0, 5)]
    targets = head_targets(checkpoints[0].params)
    targets = {name: targets[name] for name in ("all", "head_1_1")}
    cfg = SgldConfig(chains=1, draws=5, minibatch_size=2, eval_tokens=16)
    store = ResultsStore(str(tmp_path))
    rows = trajectory(checkpoints, targets, {"train": tiny_source()}, cfg, store=store, config_hash="h")
    assert [(r["step"], r["target"]) for r in rows] == [(0, "all"), (0, "head_1_1"), (5, "all"), (5, "head_1_1")]
    assert all(r["value"] is not None for r in rows)
    assert len(list(store.keys())) == 4
    again = trajectory(checkpoints, targets, {"train": tiny_source()}, cfg, store=store, config_hash="h")
    assert [r["value"] for r in again] == [r["value"] for r in rows]


def test_stationary_variance_of_the_quadratic_posterior():
    d = 20
    cfg = SgldConfig(step_size=3e-4, n_beta=30.0, gamma=200.0, chains=10, draws=1000, burn_in=200, seed=4)
    w_star = column_store(d)
    estimate = estimate_llc(w_star, WeightMask.full(w_star), half_square(), cfg)
    draws = np.concatenate(estimate.traces)
    assert draws.size == 10_000
    variance = 2.0 * draws.mean() / d
    expected = 1.0 / (cfg.n_beta + cfg.gamma)
    assert abs(variance - expected) <= 0.1 * expected


def test_huge_localisation_pins_the_chain_to_w_star():
    w_star = ParameterStore.from_shapes({"w": (3, 1)}, values=np.array([1.0, -0.5, 2.0]))
    cfg = SgldConfig(step_size=1e-10, n_beta=30.0, gamma=1e9, chains=2, draws=100)
    estimate = estimate_llc(w_star, WeightMask.full(w_star), half_square(), cfg)
    assert estimate.init_loss == pytest.approx(2.625)
    for trace in estimate.traces:
        assert np.allclose(trace, estimate.init_loss, rtol=1e-3)


def test_chains_contract_towards_w_star_as_gamma_grows():
    w_star = ParameterStore.from_shapes({"w": (4, 1)}, values=np.ones(4))
    mask = WeightMask.full(w_star)
    offsets = []
    for gamma in (1e2, 1e3, 1e4):
        cfg = SgldConfig(step_size=0.1 / (30.0 + gamma), n_beta=30.0, gamma=gamma, chains=8, draws=300,
                         burn_in=100, seed=5)
        finals = np.stack([sgld_chain(w_star, mask, half_square(), cfg, chain=c).final.flat for c in range(8)])
        offsets.append(abs(finals.mean() - 1.0))
    assert offsets[0] > offsets[1] > offsets[2]
    assert offsets[2] < 0.02


def test_larger_masks_never_lower_the_estimate():
    d = 12
    w_star = column_store(d)
    sizes = (3, 6, 12)
    by_size = {k: [] for k in sizes}
    for seed in range(5):
        cfg = SgldConfig(step_size=1e-3, n_beta=30.0, gamma=200.0, chains=4, draws=200, seed=seed)
        for k in sizes:
            mask = WeightMask(np.arange(k), d, f"first_{k}")
            by_size[k].append(estimate_llc(w_star, mask, half_square(), cfg).value)
    means = [np.mean(by_size[k]) for k in sizes]
    assert means[0] < means[1] < means[2]
    for k, mean in zip(sizes, means):
        assert mean == pytest.approx(gaussian_oracle(k, SgldConfig()), rel=0.2)


class PoisonedFirstChain(PotentialLoss):
    """Chain 0 sees a NaN minibatch; the other chains see the clean potential."""

    def minibatch(self, chain, step):
        if chain == 0:
            return lambda weights: total(mul(weights["w"], Tensor(np.full((3, 1), np.nan))))
        return self.fn


def test_chain_failures_are_summarised_in_one_warning(caplog):
    w_star = column_store(3)
    with caplog.at_level(logging.DEBUG, logger="llc"):
        estimate = estimate_llc(w_star, WeightMask.full(w_star), PoisonedFirstChain(half_square().fn),
                                SgldConfig(chains=4, draws=5))
    assert estimate.chains_failed == 1
    warnings = [r.getMessage() for r in caplog.records if r.levelno >= logging.WARNING]
    assert len(warnings) == 1
    assert warnings[0].startswith("1 of 4 chains failed")
    assert any(r.getMessage().startswith("Chain 0") for r in caplog.records if r.levelno == logging.DEBUG)
