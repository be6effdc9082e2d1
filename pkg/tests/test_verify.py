import os

import numpy as np
import pytest

from ildm.codec import IntrinsicStack
from ildm.errors import AbsoluteContinuityError, ConfigError, ContractError
from ildm.scenegen import generate_dataset
from ildm.verify import (SLACK_TOLERANCE, ConsistencyEstimator, DiscretePGM, EstimatorConfig, consistency_metrics,
                         depth_rmse, kl_divergence, load_estimator, mean_angular_error, save_estimator, sweep,
                         sweep_passed, train_estimator, verify_equivalence, verify_inequality, verify_monotone_chain)


def test_kl_divergence():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2.0))
    # 0 log(0 / 0) is 0
    assert kl_divergence([1.0, 0.0], [1.0, 0.0]) == 0.0
    with pytest.raises(AbsoluteContinuityError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_pgm_validation():
    with pytest.raises(ContractError):
        DiscretePGM([0.5, 0.6], np.eye(2), np.eye(2), np.eye(2))
    with pytest.raises(ContractError):
        DiscretePGM([0.5, 0.5], [[0.5, 0.4], [0.5, 0.5]], np.eye(2), np.eye(2))
    with pytest.raises(ContractError):
        DiscretePGM([0.5, 0.5], np.eye(3), np.eye(2), np.eye(2))
    pgm = DiscretePGM.random(np.random.default_rng(0), 3, 2, [4, 2], 3)
    assert pgm.cardinalities == (3, 2, (4, 2), 3)


def test_equivalence_with_uninformative_x():
    """When x does not depend on u both sides equal log p(x)"""
    rng = np.random.default_rng(1)
    row = rng.dirichlet(np.ones(3))
    pgm = DiscretePGM(rng.dirichlet(np.ones(4)), np.tile(row, (4, 1)), rng.dirichlet(np.ones(2), size=4),
                      rng.dirichlet(np.ones(3), size=4))
    report = verify_equivalence(pgm)
    assert report.events == 9 and report.skipped == 0
    assert report.max_discrepancy < 1e-12


def test_equivalence_on_a_random_model():
    pgm = DiscretePGM.random(np.random.default_rng(2), 4, 3, 3, 2)
    assert verify_equivalence(pgm).max_discrepancy < SLACK_TOLERANCE


def test_equivalence_skips_impossible_events():
    # c = 1 never happens, and x = 1 never happens when c = 0
    pgm = DiscretePGM([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], np.eye(2), [[1.0, 0.0], [1.0, 0.0]])
    report = verify_equivalence(pgm)
    assert report.events == 1
    assert report.skipped == 3


def test_inequality_is_tight_for_uninformative_intrinsics():
    rng = np.random.default_rng(3)
    row = rng.dirichlet(np.ones(3))
    pgm = DiscretePGM.random(rng, 4, 3, 3, 2).with_intrinsics([np.tile(row, (4, 1))])
    report = verify_inequality(pgm)
    assert abs(report.slack) < 1e-12
    assert abs(report.lhs - report.rhs) < 1e-12


def test_inequality_on_a_random_model():
    report = verify_inequality(DiscretePGM.random(np.random.default_rng(4), 4, 3, 4, 3))
    assert report.events == 9
    assert report.lhs >= report.rhs - SLACK_TOLERANCE
    assert report.averaged_slack >= -SLACK_TOLERANCE


def test_fully_informative_intrinsic_removes_the_gap():
    """An intrinsic that reveals u leaves nothing for x to explain"""
    rng = np.random.default_rng(5)
    pgm = DiscretePGM.random(rng, 3, 3, 3, 2).with_intrinsics([np.eye(3)])
    report = verify_inequality(pgm)
    assert abs(report.rhs) < 1e-12
    assert report.slack >= 0.0


def test_monotone_chain():
    rng = np.random.default_rng(6)
    pgm = DiscretePGM.random(rng, 4, 3, [3, 3], 2)
    report = verify_monotone_chain(pgm)
    assert len(report.slacks) == 2
    assert min(report.slacks) >= -SLACK_TOLERANCE

    # A constant second intrinsic adds nothing to the first
    constant = np.zeros((4, 2))
    constant[:, 0] = 1.0
    report = verify_monotone_chain(pgm.with_intrinsics([pgm.p_i_u[0], constant]))
    assert abs(report.slacks[1]) < 1e-12

    with pytest.raises(ContractError):
        verify_monotone_chain(DiscretePGM.random(rng, 2, 2, 2, 2))


def test_sweep_passes():
    results = sweep(instances=1000, max_card=4, seed=7)
    assert len(results) == 1000
    assert results[["card_u", "card_x", "card_c"]].min().min() >= 2
    assert results[["card_u", "card_x", "card_c"]].max().max() <= 4
    assert (results["equivalence_discrepancy"] < SLACK_TOLERANCE).all()
    assert sweep_passed(results)


def test_sweep_is_deterministic_and_validated():
    assert sweep(instances=5, seed=3).equals(sweep(instances=5, seed=3))
    with pytest.raises(ConfigError):
        sweep(instances=0)
    with pytest.raises(ConfigError):
        sweep(instances=1, max_card=1)


def test_sweep_passed_catches_violations():
    results = sweep(instances=3, seed=1)
    results.loc[1, "inequality_slack"] = -1e-6
    assert not sweep_passed(results)


def test_depth_rmse_and_angular_error():
    assert depth_rmse(np.zeros((2, 2)), np.full((2, 2), 0.5)) == pytest.approx(0.5)
    up = np.zeros((4, 4, 3))
    up[..., 2] = 1.0
    side = np.zeros((4, 4, 3))
    side[..., 0] = 0.5  # renormalised before comparison
    assert mean_angular_error(up, up) == pytest.approx(0.0, abs=1e-6)
    assert mean_angular_error(up, side) == pytest.approx(90.0)
    assert mean_angular_error(up, -up) == pytest.approx(180.0)


def test_estimator_config():
    assert EstimatorConfig.fromdict(EstimatorConfig(width=8).asdict()).asdict() == EstimatorConfig(width=8).asdict()
    with pytest.raises(ConfigError):
        EstimatorConfig(val_fraction=1.0)


def test_untrained_estimator_is_rejected():
    image = np.zeros((16, 16, 3), dtype=np.float32)
    stack = IntrinsicStack(*[np.zeros((16, 16, 3), dtype=np.float32)] * 4)
    with pytest.raises(ConfigError) as e:
        consistency_metrics(image, stack, ConsistencyEstimator(EstimatorConfig(width=8)))
    assert e.value.key == "estimator"
    with pytest.raises(ConfigError):
        consistency_metrics(image, stack, None)


def test_train_save_load_estimator(tmp_path):
    dataset = generate_dataset(6, seed=0, resolution=16)
    config = EstimatorConfig(width=8, steps=3, batch_size=2, val_fraction=0.34)
    estimator = train_estimator(dataset, config)
    assert estimator.val_depth_rmse >= 0.0
    assert 0.0 <= estimator.val_angular_error <= 180.0

    path = os.path.join(tmp_path, "estimator.ildm")
    save_estimator(path, estimator)
    loaded = load_estimator(path)
    assert loaded.val_depth_rmse == estimator.val_depth_rmse
    assert loaded.config.asdict() == config.asdict()

    stack = IntrinsicStack(*[dataset.intrinsics[0, ..., 3 * k:3 * k + 3] for k in range(4)])
    rmse, angle = consistency_metrics(dataset.images[0], stack, loaded)
    assert rmse >= 0.0 and 0.0 <= angle <= 180.0
    assert (rmse, angle) == consistency_metrics(dataset.images[0], stack, estimator)

    with pytest.raises(ContractError):
        consistency_metrics(dataset.images[0][:8], stack, loaded)

    images_only = dataset.subset(np.arange(2))
    images_only.intrinsics = None
    with pytest.raises(ConfigError):
        train_estimator(images_only, config)
