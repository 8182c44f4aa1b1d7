import math

import numpy as np

from cgm.constraints import ConstraintSpec
from cgm.diffusion import DiffusionModel, SdeSchedule, symmetric_preset
from cgm.estimators import LossReport
from cgm.evaluation import (METRIC_COLUMNS, RunMetrics, estimate_expectation, evaluate, excess_kl,
                            model_reference_kl)
from cgm.maxent import closed_form_alpha_1d, reference_kl
from cgm.mlp import MlpSpec, init_params

from conftest import perturbed_params

TINY = MlpSpec(1, (4,), 2)


def base_model(k=1, steps=32):
    mlp = MlpSpec(k, (4,), 2)
    return DiffusionModel(symmetric_preset(k), SdeSchedule(steps), mlp), init_params(mlp, 0)


def test_symmetric_base_expectation_is_one_half():
    model, params = base_model()
    mean, se = estimate_expectation(params, model, ConstraintSpec(target=[0.8]), 100_000, 0)
    assert abs(mean[0] - 0.5) <= 0.00474
    assert abs(se[0] - math.sqrt(0.25 / 1e5)) < 1e-4


def test_expectation_is_deterministic_given_seed():
    model = DiffusionModel(symmetric_preset(1), SdeSchedule(8), TINY)
    params = perturbed_params(TINY, 1)
    spec = ConstraintSpec(target=[0.8])
    a = estimate_expectation(params, model, spec, 3000, 5)
    b = estimate_expectation(params, model, spec, 3000, 5)
    np.testing.assert_array_equal(a[0], b[0])
    c = estimate_expectation(params, model, spec, 3000, 6)
    assert not np.array_equal(a[0], c[0])


def test_product_base_coordinates_each_one_half():
    model, params = base_model(k=8, steps=16)
    mean, se = estimate_expectation(params, model, ConstraintSpec(target=np.full(8, 0.8)),
                                    20_000, 1)
    assert np.all(np.abs(mean - 0.5) <= 3 * se)


def test_excess_kl_is_zero_for_calibrated_base():
    model, params = base_model(steps=8)
    run = evaluate(params, model, ConstraintSpec(target=[0.5]), 1000, 0)
    assert run.reference_kl == 0.0
    assert run.kl_to_base == 0.0
    assert excess_kl(run) == 0.0
    assert run.excess_kl == 0.0


def test_exact_tilt_has_no_excess_kl():
    # KL of the exact max-entropy tilt, estimated from exact mixture draws by
    # importance weighting, matches the closed-form reference
    gmm = symmetric_preset(1)
    h_b = float(gmm.prob_above()[0])
    alpha = closed_form_alpha_1d(h_b, 0.8)
    log_z = math.log(h_b * math.exp(alpha) + 1 - h_b)
    h = (gmm.sample(200_000, 3)[:, 0] > 0).astype(float)
    log_w = alpha * h - log_z
    terms = np.exp(log_w) * log_w
    kl = terms.mean()
    se = terms.std(ddof=1) / math.sqrt(terms.size)
    run = RunMetrics(0, 0.0, kl, reference_kl(h_b, 0.8))
    assert abs(run.excess_kl) <= 3 * se
    assert abs(run.reference_kl - 0.192745) < 5e-7


def test_product_reference_kl_is_linear_in_dimension():
    model, _ = base_model(k=32, steps=4)
    ref = model_reference_kl(model, ConstraintSpec(target=np.full(32, 0.8)))
    assert abs(ref - 32 * 0.192745) < 32 * 5e-7
    assert abs(ref - 6.1678) < 1e-4


def test_custom_statistics_have_no_reference():
    model, _ = base_model(steps=4)
    spec = ConstraintSpec(target=[0.0], kind="custom", statistic=lambda x: x)
    assert math.isnan(model_reference_kl(model, spec))


def test_base_violation_is_gap_to_target():
    model, params = base_model()
    spec = ConstraintSpec(target=[0.8])
    run = evaluate(params, model, spec, 100_000, 7)
    assert abs(run.violation_norm - 0.3) <= 3 * run.expectation_se[0]
    assert run.mean_abs_violation == run.violation_norm
    assert run.eval_batch == 100_000


def test_metric_row_is_flat_and_ordered():
    run = RunMetrics(3, 0.1, 0.2, 0.15, loss=LossReport.relax(0.2, 0.01, 0.5), wall_time=9.0)
    row = run.row()
    assert tuple(row) == METRIC_COLUMNS
    assert "wall_time" not in row
    assert row["excess_kl"] == run.kl_to_base - run.reference_kl
    assert run.to_dict()["wall_time"] == 9.0
