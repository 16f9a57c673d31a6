import math

import numpy as np
import pytest

from conftest import well_conditioned
from diagnostics import (
    ConvergenceRecord,
    RunSpec,
    coercivity_bound,
    delta_metrics,
    monte_carlo_mean,
    objective,
    objective_lower_bound,
    polyak_bound,
    polyak_recursion,
    rate_coefficients,
    rate_envelope,
    reference_solution,
    regularization_budget,
    residual_norm,
    stability_probe,
    summarize,
    support_f1,
)
from errors import ConfigurationError, DataFileError, InvalidInputError, InvariantViolation
from noise import make_rng
from operators import (
    BlockOperator,
    ObservationSet,
    block_norms,
    build_integral_operator,
    exact_sparse_signal,
    observe,
    partition_rows,
)
from solver import (
    ConstantsConfig,
    SolverConfig,
    StepSchedule,
    StoppingRule,
    half_rate_step,
    initial_state,
    run,
    sgd_step,
)
from spaces import SpaceDescriptor, bregman_distance, lr_norm

HILBERT = SpaceDescriptor.hilbert()


def _cfg(mu, epochs=5, method="sgd", seed=0):
    return SolverConfig(method, HILBERT, HILBERT, StepSchedule.constant(mu), StoppingRule.max_epochs(epochs),
                        seed=seed, epochs=epochs)


# ─── objective ────────────────────────────────────────────────────────────────
def test_objective_examples(hilbert_problem):
    op = BlockOperator([np.eye(2)])
    assert objective([1.0, 1.0], op, ObservationSet([[0.0, 0.0]]), 2.0) == pytest.approx(1.0)
    op, obs, x_true = hilbert_problem
    assert objective(x_true, op, obs, 2.0) == pytest.approx(0.0, abs=1e-25)


def test_objective_matches_row_loop(rng):
    a = rng.standard_normal((12, 5))
    y = rng.standard_normal(12)
    x = rng.standard_normal(5)
    y_space = SpaceDescriptor(1.5, 1.5)
    op = partition_rows(a, 4, y_space)
    obs = observe(op, y)
    expected = 0.0
    for j in range(4):
        rows = range(j, 12, 4)
        s = sum(abs(sum(a[i, k] * x[k] for k in range(5)) - y[i]) ** 1.5 for i in rows)
        expected += s / 1.5
    assert objective(x, op, obs, 1.5) == pytest.approx(expected / 4, rel=1e-12)


def test_objective_lower_bound_is_tight_in_hilbert_space(hilbert_problem, rng):
    op, obs, _ = hilbert_problem
    x = rng.standard_normal(10)
    bound = objective_lower_bound(x, op, obs, 2.0, 1.0 / op.n_blocks)
    assert objective(x, op, obs, 2.0) == pytest.approx(bound, rel=1e-12)
    assert residual_norm(x, op, obs) == pytest.approx(np.linalg.norm(np.vstack(op.blocks) @ x - obs.stacked()))


# ─── metrics ──────────────────────────────────────────────────────────────────
def test_delta_metrics():
    x_true = np.array([0.0, 1.0, 2.0])
    assert delta_metrics(x_true, x_true) == (0.0, 0.0)
    assert delta_metrics(np.zeros(3), x_true) == pytest.approx((1.0, 1.0))
    assert delta_metrics(2 * x_true, x_true) == pytest.approx((1.0, 1.0))
    with pytest.raises(InvalidInputError):
        delta_metrics(x_true, np.zeros(3))


def test_delta_metrics_scale_linearly(rng):
    x_true = rng.standard_normal(20)
    e = rng.standard_normal(20)
    small = np.array(delta_metrics(x_true + 1e-4 * e, x_true))
    large = np.array(delta_metrics(x_true + 2e-4 * e, x_true))
    np.testing.assert_allclose(large, 2 * small, rtol=1e-9)


def test_support_f1():
    x_true = np.array([0.0, 1.0, 1.0, 0.0, 2.0, 2.0])
    assert support_f1(x_true, x_true) == 1.0
    assert support_f1(np.zeros(6), x_true) == 0.0
    half = np.array([0.0, 1.0, 0.0, 0.0, 2.0, 0.0])
    assert support_f1(half, x_true) == pytest.approx(2 / 3)
    with pytest.raises(ConfigurationError):
        support_f1(half, x_true, threshold=0.0)


# ─── bounds ───────────────────────────────────────────────────────────────────
def test_polyak_one_step():
    assert polyak_recursion(1.0, 1.0, [0.1])[0] == pytest.approx(0.9)
    assert polyak_bound(1.0, 1.0, [0.1])[0] == pytest.approx(1 / 1.1)
    assert np.array_equal(polyak_bound(0.0, 1.5, [0.1, 0.2]), [0.0, 0.0])


def test_polyak_bound_is_monotone():
    b = polyak_bound(2.0, 0.7, np.full(50, 0.3))
    assert np.all(np.diff(b) <= 0)


def test_polyak_bound_dominates_recursions():
    rng = make_rng(77)
    for _ in range(100):
        delta0 = rng.uniform(0.01, 1.0)
        alpha = rng.uniform(0.1, 2.0)
        steps = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 60)))
        seq = polyak_recursion(delta0, alpha, steps)
        bound = polyak_bound(delta0, alpha, steps)
        assert np.all(seq >= 0)
        assert np.all(seq <= bound * (1 + 1e-12))


def test_rate_envelope():
    assert rate_envelope(1.0, 1.0, np.full(10, 0.1))[-1] == pytest.approx(math.exp(-1.0))
    assert rate_envelope(3.0, 1.0, [0.0])[0] == 3.0
    steps = np.full(10, 0.1)
    np.testing.assert_allclose(rate_envelope(1.0, 1.0 + 1e-8, steps), rate_envelope(1.0, 1.0, steps), atol=1e-6)
    with pytest.raises(ConfigurationError):
        rate_envelope(1.0, 0.5, steps)


def test_rate_coefficients_at_half_rate_step():
    constants = ConstantsConfig(1.0, 1.0)
    mu = half_rate_step(constants, 2.0, 2.0)
    coeff = rate_coefficients(0.25, 3.0, 2.0, 1.0, 2.0, [mu])
    assert coeff[0] == pytest.approx(mu * 0.25 * 3.0 * 0.5)


def test_regularization_budget():
    assert regularization_budget(0.1, 2.0, [1.0, 1.0]) == pytest.approx(0.02)


def test_coercivity_bound_formula():
    assert coercivity_bound([3.0, 4.0], 1.0, HILBERT) == pytest.approx(400.0)
    assert coercivity_bound([3.0, 4.0], 100.0, HILBERT) == pytest.approx(1600.0)


def test_coercivity_along_a_run(hilbert_problem):
    op, obs, x_true = hilbert_problem
    l_max = max(est.value for est in block_norms(op, 2.0, 2.0))
    mu = half_rate_step(ConstantsConfig(1.0, 1.0), l_max, 2.0)
    cfg = _cfg(mu, seed=4)
    state = initial_state(cfg, 10)
    c = bregman_distance(state.x, x_true, HILBERT)
    bound = coercivity_bound(x_true, c, HILBERT)
    for _ in range(200):
        state = sgd_step(state, op, obs, cfg, mu)
        assert bregman_distance(state.x, x_true, HILBERT) <= c + 1e-12
        assert lr_norm(state.x, 2.0) ** 2 <= bound


# ─── record ───────────────────────────────────────────────────────────────────
def test_record_csv_round_trip(tmp_path, hilbert_problem):
    op, obs, x_true = hilbert_problem
    record = run(op, obs, _cfg(0.3, epochs=4), reference=x_true).record
    path = tmp_path / "trace.csv"
    record.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,objective,residual,bregman,delta1,delta2,step"
    assert len(lines) == 6
    assert np.array_equal(ConvergenceRecord.from_csv(path).as_array(), record.as_array(), equal_nan=True)


def test_record_validation(hilbert_problem):
    op, obs, x_true = hilbert_problem
    record = run(op, obs, _cfg(0.3, epochs=2), reference=x_true).record
    record.validate()
    record.rows[2].epoch = 1
    with pytest.raises(InvariantViolation):
        record.validate()
    record.rows[2].epoch = 2
    record.rows[1].objective = math.inf
    with pytest.raises(InvariantViolation):
        record.validate()


def test_malformed_trace(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("epoch,objective\n0,1\n")
    with pytest.raises(DataFileError):
        ConvergenceRecord.from_csv(path)


# ─── reference solution ───────────────────────────────────────────────────────
def test_minimum_norm_reference_in_hilbert_space():
    a = well_conditioned(20, 10, seed=3).T  # 10 x 20, full row rank
    x_true = make_rng(1).standard_normal(20)
    op = partition_rows(a, 5)
    obs = observe(op, a @ x_true)
    x_mn = reference_solution(op, obs, HILBERT)
    np.testing.assert_allclose(x_mn, np.linalg.pinv(np.vstack(op.blocks)) @ obs.stacked(), atol=1e-10)
    assert np.linalg.norm(x_mn) <= np.linalg.norm(x_true) + 1e-10


# ─── ensembles ────────────────────────────────────────────────────────────────
def test_landweber_ensemble_has_zero_spread(hilbert_problem):
    op, obs, x_true = hilbert_problem
    summary = monte_carlo_mean(RunSpec(op, obs, _cfg(0.3, method="landweber"), x_true, x_true), 3)
    np.testing.assert_allclose(summary.stderr, 0.0, atol=1e-12)
    assert summary.n_seeds == 3


def test_ensemble_mean_ignores_seed_order(hilbert_problem):
    op, obs, x_true = hilbert_problem
    records = [run(op, obs, _cfg(0.3, seed=s), reference=x_true, x_hat=x_true).record for s in range(4)]
    forward = summarize(records)
    backward = summarize(records[::-1])
    np.testing.assert_allclose(forward.mean, backward.mean, rtol=1e-12)
    np.testing.assert_allclose(forward.stderr, backward.stderr, rtol=1e-12)


def test_ensemble_needs_two_seeds(hilbert_problem):
    op, obs, x_true = hilbert_problem
    with pytest.raises(ConfigurationError):
        monte_carlo_mean(RunSpec(op, obs, _cfg(0.3), x_true), 1)


def test_ensemble_summary_csv(tmp_path, hilbert_problem):
    op, obs, x_true = hilbert_problem
    summary = monte_carlo_mean(RunSpec(op, obs, _cfg(0.3, epochs=3), x_true), 2, reducer="objective")
    path = tmp_path / "mean.csv"
    summary.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_objective,stderr_objective"
    assert len(lines) == 5


def test_parallel_ensemble_matches_serial(hilbert_problem):
    op, obs, x_true = hilbert_problem
    spec = RunSpec(op, obs, _cfg(0.3, epochs=3), x_true, x_true)
    serial = monte_carlo_mean(spec, 3)
    parallel = monte_carlo_mean(spec, 3, jobs=2)
    assert np.array_equal(serial.mean, parallel.mean)


def test_doubling_seeds_shrinks_standard_error(hilbert_problem):
    op, obs, x_true = hilbert_problem
    spec = RunSpec(op, obs, _cfg(0.3, epochs=4), x_true, x_true)
    small = monte_carlo_mean(spec, 100)
    large = monte_carlo_mean(spec, 200)
    # epoch 0 starts every seed at zero
    ratio = np.mean(small.stderr[1:]) / np.mean(large.stderr[1:])
    assert ratio == pytest.approx(math.sqrt(2.0), rel=0.3)


# ─── stability ────────────────────────────────────────────────────────────────
def test_stability_probe_zero_noise(hilbert_problem):
    op, obs, _ = hilbert_problem
    rows = stability_probe(op, obs, _cfg(0.3), k_fixed=20, deltas=[0.0], n_seeds=3)
    assert rows[0].bregman == pytest.approx(0.0, abs=1e-12)
    assert rows[0].primal_gap == 0.0 and rows[0].dual_gap == 0.0


def test_stability_probe_decreases_with_noise(hilbert_problem):
    op, obs, _ = hilbert_problem
    rows = stability_probe(op, obs, _cfg(0.3), k_fixed=50, deltas=[1e-1, 1e-2, 1e-3, 1e-4], n_seeds=5)
    for name in ("bregman", "primal_gap", "dual_gap"):
        values = [getattr(r, name) for r in rows]
        assert all(a > b for a, b in zip(values, values[1:]))
    # the map from data to iterate is affine in a Hilbert space
    assert rows[0].primal_gap == pytest.approx(1000 * rows[-1].primal_gap, rel=1e-6)


@pytest.mark.slow
def test_stability_on_integral_problem():
    a = build_integral_operator(40)
    op = partition_rows(a, 4)
    obs = observe(op, a @ exact_sparse_signal(40))
    l_max = max(est.value for est in block_norms(op, 2.0, 2.0))
    cfg = _cfg(half_rate_step(ConstantsConfig(1.0, 1.0), l_max, 2.0), epochs=13)
    rows = stability_probe(op, obs, cfg, k_fixed=50, deltas=[1e-1, 1e-2, 1e-3, 1e-4], n_seeds=20)
    for name in ("bregman", "primal_gap", "dual_gap"):
        values = [getattr(r, name) for r in rows]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-3


@pytest.mark.slow
def test_rate_envelope_dominates_mean_bregman():
    a = well_conditioned(20, 20, seed=41)
    x_true = make_rng(42).standard_normal(20)
    op = partition_rows(a, 4)
    obs = observe(op, a @ x_true)
    l_max = max(np.linalg.norm(b, 2) for b in op.blocks)
    mu = half_rate_step(ConstantsConfig(1.0, 1.0), l_max, 2.0)
    sigma_min = np.linalg.svd(a, compute_uv=False).min()
    # D = |e|^2 / 2 <= |A e|^2 / (2 sigma_min^2)
    c_alpha = 2.0 * sigma_min ** 2
    epochs = 30
    summary = monte_carlo_mean(RunSpec(op, obs, _cfg(mu, epochs=epochs), x_true, x_true), 50)
    per_step = rate_coefficients(1.0 / op.n_blocks, c_alpha, l_max, 1.0, 2.0, np.full(epochs * op.n_blocks, mu))
    envelope = np.concatenate([[summary.mean[0]], rate_envelope(summary.mean[0], 1.0, per_step)[op.n_blocks - 1::op.n_blocks]])
    # 50 seeds: allow for sampling error of the mean
    assert np.all(summary.mean <= 1.25 * envelope)
    slope = np.polyfit(summary.epochs, np.log(summary.mean), 1)[0]
    assert slope < 0

