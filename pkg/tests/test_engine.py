import math

import numpy as np
import pytest

from fedmom.diagnostics import estimator_error
from fedmom.engine import (
    AlgoConfig,
    ServerState,
    Variant,
    init_state,
    local_direction,
    reparameterize,
    run_client,
    run_experiment,
    run_round,
)
from fedmom.errors import ConfigError, DivergenceError
from fedmom.harness import csv_text
from fedmom.problems import global_gradient, make_quadratic_suite, quadratic_problem
from fedmom.rng import StreamSource
from fedmom.validate import scheduled_config

I2 = np.eye(2)


def noisy(n=6, sigma=1.0, seed=0, dim=5):
    return make_quadratic_suite(n, dim, 1.0, 1.0, 0.2, sigma, seed)


# --- configuration ---------------------------------------------------------


def test_pinned_variants_reject_beta():
    for v in ("fedavg", "scaffold"):
        with pytest.raises(ConfigError, match="pins beta=1"):
            AlgoConfig(v, eta=0.1, gamma=0.1, beta=0.5)


@pytest.mark.parametrize("kwargs,key", [
    (dict(eta=0.0), "algo.eta"),
    (dict(gamma=-1.0), "algo.gamma"),
    (dict(beta=1.5), "algo.beta"),
    (dict(local_steps=0), "algo.local_steps"),
    (dict(variant="scaffold_m", init_batches=0), "algo.init_batches"),
    (dict(variant="fedavg_mvr", beta=0.0), "algo.beta"),
    (dict(variant="fedavg_mvr", reparameterized=True), "algo.reparameterized"),
])
def test_config_errors_name_the_key(kwargs, key):
    args = dict(variant="fedavg_m", eta=0.1, gamma=0.1, beta=0.5)
    args.update(kwargs)
    with pytest.raises(ConfigError) as exc:
        AlgoConfig(**args)
    assert exc.value.key == key


def test_outside_theory_flags():
    assert AlgoConfig("fedavg_m", 0.1, 0.1, beta=0.0).outside_theory(4) == ["beta=0"]
    assert AlgoConfig("fedavg", 0.1, 0.1, cohort_size=2).outside_theory(4) == [
        "partial participation for a FedAvg variant"]
    assert AlgoConfig("scaffold", 0.1, 0.1, cohort_size=2).outside_theory(4) == []


def test_reparameterize_definition():
    cfg = AlgoConfig("fedavg_m", eta=1.0, gamma=1.0, beta=0.1)
    hat = reparameterize(cfg)
    assert hat.reparameterized and hat.eta == pytest.approx(0.1, abs=1e-15)
    assert hat.gamma == pytest.approx(0.1, abs=1e-15)
    back = reparameterize(hat)
    assert (back.eta, back.gamma, back.reparameterized) == (1.0, 1.0, False)


def test_reparameterize_beta_one_keeps_values():
    cfg = AlgoConfig("scaffold_m", eta=0.3, gamma=0.04, beta=1.0)
    hat = reparameterize(cfg)
    assert (hat.eta, hat.gamma) == (0.3, 0.04)


def test_reparameterize_rejects_vr():
    with pytest.raises(ConfigError):
        reparameterize(AlgoConfig("fedavg_mvr", eta=0.1, gamma=0.1, beta=0.5))


# --- directions ------------------------------------------------------------


def test_direction_fedavg_m_beta_one_is_fresh_gradient():
    g = np.array([2.0, -1.0])
    out = local_direction(Variant.FEDAVG_M, 1.0, g, None, np.array([5.0, 5.0]), None, None)
    np.testing.assert_array_equal(out, g)


def test_direction_fedavg_m_convex_combination():
    out = local_direction(Variant.FEDAVG_M, 0.5, np.array([2.0, 0.0]), None, np.array([0.0, 2.0]), None, None)
    np.testing.assert_array_equal(out, [1.0, 1.0])


def test_direction_fedavg_mvr():
    out = local_direction(Variant.FEDAVG_MVR, 0.5, np.array([1.0, 1.0]), np.array([1.0, 0.0]),
                          np.array([0.5, 0.0]), None, None)
    np.testing.assert_array_equal(out, [0.75, 1.0])


def test_direction_scaffold_m_beta_one_is_scaffold():
    g, u, v = np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([0.25, 0.0])
    out = local_direction(Variant.SCAFFOLD_M, 1.0, g, None, np.array([9.0, 9.0]), u, v)
    np.testing.assert_array_equal(out, g - u + v)


def test_direction_scaffold_mvr():
    g, a, s = np.array([1.0, 2.0]), np.array([0.5, 0.5]), np.array([0.2, 0.4])
    u, v = np.array([0.3, 0.1]), np.array([0.1, 0.1])
    out = local_direction(Variant.SCAFFOLD_MVR, 0.25, g, a, s, u, v)
    np.testing.assert_allclose(out, g - 0.25 * (u - v) + 0.75 * (s - a), rtol=0, atol=1e-15)


def test_direction_reparameterized_forms():
    g, s = np.array([1.0, 0.0]), np.array([0.0, 4.0])
    out = local_direction(Variant.FEDAVG_M, 0.25, g, None, s, None, None, reparameterized=True)
    np.testing.assert_array_equal(out, g + 0.75 * s)


# --- client ----------------------------------------------------------------


def test_single_exact_step():
    p = noisy(sigma=0.0)
    cfg = AlgoConfig("fedavg_m", eta=0.1, gamma=0.1, beta=1.0, local_steps=1)
    x = np.linspace(-1, 1, p.dim)
    res = run_client(p, 2, x, np.zeros(p.dim), None, None, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(res.x_end, x - 0.1 * p.clients[2].gradient(x))


def test_scaffold_single_step_control_is_local_gradient():
    p = noisy(sigma=0.0)
    x = np.ones(p.dim)
    for v in ("scaffold", "scaffold_m", "scaffold_mvr"):
        cfg = AlgoConfig(v, eta=0.1, gamma=0.1, beta=1.0 if v == "scaffold" else 0.5, local_steps=1)
        res = run_client(p, 1, x, np.zeros(p.dim), np.zeros(p.dim), np.zeros(p.dim), cfg,
                         np.random.default_rng(0), prev_x=x)
        np.testing.assert_array_equal(res.new_c_i, p.clients[1].gradient(x))


def test_beta_zero_keeps_clients_synchronized():
    p = noisy(sigma=1.0)
    cfg = AlgoConfig("fedavg_m", eta=0.1, gamma=0.1, beta=0.0, local_steps=2)
    g = np.arange(p.dim, dtype=float)
    x = np.zeros(p.dim)
    for i in range(p.n_clients):
        res = run_client(p, i, x, g, None, None, cfg, np.random.default_rng(i))
        np.testing.assert_allclose(res.x_end, x - 2 * 0.1 * g, rtol=0, atol=1e-15)


def test_client_drift_accumulates_distances():
    p = quadratic_problem([I2], [np.array([1.0, 0.0])])
    cfg = AlgoConfig("fedavg", eta=0.5, gamma=0.1, local_steps=3, init_batches=1)
    res = run_client(p, 0, np.zeros(2), np.zeros(2), None, None, cfg, np.random.default_rng(0), record_path=True)
    # path: 0 -> 0.5 -> 0.75 -> 0.875 along e1
    assert res.drift_sq_sum == pytest.approx(0.25 + 0.5625, abs=1e-15)
    assert len(res.local_path) == 4


def test_client_divergence_is_reported():
    p = quadratic_problem([I2 * 1e3], [np.zeros(2)])
    cfg = AlgoConfig("fedavg", eta=1e3, gamma=0.1, local_steps=200)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(DivergenceError) as exc:
        run_client(p, 0, np.ones(2), np.zeros(2), None, None, cfg, np.random.default_rng(0))
    assert exc.value.client == 0 and exc.value.step is not None


# --- initialization ----------------------------------------------------------


def test_noiseless_init_is_exact_gradient():
    p = noisy(sigma=0.0)
    x0 = np.ones(p.dim)
    for v in ("fedavg_mvr", "scaffold_mvr"):
        cfg = AlgoConfig(v, eta=0.1, gamma=0.04, beta=0.5, init_batches=3)
        state, _ = init_state(p, cfg, x0, StreamSource(0))
        np.testing.assert_allclose(state.g, global_gradient(p, x0), rtol=0, atol=1e-14)


def test_scaffold_init_control_is_mean():
    p = noisy()
    cfg = AlgoConfig("scaffold_m", eta=0.1, gamma=0.04, beta=0.5, init_batches=4)
    state, controls = init_state(p, cfg, np.zeros(p.dim), StreamSource(1))
    assert np.linalg.norm(state.c - controls.mean()) <= 1e-12
    np.testing.assert_array_equal(state.g, np.zeros(p.dim))


def test_fedavg_m_starts_with_zero_momentum():
    p = noisy()
    state, controls = init_state(p, AlgoConfig("fedavg_m", 0.1, 0.04, beta=0.5), np.ones(p.dim), StreamSource(0))
    assert controls is None and state.c is None
    np.testing.assert_array_equal(state.g, np.zeros(p.dim))


def test_batched_init_error_scales_like_sigma2_over_nb():
    p = make_quadratic_suite(4, 3, 1.0, 1.0, 0.2, 1.0, 0)
    cfg = AlgoConfig("fedavg_mvr", eta=0.1, gamma=0.04, beta=0.5, init_batches=10_000)
    x0 = np.ones(3)
    grad = global_gradient(p, x0)
    errs = np.array([float(np.sum((init_state(p, cfg, x0, StreamSource(s))[0].g - grad) ** 2))
                     for s in range(100)])
    se = errs.std(ddof=1) / math.sqrt(errs.size)
    assert abs(errs.mean() - 1.0 / (4 * 10_000)) <= 3 * se


def test_init_rejects_bad_start():
    p = noisy()
    with pytest.raises(ConfigError):
        init_state(p, AlgoConfig("fedavg", 0.1, 0.04), np.zeros(p.dim + 1), StreamSource(0))


# --- rounds ----------------------------------------------------------------------


def test_aggregation_arithmetic():
    # client 1 ends at (-0.1, 0) and client 2 at (0, -0.2) after one step of size 0.1
    p = quadratic_problem([I2, I2], [np.array([-1.0, 0.0]), np.array([0.0, -2.0])])
    cfg = AlgoConfig("fedavg", eta=0.1, gamma=0.5, local_steps=1)
    state, controls = init_state(p, cfg, np.zeros(2), StreamSource(0))
    new, _, rep = run_round(state, controls, p, cfg, StreamSource(0))
    np.testing.assert_allclose(new.g, [0.5, 1.0], rtol=1e-15)
    np.testing.assert_allclose(new.x, [-0.25, -0.5], rtol=1e-15)
    np.testing.assert_array_equal(new.prev_x, [0.0, 0.0])
    assert new.round == 1 and rep.round == 0


def test_exact_full_batch_round_has_no_estimator_error():
    p = noisy(sigma=0.0)
    cfg = AlgoConfig("fedavg_m", eta=0.1, gamma=0.04, beta=1.0, local_steps=1)
    state, controls = init_state(p, cfg, np.ones(p.dim), StreamSource(0))
    new, _, rep = run_round(state, controls, p, cfg, StreamSource(0))
    assert rep.est_err <= 1e-28
    assert estimator_error(p, state.x, new.g) == pytest.approx(rep.est_err, abs=1e-30)


def test_beta_one_reduction_is_bitwise():
    p = noisy()
    x0 = np.zeros(p.dim)
    for mom, base, cohort in (("fedavg_m", "fedavg", None), ("scaffold_m", "scaffold", 3)):
        runs = [run_experiment(p, AlgoConfig(v, 0.05, 0.04, beta=1.0, local_steps=4, cohort_size=cohort,
                                             init_batches=2), x0, 20, StreamSource(2))
                for v in (mom, base)]
        np.testing.assert_array_equal(runs[0].state.x, runs[1].state.x)
        assert csv_text(runs[0]) == csv_text(runs[1])


def test_single_round_experiment_equals_run_round():
    p = noisy()
    cfg = AlgoConfig("scaffold_mvr", 0.05, 0.04, beta=0.4, local_steps=3, cohort_size=2, init_batches=2)
    x0 = np.ones(p.dim)
    traj = run_experiment(p, cfg, x0, 1, StreamSource(5))
    state, controls = init_state(p, cfg, x0, StreamSource(5))
    new, _, rep = run_round(state, controls, p, cfg, StreamSource(5))
    np.testing.assert_array_equal(traj.state.x, new.x)
    assert traj[0].loss == rep.loss and traj[0].est_err == rep.est_err


def test_rerun_is_deterministic_and_seed_sensitive():
    p = noisy()
    cfg = AlgoConfig("fedavg_mvr", 0.05, 0.04, beta=0.4, local_steps=3, init_batches=2)
    a = csv_text(run_experiment(p, cfg, np.zeros(p.dim), 15, StreamSource(1)))
    b = csv_text(run_experiment(p, cfg, np.zeros(p.dim), 15, StreamSource(1)))
    c = csv_text(run_experiment(p, cfg, np.zeros(p.dim), 15, StreamSource(2)))
    assert a == b and a != c


def test_round_metrics_fields():
    p = noisy()
    for v in Variant:
        beta = 1.0 if v.pins_beta else 0.5
        traj = run_experiment(p, AlgoConfig(v, 0.05, 0.04, beta=beta, local_steps=3, cohort_size=3,
                                            init_batches=2), np.zeros(p.dim), 5, StreamSource(0))
        for rep in traj:
            assert rep.est_err >= 0 and rep.client_drift >= 0 and rep.grad_norm_sq >= 0
            assert (rep.control_residual is not None) == v.is_scaffold
            assert len(rep.cohort) == 3


def test_control_mean_identity_per_round():
    p = make_quadratic_suite(8, 4, 1.0, 1.0, 0.2, 1.0, 0)
    cfg = AlgoConfig("scaffold_mvr", 0.05, 0.04, beta=0.3, local_steps=3, cohort_size=2, init_batches=2)
    streams = StreamSource(0)
    state, controls = init_state(p, cfg, np.zeros(4), streams)
    for _ in range(30):
        state, controls, _ = run_round(state, controls, p, cfg, streams)
        assert np.linalg.norm(state.c - controls.mean()) <= 1e-12 * (1 + np.abs(controls.c_i).max())


def test_only_cohort_controls_change():
    p = make_quadratic_suite(6, 3, 1.0, 1.0, 0.2, 1.0, 0)
    cfg = AlgoConfig("scaffold", 0.05, 0.04, local_steps=2, cohort_size=2, init_batches=1)
    streams = StreamSource(0)
    state, controls = init_state(p, cfg, np.zeros(3), streams)
    _, new_controls, rep = run_round(state, controls, p, cfg, streams)
    for i in range(6):
        changed = not np.array_equal(controls.c_i[i], new_controls.c_i[i])
        assert changed == (i in rep.cohort.members)


def test_partial_participation_cohort_larger_than_clients():
    p = noisy(n=3)
    cfg = AlgoConfig("scaffold", 0.05, 0.04, local_steps=2, cohort_size=5)
    state, controls = init_state(p, cfg, np.zeros(p.dim), StreamSource(0))
    with pytest.raises(ConfigError):
        run_round(state, controls, p, cfg, StreamSource(0))


def test_round_divergence_carries_round_number():
    p = make_quadratic_suite(4, 5, 1.0, 1.0, 0.2, 0.0, 0)
    cfg = AlgoConfig("fedavg", eta=10.0, gamma=0.04, local_steps=16)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(DivergenceError) as exc:
            run_experiment(p, cfg, np.zeros(5), 100, StreamSource(0))
    assert exc.value.round is not None


def test_resume_from_state_matches_uninterrupted():
    p = noisy()
    cfg = AlgoConfig("scaffold_m", 0.05, 0.04, beta=0.3, local_steps=3, cohort_size=2, init_batches=2)
    full = run_experiment(p, cfg, np.zeros(p.dim), 20, StreamSource(4))
    head = run_experiment(p, cfg, np.zeros(p.dim), 8, StreamSource(4))
    tail = run_experiment(p, cfg, None, 20, StreamSource(4), start=(head.state, head.controls))
    assert csv_text(list(head) + list(tail)) == csv_text(full)


def test_noisy_one_step_estimator_error_is_sigma2_over_n():
    p = make_quadratic_suite(4, 3, 1.0, 1.0, 0.2, 1.0, 0)
    cfg = AlgoConfig("fedavg", eta=0.1, gamma=0.04, local_steps=1)
    x0 = np.ones(3)
    errs = []
    for s in range(200):
        state, controls = init_state(p, cfg, x0, StreamSource(s))
        errs.append(run_round(state, controls, p, cfg, StreamSource(s))[2].est_err)
    errs = np.array(errs)
    se = errs.std(ddof=1) / math.sqrt(errs.size)
    assert abs(errs.mean() - 1.0 / 4) <= 3 * se


def test_scheduled_fedavg_m_keeps_improving():
    # noiseless: doubling the rounds cuts the best gradient norm by at least a quarter
    p = make_quadratic_suite(10, 20, 1.0, 1.0, 0.01, 0.0, 0)
    x0 = np.zeros(20)
    for R in (50, 100):
        mins = []
        for rounds in (R, 2 * R):
            cfg = scheduled_config(Variant.FEDAVG_M, p, x0, rounds, local_steps=8)
            traj = run_experiment(p, cfg, x0, rounds, StreamSource(0))
            mins.append(min(r.grad_norm_sq for r in traj))
        assert mins[1] <= 0.75 * mins[0]


def test_reparameterized_trajectory_matches_direct():
    p = noisy()
    for v, cohort in (("fedavg_m", None), ("scaffold_m", 3)):
        direct = AlgoConfig(v, 0.05, 0.04, beta=0.2, local_steps=4, cohort_size=cohort, init_batches=2)
        a = run_experiment(p, direct, np.zeros(p.dim), 30, StreamSource(0))
        b = run_experiment(p, reparameterize(direct), np.zeros(p.dim), 30, StreamSource(0))
        np.testing.assert_allclose(b.state.x, a.state.x, rtol=1e-9)
        for ra, rb in zip(a, b):
            assert rb.est_err == pytest.approx(ra.est_err, rel=1e-6, abs=1e-20)


def test_state_inputs_are_not_mutated():
    p = noisy()
    cfg = AlgoConfig("scaffold_mvr", 0.05, 0.04, beta=0.3, local_steps=3, cohort_size=2, init_batches=2)
    state, controls = init_state(p, cfg, np.zeros(p.dim), StreamSource(0))
    snap = (state.x.copy(), state.g.copy(), state.c.copy(), controls.c_i.copy())
    run_round(state, controls, p, cfg, StreamSource(0))
    for a, b in zip(snap, (state.x, state.g, state.c, controls.c_i)):
        np.testing.assert_array_equal(a, b)
    assert isinstance(state, ServerState)
