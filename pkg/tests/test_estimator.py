import math

import numpy as np
import pytest

from rlmm.data import Dataset, TrajectoryRecord, rmse_log_beta
from rlmm.estimator import (
    BatchSampler,
    FitConfig,
    FitResult,
    NonFiniteGradient,
    StepTable,
    _step_policy,
    batch_gradient,
    behavioral_nll,
    bellman_loss_value,
    fit,
    newton_persons,
    newton_update_person,
    penalized_objective,
    person_logpost,
    person_terms,
    prior_penalty,
    sgd_value_update,
    update_population,
)
from rlmm.tabular import PopulationPrior, sample_population, simulate_trajectories
from rlmm.value import QParams

from conftest import central_diff, rel_err


def _random_theta(table, kind, seed, scale=0.5):
    theta = QParams.init(kind, table.feature_dim, table.n_actions, hidden=6, seed=seed)
    rng = np.random.default_rng(seed)
    return theta.with_flat(theta.flat + rng.normal(0, scale, theta.param_count))


def _synthetic_person(rng, n_steps=30):
    """Random legal sets and choices for one person; returns (adv, mask, chosen)."""
    width = 5
    mask = np.zeros((n_steps, width), dtype=bool)
    for t in range(n_steps):
        mask[t, : int(rng.integers(2, width + 1))] = True
    adv = np.where(mask, rng.normal(size=(n_steps, width)), 0.0)
    adv = np.where(mask, adv - (adv * mask).sum(1, keepdims=True) / mask.sum(1, keepdims=True), 0.0)
    beta = math.exp(rng.normal(0, 0.7))
    chosen = np.empty(n_steps, dtype=np.int64)
    for t in range(n_steps):
        k = int(mask[t].sum())
        p = np.exp(beta * adv[t, :k])
        chosen[t] = rng.choice(k, p=p / p.sum())
    return adv, mask, chosen


def _grid_argmax(adv, mask, chosen, prior):
    grid = np.round(np.arange(-4.0, 4.0 + 5e-4, 1e-3), 10)
    person = np.zeros(len(chosen), dtype=np.int64)
    vals = [person_terms(np.array([z]), adv, mask, chosen, person, 1, prior, need_derivs=False)[0][0] for z in grid]
    return float(grid[int(np.argmax(vals))])


# configuration


def test_config_validation_and_dict():
    cfg = FitConfig()
    assert (cfg.lambda_bell, cfg.tau, cfg.eta, cfg.batch_size, cfg.m_sgd, cfg.m_nr, cfg.k_outer) == (
        1.0, 1.0, 1e-2, 256, 50, 5, 20)
    assert cfg.prior_init == PopulationPrior(0.0, 0.25) and cfg.sigma2_floor == 1e-3
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        FitConfig.from_dict({"lr": 1})
    for bad in ({"k_outer": 0}, {"tau": 0.0}, {"lambda_bell": -1.0}, {"eta": -1e-3}):
        with pytest.raises(ValueError):
            FitConfig(**bad)


def test_illegal_action_rejected(tiny):
    s0 = tiny.initial_states[0]
    bad = next(a for a in range(tiny.n_actions) if a not in tiny.legal_ids(s0))
    data = Dataset((TrajectoryRecord("p", "e", 0, s0, bad, 0.0, s0, True),))
    with pytest.raises(ValueError, match="illegal"):
        StepTable(data, tiny)


# behavioural likelihood


def test_nll_at_beta_zero_is_log_legal_counts(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "two-layer", 0)
    z = np.full(table.n_persons, -800.0)
    expect = np.log(table.mask[table.s].sum(axis=1)).sum()
    assert behavioral_nll(theta, z, table, table.scale(theta, 1e-8)) == pytest.approx(expect, abs=1e-9)


def test_two_action_contribution():
    adv = np.array([[math.log(3), 0.0]])
    logp, pi = _step_policy(adv, np.ones_like(adv, dtype=bool), np.array([1.0]))
    assert -logp[0, 0] == pytest.approx(-math.log(0.75), abs=1e-15)


def test_nll_matches_scalar_reimplementation(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "two-layer", 1)
    rng = np.random.default_rng(2)
    z = rng.normal(0, 0.5, table.n_persons)
    c = table.scale(theta, 1e-8)
    q = table.q_all(theta)
    total = 0.0
    for i in range(len(table)):
        s = table.s[i]
        legal = np.flatnonzero(table.mask[s])
        qs = [q[s, a] for a in legal]
        m = sum(qs) / len(qs)
        beta = math.exp(z[table.person[i]])
        logits = [beta * (x - m) / c for x in qs]
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(v - mx) for v in logits))
        total -= logits[list(legal).index(table.action[i])] - lse
    assert behavioral_nll(theta, z, table, c) == pytest.approx(total, rel=1e-12, abs=1e-10)


def test_penalized_objective_parts(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "linear", 3)
    prior = PopulationPrior(0.2, 0.5)
    z = np.random.default_rng(0).normal(size=table.n_persons)
    c = table.scale(theta, 1e-8)
    nll = behavioral_nll(theta, z, table, c)
    obj0 = penalized_objective(theta, z, table, FitConfig(lambda_bell=0.0), prior, scale=c)
    assert obj0 == pytest.approx(nll + prior_penalty(z, prior), rel=1e-14)
    assert prior_penalty(np.full(4, 0.2), prior) == 0.0
    obj = penalized_objective(theta, z, table, FitConfig(lambda_bell=2.0), prior, scale=c)
    assert obj == pytest.approx(obj0 + 2.0 * bellman_loss_value(theta, table, 1.0), rel=1e-14)


@pytest.mark.xfail(strict=True, reason="line-5 play carries no preference, so the advantage scale collapses "
                                       "and plain SGD diverges; recorded as a known limitation")
def test_objective_non_increasing_line5(line5_task, line5):
    data = simulate_trajectories(line5_task, sample_population(PopulationPrior(), 20, 1), 20, seed=2)
    res = fit(data, line5, FitConfig(k_outer=5))
    obj = np.array(res.objective)
    assert np.all(np.diff(obj) <= 1e-6 * abs(obj[0]))


# value-parameter gradients


@pytest.mark.parametrize("kind", ["linear", "two-layer"])
@pytest.mark.parametrize("reduction", ["sum", "mean"])
def test_batch_gradient_finite_difference(tiny_data, tiny, kind, reduction):
    table = StepTable(tiny_data, tiny)
    rng = np.random.default_rng(0)
    for trial in range(10):
        theta = _random_theta(table, kind, trial)
        z = rng.normal(0, 0.5, table.n_persons)
        c = table.scale(theta, 1e-8)
        idx = rng.choice(len(table), size=40, replace=False)
        g, _ = batch_gradient(theta, z, table, idx, c, 0.7, 1.0, reduction)

        def loss(x):
            return batch_gradient(theta.with_flat(x), z, table, idx, c, 0.7, 1.0, reduction)[1]

        assert rel_err(g, central_diff(loss, theta.flat)) < 1e-5


@pytest.mark.parametrize("kind", ["linear", "two-layer"])
def test_bellman_gradient_finite_difference(tiny_data, tiny, kind):
    table = StepTable(tiny_data, tiny)
    idx = np.arange(len(table))
    z = np.full(table.n_persons, -800.0)  # beta ~ 0 removes the choice term
    for trial in range(10):
        theta = _random_theta(table, kind, 10 + trial)
        g, _ = batch_gradient(theta, z, table, idx, 1.0, 1.0, 1.0)
        fd = central_diff(lambda x: bellman_loss_value(theta.with_flat(x), table, 1.0), theta.flat)
        assert rel_err(g, fd) < 1e-5


def test_full_batch_gradient_matches_objective(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "two-layer", 5)
    z = np.random.default_rng(1).normal(0, 0.5, table.n_persons)
    c = table.scale(theta, 1e-8)
    g, _ = batch_gradient(theta, z, table, np.arange(len(table)), c, 1.0, 1.0, "sum")
    fd = central_diff(lambda x: behavioral_nll(theta.with_flat(x), z, table, c)
                      + bellman_loss_value(theta.with_flat(x), table, 1.0), theta.flat)
    assert rel_err(g, fd) < 1e-5


def test_sgd_zero_rate_and_determinism(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "two-layer", 0)
    z = np.zeros(table.n_persons)
    c = table.scale(theta, 1e-8)
    out = sgd_value_update(theta, z, table, FitConfig(eta=0.0, m_sgd=3, batch_size=16), c,
                           BatchSampler(len(table), 16, np.random.default_rng(0)))
    np.testing.assert_array_equal(out.flat, theta.flat)
    cfg = FitConfig(m_sgd=5, batch_size=16)
    runs = [sgd_value_update(theta, z, table, cfg, c, BatchSampler(len(table), 16, np.random.default_rng(9)))
            for _ in range(2)]
    assert runs[0].flat.tobytes() == runs[1].flat.tobytes()


def test_single_step_hand_computed(line5):
    # one transition from {2,3,4}: a forced jump into the dead state {1,4}
    s, nxt = 0b11100, 0b10010
    (a,) = line5.legal_ids(s)
    data = Dataset((TrajectoryRecord("p", "e", 0, s, a, -1.0, nxt, True),))
    table = StepTable(data, line5)
    assert table.n_actions == 1
    theta = QParams.zeros("linear", table.feature_dim, 1)
    theta.views["b"][:] = 0.4
    phi = table.phi[table.s[0]]
    delta = 0.4 - (-1.0)  # successor is terminal, so no continuation value
    eta, lam = 0.1, 2.0
    expect = theta.flat - eta * 2 * lam * delta * np.concatenate([phi, [1.0]])
    cfg = FitConfig(eta=eta, lambda_bell=lam, m_sgd=1, batch_size=1)
    out = sgd_value_update(theta, np.zeros(1), table, cfg, 1.0, BatchSampler(1, 1, np.random.default_rng(0)))
    np.testing.assert_allclose(out.flat, expect, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_aborts(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "linear", 0)
    z = np.full(table.n_persons, 800.0)
    with pytest.raises(NonFiniteGradient, match="batch rows"):
        sgd_value_update(theta, z, table, FitConfig(m_sgd=1, batch_size=8), 1e-300,
                         BatchSampler(len(table), 8, np.random.default_rng(0)))


def test_batch_sampler_epochs():
    s = BatchSampler(10, 3, np.random.default_rng(0))
    seen = np.concatenate([s.next() for _ in range(3)])
    assert len(set(seen.tolist())) == 9
    with pytest.raises(ValueError):
        BatchSampler(2, 3, np.random.default_rng(0))


# person updates


def test_person_derivatives_finite_difference():
    rng = np.random.default_rng(0)
    prior = PopulationPrior(0.1, 0.3)
    adv, mask, chosen = _synthetic_person(rng)
    for z in rng.uniform(-2, 2, 10):
        _, g, h = person_logpost(z, adv, chosen, prior, mask)
        fg = (person_logpost(z + 1e-5, adv, chosen, prior, mask)[0] - person_logpost(z - 1e-5, adv, chosen, prior, mask)[0]) / 2e-5
        fh = (person_logpost(z + 1e-5, adv, chosen, prior, mask)[1] - person_logpost(z - 1e-5, adv, chosen, prior, mask)[1]) / 2e-5
        assert abs(g - fg) / max(abs(fg), 1e-8) < 1e-6
        assert abs(h - fh) / max(abs(fh), 1e-8) < 1e-6


def test_gradient_vanishes_at_grid_argmax():
    rng = np.random.default_rng(1)
    prior = PopulationPrior()
    adv, mask, chosen = _synthetic_person(rng)
    z_star = _grid_argmax(adv, mask, chosen, prior)
    _, g, h = person_logpost(z_star, adv, chosen, prior, mask)
    # the grid point lies within half a step of the mode
    assert abs(g) <= abs(h) * 5e-4 + 1e-12
    z_hat, _, _ = newton_update_person(0.0, adv, chosen, prior, 50, mask)
    assert abs(person_logpost(z_hat, adv, chosen, prior, mask)[1]) < 1e-4


def test_forced_moves_only_person():
    prior = PopulationPrior(0.3, 0.5)
    adv = np.zeros((4, 1))
    _, g, _ = person_logpost(1.2, adv, np.zeros(4, dtype=int), prior)
    assert g == pytest.approx(-(1.2 - 0.3) / 0.5)
    person = np.zeros(4, dtype=np.int64)
    args = (adv, np.ones_like(adv, dtype=bool), np.zeros(4, dtype=np.int64), person, 1, prior)
    z1, _, _ = newton_persons(np.array([2.0]), *args, m_nr=1)
    assert z1[0] == pytest.approx(0.3, abs=1e-14)


def test_newton_matches_grid_search():
    rng = np.random.default_rng(2)
    prior = PopulationPrior(0.0, 0.25)
    for _ in range(20):
        adv, mask, chosen = _synthetic_person(rng)
        z_hat, _, h = newton_update_person(0.0, adv, chosen, prior, 50, mask)
        assert h < 0
        assert abs(z_hat - _grid_argmax(adv, mask, chosen, prior)) < 1e-3


def test_newton_never_decreases_logpost():
    rng = np.random.default_rng(3)
    prior = PopulationPrior(0.0, 0.25)
    problems = [_synthetic_person(rng, 12) for _ in range(100)]
    adv = np.vstack([p[0] for p in problems])
    mask = np.vstack([p[1] for p in problems])
    chosen = np.concatenate([p[2] for p in problems])
    person = np.repeat(np.arange(100), 12)
    z = rng.uniform(-4, 4, 100)
    args = (adv, mask, chosen, person, 100, prior)
    prev = person_terms(z, *args, need_derivs=False)[0]
    for _ in range(8):
        z, ll, _ = newton_persons(z, *args, m_nr=1)
        assert np.all(ll >= prev - 1e-12 * np.abs(prev))
        prev = ll


def test_person_updates_permutation_invariant(tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "two-layer", 0)
    c = table.scale(theta, 1e-8)
    st = table.stage
    adv = st.gather(table.advantages(theta, c))
    prior = PopulationPrior()
    z0 = np.zeros(table.n_persons)
    z, _, _ = newton_persons(z0, adv, st.legal_ok, st.chosen, st.person, table.n_persons, prior, 5, st.weights)
    perm = np.random.default_rng(0).permutation(table.n_persons)
    inv = np.argsort(perm)
    rows = np.random.default_rng(1).permutation(len(st.person))
    zp, _, _ = newton_persons(z0, adv[rows], st.legal_ok[rows], st.chosen[rows], inv[st.person[rows]],
                              table.n_persons, prior, 5, st.weights[rows])
    np.testing.assert_allclose(zp[inv], z, atol=1e-12, rtol=0)


@pytest.mark.parametrize("c", [0.1, 3.0, 100.0])
def test_person_stage_scale_neutral(tiny_data, tiny, c):
    table = StepTable(tiny_data, tiny)
    theta = _random_theta(table, "linear", 7)
    prior = PopulationPrior()
    z0 = np.zeros(table.n_persons)
    base = table.stage.run(theta, table.scale(theta, 0.0), z0, prior, 5)[0]
    scaled = theta.scaled(c)
    got = table.stage.run(scaled, table.scale(scaled, 0.0), z0, prior, 5)[0]
    np.testing.assert_allclose(got, base, atol=1e-10, rtol=0)


def test_update_population_examples():
    assert update_population([-1.0, 1.0], 1e-3) == PopulationPrior(0.0, 1.0)
    assert update_population([0.4] * 5, 1e-3) == PopulationPrior(0.4, 1e-3)
    current = PopulationPrior(0.2, 0.7)
    assert update_population([1.0], 1e-3, current) is current
    z = np.random.default_rng(0).normal(0.3, 0.5, 2000)
    got = update_population(z, 1e-3)
    assert abs(got.mu - 0.3) < 0.05 * 0.3 and abs(got.sigma2 - 0.25) < 0.05 * 0.25


# whole fit


@pytest.fixture(scope="module")
def small_fit(tiny_data, tiny):
    return fit(tiny_data, tiny, FitConfig(k_outer=4, m_sgd=10, batch_size=64))


def test_fit_traces(small_fit):
    for trace in (small_fit.nll, small_fit.bellman, small_fit.objective, small_fit.time_person, small_fit.time_value):
        assert len(trace) == 4 and np.all(np.isfinite(trace))
    assert all(p.beta_hat == math.exp(p.z_hat) for p in small_fit.persons)


def test_fit_returns_modes(small_fit, tiny_data, tiny):
    table = StepTable(tiny_data, tiny)
    st = table.stage
    adv = st.gather(table.advantages(small_fit.theta, small_fit.scale))
    _, g, h = person_terms(small_fit.z_hat(), adv, st.legal_ok, st.chosen, st.person, table.n_persons,
                           small_fit.prior, weights=st.weights)
    assert np.max(np.abs(g)) < 1e-6
    np.testing.assert_allclose(h, [p.hessian for p in small_fit.persons], rtol=1e-9)


def test_fit_deterministic_and_serialised(small_fit, tiny_data, tiny, tmp_path):
    again = fit(tiny_data, tiny, FitConfig(k_outer=4, m_sgd=10, batch_size=64))
    assert again.theta.flat.tobytes() == small_fit.theta.flat.tobytes()
    small_fit.write(tmp_path / "a", timings=False)
    again.write(tmp_path / "b", timings=False)
    for name in ("theta.ckpt", "persons.csv", "traces.csv", "fit.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    back = FitResult.read(tmp_path / "a")
    assert back.theta.flat.tobytes() == small_fit.theta.flat.tobytes()
    assert back.persons == small_fit.persons and back.prior == small_fit.prior


def test_fit_with_fixed_prior(tiny_data, tiny):
    res = fit(tiny_data, tiny, FitConfig(k_outer=2, m_sgd=5, batch_size=32, estimate_prior=False,
                                         prior_mu=0.1, prior_sigma2=0.4))
    assert res.prior == PopulationPrior(0.1, 0.4)


@pytest.mark.slow
def test_rmse_trend_in_sample_size(tiny_task, tiny):
    betas = sample_population(PopulationPrior(), 50, seed=0)
    rmse = []
    for games in (10, 50, 250):
        data = simulate_trajectories(tiny_task, betas, games, seed=1)
        rmse.append(rmse_log_beta(fit(data, tiny).beta_hat(), data.true_beta))
    assert rmse[0] >= rmse[1] >= rmse[2]
