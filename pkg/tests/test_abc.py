import math

import numpy as np
import pytest

from abmcalib import abc_calibrator as abc
from abmcalib.abm import EpiParams, child_seed, simulate


def _obs(seed=3, n=2000, i0=40, c_rate=8.0, p_tran=0.04, p_recov=0.15, horizon=30):
    params = EpiParams(n=n, i0=i0, c_rate=c_rate, p_tran=p_tran, p_recov=p_recov)
    return simulate(params, horizon, seed).incidence


def test_logit_expit_inverse():
    for p in (1e-9, 0.05, 0.5, 0.93):
        assert abc.expit(abc.logit(p)) == pytest.approx(p, rel=1e-12)
    assert abc.expit(-800.0) == 0.0 and abc.expit(800.0) == 1.0


def test_tiny_sigma_proposal_is_identity():
    theta = abc.AbcTheta(10.0, 0.1605, 0.05)
    cand = abc.propose(theta, 1e-12, np.random.default_rng(0))
    for a, b in zip((cand.c_rate, cand.p_recov, cand.p_tran), (10.0, 0.1605, 0.05)):
        assert a == pytest.approx(b, rel=1e-9)


def test_proposal_distributions():
    theta = abc.AbcTheta(10.0, 0.1605, 0.05)
    rng = np.random.default_rng(1)
    draws = [abc.propose(theta, 0.1, rng) for _ in range(20_000)]
    c = np.array([d.c_rate for d in draws])
    pt = np.array([d.p_tran for d in draws])
    pr = np.array([d.p_recov for d in draws])
    # log-normal: mean 10 e^{sigma^2 / 2}, median 10
    assert abs(c.mean() - 10 * math.exp(0.005)) < 3 * c.std(ddof=1) / math.sqrt(c.size)
    assert abs(np.mean(c < 10.0) - 0.5) < 3 * 0.5 / math.sqrt(c.size)
    # logit-normal: median is the current value
    assert abs(np.mean(pt < 0.05) - 0.5) < 3 * 0.5 / math.sqrt(pt.size)
    assert abs(np.mean(pr < 0.1605) - 0.5) < 3 * 0.5 / math.sqrt(pr.size)
    assert np.all((pt > 0) & (pt < 1)) and np.all(pr < 1)


def test_logit_normal_median_at_one_half():
    rng = np.random.default_rng(4)
    theta = abc.AbcTheta(10.0, 0.1605, 0.5)
    pt = np.array([abc.propose(theta, 0.1, rng).p_tran for _ in range(100_000)])
    # standard error of a sample median: 1 / (2 f(m) sqrt(n)), f the density at the median
    density = 1 / (0.1 * math.sqrt(2 * math.pi) * 0.25)  # logit-normal density at 0.5
    se = 1 / (2 * density * math.sqrt(pt.size))
    assert abs(np.median(pt) - 0.5) < 3 * se


def test_p_recov_redraws_stay_below_one():
    theta = abc.AbcTheta(10.0, 0.97, 0.05)
    rng = np.random.default_rng(2)
    draws = [abc.propose(theta, 0.5, rng) for _ in range(2000)]
    assert all(d is not None and d.p_recov < 1 for d in draws)
    stuck = [abc.propose(abc.AbcTheta(10.0, 0.999, 0.05), 2.0, rng, max_redraws=1) for _ in range(200)]
    assert any(d is None for d in stuck) and any(d is not None for d in stuck)


def test_kernel_closed_form_cases():
    s = np.array([3.0, 4.0, 0.0])
    eps = abc.epsilon_for(s)
    assert eps == pytest.approx(0.25, abs=1e-15)  # 0.05 * 5
    assert abc.kernel_weight(s, s, eps) == 1.0
    shift = np.array([eps * math.sqrt(2), 0.0, 0.0])
    assert abc.kernel_weight(s + shift, s, eps) == pytest.approx(math.exp(-1), abs=1e-12)
    far = np.array([20 * eps, 0.0, 0.0])
    assert abc.kernel_weight(s + far, s, eps) == pytest.approx(math.exp(-200), rel=1e-12)
    assert abc.log_kernel_weight(s + 1e6, s, eps) < -1e12
    assert abc.kernel_weight(s + 1e6, s, eps) == 0.0
    obs = np.array([3.0, 4.0])
    assert abc.kernel_weight([0.0, 0.0], obs, abc.epsilon_for(obs)) == pytest.approx(math.exp(-200), rel=1e-12)


def test_kernel_rejects_mismatch_and_bad_eps():
    with pytest.raises(ValueError):
        abc.kernel_weight([1, 2], [1, 2, 3], 1.0)
    with pytest.raises(ValueError):
        abc.kernel_weight([1, 2], [1, 2], 0.0)


def test_epsilon_scales_with_observation():
    s = _obs()
    assert abc.epsilon_for(2 * s) == pytest.approx(2 * abc.epsilon_for(s), rel=1e-15)
    assert abc.epsilon_for(s + 1) > abc.epsilon_for(s)


def test_degenerate_chain_accepts_everything():
    s = _obs()
    cfg = abc.AbcConfig(n=2000, i0=40, iterations=200, burn_in=100, sigma=1e-12, seed=5,
                        common_random_numbers=True)
    trace = abc.run_lfmcmc(s, cfg)
    assert trace.accepted.all() and trace.acceptance_rate == 1.0
    np.testing.assert_allclose(trace.samples(), np.tile([10.0, 0.1605, 0.05], (200, 1)), rtol=1e-9)
    assert np.all(trace.log_kernel == trace.initial_log_kernel)


def test_chain_is_reproducible_and_seeded():
    s = _obs()
    cfg = abc.AbcConfig(n=2000, i0=40, iterations=60, burn_in=30, seed=7)
    a, b = abc.run_lfmcmc(s, cfg), abc.run_lfmcmc(s, cfg)
    assert a.samples().tobytes() == b.samples().tobytes()
    first = abc.AbcTheta(*a.samples()[0]) if a.accepted[0] else None
    if first is not None:
        params = EpiParams(n=2000, i0=40, c_rate=first.c_rate, p_tran=first.p_tran, p_recov=first.p_recov)
        sim = simulate(params, s.size, child_seed(7, 1)).incidence
        assert a.log_kernel[0] == abc.log_kernel_weight(sim, s, a.epsilon)


def test_chain_climbs_towards_data():
    s = _obs(horizon=30)
    climbed = 0
    for seed in range(20):
        cfg = abc.AbcConfig(n=2000, i0=40, iterations=150, burn_in=50, seed=seed)
        trace = abc.run_lfmcmc(s, cfg)
        climbed += trace.log_kernel[-1] > trace.initial_log_kernel
    assert climbed >= 18


@pytest.mark.slow
def test_full_length_chains_climb_towards_data():
    s = _obs(horizon=60)
    climbed = sum(abc.run_lfmcmc(s, abc.AbcConfig(n=2000, i0=40, seed=seed)).kernel[-1]
                  >= abc.kernel_weight(*_initial_sim(s, seed)) for seed in range(20))
    assert climbed >= 18


def _initial_sim(s, seed):
    init = abc.AbcConfig(n=2000, i0=40).init
    params = EpiParams(n=2000, i0=40, c_rate=init.c_rate, p_tran=init.p_tran, p_recov=init.p_recov)
    return simulate(params, s.size, child_seed(seed, 0)).incidence, s, abc.epsilon_for(s)


def test_trace_invariants():
    s = _obs()
    trace = abc.run_lfmcmc(s, abc.AbcConfig(n=2000, i0=40, iterations=80, burn_in=40, seed=1))
    assert len(trace) == 80
    held = ~trace.accepted[1:]
    assert np.array_equal(trace.samples()[1:][held], trace.samples()[:-1][held])
    assert np.all((trace.p_tran > 0) & (trace.p_tran < 1) & (trace.p_recov < 1) & (trace.c_rate > 0))


def test_point_estimate_burn_in_arithmetic():
    it = 2000
    c = np.arange(it, dtype=float)
    trace = abc.AbcTrace(c + 1, np.full(it, 0.5), np.full(it, 0.1), np.ones(it), np.zeros(it),
                         np.ones(it, dtype=bool))
    est = abc.point_estimate(trace, 1000)
    # kept samples are 1001..2000, whose median is 1500.5
    assert est["c_rate"] == 1500.5
    assert est["r0"] == pytest.approx(0.1 * 1500.5 / 0.5, rel=1e-15)
    with pytest.raises(ValueError):
        abc.point_estimate(trace, it)


def test_point_estimate_constant_and_alternating_chains():
    it = 10
    const = abc.AbcTrace(np.full(it, 7.0), np.full(it, 0.2), np.full(it, 0.05), np.ones(it), np.zeros(it),
                         np.ones(it, bool))
    est = abc.point_estimate(const, 4)
    assert (est["c_rate"], est["p_recov"], est["p_tran"]) == (7.0, 0.2, 0.05)
    alt = abc.AbcTrace(np.tile([4.0, 8.0], 5), np.tile([0.1, 0.3], 5), np.tile([0.02, 0.06], 5), np.ones(it),
                       np.zeros(it), np.ones(it, bool))
    est = abc.point_estimate(alt, 2)
    assert est["c_rate"] == 6.0 and est["p_recov"] == pytest.approx(0.2) and est["p_tran"] == pytest.approx(0.04)


def test_point_estimate_sort_oracle():
    rng = np.random.default_rng(3)
    it, burn = 501, 200
    cols = [rng.gamma(5, 2, it), rng.uniform(0.05, 0.3, it), rng.uniform(0.01, 0.2, it)]
    trace = abc.AbcTrace(*cols, np.ones(it), np.zeros(it), np.ones(it, bool))
    est = abc.point_estimate(trace, burn)
    for name, col in zip(("c_rate", "p_recov", "p_tran"), cols):
        kept = sorted(col[burn:].tolist())
        assert est[name] == kept[len(kept) // 2]  # odd count: the middle element


def test_point_estimate_hand_example():
    trace = abc.AbcTrace(np.array([100.0, 4.0, 6.0, 5.0]), np.array([9.0, 0.2, 0.1, 0.3]),
                         np.array([9.0, 0.02, 0.04, 0.03]), np.ones(4), np.zeros(4), np.ones(4, bool))
    est = abc.point_estimate(trace, 1)
    assert (est["c_rate"], est["p_recov"], est["p_tran"]) == (5.0, 0.2, 0.03)
    assert est["r0"] == pytest.approx(0.03 * 5.0 / 0.2)


def test_config_validation():
    with pytest.raises(ValueError):
        abc.AbcConfig(n=10, i0=1, iterations=10, burn_in=10)
    with pytest.raises(ValueError):
        abc.AbcConfig(n=10, i0=1, init=abc.AbcTheta(1.0, 1.0, 0.1))
    with pytest.raises(ValueError):
        abc.run_lfmcmc(np.zeros(10), abc.AbcConfig(n=10, i0=1, iterations=5, burn_in=1))


def test_trace_csv_round_trip(tmp_path):
    s = _obs()
    trace = abc.run_lfmcmc(s, abc.AbcConfig(n=2000, i0=40, iterations=50, burn_in=10, seed=2))
    path = tmp_path / "trace.csv"
    abc.write_trace_csv(trace, path)
    assert path.read_text().splitlines()[0] == "iter,c_rate,p_recov,p_tran,kernel,accepted"
    back = abc.read_trace_csv(path)
    assert back.samples().tobytes() == trace.samples().tobytes()
    assert back.kernel.tobytes() == trace.kernel.tobytes()
    assert np.array_equal(back.accepted, trace.accepted)
    abc.write_trace_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()
