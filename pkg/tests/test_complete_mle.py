import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epiinfer.complete_mle import (
    TransitionCounts,
    ar1_mle,
    bd_chain_mle,
    branching_estimators,
    chain_loglik,
    chain_parametric_mle,
    chain_transition_mle,
    ctmc_loglik,
    greenwood_estimators,
    icu_transition_matrix,
    ou_from_ar1,
    qmatrix_mle,
    r0_estimate,
    reed_frost_mle,
    sir_mle_complete,
)
from epiinfer.models import build_model
from epiinfer.rng import make_rng
from epiinfer.simulate import JumpPath, gillespie, simulate_ar1, simulate_chain, simulate_ctmc

SIR_THETA = np.array([0.5, 1 / 3])


def _path(sir, times, jumps, N, x0, T):
    return JumpPath(
        sir, N, np.asarray(x0), np.asarray(times), np.asarray(jumps), np.ones(len(times), dtype=int), T
    )


def test_sir_mle_hand_fixture(sir):
    # three events: infections at 1 and 2, recovery at 3; T = 4, N = 10
    path = _path(sir, [1.0, 2.0, 3.0], [0, 0, 1], 10, [9, 1], 4.0)
    est = sir_mle_complete(path)
    # piecewise (s, i): [0,1): (.9,.1); [1,2): (.8,.2); [2,3): (.7,.3); [3,4]: (.7,.2)
    int_si = 0.9 * 0.1 + 0.8 * 0.2 + 0.7 * 0.3 + 0.7 * 0.2
    int_i = 0.1 + 0.2 + 0.3 + 0.2
    assert est["lambda"] == pytest.approx(2 / (10 * int_si), rel=1e-12)
    assert est["gamma"] == pytest.approx(1 / (10 * int_i), rel=1e-12)
    assert est.diagnostics["n_infections"] + est.diagnostics["n_recoveries"] == path.n_events


def test_sir_mle_flags_without_recoveries(sir):
    path = _path(sir, [1.0], [0], 10, [9, 1], 2.0)
    est = sir_mle_complete(path)
    assert "gamma" in est.flags
    assert np.isnan(est["gamma"])
    with pytest.raises(ValueError):
        r0_estimate(est)


def test_sir_mle_simulation_median_accuracy(sir):
    # N = 10000 exact-data MLE is tight; a small replicate set suffices here
    ests = []
    for rep in range(20):
        path = gillespie(sir, SIR_THETA, 10000, np.array([9900, 100]), 40.0, seed=(9000, rep))
        est = sir_mle_complete(path)
        ests.append(est.values)
    med = np.median(ests, axis=0)
    assert abs(med[0] / 0.5 - 1) < 0.05
    assert abs(med[1] / (1 / 3) - 1) < 0.05


def test_r0_delta_method_vs_monte_carlo(sir):
    r0s, variances = [], []
    for rep in range(300):
        path = gillespie(sir, SIR_THETA, 2000, np.array([1980, 20]), 40.0, seed=(9100, rep))
        est = sir_mle_complete(path)
        if est.flags:
            continue
        r0, var = r0_estimate(est)
        r0s.append(r0)
        variances.append(var)
    ratio = np.mean(variances) / np.var(r0s)
    assert 0.8 <= ratio <= 1.25
    assert np.median(r0s) == pytest.approx(1.5, rel=0.1)


def test_qmatrix_mle_hand_count():
    # two states; holding 2.0 total in state 1 (index 0) with 3 transitions out
    times = np.array([0.0, 0.5, 0.8, 1.5, 1.8, 2.6, 3.0])
    states = np.array([0, 1, 0, 1, 0, 1, 0])
    # time in state 0: [0,.5)+[0.8,1.5)+[1.8,2.6)+[3.0,3.4] = 2.4; 3 exits
    est = qmatrix_mle(times, states, T=3.4)
    assert est.Q[0, 1] == pytest.approx(3 / 2.4)
    assert est.Q[0, 0] == pytest.approx(-3 / 2.4)
    assert not est.missing_rows


def test_qmatrix_mle_missing_row():
    est = qmatrix_mle(np.array([0.0]), np.array([0]), T=1.0, n_states=3)
    assert est.missing_rows == [1, 2]
    assert np.isnan(est.Q[1]).all()


def test_qmatrix_mle_consistency():
    Q = np.array([[-1.0, 1.0], [2.0, -2.0]])
    errs = []
    for T in (500.0, 5000.0):
        ts, ss = simulate_ctmc(Q, 0, T, seed=(70, int(T)))
        est = qmatrix_mle(ts, ss, T)
        errs.append(np.max(np.abs(est.Q - Q)))
    assert errs[1] < errs[0]
    assert errs[1] < 0.12


def test_qmatrix_equals_bruteforce_likelihood_grid():
    Q = np.array([[-1.0, 0.6, 0.4], [0.5, -1.0, 0.5], [0.3, 0.9, -1.2]])
    ts, ss = simulate_ctmc(Q, 0, 400.0, seed=71)
    est = qmatrix_mle(ts, ss, 400.0)
    counts = est.counts
    # per-entry grid maximization of the exact jump-process log-likelihood
    for k in range(3):
        for l in range(3):
            if k == l:
                continue
            grid = np.linspace(max(est.Q[k, l] - 0.3, 1e-3), est.Q[k, l] + 0.3, 2001)
            vals = []
            for q in grid:
                Qc = est.Q.copy()
                Qc[k, l] = q
                vals.append(ctmc_loglik(counts, Qc))
            assert abs(grid[int(np.argmax(vals))] - est.Q[k, l]) <= 1e-3 + 1e-6


def test_chain_transition_mle_trivial():
    Q, cov = chain_transition_mle([0, 1, 0, 1])
    assert Q[0, 1] == 1.0 and Q[1, 0] == 1.0
    np.testing.assert_allclose(Q.sum(axis=1), 1.0)


def test_chain_transition_mle_clt_scale():
    P = np.array([[0.7, 0.3], [0.4, 0.6]])
    rng = make_rng(72)
    n = 100000
    states = np.empty(n + 1, dtype=int)
    states[0] = 0
    for k in range(n):
        states[k + 1] = rng.uniform() < P[states[k], 1]
    Q, cov = chain_transition_mle(states)
    se = np.sqrt(np.array([[cov[i][j, j] for j in range(2)] for i in range(2)]))
    assert np.max(np.abs(Q - P)) <= 4 * se.max()


def test_chain_mle_equals_bruteforce_grid():
    rng = make_rng(73)
    P = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.25, 0.25, 0.5]])
    states = [0]
    for _ in range(4000):
        states.append(rng.choice(3, p=P[states[-1]]))
    Q, _ = chain_transition_mle(np.array(states))
    counts = TransitionCounts.from_chain(np.array(states))
    # row-wise grid search over the simplex (2 free parameters per row)
    grid = np.linspace(0.001, 0.998, 200)
    for i in range(3):
        best, best_val = None, -np.inf
        for a in grid:
            for b in grid:
                if a + b >= 1.0:
                    continue
                row = np.array([a, b, 1 - a - b])
                val = np.dot(counts.N_ij[i], np.log(row))
                if val > best_val:
                    best_val, best = val, row
        assert np.max(np.abs(best - Q[i])) <= 0.006  # grid resolution


def test_chain_parametric_saturated_recovers_nonparametric():
    rng = make_rng(74)
    P = np.array([[0.7, 0.3], [0.45, 0.55]])
    states = [0]
    for _ in range(3000):
        states.append(int(rng.uniform() < P[states[-1], 1]))
    states = np.array(states)
    Qnp, _ = chain_transition_mle(states)
    counts = TransitionCounts.from_chain(states)

    def q_param(th):
        return np.array([[1 - th[0], th[0]], [th[1], 1 - th[1]]])

    est = chain_parametric_mle(counts, q_param, [0.5, 0.5], transforms=("logit", "logit"))
    assert est["theta0"] == pytest.approx(Qnp[0, 1], abs=1e-6)
    assert est["theta1"] == pytest.approx(Qnp[1, 0], abs=1e-6)


def test_chain_parametric_icu_recovery():
    truth = (0.8, 0.9, 0.3)
    Q = icu_transition_matrix(*truth)
    rng = make_rng(75)
    states = [0]
    for _ in range(10000):
        states.append(int(rng.choice(3, p=Q[states[-1]])))
    counts = TransitionCounts.from_chain(np.array(states))
    est = chain_parametric_mle(
        counts,
        lambda th: icu_transition_matrix(*th),
        [0.5, 0.5, 0.5],
        transforms=("logit", "logit", "logit"),
        names=("a", "b", "d"),
    )
    se = est.se()
    for val, tv, s in zip(est.values, truth, se):
        assert abs(val - tv) <= 4 * s


def test_chain_parametric_matches_bd_closed_form():
    bd = build_model("bd_reemerge")
    traj = simulate_chain(bd, np.array([0.2, 0.4]), np.array([2]), 4000, seed=76)[:, 0].astype(int)
    closed = bd_chain_mle(traj)
    # state space one larger than anything visited: the parametric
    # likelihood then equals the closed-form decomposition exactly
    counts = TransitionCounts.from_chain(traj, n_states=traj.max() + 2)
    S = counts.N_ij.shape[0]

    def q_param(th):
        p, q = th
        Q = np.zeros((S, S))
        Q[0, 0] = 1 - p
        Q[0, 1] = p
        for i in range(1, S):
            Q[i, i - 1] = q
            Q[i, i] = 1 - p - q
            if i + 1 < S:
                Q[i, i + 1] = p
        return Q

    est = chain_parametric_mle(counts, q_param, [0.3, 0.3], transforms=("logit", "logit"))
    # identical likelihood decomposition: optimum matches the closed form
    assert est.values[0] == pytest.approx(closed.values[0], abs=1e-8)
    assert est.values[1] == pytest.approx(closed.values[1], abs=1e-8)


def test_greenwood_hand_values():
    p_mle, p_cls = greenwood_estimators([10, 5, 3, 3])
    assert p_mle == pytest.approx(7 / 18)
    p_mle, p_cls = greenwood_estimators([4, 4, 4])
    assert p_mle == 0.0 and p_cls == 0.0
    p_mle, _ = greenwood_estimators([7, 0])
    assert p_mle == 1.0
    with pytest.raises(ValueError):
        greenwood_estimators([3, 5, 2])


def test_reed_frost_reduces_to_greenwood_when_i_is_one():
    s = np.array([30, 26, 23, 21, 20])
    i = np.ones(5)
    i[1:] = s[:-1] - s[1:]
    # force i_k = 1 at every generation by construction of the score:
    s = np.array([30.0, 29.0, 28.0, 27.0])
    i = np.array([1.0, 1.0, 1.0, 1.0])
    est = reed_frost_mle(s, i)
    p_mle, _ = greenwood_estimators(s)
    assert est["q"] == pytest.approx(1 - p_mle, abs=1e-9)


def test_reed_frost_boundary_and_simulation():
    est = reed_frost_mle([10.0, 10.0, 10.0], [2.0, 0.0, 0.0])
    assert est["q"] == 1.0 and est.flags

    rf = build_model("reed_frost")
    q_true = 0.995
    errs = []
    for rep in range(200):
        traj = simulate_chain(rf, np.array([q_true]), np.array([1000, 5]), 12, seed=(77, rep))
        s, i = traj[:, 0], traj[:, 1]
        if np.all(i[:-1] == 0):
            continue
        est = reed_frost_mle(s, i)
        errs.append(est["q"] - q_true)
    se = np.std(errs)
    assert abs(np.mean(errs)) <= 4 * se / np.sqrt(len(errs)) + 1e-4


def test_bd_chain_hand_count():
    est = bd_chain_mle([1, 2, 1, 1, 0, 0, 1])
    assert est["p"] == pytest.approx(1 / 3)
    assert est["q"] == pytest.approx(4 / 9)
    assert est.diagnostics == {"B": 2, "D": 2, "R": 1, "n": 6}


def test_bd_chain_boundary_and_errors():
    est = bd_chain_mle([0, 1, 2, 3, 4])
    assert est["q"] == 0.0 and "q" in est.flags
    with pytest.raises(ValueError):
        bd_chain_mle([0, 2, 3])


def test_bd_chain_simulation_within_4se():
    bd = build_model("bd_reemerge")
    traj = simulate_chain(bd, np.array([0.2, 0.4]), np.array([1]), 100000, seed=78)[:, 0]
    est = bd_chain_mle(traj.astype(int))
    se = est.se()
    assert abs(est["p"] - 0.2) <= 4 * se[0]
    assert abs(est["q"] - 0.4) <= 4 * se[1]
    # closed-form covariance equals the numerical inverse of I(p,q)
    p, q = est.values
    r = 1 - p - q
    info = np.array([[(r + p**2) / (p * (1 - p) * r), p / (q * r)], [p / (q * r), p * (1 - p) / (r * q**2)]])
    np.testing.assert_allclose(est.cov, np.linalg.inv(info) / est.diagnostics["n"], rtol=1e-9)


def test_branching_deterministic_doubling():
    est = branching_estimators([1, 2, 4, 8])
    assert est.m == 2.0 and est.sigma2 == 0.0


def test_branching_geometric_inverse_link():
    Z = np.array([1, 3, 7, 18, 40, 95])
    est = branching_estimators(Z, family="geometric")
    assert est.family_params["p"] == pytest.approx(Z[:-1].sum() / Z[1:].sum())
    assert est.q_extinct == 0.0  # geometric on N*: no zero offspring


def test_branching_fractional_linear_extinction():
    a, p = 0.2, 0.25  # m = (1-a)/p = 3.2, q = a/(1-p)
    rng = make_rng(79)

    def offspring(size):
        zero = rng.uniform(size=size) < a
        geo = rng.geometric(p, size=size)
        return np.where(zero, 0, geo)

    for attempt in range(50):
        Z = [1]
        for _ in range(14):
            Z.append(int(offspring(Z[-1]).sum()) if Z[-1] > 0 else 0)
        if Z[-1] > 10000:
            break
    est = branching_estimators(np.array(Z), family="fractional_linear")
    q_true = a / (1 - p)
    assert est.q_extinct == pytest.approx(q_true, abs=0.12)
    # at the true parameters the fixed-point solver recovers q = a/(1-p)
    from epiinfer.complete_mle import _GENERATING_FNS, extinction_probability

    assert extinction_probability(_GENERATING_FNS["fractional_linear"], (a, p)) == pytest.approx(
        q_true, abs=1e-9
    )


def test_branching_extinction_truncation():
    est = branching_estimators([1, 2, 0, 0, 0])
    # only generations up to the first zero contribute
    assert est.extinct
    assert est.m == pytest.approx((2 + 0) / (1 + 2))


def test_ar1_mle_values_and_limits():
    x = 2.0 * 0.8 ** np.arange(30)
    a_hat, g2 = ar1_mle(x)
    assert a_hat == pytest.approx(0.8, rel=1e-12)
    assert g2 == pytest.approx(0.0, abs=1e-25)
    with pytest.raises(ValueError):
        ar1_mle(np.zeros(10))

    xs = simulate_ar1(0.5, 1.0, 0.0, 10000, seed=80)
    a_hat, g2 = ar1_mle(xs)
    assert abs(a_hat - 0.5) <= 4 * np.sqrt((1 - 0.25) / 10000)
    assert abs(g2 - 1.0) <= 4 * np.sqrt(2.0 / 10000)


def test_ou_reparametrization():
    xs = simulate_ar1(np.exp(-0.7 * 0.5), 0.3, 1.0, 5000, seed=81)
    theta_hat, sigma2_hat = ou_from_ar1(xs, delta=0.5)
    a_hat, _ = ar1_mle(xs)
    assert theta_hat == pytest.approx(np.log(a_hat) / 0.5, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=2, max_size=30))
def test_bd_counts_sum_to_transitions(increments):
    # build a valid +-1/0 path and check B + D + R + N00 == n
    path = [1]
    rng = np.random.default_rng(sum(increments) + len(increments))
    for v in increments:
        step = (v % 3) - 1
        nxt = max(path[-1] + step, 0)
        if abs(nxt - path[-1]) > 1:
            nxt = path[-1]
        path.append(nxt)
    est = bd_chain_mle(path)
    d = est.diagnostics
    n00 = sum(1 for a, b in zip(path[:-1], path[1:]) if a == 0 and b == 0)
    assert d["B"] + d["D"] + d["R"] + n00 == d["n"]
