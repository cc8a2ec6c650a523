import io
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from dpsgd import accountant as A

import oracles

# regression values, frozen from a run checked against the quadrature oracle
GOLDEN = [
    ((0.5, 0.01, 10000, 1e-5), 47.415220508526026, 49.1947164910971),
    ((1.5, 0.01, 10000, 1e-5), 3.459385045537097, 3.9436063705148476),
    ((3.5, 0.01, 10000, 1e-5), 1.2051390822998869, 1.452091861529499),
    ((0.56, 1024 / 1281167, 12510, 1e-6), 4.694781518180452, 5.444561711005529),
    ((1.0, 0.05, 1000, 1e-5), 11.979547186712129, 12.983555019078413),
]


@pytest.mark.parametrize("args,improved,classic", GOLDEN)
def test_golden_values(args, improved, classic):
    assert A.compute_epsilon(*args) == pytest.approx(improved, rel=1e-9)
    assert A.compute_epsilon(*args, conversion="classic") == pytest.approx(classic, rel=1e-9)


def test_full_batch_closed_form():
    assert A.rdp_step(1.0, 1.0, [2])[0] == 1.0
    np.testing.assert_allclose(A.rdp_step(1.0, 2.0, [3, 10.5]), [3 / 8, 10.5 / 8])


@pytest.mark.parametrize("alpha", [32, 2, 5, 1.5, 2.5, 7.3, 100])
def test_rdp_matches_quadrature(alpha):
    got = A.rdp_step(0.01, 1.5, [alpha])[0]
    assert got == pytest.approx(oracles.subsampled_gaussian_rdp(0.01, 1.5, alpha), rel=1e-6)


@pytest.mark.parametrize("q,sigma,alpha", [(0.1, 0.8, 3.25), (0.001, 0.5, 12.0), (0.05, 2.0, 1.1), (0.3, 5.0, 40),
                                           (0.1875, 1.0, 1.25), (0.125, 1.5, 1.25), (0.5, 1.0, 1.1),
                                           (0.9, 1.0, 1.1)])
def test_rdp_matches_quadrature_elsewhere(q, sigma, alpha):
    got = A.rdp_step(q, sigma, [alpha])[0]
    assert got == pytest.approx(oracles.subsampled_gaussian_rdp(q, sigma, alpha), rel=1e-6)


def test_small_q_limit():
    vals = [A.rdp_step(q, 1.0, [2, 8, 2.5]) for q in (1e-2, 1e-4, 1e-6)]
    assert np.all(vals[0] > vals[1]) and np.all(vals[1] > vals[2])
    assert np.all(vals[2] < 1e-9)


def test_rdp_errors_and_sentinels():
    with pytest.raises(ValueError):
        A.rdp_step(0.0, 1.0)
    with pytest.raises(ValueError):
        A.rdp_step(1.5, 1.0)
    with pytest.raises(ValueError):
        A.rdp_step(0.1, 1.0, [1.0])
    assert np.all(np.isinf(A.rdp_step(0.1, 0.0, [2, 3])))


def test_steps_zero_and_sigma_zero():
    assert A.compute_epsilon(1.0, 0.01, 0, 1e-5) == 0.0
    assert A.compute_epsilon(0.0, 0.01, 10, 1e-5) == math.inf
    assert A.compute_epsilon(0.0, 0.01, 0, 1e-5) == 0.0
    with pytest.raises(ValueError):
        A.compute_epsilon(1.0, 0.01, 10, 0.0)
    with pytest.raises(ValueError):
        A.compute_epsilon(1.0, 0.01, -1, 1e-5)


def test_rdp_additivity():
    one = A.rdp_step(0.02, 1.1)
    np.testing.assert_array_equal(A.compute_rdp(0.02, 1.1, 500), one * 500)
    st_ = A.AccountantState(0.02, 1.1)
    for _ in range(5):
        st_.compose(100)
    np.testing.assert_array_equal(st_.rdp, one * 500)
    assert st_.spent(1e-5)[0] == A.compute_epsilon(1.1, 0.02, 500, 1e-5)


def test_q1_single_step_matches_scan():
    for sigma in (0.5, 1.0, 3.0, 10.0):
        got = A.compute_epsilon(sigma, 1.0, 1, 1e-5, conversion="classic")
        assert abs(got - oracles.q1_epsilon_scan(sigma, 1e-5, A.DEFAULT_ORDERS)) < 1e-10


def test_tiny_sigma_is_finite():
    eps = A.compute_epsilon(0.028, 1024 / 1281167, 12510, 1e-6)
    assert math.isfinite(eps) and 1e6 < eps < 1e8
    tinier = A.compute_epsilon(0.0028, 1024 / 1281167, 12510, 1e-6)
    assert math.isfinite(tinier) and tinier > eps


def test_conversion_choice():
    args = (1.5, 0.01, 10000, 1e-5)
    assert A.compute_epsilon(*args) < A.compute_epsilon(*args, conversion="classic")
    with pytest.raises(ValueError):
        A.compute_epsilon(*args, conversion="tight")


def test_optimal_order_reported():
    eps, order = A.compute_epsilon_and_order(1.5, 0.01, 10000, 1e-5)
    assert order in A.DEFAULT_ORDERS
    rdp = A.compute_rdp(0.01, 1.5, 10000)
    assert eps == A.get_privacy_spent(A.DEFAULT_ORDERS, rdp, 1e-5)[0]


configs = st.tuples(st.floats(0.3, 5.0), st.floats(1e-4, 0.2), st.integers(1, 5000), st.floats(1e-9, 1e-2))


@given(configs, st.floats(1.01, 3.0))
def test_epsilon_monotone_in_sigma_steps_q_delta(cfg, factor):
    sigma, q, steps, delta = cfg
    e = A.compute_epsilon(sigma, q, steps, delta)
    assert A.compute_epsilon(sigma * factor, q, steps, delta) <= e + 1e-12
    assert A.compute_epsilon(sigma, q, int(steps * factor) + 1, delta) >= e - 1e-12
    assert A.compute_epsilon(sigma, min(1.0, q * factor), steps, delta) >= e - 1e-12
    assert A.compute_epsilon(sigma, q, steps, min(0.5, delta * factor)) <= e + 1e-12


@given(st.floats(0.3, 5.0), st.floats(1e-4, 0.2), st.floats(1.01, 3.0))
def test_rdp_monotone_in_sigma(sigma, q, factor):
    assert np.all(A.rdp_step(q, sigma * factor) <= A.rdp_step(q, sigma) + 1e-15)


def test_find_noise_multiplier_examples():
    s = A.find_noise_multiplier(3.45, 0.01, 10000, 1e-5)
    assert s == pytest.approx(1.5, rel=0.1)
    assert abs(A.compute_epsilon(s, 0.01, 10000, 1e-5) - 3.45) / 3.45 < 1e-4
    assert A.find_noise_multiplier(3.0, 0.01, 10000, 1e-5) == pytest.approx(1.6618476003947675, rel=1e-3)


@given(st.floats(0.2, 50.0), st.floats(1e-3, 0.1), st.integers(10, 5000))
def test_find_noise_multiplier_round_trip(target, q, steps):
    s = A.find_noise_multiplier(target, q, steps, 1e-5)
    assert abs(A.compute_epsilon(s, q, steps, 1e-5) - target) / target < 1e-4


def test_find_noise_multiplier_monotone():
    targets = [0.5, 1, 2, 4, 8]
    sigmas = [A.find_noise_multiplier(t, 0.01, 2000, 1e-5) for t in targets]
    assert all(a > b for a, b in zip(sigmas, sigmas[1:]))
    by_steps = [A.find_noise_multiplier(2.0, 0.01, s, 1e-5) for s in (100, 1000, 10000)]
    assert all(a < b for a, b in zip(by_steps, by_steps[1:]))


def test_find_noise_multiplier_errors():
    with pytest.raises(ValueError):
        A.find_noise_multiplier(0.0, 0.01, 100, 1e-5)
    with pytest.raises(A.PrivacyTargetError):
        A.find_noise_multiplier(1.0, 0.01, 0, 1e-5)
    with pytest.raises(A.PrivacyTargetError):
        A.find_noise_multiplier(1e-30, 1.0, 10 ** 6, 1e-5, max_doublings=5)


def test_epsilon_curve():
    deltas = list(np.logspace(-9, -3, 13))
    rows = A.epsilon_curve(1.5, 0.01, 10000, deltas)
    eps = [e for _, e in rows]
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    six = A.epsilon_curve(1.5, 0.01, 10000, [1e-6])[0][1]
    assert six == A.compute_epsilon(1.5, 0.01, 10000, 1e-6)
    with pytest.raises(ValueError):
        A.epsilon_curve(1.5, 0.01, 100, [1e-3, 1e-5])
    buf = io.StringIO()
    A.write_epsilon_curve(buf, rows)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "delta,epsilon" and len(lines) == 14


def test_batch_scaling_curve():
    grid = [1024 * 4 ** i for i in range(6)]
    rows = A.batch_scaling_curve(0.001 * math.sqrt(8), 1024, 1281167, 12510, 1e-6, grid)
    eps = [e for _, e in rows]
    assert all(a > b for a, b in zip(eps, eps[1:]))
    base = A.batch_scaling_curve(1.0, 500, 50000, 1000, 1e-5, [500])[0][1]
    assert base == A.compute_epsilon(1.0, 0.01, 1000, 1e-5)
    with pytest.raises(ValueError):
        A.batch_scaling_curve(1.0, 500, 50000, 1000, 1e-5, [60000])
    buf = io.StringIO()
    A.write_batch_curve(buf, rows)
    assert buf.getvalue().splitlines()[:2] == ["batch_size,epsilon", f"1024,{eps[0]!r}"]


def test_batch_table_epoch_coupling():
    # batch grows 4x per column; steps fixed, so epochs grow with it
    n, steps = 1281167, 12510
    eps = [A.compute_epsilon(0.001 * math.sqrt(8) * b / 1024, b / n, steps, 1e-6) for b in (1024, 4096, 16384, 65536)]
    assert all(a > b for a, b in zip(eps, eps[1:]))


def test_privacy_params():
    assert A.PrivacyParams(math.inf, 1e-5).epsilon == math.inf
    with pytest.raises(ValueError):
        A.PrivacyParams(1.0, 1.0)
    with pytest.raises(ValueError):
        A.PrivacyParams(-1.0, 1e-5)


@given(st.floats(0.3, 3.0), st.floats(1e-3, 0.2), st.floats(1.05, 60.0))
def test_fractional_between_integers_is_consistent(sigma, q, alpha):
    assume(not float(alpha).is_integer())
    lo, hi = math.floor(alpha), math.ceil(alpha)
    vals = A.rdp_step(q, sigma, [max(lo, 1.01), alpha, hi])
    # RDP (times alpha - 1) is convex in alpha, so it stays under the chord
    a0 = max(lo, 1.01)
    c = [(a - 1) * v for a, v in zip((a0, alpha, hi), vals)]
    t = (alpha - a0) / (hi - a0)
    assert c[1] <= (1 - t) * c[0] + t * c[2] + 1e-12 * max(1.0, abs(c[2]))
