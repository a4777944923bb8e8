import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nfprecond import autodiff as ad
from nfprecond import optim
from nfprecond.errors import ConfigError, NumericFailure
from nfprecond.optim import OptimizerConfig, init_state

from conftest import quadratic, small_net


def cfg(algo, **kw):
    return OptimizerConfig(algorithm=algo, **kw)


def run(algo, fn, theta, steps, seed=0, layout=None, **kw):
    c = cfg(algo, **kw)
    s = init_state(c, theta.size)
    traj = [theta]
    for t in range(steps):
        g = ad.grad(fn, theta)
        theta = optim.step(c, s, theta, g, lambda v, th=theta: ad.hvp(fn, th, v),
                           np.random.default_rng([seed, t]), layout)
        traj.append(theta)
    return traj, s


# -- config --------------------------------------------------------------------

def test_config_validation():
    for bad in ({"eta": 0.0}, {"beta1": 0.999, "beta2": 0.9}, {"refresh_every": 0},
                {"damping": -1.0}, {"momentum": 1.0}, {"algorithm": "lbfgs"}):
        with pytest.raises(ConfigError):
            OptimizerConfig(**bad)


def test_default_damping_per_algorithm():
    assert cfg("adam").lam == 1e-8
    assert cfg("esgd").lam == 1e-4
    assert cfg("esgd", damping=0.5).lam == 0.5


# -- first order ---------------------------------------------------------------

def test_sgd_examples():
    s = init_state(cfg("sgd", eta=0.1), 2)
    np.testing.assert_allclose(optim.sgd_step(s, cfg("sgd", eta=0.1), np.ones(2), np.array([1.0, -1.0])), [0.9, 1.1])
    assert optim.sgd_step(s, cfg("sgd"), np.ones(2), np.zeros(2)).tolist() == [1.0, 1.0]
    traj, _ = run("sgd", lambda th: 0.5 * (th * th).sum(), np.array([1.0]), 2, eta=0.5)
    assert [float(t[0]) for t in traj] == [1.0, 0.5, 0.25]


def test_non_finite_gradient_is_rejected():
    with pytest.raises(NumericFailure):
        optim.sgd_step(init_state(cfg("sgd"), 1), cfg("sgd"), np.ones(1), np.array([np.nan]))


def test_precond_sgd_examples():
    c = cfg("precond_sgd", eta=1.0, damping=0.0)
    out = optim.precond_sgd_step(init_state(c, 2), c, np.zeros(2), np.array([2.0, 2.0]), np.array([4.0, 4.0]))
    assert out.tolist() == [-1.0, -1.0]
    with pytest.raises(ValueError):
        optim.precond_sgd_step(init_state(c, 1), c, np.zeros(1), np.ones(1), -np.ones(1))


def test_precond_sgd_with_identity_is_sgd_bit_exact(rng):
    _, theta0, fn = small_net("sine", omega0=3.0)
    a, b = theta0.copy(), theta0.copy()
    cs, cp = cfg("sgd", eta=0.05), cfg("precond_sgd", eta=0.05, damping=0.0)
    ss, sp = init_state(cs, a.size), init_state(cp, a.size)
    ones = np.ones(a.size)
    for _ in range(100):
        a = optim.sgd_step(ss, cs, a, ad.grad(fn, a))
        b = optim.precond_sgd_step(sp, cp, b, ad.grad(fn, b), ones)
        assert np.array_equal(a, b)


def test_exact_equilibration_equalizes_contraction():
    # L = 1/2 (x1^2 + 100 x2^2); row norms (1, 100) enter squared as D
    fn = quadratic(np.diag([1.0, 100.0]))
    c = cfg("precond_sgd", eta=0.3, damping=0.0)
    s = init_state(c, 2)
    theta = np.array([1.0, 1.0])
    D = np.array([1.0, 100.0]) ** 2
    for _ in range(5):
        new = optim.precond_sgd_step(s, c, theta, ad.grad(fn, theta), D)
        ratio = new / theta
        assert abs(ratio[0] - ratio[1]) < 1e-12
        theta = new


def test_adam_first_step_is_sign_like(rng):
    g = rng.standard_normal(6)
    g[2] = 0.0
    c = cfg("adam", eta=0.01, damping=0.0 + 1e-300)
    out = optim.adam_step(init_state(c, 6), c, np.zeros(6), g)
    np.testing.assert_allclose(np.abs(out[g != 0]), 0.01, rtol=1e-12)
    assert out[2] == 0.0


def test_adam_with_zero_gradient_never_moves():
    c = cfg("adam")
    s = init_state(c, 3)
    theta = np.ones(3)
    for _ in range(10):
        theta = optim.adam_step(s, c, theta, np.zeros(3))
    assert theta.tolist() == [1.0, 1.0, 1.0]


def test_adam_is_nearly_invariant_to_loss_scale():
    fn = quadratic(np.diag([1.0, 100.0]))
    big = lambda th: 1e4 * fn(th)
    a, _ = run("adam", fn, np.ones(2), 50, eta=1e-2, damping=1e-12)
    b, _ = run("adam", big, np.ones(2), 50, eta=1e-2, damping=1e-12)
    np.testing.assert_allclose(a[-1], b[-1], rtol=1e-9)


# -- curvature -----------------------------------------------------------------

def test_esgd_accumulator_on_diagonal_quadratic():
    fn = quadratic(np.diag([1.0, 100.0]))
    traj, s = run("esgd", fn, np.array([1.0, 1.0]), 1, eta=0.1, damping=0.0)
    pcs = s.precond
    np.testing.assert_allclose(pcs.acc / pcs.bias_correction, [1.0, 1e4], rtol=1e-12)
    np.testing.assert_allclose(pcs.d, [1.0, 100.0], rtol=1e-12)
    # equal relative progress along both coordinates
    ratio = traj[1] / traj[0]
    assert abs(ratio[0] - ratio[1]) < 1e-12


def test_esgd_refreshes_only_every_n_steps():
    calls = []
    fn = quadratic(np.diag([2.0, 3.0]))
    c = cfg("esgd", eta=0.01, refresh_every=4)
    s = init_state(c, 2)
    theta = np.ones(2)
    for t in range(9):
        def hvp(v, th=theta):
            calls.append(t)
            return ad.hvp(fn, th, v)
        theta = optim.step(c, s, theta, ad.grad(fn, theta), hvp, np.random.default_rng(t))
    assert calls == [0, 4, 8]
    assert s.precond.n_samples == 3


def test_esgd_between_refreshes_equals_frozen_apply_diag():
    fn = quadratic(np.array([[3.0, 1.0], [1.0, 2.0]]))
    c = cfg("esgd", eta=0.05, refresh_every=10)
    s = init_state(c, 2)
    theta = np.array([0.5, -1.0])
    theta = optim.step(c, s, theta, ad.grad(fn, theta), lambda v: ad.hvp(fn, theta, v), np.random.default_rng(0))
    d = s.precond.d
    g = ad.grad(fn, theta)
    expect = theta - 0.05 * g / (d + c.lam)
    got = optim.step(c, s, theta, g, None, None)
    np.testing.assert_allclose(got, expect, rtol=1e-15)


def test_esgd_warmup_and_momentum_options():
    fn = quadratic(np.diag([1.0, 4.0]))
    calls = []
    c = cfg("esgd", eta=0.01, refresh_every=100, refresh_warmup=3, momentum=0.9)
    s = init_state(c, 2)
    theta = np.ones(2)
    for t in range(6):
        def hvp(v, th=theta):
            calls.append(t)
            return ad.hvp(fn, th, v)
        theta = optim.step(c, s, theta, ad.grad(fn, theta), hvp, np.random.default_rng(t))
    assert calls == [0, 1, 2]
    assert np.all(s.m != 0)


def test_esgd_max_accumulator():
    H = np.diag([2.0, 5.0])
    fn = quadratic(H)
    _, s = run("esgd_max", fn, np.ones(2), 301, refresh_every=100, beta1=0.5, beta2=0.9)
    np.testing.assert_array_equal(s.u, [4.0, 25.0])


def test_esgd_max_memory_is_monotone(rng):
    c = cfg("esgd_max", beta1=0.25, beta2=0.5)
    s = init_state(c, 3)
    history = []
    for k in range(6):
        hv = rng.standard_normal(3) * (3.0 if k == 1 else 1.0)
        history.append(hv * hv)
        optim.esgd_max_apply(s, c, np.zeros(3), np.zeros(3), [(np.ones(3), hv)])
        for j, h in enumerate(history):
            assert np.all(s.u >= 0.5 ** (k - j) * h - 1e-15)


def test_esgd_max_matches_esgd_direction_for_constant_curvature():
    H = np.diag([1.0, 9.0, 0.25])
    fn = quadratic(H)
    a, _ = run("esgd", fn, np.ones(3), 5, refresh_every=1, damping=0.0, eta=0.1)
    b, _ = run("esgd_max", fn, np.ones(3), 5, refresh_every=1, damping=0.0, eta=0.1)
    np.testing.assert_allclose(a[-1], b[-1], rtol=1e-12)


def test_adahessian_variants_coincide_on_diagonal_hessian():
    fn = quadratic(np.diag([1.0, -3.0, 7.0]))
    a, _ = run("adahessian_e", fn, np.ones(3), 10, eta=0.01)
    b, _ = run("adahessian_j", fn, np.ones(3), 10, eta=0.01)
    np.testing.assert_array_equal(a[-1], b[-1])


def test_adahessian_inputs_for_two_by_two_example():
    H = np.array([[1.0, 2.0], [3.0, 4.0]])
    for v, expect in (((1.0, 1.0), [9.0, 49.0]), ((1.0, -1.0), [1.0, 1.0])):
        v = np.array(v)
        assert optim.adahessian_diag(v, H @ v, "E").tolist() == expect
        assert optim.adahessian_diag(v, H @ v, "J").tolist() == expect


def test_adahessian_e_and_j_differ_with_several_probes():
    H = np.array([[1.0, -2.0], [3.0, 4.0]])
    pairs = [(v, H @ v) for v in (np.array([1.0, 1.0]), np.array([1.0, -1.0]))]
    # Hutchinson average recovers diag(H) exactly for these two probes
    assert optim.adahessian_input(pairs, "J").tolist() == [1.0, 16.0]
    assert optim.adahessian_input(pairs, "E").tolist() == [5.0, 25.0]


def test_adahessian_first_step_bounded_by_damping(rng):
    fn = quadratic(np.diag([1e-9, 1e-9]))
    c = cfg("adahessian_e", eta=0.1, damping=1e-2)
    s = init_state(c, 2)
    theta = np.array([1.0, -2.0])
    g = ad.grad(fn, theta)
    new = optim.step(c, s, theta, g, lambda v: ad.hvp(fn, theta, v), rng)
    assert np.all(np.abs(new - theta) <= 0.1 / 1e-2 * np.abs(g) + 1e-18)


def test_adahessian_with_gn_input_reduces_to_adam(rng):
    _, theta0, fn = small_net("gaussian", sigma=0.5)
    ca, ch = cfg("adam", eta=1e-2), cfg("adahessian_e", eta=1e-2, damping=1e-8)
    sa, sh = init_state(ca, theta0.size), init_state(ch, theta0.size)
    a, b = theta0.copy(), theta0.copy()
    for _ in range(50):
        a = optim.adam_step(sa, ca, a, ad.grad(fn, a))
        b = optim.adahessian_step(sh, ch, b, ad.grad(fn, b), None, None, diag_fn=lambda g, _: g * g)
        assert np.max(np.abs(a - b)) <= 1e-12


# -- shampoo -------------------------------------------------------------------

def test_shampoo_scalar_collapse():
    c = cfg("shampoo", eta=1.0, shampoo_eps=1e-12)
    s = init_state(c, 1)
    out = optim.shampoo_step(s, c, np.zeros(1), np.array([0.3]))
    # (g^2)^(-1/4) g (g^2)^(-1/4) = sign(g)
    np.testing.assert_allclose(out, [-1.0], rtol=1e-9)


def test_shampoo_identity_when_factors_vanish(rng):
    G = rng.standard_normal((3, 2))
    out = optim.shampoo_precondition(G, np.zeros((3, 3)), np.zeros((2, 2)), eps=1.0)
    np.testing.assert_allclose(out, G, rtol=1e-14)


def test_matrix_inverse_root_on_eigenvectors(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    lam = np.array([0.5, 1.0, 2.0, 4.0, 9.0])
    A = (Q * lam) @ Q.T
    R = optim.matrix_inverse_root(A, 0.25, 1e-300)
    for i in range(5):
        np.testing.assert_allclose(R @ Q[:, i], lam[i] ** -0.25 * Q[:, i], rtol=1e-10, atol=1e-12)


def test_matrix_inverse_root_rejects_non_finite():
    with pytest.raises(NumericFailure):
        optim.matrix_inverse_root(np.array([[np.inf]]), 0.25, 1e-4)


def test_shampoo_uses_layer_blocks():
    spec, theta, fn = small_net("gaussian", sigma=0.5, hidden=(4, 3))
    traj, s = run("shampoo", fn, theta, 3, layout=spec.layout(), eta=1e-2)
    assert len(s.shampoo) == len(spec.layout())
    W1 = spec.layout()[0]
    assert s.shampoo[0].left.shape == (W1.shape[0],) * 2
    assert s.shampoo[0].right.shape == (W1.shape[1],) * 2
    assert ad.value(fn, traj[-1]) < ad.value(fn, traj[0])


def test_shampoo_refresh_interval():
    c = cfg("shampoo", shampoo_update_every=3)
    s = init_state(c, 2)
    theta = np.zeros(2)
    roots = []
    for t in range(5):
        theta = optim.shampoo_step(s, c, theta, np.array([1.0 + t, 2.0]))
        roots.append(s.shampoo[0].left_root.copy())
    assert np.array_equal(roots[0], roots[1]) and np.array_equal(roots[1], roots[2])
    assert not np.array_equal(roots[2], roots[3])


# -- general properties --------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(algo=st.sampled_from(optim.ALGORITHMS), seed=st.integers(0, 1000))
def test_steps_are_finite_and_deterministic(algo, seed):
    spec, theta, fn = small_net("sine", omega0=3.0, seed=seed % 5)
    a, _ = run(algo, fn, theta, 4, seed=seed, layout=spec.layout(), eta=1e-3)
    b, _ = run(algo, fn, theta, 4, seed=seed, layout=spec.layout(), eta=1e-3)
    assert all(np.isfinite(x).all() for x in a)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_state_arrays_restore_round_trip():
    spec, theta, fn = small_net("gaussian", sigma=0.5)
    for algo in ("esgd", "shampoo", "adam", "esgd_max"):
        c = cfg(algo, eta=1e-3)
        _, s = run(algo, fn, theta, 3, layout=spec.layout(), eta=1e-3)
        fresh = init_state(c, theta.size)
        fresh.restore(s.arrays(), s.scalars())
        assert fresh.scalars() == s.scalars()
        for k, v in s.arrays().items():
            np.testing.assert_array_equal(fresh.arrays()[k], v)


def test_probe_requirements():
    assert optim.needs_probes(cfg("adahessian_j"), init_state(cfg("adahessian_j"), 1))
    s = init_state(cfg("esgd"), 1)
    assert optim.needs_probes(cfg("esgd"), s)
    s.t = 1
    assert not optim.needs_probes(cfg("esgd"), s)
    assert not optim.needs_probes(cfg("adam"), init_state(cfg("adam"), 1))
    probes = optim.draw_probes(cfg("adahessian_e", probes=3), init_state(cfg("adahessian_e"), 5), np.random.default_rng(0))
    assert len(probes) == 3 and all(set(np.unique(p)) <= {-1.0, 1.0} for p in probes)
