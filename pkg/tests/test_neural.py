import numpy as np
import pytest
from scipy import integrate

from mmgdispatch.neural import (AdamState, MlpParams, adam_update, backward, forward, init_mlp,
                                load_checkpoint, policy_backward, sample_policy, save_checkpoint)


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f()
            a[idx] = old - h
            fm = f()
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def assert_grads_close(analytic, numeric, rel=1e-4, floor=1e-7):
    for a, n in zip(analytic, numeric):
        err = np.abs(a - n)
        assert np.all(err <= rel * np.maximum(np.abs(a), np.abs(n)) + floor), err.max()


def test_zero_weights_give_bias():
    p = MlpParams((3, 2), [np.zeros((3, 2))], [np.array([0.5, -1.0])])
    assert np.array_equal(forward(p, [1.0, 2.0, 3.0]), [0.5, -1.0])


def test_identity_layer():
    p = MlpParams((3, 3), [np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -2.0, 7.0])
    assert np.array_equal(forward(p, x), x)


def test_hand_evaluated_2_2_1():
    W0 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b0 = np.array([0.1, 0.0])
    W1 = np.array([[1.5], [-0.5]])
    b1 = np.array([0.2])
    p = MlpParams((2, 2, 1), [W0, W1], [b0, b1])
    x = np.array([1.0, -0.5])
    # hidden pre-activations: 0.5 - 1.0 + 0.1 = -0.4 and -1.0 - 0.125 = -1.125
    h = np.tanh([-0.4, -1.125])
    expected = 1.5 * h[0] - 0.5 * h[1] + 0.2
    assert forward(p, x)[0] == pytest.approx(expected, abs=1e-15)


def test_shape_mismatch():
    p = init_mlp((3, 4, 2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(p, np.zeros(4))
    with pytest.raises(ValueError):
        MlpParams((3, 2), [np.zeros((2, 3))], [np.zeros(2)])


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp((4, 6, 5, 3), rng)
    x = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 3))
    grads, gx = backward(p, x, up)
    f = lambda: float(np.sum(forward(p, x) * up))
    assert_grads_close(grads, numeric_grad(f, p.arrays()))
    assert_grads_close([gx], numeric_grad(f, [x]))


def test_zero_upstream():
    p = init_mlp((3, 4, 2), np.random.default_rng(1))
    grads, gx = backward(p, np.ones((2, 3)), np.zeros((2, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(gx == 0)


def test_linear_layer_outer_product():
    rng = np.random.default_rng(2)
    p = MlpParams((3, 2), [rng.normal(size=(3, 2))], [rng.normal(size=2)])
    x, up = rng.normal(size=3), rng.normal(size=2)
    grads, _ = backward(p, x, up)
    assert np.allclose(grads[0], np.outer(x, up), atol=1e-15)
    assert np.allclose(grads[1], up, atol=1e-15)


def test_adam_first_step_is_signed_lr():
    p = MlpParams((2, 1), [np.zeros((2, 1))], [np.zeros(1)])
    st = AdamState.for_params(p, 0.01)
    g = [np.array([[0.3], [-2.0]]), np.array([1e-3])]
    adam_update(st, p, g)
    for new, grad in zip(p.arrays(), g):
        assert np.allclose(new, -0.01 * grad / (np.abs(grad) + 1e-8), rtol=1e-9, atol=0)
    assert st.step_count == 1


def test_adam_zero_gradient_keeps_params():
    p = init_mlp((2, 3, 1), np.random.default_rng(0))
    before = [a.copy() for a in p.arrays()]
    st = AdamState.for_params(p, 0.01)
    adam_update(st, p, [np.zeros_like(a) for a in p.arrays()])
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), before))


def test_adam_moves_against_constant_gradient():
    p = MlpParams((1, 1), [np.zeros((1, 1))], [np.zeros(1)])
    st = AdamState.for_params(p, 0.05)
    g = [np.array([[2.0]]), np.array([-0.5])]
    traj = []
    for _ in range(10):
        adam_update(st, p, g)
        traj.append((p.weights[0][0, 0], p.biases[0][0]))
    w, b = np.array(traj).T
    assert np.all(np.diff(w) < 0) and np.all(np.diff(b) > 0)


def test_adam_rejects_non_finite():
    p = init_mlp((1, 1), np.random.default_rng(0))
    st = AdamState.for_params(p, 0.01)
    with pytest.raises(FloatingPointError):
        adam_update(st, p, [np.array([[np.nan]]), np.zeros(1)])


def test_policy_zero_mean_tiny_std():
    actor = MlpParams((2, 4), [np.zeros((2, 4))], [np.array([0.0, 0.0, -20.0, -20.0])])
    s = sample_policy(actor, np.ones(2), np.array([0.7, -1.3]))
    assert np.allclose(s.action, 0.0, atol=1e-8)
    assert np.isfinite(s.log_prob)


def test_policy_actions_stay_inside_open_box():
    rng = np.random.default_rng(0)
    actor = init_mlp((3, 8, 4), rng)
    actor.biases[-1][:2] = 30.0
    s = sample_policy(actor, rng.normal(size=(50, 3)), rng.normal(size=(50, 2)))
    assert np.all(np.abs(s.action) <= 1.0) and np.all(np.isfinite(s.log_prob))


def log_density_1d(mean, log_std, a):
    actor = MlpParams((1, 2), [np.zeros((1, 2))], [np.array([mean, log_std])])
    u = np.arctanh(a)
    eps = (u - mean) / np.exp(log_std)
    return sample_policy(actor, np.zeros((len(a), 1)), eps[:, None]).log_prob


@pytest.mark.parametrize("mean,log_std", [(0.0, 0.0), (0.8, -1.0), (-1.5, 0.5), (0.3, -2.5)])
def test_squashed_density_integrates_to_one(mean, log_std):
    val, _ = integrate.quad(lambda a: float(np.exp(log_density_1d(mean, log_std, np.array([a]))[0])),
                            -1.0, 1.0, limit=400, epsabs=1e-10)
    assert val == pytest.approx(1.0, abs=1e-3)


def test_policy_deterministic_given_noise():
    actor = init_mlp((3, 8, 4), np.random.default_rng(3))
    obs, noise = np.ones(3), np.random.default_rng(4).normal(size=2)
    a, b = sample_policy(actor, obs, noise), sample_policy(actor, obs, noise)
    assert np.array_equal(a.action, b.action) and a.log_prob == b.log_prob


@pytest.mark.parametrize("seed", range(4))
def test_policy_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    actor = init_mlp((3, 5, 4), rng)
    obs, noise = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    da, dl = rng.normal(size=(4, 2)), rng.normal(size=4)

    def f():
        s = sample_policy(actor, obs, noise)
        return float(np.sum(da * s.action) + np.sum(dl * s.log_prob))

    grads = policy_backward(actor, sample_policy(actor, obs, noise), da, dl)
    assert_grads_close(grads, numeric_grad(f, actor.arrays()))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = init_mlp((3, 7, 2), rng)
    st = AdamState.for_params(p, 0.003)
    adam_update(st, p, [rng.normal(size=a.shape) for a in p.arrays()])
    save_checkpoint(tmp_path / "c.npz", p, st, {"role": "actor"})
    q, st2, meta = load_checkpoint(tmp_path / "c.npz")
    assert q.layer_sizes == p.layer_sizes and meta == {"role": "actor"}
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays(), q.arrays()))
    assert st2.step_count == 1 and st2.learning_rate == 0.003
    assert all(np.array_equal(a, b) for a, b in zip(st.first_moment + st.second_moment,
                                                    st2.first_moment + st2.second_moment))
