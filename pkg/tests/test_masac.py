import numpy as np
import pytest
from scipy import stats

from mmgdispatch.domain import generate_synthetic
from mmgdispatch.masac import (Batch, JointTransition, Layout, LocalPolicy, ReplayBuffer,
                               SacHyperparams, actor_loss_and_grads, actor_update, build_nets,
                               convergence_episode, critic_loss_and_grads, critic_target,
                               critic_update, evaluate, load_agents, moving_mean, read_reward_csv,
                               save_agents, soft_update, train, write_reward_csv)
from mmgdispatch.neural import MlpParams, forward, init_mlp
from mmgdispatch.tasks import MicrogridTask, QuadraticToyTask

from test_neural import assert_grads_close, numeric_grad

TOY_HP = SacHyperparams(gamma=0.0, a_l=3e-3, c_l=3e-3, batch_n=64, kappa=0.01,
                        buffer_capacity=1000, episodes=1500, hidden=(32, 32))


def toy_setup(hp=None, seed=0, batch_n=6):
    hp = hp or SacHyperparams(batch_n=batch_n, buffer_capacity=50, hidden=(8,))
    task = QuadraticToyTask()
    layout = Layout.from_task(task)
    nets = build_nets(layout, hp, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    B = batch_n
    batch = Batch(x=rng.normal(size=(B, 2)), a=rng.uniform(-1, 1, size=(B, 2)),
                  r=rng.normal(size=(B, 2)), x_next=rng.normal(size=(B, 2)),
                  done=(rng.random(B) < 0.3).astype(float), index=np.arange(B))
    return hp, layout, nets, batch


def transition(k, n=2):
    return JointTransition([np.full(3, k, float)] * n, [np.full(2, -k, float)] * n,
                           np.full(n, float(k)), [np.full(3, k + 1, float)] * n, k % 2 == 0)


# --- replay buffer ----------------------------------------------------------

def test_buffer_is_fifo():
    buf = ReplayBuffer(3, [3, 3], [2, 2])
    for k in range(5):
        buf.push(transition(k))
    assert len(buf) == 3
    kept = [int(tr.r[0]) for tr in buf.ordered()]
    assert kept == [2, 3, 4]
    tr = buf.ordered()[-1]
    assert np.array_equal(tr.x[1], np.full(3, 4.0)) and np.array_equal(tr.a[0], np.full(2, -4.0))
    assert tr.done


def test_buffer_sample_needs_enough_data():
    buf = ReplayBuffer(10, [3, 3], [2, 2])
    buf.push(transition(0))
    with pytest.raises(ValueError):
        buf.sample(2, np.random.default_rng(0))


def test_buffer_sampling_is_uniform():
    buf = ReplayBuffer(10, [3, 3], [2, 2])
    for k in range(13):
        buf.push(transition(k))
    rng = np.random.default_rng(1)
    idx = np.concatenate([buf.sample(10, rng).index for _ in range(2000)])
    counts = np.bincount(idx, minlength=10)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_transition_lengths_checked():
    with pytest.raises(ValueError):
        JointTransition([np.zeros(2)], [np.zeros(1), np.zeros(1)], np.zeros(1), [np.zeros(2)], False)


# --- critic -----------------------------------------------------------------

def test_target_with_zero_discount_is_reward():
    _, layout, nets, batch = toy_setup()
    hp = SacHyperparams(gamma=0.0, batch_n=6, buffer_capacity=50)
    w = critic_target(0, batch, nets, layout, hp, np.random.default_rng(0), reward_scale=0.5)
    assert np.array_equal(w, 0.5 * batch.r[:, 0])


def test_target_at_terminal_is_reward():
    hp, layout, nets, batch = toy_setup()
    batch.done[:] = 1.0
    w = critic_target(1, batch, nets, layout, hp, np.random.default_rng(0))
    assert np.allclose(w, batch.r[:, 1], atol=1e-15)


def test_target_hand_computed():
    hp, layout, nets, batch = toy_setup()
    hp = SacHyperparams(gamma=0.9, kappa=0.2, batch_n=6, buffer_capacity=50)
    mu, ls, c = 0.3, -0.7, 2.5
    for n in nets:
        n.actor.weights[-1][:] = 0.0
        n.actor.biases[-1][:] = [mu, ls]
        n.target_critic.weights[-1][:] = 0.0
        n.target_critic.biases[-1][:] = c
    w = critic_target(0, batch, nets, layout, hp, np.random.default_rng(9))
    eps = np.random.default_rng(9).standard_normal((6, 1))[:, 0]   # agent 0 draws first
    u = mu + np.exp(ls) * eps
    logp = stats.norm.logpdf(u, mu, np.exp(ls)) - np.log(1 - np.tanh(u) ** 2)
    expected = batch.r[:, 0] + 0.9 * (1 - batch.done) * (c - 0.2 * logp)
    assert np.allclose(w, expected, rtol=0, atol=1e-9)


def test_critic_update_with_exact_critic_is_zero_loss():
    hp, layout, nets, batch = toy_setup()
    nets[0].critic.weights[-1][:] = 0.0
    nets[0].critic.biases[-1][:] = 1.75
    before = [a.copy() for a in nets[0].critic.arrays()]
    loss = critic_update(0, batch, nets, layout, hp, np.random.default_rng(0), w=np.full(6, 1.75))
    assert loss == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(nets[0].critic.arrays(), before))


def test_critic_loss_decreases_on_fixed_targets():
    hp, layout, nets, batch = toy_setup(SacHyperparams(c_l=1e-2, batch_n=6, buffer_capacity=50,
                                                       hidden=(8,)))
    w = np.random.default_rng(3).normal(size=6)
    losses = [critic_update(0, batch, nets, layout, hp, None, w=w) for _ in range(300)]
    assert losses[-1] < 0.1 * losses[0]
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


@pytest.mark.parametrize("seed", range(3))
def test_critic_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    critic = init_mlp((6, 5, 1), rng)
    z, w = rng.normal(size=(7, 6)), rng.normal(size=7)
    _, grads = critic_loss_and_grads(critic, z, w)
    f = lambda: critic_loss_and_grads(critic, z, w)[0]
    assert_grads_close(grads, numeric_grad(f, critic.arrays()))


# --- actor ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_actor_gradient_matches_finite_differences(seed):
    _, layout, nets, batch = toy_setup(seed=seed)
    noise = np.random.default_rng(seed).normal(size=(6, 1))
    _, grads = actor_loss_and_grads(1, batch, nets, layout, 0.3, noise)
    f = lambda: actor_loss_and_grads(1, batch, nets, layout, 0.3, noise)[0]
    assert_grads_close(grads, numeric_grad(f, nets[1].actor.arrays()))


def bump_critic(target_unit: float, col: int, joint_in: int, sharpness: float = 2.0) -> MlpParams:
    """Q(a) = tanh(s(a-a*)+1) - tanh(s(a-a*)-1): single peak at a*."""
    W0 = np.zeros((joint_in, 2))
    W0[col] = sharpness
    b0 = np.array([-sharpness * target_unit + 1.0, -sharpness * target_unit - 1.0])
    return MlpParams((joint_in, 2, 1), [W0, np.array([[1.0], [-1.0]])], [b0, np.zeros(1)])


def test_actor_climbs_to_critic_argmax():
    hp = SacHyperparams(a_l=3e-3, kappa=0.0, batch_n=32, buffer_capacity=50, hidden=(8,))
    _, layout, nets, batch = toy_setup(hp, batch_n=32)
    nets[0].critic = bump_critic(0.3, col=2, joint_in=4)
    rng = np.random.default_rng(0)
    for _ in range(2000):
        actor_update(0, batch, nets, layout, hp, rng)
    means = np.tanh(forward(nets[0].actor, batch.x[:, :1])[:, 0])
    assert np.all(np.abs(means - 0.3) < 0.05)


def test_large_temperature_widens_policy():
    hp = SacHyperparams(a_l=3e-3, kappa=1.0, batch_n=16, buffer_capacity=50, hidden=(8,))
    _, layout, nets, batch = toy_setup(hp, batch_n=16)
    for n in nets:
        n.critic.weights[-1][:] = 0.0
        n.actor.biases[-1][1] = -2.0   # start narrow
    x0 = batch.x[:, :1]
    before = forward(nets[0].actor, x0)[:, 1].mean()
    rng = np.random.default_rng(0)
    for _ in range(200):
        actor_update(0, batch, nets, layout, hp, rng)
    assert forward(nets[0].actor, x0)[:, 1].mean() > before + 0.5


def test_soft_update_contracts():
    rng = np.random.default_rng(0)
    tgt, cur = init_mlp((3, 4, 1), rng), init_mlp((3, 4, 1), rng)
    gap = [t - c for t, c in zip(tgt.arrays(), cur.arrays())]
    soft_update(tgt, cur, 0.2)
    for g, t, c in zip(gap, tgt.arrays(), cur.arrays()):
        assert np.allclose(t - c, 0.8 * g, rtol=1e-12, atol=1e-15)
    soft_update(tgt, cur, 1.0)
    assert all(np.array_equal(t, c) for t, c in zip(tgt.arrays(), cur.arrays()))


def test_hyperparam_validation():
    with pytest.raises(ValueError):
        SacHyperparams(gamma=1.0)
    with pytest.raises(ValueError):
        SacHyperparams(batch_n=20000)
    hp = SacHyperparams(hidden=[16, 16])
    assert SacHyperparams.from_dict(hp.to_dict()) == hp


# --- training loop ----------------------------------------------------------

def test_toy_training_reaches_optimum():
    task = QuadraticToyTask()
    rep = train(task, TOY_HP, seed=0)
    for i, n in enumerate(rep.nets):
        a = task.scale_action(i, LocalPolicy(n.actor)(task.reset()[i]))[0]
        assert abs(a - 0.5) < 0.05


def test_training_is_deterministic():
    hp = SacHyperparams(batch_n=32, buffer_capacity=200, episodes=4, hidden=(8,))
    sc = generate_synthetic(1, 2, 12)
    a, b = train(sc, hp, seed=5), train(sc, hp, seed=5)
    assert np.array_equal(a.episode_rewards, b.episode_rewards)
    assert all(np.array_equal(x, y) for x, y in zip(a.nets[1].actor.arrays(),
                                                     b.nets[1].actor.arrays()))
    c = train(sc, hp, seed=6)
    assert not np.array_equal(a.episode_rewards, c.episode_rewards)


def test_centralised_critics_and_local_actors():
    sc = generate_synthetic(2, 3, 6)
    task = MicrogridTask(sc)
    rep = train(task, SacHyperparams(batch_n=8, buffer_capacity=50, episodes=2, hidden=(8,)), 0)
    joint = sum(task.obs_dims) + sum(task.act_dims)
    for i, n in enumerate(rep.nets):
        assert n.actor.layer_sizes[0] == task.obs_dims[i]
        assert n.actor.layer_sizes[-1] == 2 * task.act_dims[i]
        assert n.critic.layer_sizes[0] == joint and n.critic.layer_sizes[-1] == 1
    # execution depends on the local observation only
    pol = LocalPolicy(rep.nets[0].actor)
    obs = task.reset()
    assert np.array_equal(pol(obs[0]), pol(obs[0].copy()))
    ev = evaluate(rep.nets, sc)
    assert ev.total_cost == pytest.approx(ev.objective, abs=1e-9)
    assert len(ev.trace) == 3 * 6


def test_reward_csv_and_checkpoints_round_trip(tmp_path):
    sc = generate_synthetic(1, 2, 6)
    rep = train(sc, SacHyperparams(batch_n=8, buffer_capacity=50, episodes=3, hidden=(8,)), 0)
    write_reward_csv(rep, tmp_path / "r.csv")
    d = read_reward_csv(tmp_path / "r.csv")
    assert np.array_equal(d["total_reward"], rep.total_rewards)
    assert np.array_equal(d["reward_mg2"], rep.episode_rewards[:, 1])
    assert np.array_equal(d["episode"], [1, 2, 3])
    save_agents(rep.nets, tmp_path / "ck")
    back = load_agents(tmp_path / "ck")
    for a, b in zip(rep.nets, back):
        for pa, pb in ((a.actor, b.actor), (a.critic, b.critic), (a.target_critic, b.target_critic)):
            assert all(np.array_equal(x, y) for x, y in zip(pa.arrays(), pb.arrays()))
    assert evaluate(back, sc).total_cost == evaluate(rep.nets, sc).total_cost
    with pytest.raises(FileNotFoundError):
        load_agents(tmp_path)


def test_moving_mean_and_convergence():
    v = np.arange(1.0, 7.0)
    assert np.allclose(moving_mean(v, 3), [1, 1.5, 2, 3, 4, 5])
    totals = np.concatenate([np.linspace(-100, -10, 100), np.full(200, -10.0)])
    ep = convergence_episode(totals, window=10, tol=0.01)
    assert 100 <= ep <= 110
    assert convergence_episode(np.full(20, -3.0), window=5) == 1
