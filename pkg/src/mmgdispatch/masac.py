"""Multi-agent soft actor-critic with centralised critics and local actors.

Each agent owns an actor that sees only its own observation and a critic
(plus a slowly tracking target copy) that scores the joint observation and
joint action of all agents. Training follows the nested episode/step/agent
loop; execution uses the actors alone.

Randomness: the run seed feeds ``numpy.random.SeedSequence(seed).spawn(4)``;
the four child streams drive network initialisation, behaviour noise
(warm-up and policy sampling), replay sampling, and the noise of the
reparameterised samples inside the updates, in that order.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .domain import Scenario
from .env import objective_from_trace, trace_rows
from .neural import (AdamState, MlpParams, adam_update, backward, forward, forward_cached,
                     init_mlp, load_checkpoint, policy_backward, sample_policy, save_checkpoint)
from .tasks import MicrogridTask, Task


class TrainingDiverged(RuntimeError):
    def __init__(self, episode: int, detail: str = ""):
        self.episode = episode
        super().__init__(f"training diverged in episode {episode}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class SacHyperparams:
    gamma: float = 0.916
    a_l: float = 0.0004
    c_l: float = 0.0006
    batch_n: int = 512
    kappa: float = 0.159
    phi_soft: float = 0.005
    buffer_capacity: int = 10000
    episodes: int = 1000
    steps_per_episode: int | None = None
    hidden: tuple[int, ...] = (64, 64)
    soft_update: str = "step"
    twin_critic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "batch_n", int(self.batch_n))
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.a_l <= 0 or self.c_l <= 0:
            raise ValueError("learning rates must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if not 0 < self.phi_soft <= 1:
            raise ValueError("phi_soft must lie in (0, 1]")
        if self.batch_n < 1 or self.batch_n > self.buffer_capacity:
            raise ValueError("need 1 <= batch_n <= buffer_capacity")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.soft_update not in ("step", "episode"):
            raise ValueError("soft_update must be 'step' or 'episode'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SacHyperparams":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# --- replay buffer ----------------------------------------------------------

@dataclass
class JointTransition:
    x: list[np.ndarray]
    a: list[np.ndarray]
    r: np.ndarray
    x_next: list[np.ndarray]
    done: bool

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.a) == len(self.r) == len(self.x_next) == n):
            raise ValueError("all per-agent lists must have the same length")


@dataclass
class Batch:
    x: np.ndarray        # (B, sum obs dims)
    a: np.ndarray        # (B, sum act dims), environment units
    r: np.ndarray        # (B, n_agents)
    x_next: np.ndarray
    done: np.ndarray     # (B,)
    index: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring of joint transitions stored as flat arrays."""

    def __init__(self, capacity: int, obs_dims, act_dims):
        self.capacity = int(capacity)
        self.obs_dims = list(obs_dims)
        self.act_dims = list(act_dims)
        n = len(self.obs_dims)
        self.x = np.zeros((capacity, sum(obs_dims)))
        self.a = np.zeros((capacity, sum(act_dims)))
        self.r = np.zeros((capacity, n))
        self.x_next = np.zeros((capacity, sum(obs_dims)))
        self.done = np.zeros(capacity)
        self.write_index = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def push(self, tr: JointTransition) -> None:
        k = self.write_index
        self.x[k] = np.concatenate(tr.x)
        self.a[k] = np.concatenate(tr.a)
        self.r[k] = tr.r
        self.x_next[k] = np.concatenate(tr.x_next)
        self.done[k] = float(tr.done)
        self.write_index = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_n: int, rng: np.random.Generator) -> Batch:
        """Uniform draw with replacement over the current contents."""
        if self.size < batch_n or self.size == 0:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_n}")
        idx = rng.integers(0, self.size, size=batch_n)
        return Batch(self.x[idx], self.a[idx], self.r[idx], self.x_next[idx], self.done[idx], idx)

    def get(self, k: int) -> JointTransition:
        """Transition at physical slot ``k``."""
        return JointTransition(
            x=np.split(self.x[k], np.cumsum(self.obs_dims)[:-1]),
            a=np.split(self.a[k], np.cumsum(self.act_dims)[:-1]),
            r=self.r[k].copy(), x_next=np.split(self.x_next[k], np.cumsum(self.obs_dims)[:-1]),
            done=bool(self.done[k]))

    def ordered(self) -> list[JointTransition]:
        """Contents from oldest to newest."""
        start = self.write_index if self.size == self.capacity else 0
        return [self.get((start + k) % self.capacity) for k in range(self.size)]


# --- networks ---------------------------------------------------------------

@dataclass
class AgentNets:
    actor: MlpParams
    critic: MlpParams
    target_critic: MlpParams
    actor_opt: AdamState
    critic_opt: AdamState
    critic2: MlpParams | None = None
    target_critic2: MlpParams | None = None
    critic2_opt: AdamState | None = None

    def __post_init__(self):
        if self.critic.layer_sizes != self.target_critic.layer_sizes:
            raise ValueError("critic and target critic shapes differ")


@dataclass
class Layout:
    """Column slices of each agent inside the flat joint vectors."""

    obs_dims: list[int]
    act_dims: list[int]
    action_low: np.ndarray
    action_high: np.ndarray
    obs_slices: list[slice] = field(init=False)
    act_slices: list[slice] = field(init=False)

    def __post_init__(self):
        o = np.concatenate([[0], np.cumsum(self.obs_dims)]).astype(int)
        a = np.concatenate([[0], np.cumsum(self.act_dims)]).astype(int)
        self.obs_slices = [slice(o[i], o[i + 1]) for i in range(len(self.obs_dims))]
        self.act_slices = [slice(a[i], a[i + 1]) for i in range(len(self.act_dims))]

    @classmethod
    def from_task(cls, task: Task) -> "Layout":
        return cls(list(task.obs_dims), list(task.act_dims),
                   np.concatenate(task.action_low), np.concatenate(task.action_high))

    @property
    def n_agents(self) -> int:
        return len(self.obs_dims)

    def to_unit(self, a_env: np.ndarray) -> np.ndarray:
        span = np.where(self.action_high > self.action_low, self.action_high - self.action_low, 1.0)
        return 2.0 * (a_env - self.action_low) / span - 1.0


def build_nets(layout: Layout, hp: SacHyperparams, rng: np.random.Generator) -> list[AgentNets]:
    joint_in = sum(layout.obs_dims) + sum(layout.act_dims)
    nets = []
    for i in range(layout.n_agents):
        actor = init_mlp((layout.obs_dims[i], *hp.hidden, 2 * layout.act_dims[i]), rng,
                         out_scale=0.1)
        critic = init_mlp((joint_in, *hp.hidden, 1), rng)
        n = AgentNets(actor=actor, critic=critic, target_critic=critic.copy(),
                      actor_opt=AdamState.for_params(actor, hp.a_l),
                      critic_opt=AdamState.for_params(critic, hp.c_l))
        if hp.twin_critic:
            c2 = init_mlp((joint_in, *hp.hidden, 1), rng)
            n.critic2, n.target_critic2 = c2, c2.copy()
            n.critic2_opt = AdamState.for_params(c2, hp.c_l)
        nets.append(n)
    return nets


# --- updates ----------------------------------------------------------------

def _next_joint_action(nets, layout: Layout, x_next: np.ndarray, rng: np.random.Generator):
    parts, logps = [], []
    for j, n in enumerate(nets):
        s = sample_policy(n.actor, x_next[:, layout.obs_slices[j]],
                          rng.standard_normal((x_next.shape[0], layout.act_dims[j])))
        parts.append(s.action)
        logps.append(s.log_prob)
    return np.concatenate(parts, axis=1), logps


def critic_target(i: int, batch: Batch, nets, layout: Layout, hp: SacHyperparams,
                  rng: np.random.Generator, reward_scale: float = 1.0) -> np.ndarray:
    """Soft Bellman target for agent ``i``; next actions come from all current actors."""
    r = batch.r[:, i] * reward_scale
    if hp.gamma == 0.0:
        return r.copy()
    a_next, logps = _next_joint_action(nets, layout, batch.x_next, rng)
    z = np.concatenate([batch.x_next, a_next], axis=1)
    q = forward(nets[i].target_critic, z)[:, 0]
    if nets[i].target_critic2 is not None:
        q = np.minimum(q, forward(nets[i].target_critic2, z)[:, 0])
    soft_v = q - hp.kappa * logps[i]
    return r + hp.gamma * (1.0 - batch.done) * soft_v


def critic_loss_and_grads(critic: MlpParams, z: np.ndarray, w: np.ndarray):
    q, cache = forward_cached(critic, z)
    diff = q[:, 0] - w
    loss = 0.5 * float(np.mean(diff * diff))
    grads, _ = backward(critic, z, (diff / len(w))[:, None], cache=cache)
    return loss, grads


def critic_update(i: int, batch: Batch, nets, layout: Layout, hp: SacHyperparams,
                  rng: np.random.Generator, reward_scale: float = 1.0,
                  w: np.ndarray | None = None) -> float:
    """One Adam step on the Bellman error; returns the loss before the step."""
    if w is None:
        w = critic_target(i, batch, nets, layout, hp, rng, reward_scale)
    z = np.concatenate([batch.x, layout.to_unit(batch.a)], axis=1)
    loss, grads = critic_loss_and_grads(nets[i].critic, z, w)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite critic loss")
    adam_update(nets[i].critic_opt, nets[i].critic, grads)
    if nets[i].critic2 is not None:
        _, g2 = critic_loss_and_grads(nets[i].critic2, z, w)
        adam_update(nets[i].critic2_opt, nets[i].critic2, g2)
    return loss


def actor_loss_and_grads(i: int, batch: Batch, nets, layout: Layout, kappa: float,
                         noise: np.ndarray):
    """Loss ``mean(kappa * log pi - Q)`` with agent ``i``'s action resampled."""
    n = nets[i]
    s = sample_policy(n.actor, batch.x[:, layout.obs_slices[i]], noise)
    a_unit = layout.to_unit(batch.a)
    a_unit[:, layout.act_slices[i]] = s.action
    z = np.concatenate([batch.x, a_unit], axis=1)
    q, cache = forward_cached(n.critic, z)
    B = z.shape[0]
    loss = float(np.mean(kappa * s.log_prob - q[:, 0]))
    _, dz = backward(n.critic, z, np.full((B, 1), 1.0), cache=cache, need_params=False)
    dq_da = dz[:, batch.x.shape[1]:][:, layout.act_slices[i]]
    grads = policy_backward(n.actor, s, -dq_da / B, np.full(B, kappa / B))
    return loss, grads


def actor_update(i: int, batch: Batch, nets, layout: Layout, hp: SacHyperparams,
                 rng: np.random.Generator) -> float:
    noise = rng.standard_normal((batch.x.shape[0], layout.act_dims[i]))
    loss, grads = actor_loss_and_grads(i, batch, nets, layout, hp.kappa, noise)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite actor loss")
    adam_update(nets[i].actor_opt, nets[i].actor, grads)
    return loss


def soft_update(target: MlpParams, current: MlpParams, phi_soft: float) -> None:
    """``target <- phi * current + (1 - phi) * target`` elementwise, in place."""
    for t, c in zip(target.arrays(), current.arrays()):
        t *= 1.0 - phi_soft
        t += phi_soft * c


def soft_update_all(nets, phi_soft: float) -> None:
    for n in nets:
        soft_update(n.target_critic, n.critic, phi_soft)
        if n.critic2 is not None:
            soft_update(n.target_critic2, n.critic2, phi_soft)


# --- training ---------------------------------------------------------------

@dataclass
class TrainingReport:
    episode_rewards: np.ndarray          # (episodes, n_agents), in task reward units
    wall_times: np.ndarray               # cumulative seconds at episode end
    nets: list[AgentNets]
    layout: Layout
    hp: SacHyperparams
    seed: int

    @property
    def total_rewards(self) -> np.ndarray:
        return self.episode_rewards.sum(axis=1)

    @property
    def wall_time(self) -> float:
        return float(self.wall_times[-1]) if len(self.wall_times) else 0.0

    def final_objective(self, window: int = 50) -> float:
        tot = self.total_rewards
        return float(np.mean(tot[-min(window, len(tot)):]))


def _spawn_rngs(seed: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def train(task, hp: SacHyperparams, seed: int, trading: bool = True, progress=None,
          on_episode=None) -> TrainingReport:
    """Run the episode/step/agent training loop on ``task`` (a Task or a Scenario).

    ``progress(episode, total_reward)`` and ``on_episode(episode, nets)`` are
    called after every episode; neither may touch the random streams.
    """
    if isinstance(task, Scenario):
        task = MicrogridTask(task, trading=trading)
    layout = Layout.from_task(task)
    init_rng, act_rng, sample_rng, update_rng = _spawn_rngs(seed)
    nets = build_nets(layout, hp, init_rng)
    buffer = ReplayBuffer(hp.buffer_capacity, layout.obs_dims, layout.act_dims)
    n = layout.n_agents
    rewards = np.zeros((hp.episodes, n))
    walls = np.zeros(hp.episodes)
    t0 = time.perf_counter()
    for ep in range(hp.episodes):
        obs = task.reset()
        step = 0
        try:
            while True:
                if len(buffer) < hp.batch_n:
                    unit = [act_rng.uniform(-1.0, 1.0, layout.act_dims[i]) for i in range(n)]
                else:
                    unit = [sample_policy(nets[i].actor, obs[i],
                                          act_rng.standard_normal(layout.act_dims[i])).action
                            for i in range(n)]
                next_obs, r, done, info = task.step(unit)
                step += 1
                if hp.steps_per_episode is not None and step >= hp.steps_per_episode:
                    done = True
                buffer.push(JointTransition(obs, info["actions"], np.asarray(r, dtype=np.float64),
                                            next_obs, done))
                rewards[ep] += r
                obs = next_obs
                if len(buffer) >= hp.batch_n:
                    for i in range(n):
                        batch = buffer.sample(hp.batch_n, sample_rng)
                        critic_update(i, batch, nets, layout, hp, update_rng, task.reward_scale)
                        actor_update(i, batch, nets, layout, hp, update_rng)
                    if hp.soft_update == "step":
                        soft_update_all(nets, hp.phi_soft)
                if done:
                    break
        except FloatingPointError as exc:
            raise TrainingDiverged(ep + 1, str(exc)) from exc
        if not np.isfinite(rewards[ep]).all():
            raise TrainingDiverged(ep + 1, "non-finite episode reward")
        if hp.soft_update == "episode" and len(buffer) >= hp.batch_n:
            soft_update_all(nets, hp.phi_soft)
        walls[ep] = time.perf_counter() - t0
        if progress is not None:
            progress(ep + 1, float(rewards[ep].sum()))
        if on_episode is not None:
            on_episode(ep + 1, nets)
    return TrainingReport(rewards, walls, nets, layout, hp, seed)


# --- execution --------------------------------------------------------------

class LocalPolicy:
    """Execution-time controller of one agent: an actor and nothing else."""

    def __init__(self, actor: MlpParams):
        self._actor = actor
        self.act_dim = actor.layer_sizes[-1] // 2

    def __call__(self, local_obs, noise=None) -> np.ndarray:
        if noise is None:
            noise = np.zeros(self.act_dim)
        return sample_policy(self._actor, local_obs, noise).action


@dataclass
class EvaluationResult:
    trace: list[dict]
    total_cost: float
    objective: float
    rewards: np.ndarray


def evaluate(nets, scenario: Scenario, deterministic: bool = True, trading: bool = True,
             seed: int = 0, esd_in_action: bool = False) -> EvaluationResult:
    """Roll one day with each actor acting on its own observation only."""
    policies = [LocalPolicy(n.actor if isinstance(n, AgentNets) else n) for n in nets]
    return run_policies(policies, scenario, deterministic, trading, seed, esd_in_action)


def run_policies(policies, scenario: Scenario, deterministic: bool = True, trading: bool = True,
                 seed: int = 0, esd_in_action: bool = False) -> EvaluationResult:
    task = MicrogridTask(scenario, trading=trading, esd_in_action=esd_in_action)
    rng = np.random.default_rng(seed)
    obs = task.reset()
    rows, costs, rewards = [], [], np.zeros(task.n_agents)
    done = False
    while not done:
        unit = []
        for pol, o in zip(policies, obs):
            noise = None if deterministic else rng.standard_normal(pol.act_dim)
            unit.append(pol(o, noise))
        obs, r, done, info = task.step(unit)
        res = info["result"]
        rows += trace_rows(scenario, res)
        costs += [c.total for c in res.cost]
        rewards += r
    return EvaluationResult(rows, math.fsum(costs), objective_from_trace(rows, scenario), rewards)


# --- reports and checkpoints -------------------------------------------------

def reward_csv_rows(report: TrainingReport) -> tuple[list[str], list[list]]:
    n = report.episode_rewards.shape[1]
    header = ["episode", "total_reward", "wall_time_s"] + [f"reward_mg{i + 1}" for i in range(n)]
    rows = []
    for ep in range(len(report.wall_times)):
        rows.append([ep + 1, repr(float(report.episode_rewards[ep].sum())),
                     repr(float(report.wall_times[ep]))]
                    + [repr(float(v)) for v in report.episode_rewards[ep]])
    return header, rows


def write_reward_csv(report: TrainingReport, path) -> Path:
    path = Path(path)
    header, rows = reward_csv_rows(report)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_reward_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["episode", "total_reward", "wall_time_s"]:
            raise ValueError(f"{path}: unexpected reward CSV header")
        data = np.array([[float(v) for v in row] for row in reader])
    return {h: data[:, k] if data.size else np.zeros(0) for k, h in enumerate(header)}


def moving_mean(values, window: int = 50) -> np.ndarray:
    """Trailing mean; entry k averages ``values[max(0, k-window+1):k+1]``."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    k = np.arange(1, len(v) + 1)
    lo = np.maximum(0, k - window)
    return (c[k] - c[lo]) / (k - lo)


def convergence_episode(totals, window: int = 50, tol: float = 0.01) -> int:
    """First 1-based episode after which the moving mean stays within ``tol`` of its final value."""
    mm = moving_mean(totals, window)
    if len(mm) == 0:
        return 0
    final = mm[-1]
    ok = np.abs(mm - final) <= tol * max(abs(final), 1e-12)
    bad = np.flatnonzero(~ok)
    return int(bad[-1] + 2) if bad.size else 1


def save_agents(nets, out_dir, meta: dict | None = None) -> list[Path]:
    """One checkpoint per agent and role: ``agent<i>_{actor,critic,target_critic}.npz``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, n in enumerate(nets):
        m = dict(meta or {}, agent=i, n_agents=len(nets))
        paths.append(save_checkpoint(out / f"agent{i + 1}_actor.npz", n.actor, n.actor_opt,
                                     dict(m, role="actor")))
        paths.append(save_checkpoint(out / f"agent{i + 1}_critic.npz", n.critic, n.critic_opt,
                                     dict(m, role="critic")))
        paths.append(save_checkpoint(out / f"agent{i + 1}_target_critic.npz", n.target_critic,
                                     None, dict(m, role="target_critic")))
    return paths


def load_agents(ckpt_dir) -> list[AgentNets]:
    d = Path(ckpt_dir)
    nets = []
    i = 1
    while (d / f"agent{i}_actor.npz").is_file():
        actor, a_opt, _ = load_checkpoint(d / f"agent{i}_actor.npz")
        critic, c_opt, _ = load_checkpoint(d / f"agent{i}_critic.npz")
        target, _, _ = load_checkpoint(d / f"agent{i}_target_critic.npz")
        nets.append(AgentNets(actor, critic, target, a_opt, c_opt))
        i += 1
    if not nets:
        raise FileNotFoundError(f"no agent checkpoints in {d}")
    return nets
