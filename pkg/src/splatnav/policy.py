"""PPO actor-critic over frozen image features.

The policy input is three consecutive encoder latents followed by the
normalized proprioception and body-frame goal offset. Actor and critic are
separate two-hidden-layer MLPs; the actor has a state-independent log-std.
Returns are Monte Carlo, bootstrapped only where a rollout cuts an episode.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import CheckpointError, NonFiniteError
from .nn import checkpoint
from .nn import functional as F
from .nn.layers import Dense
from .nn.tensor import Tensor

logger = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
HISTORY = 3
ACTION_DIM = 4
LOG_2PI = math.log(2 * math.pi)


@dataclass
class PPOConfig:
    clip: float = 0.2
    lr: float = 3e-4
    batch_size: int = 1024
    horizon: int = 10240
    gamma: float = 0.99
    epochs: int = 4
    entropy_coef: float = 0.0
    value_coef: float = 1.0
    hidden: tuple = (256, 256)
    log_std_init: float = 0.0
    standardize_advantages: bool = True
    n_envs: int = 1
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.horizon % self.batch_size:
            raise ValueError("horizon must be a multiple of batch_size")
        if self.horizon % self.n_envs:
            raise ValueError("horizon must be a multiple of n_envs")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        self.hidden = tuple(int(h) for h in self.hidden)


class RunningNorm:
    """Running mean/std (parallel-merge form); ``frozen`` stops updates."""

    def __init__(self, dim, eps=1e-4):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = eps
        self.frozen = False

    def update(self, x):
        if self.frozen:
            return
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        m, v, n = x.mean(axis=0), x.var(axis=0), len(x)
        delta = m - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        self.var = (self.var * self.count + v * n + delta ** 2 * self.count * n / total) / total
        self.count = total

    def __call__(self, x):
        return np.clip((np.asarray(x) - self.mean) / np.sqrt(self.var + 1e-8), -10, 10)


class ObservationBuilder:
    """Latent history buffer plus normalization of the low-dimensional inputs."""

    def __init__(self, latent_dim, low_dim=9):
        self.latent_dim = latent_dim
        self.norm = RunningNorm(low_dim)
        self.history = None

    @property
    def size(self):
        return HISTORY * self.latent_dim + self.norm.mean.size

    def reset(self, z):
        # history slots before the first frame repeat z_0
        self.history = [np.asarray(z, dtype=np.float32)] * HISTORY

    def push(self, z):
        self.history = self.history[1:] + [np.asarray(z, dtype=np.float32)]

    def vector(self, proprio, goal_offset) -> np.ndarray:
        low = np.concatenate([proprio, goal_offset])
        self.norm.update(low)
        return np.concatenate([*self.history, self.norm(low)]).astype(np.float32)


class ActorCritic:
    def __init__(self, obs_dim, act_dim=ACTION_DIM, hidden=(256, 256), log_std_init=0.0, seed=0):
        self.obs_dim, self.act_dim, self.hidden = obs_dim, act_dim, tuple(hidden)
        rng = np.random.default_rng(seed)
        self.params = nn.ParameterSet()
        self.actor = self._mlp("pi", obs_dim, act_dim, rng)
        self.critic = self._mlp("v", obs_dim, 1, rng)
        self.params["pi.log_std"] = nn.Parameter(np.full(act_dim, log_std_init), name="pi.log_std")

    def _mlp(self, name, n_in, n_out, rng):
        layers, d = [], n_in
        for k, h in enumerate(self.hidden):
            layers.append(Dense(self.params, f"{name}.{k}", d, h, rng))
            d = h
        # small final layer so the initial policy is close to zero-mean
        out = Dense(self.params, f"{name}.out", d, n_out, rng, gain=0.01 if name == "pi" else 1.0)
        return layers + [out]

    @staticmethod
    def _run(layers, x):
        for layer in layers[:-1]:
            x = nn.relu(layer(x))
        return layers[-1](x)

    def log_std(self) -> Tensor:
        return nn.clip(self.params["pi.log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, obs):
        x = obs if isinstance(obs, Tensor) else Tensor(np.asarray(obs, dtype=np.float32))
        return self._run(self.actor, x), self.log_std(), self._run(self.critic, x).reshape(-1)

    def log_prob(self, mean: Tensor, log_std: Tensor, actions) -> Tensor:
        a = Tensor(np.asarray(actions, dtype=mean.dtype))
        z = nn.div(nn.sub(a, mean), nn.exp(log_std))
        per_dim = nn.add(nn.mul(nn.square(z), -0.5), nn.add(log_std, 0.5 * LOG_2PI) * -1.0)
        return per_dim.sum(axis=1)

    def act(self, obs, stochastic=True, rng=None):
        """Return ``(actions, log_probs, values)`` for a batch (or single) observation."""
        single = np.asarray(obs).ndim == 1
        x = np.atleast_2d(np.asarray(obs, dtype=np.float32))
        with nn.no_grad():
            mean, log_std, value = self.forward(x)
        if not (np.all(np.isfinite(mean.data)) and np.all(np.isfinite(value.data))):
            raise NonFiniteError("policy network produced non-finite outputs")
        std = np.exp(log_std.data)
        if stochastic:
            rng = rng if rng is not None else np.random.default_rng()
            actions = mean.data + std * rng.standard_normal(mean.shape).astype(np.float32)
        else:
            actions = mean.data.copy()
        with nn.no_grad():
            logp = self.log_prob(mean, log_std, actions).data
        if single:
            return actions[0], float(logp[0]), float(value.data[0])
        return actions, logp, value.data

    def state(self, norm: RunningNorm | None = None) -> dict:
        meta = {"meta.dims": np.array([self.obs_dim, self.act_dim, *self.hidden], np.float32)}
        if norm is not None:
            meta["norm.mean"] = norm.mean.astype(np.float32)
            meta["norm.var"] = norm.var.astype(np.float32)
            meta["norm.count"] = np.array([norm.count], np.float32)
        return {**meta, **self.params.arrays()}

    def save(self, path, norm=None):
        checkpoint.save(path, self.state(norm))

    @classmethod
    def from_state(cls, tensors):
        try:
            dims = [int(v) for v in tensors["meta.dims"]]
            ac = cls(dims[0], dims[1], dims[2:])
            ac.params.load(tensors)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"not a policy checkpoint: {exc}") from exc
        norm = None
        if "norm.mean" in tensors:
            norm = RunningNorm(tensors["norm.mean"].size)
            norm.mean = tensors["norm.mean"].astype(np.float64)
            norm.var = tensors["norm.var"].astype(np.float64)
            norm.count = float(tensors["norm.count"][0])
            norm.frozen = True
        return ac, norm

    @classmethod
    def load(cls, path):
        return cls.from_state(checkpoint.load(path))


# --- returns and advantages ------------------------------------------------------

def compute_returns(rewards, dones, gamma, bootstrap=0.0) -> np.ndarray:
    """Discounted returns of one env's step sequence.

    ``dones[t]`` ends an episode after step ``t``; ``bootstrap`` is
    ``V(o_T)`` for an episode the sequence cuts off (ignored when the last
    step is terminal).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    out = np.zeros_like(rewards)
    running = 0.0 if (len(dones) and dones[-1]) else float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        out[t] = running
    return out


def compute_advantages(returns, values, standardize=True) -> np.ndarray:
    adv = np.asarray(returns, dtype=np.float64) - np.asarray(values, dtype=np.float64)
    if not standardize:
        return adv
    centered = adv - adv.mean()
    return centered / max(float(centered.std()), 1e-8)


def clipped_surrogate(ratio, adv, clip=0.2) -> np.ndarray:
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def ppo_loss(ac: ActorCritic, obs, actions, old_logp, adv, returns, cfg: PPOConfig):
    """Scalar loss ``-surrogate + value_coef * MSE - entropy_coef * entropy`` and its parts."""
    mean, log_std, value = ac.forward(obs)
    logp = ac.log_prob(mean, log_std, actions)
    ratio = nn.exp(nn.sub(logp, Tensor(np.asarray(old_logp, dtype=logp.dtype))))
    A = Tensor(np.asarray(adv, dtype=logp.dtype))
    surr = nn.minimum(nn.mul(ratio, A), nn.mul(nn.clip(ratio, 1 - cfg.clip, 1 + cfg.clip), A))
    policy_term = nn.mul(nn.mean(surr), -1.0)
    value_term = nn.mean(nn.square(nn.sub(value, Tensor(np.asarray(returns, dtype=value.dtype)))))
    loss = nn.add(policy_term, nn.mul(value_term, cfg.value_coef))
    entropy = float(np.sum(log_std.data) + 0.5 * ac.act_dim * (1 + LOG_2PI))
    if cfg.entropy_coef:
        ent = nn.add(log_std.sum(), 0.5 * ac.act_dim * (1 + LOG_2PI))
        loss = nn.sub(loss, nn.mul(ent, cfg.entropy_coef))
    parts = {"policy": float(policy_term.data), "value": float(value_term.data), "entropy": entropy,
             "mean_ratio": float(np.mean(ratio.data))}
    return loss, parts


@dataclass
class Rollout:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    returns: np.ndarray = None
    advantages: np.ndarray = None


def ppo_update(ac: ActorCritic, opt: nn.Adam, batch: Rollout, cfg: PPOConfig, rng) -> dict:
    """Clipped-surrogate epochs over shuffled minibatches; returns mean loss parts."""
    if batch.advantages is None:
        raise ValueError("advantages must be computed before the update")
    n = len(batch.obs)
    parts_log = []
    stopped = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ac.params.zero_grad()
            loss, parts = ppo_loss(ac, batch.obs[idx], batch.actions[idx], batch.log_probs[idx],
                                   batch.advantages[idx], batch.returns[idx], cfg)
            if not math.isfinite(float(loss.data)):
                raise NonFiniteError(f"PPO loss is {float(loss.data)} in epoch {epoch}")
            if not 0.1 <= parts["mean_ratio"] <= 10.0:
                logger.warning("mean probability ratio %.3g left [0.1, 10]; skipping remaining epochs",
                               parts["mean_ratio"])
                stopped = True
                break
            loss.backward()
            if cfg.max_grad_norm:
                total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in ac.params.values() if p.grad is not None))
                if total > cfg.max_grad_norm:
                    for p in ac.params.values():
                        if p.grad is not None:
                            p.grad *= cfg.max_grad_norm / total
            opt.step()
            parts_log.append(parts)
        if stopped:
            break
    report = {k: float(np.mean([p[k] for p in parts_log])) for k in parts_log[0]} if parts_log else {}
    report["early_stop"] = stopped
    return report


# --- training --------------------------------------------------------------------

class Agent:
    """Wraps encoder, observation builders and policy for acting in environments."""

    def __init__(self, encoder, ac: ActorCritic, norm: RunningNorm | None = None, n_envs=1):
        self.encoder = encoder
        self.ac = ac
        latent = encoder.spec.out_dim if encoder is not None else 0
        self.builders = [ObservationBuilder(latent) for _ in range(n_envs)]
        if norm is not None:
            for b in self.builders:
                b.norm = norm
        else:
            shared = self.builders[0].norm
            for b in self.builders[1:]:
                b.norm = shared

    @property
    def norm(self) -> RunningNorm:
        return self.builders[0].norm

    def encode(self, images):
        if self.encoder is None:
            return [np.zeros(0, np.float32)] * len(images)
        z = self.encoder.encode_batch(np.stack(images))
        # InfoNCE only constrains the direction of z; unit length keeps the
        # 384 latent inputs from swamping the 9 low-dimensional ones
        return list(z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12))

    def observe(self, results, fresh):
        """Policy vectors for one StepResult per env; ``fresh[i]`` marks a reset."""
        zs = self.encode([r.observation for r in results])
        vecs = []
        for b, r, z, f in zip(self.builders, results, zs, fresh):
            b.reset(z) if f else b.push(z)
            vecs.append(b.vector(r.proprioception, r.goal_offset))
        return np.stack(vecs)


@dataclass
class TrainReport:
    iterations: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    episode_outcomes: list = field(default_factory=list)

    @property
    def curve(self):
        return [it["mean_return"] for it in self.iterations]


def encoder_digest(encoder) -> str:
    if encoder is None:
        return "none"
    return checkpoint.checksum_bytes(checkpoint.dumps(encoder.state()))


def train(env_factory, encoder, cfg: PPOConfig, total_steps, seed=0, log_path=None, episode_seed_base=None,
          on_iteration=None):
    """Train an actor-critic on envs from ``env_factory(index)``.

    Episode ``k`` of env ``i`` is reset with seed
    ``episode_seed_base + i * 1_000_000 + k``. Returns ``(ActorCritic,
    RunningNorm, TrainReport)``.
    """
    base = seed * 10_000_000 if episode_seed_base is None else episode_seed_base
    envs = [env_factory(i) for i in range(cfg.n_envs)]
    latent = encoder.spec.out_dim if encoder is not None else 0
    obs_dim = HISTORY * latent + 9
    ac = ActorCritic(obs_dim, ACTION_DIM, cfg.hidden, cfg.log_std_init, seed=seed)
    agent = Agent(encoder, ac, n_envs=cfg.n_envs)
    opt = nn.Adam(ac.params, lr=cfg.lr)
    rng = np.random.default_rng([seed, 2])
    digest = encoder_digest(encoder)
    report = TrainReport()
    log = open(log_path, "w") if log_path else None
    counters = [0] * cfg.n_envs
    ep_return = [0.0] * cfg.n_envs
    ep_len = [0] * cfg.n_envs

    def reset(i):
        r = envs[i].reset(base + i * 1_000_000 + counters[i])
        counters[i] += 1
        return r

    results = [reset(i) for i in range(cfg.n_envs)] if total_steps > 0 else []
    obs = agent.observe(results, [True] * cfg.n_envs) if results else None
    steps = 0
    iteration = 0
    per_env = cfg.horizon // cfg.n_envs
    try:
        while steps < total_steps:
            t0 = time.time()
            buf = {k: [] for k in ("obs", "actions", "log_probs", "rewards", "dones", "values")}
            finished = []
            for _ in range(per_env):
                actions, logp, values = ac.act(obs, stochastic=True, rng=rng)
                step_results, fresh, dones, rewards = [], [], [], []
                for i, env in enumerate(envs):
                    r = env.step(actions[i])
                    ep_return[i] += r.reward
                    ep_len[i] += 1
                    rewards.append(r.reward)
                    dones.append(r.done)
                    if r.done:
                        finished.append((ep_return[i], ep_len[i], r.terminal))
                        ep_return[i], ep_len[i] = 0.0, 0
                        r = reset(i)
                    step_results.append(r)
                    fresh.append(dones[-1])
                for key, val in zip(buf, (obs, actions, logp, rewards, dones, values)):
                    buf[key].append(np.asarray(val))
                obs = agent.observe(step_results, fresh)
                steps += cfg.n_envs
            # arrays are (time, env); returns run per env then flatten env-major
            arr = {k: np.stack(v) for k, v in buf.items()}
            with nn.no_grad():
                _, _, last_v = ac.forward(obs)
            returns = np.stack([compute_returns(arr["rewards"][:, i], arr["dones"][:, i], cfg.gamma,
                                                float(last_v.data[i])) for i in range(cfg.n_envs)], axis=1)

            def flat(a):
                a = np.swapaxes(a, 0, 1)
                return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])

            batch = Rollout(flat(arr["obs"]), flat(arr["actions"]), flat(arr["log_probs"]), flat(arr["rewards"]),
                            flat(arr["dones"]), flat(arr["values"]), flat(returns))
            batch.advantages = compute_advantages(batch.returns, batch.values, cfg.standardize_advantages)
            losses = ppo_update(ac, opt, batch, cfg, rng)
            iteration += 1
            rets = [f[0] for f in finished]
            rec = {"iteration": iteration, "steps": steps,
                   "mean_return": float(np.mean(rets)) if rets else None,
                   "mean_episode_length": float(np.mean([f[1] for f in finished])) if finished else None,
                   "episodes": len(finished),
                   "goal_rate": float(np.mean([f[2] == "goal" for f in finished])) if finished else None,
                   "losses": losses, "seconds": round(time.time() - t0, 3)}
            report.iterations.append(rec)
            report.episode_returns.extend(rets)
            report.episode_outcomes.extend(f[2] for f in finished)
            if log:
                log.write(json.dumps({k: v for k, v in rec.items() if k != "seconds"}) + "\n")
                log.flush()
            logger.info("iter %d steps %d return %s goal %s", iteration, steps, rec["mean_return"],
                        rec["goal_rate"])
            if on_iteration:
                on_iteration(rec, ac, agent.norm)
    finally:
        if log:
            log.close()
        for env in envs:
            close = getattr(env, "close", None)
            if close:
                close()
    if encoder_digest(encoder) != digest:
        raise RuntimeError("encoder parameters changed during policy training")
    return ac, agent.norm, report


def config_dict(cfg: PPOConfig) -> dict:
    return asdict(cfg)
