import numpy as np
import pytest

from splatnav import nn
from splatnav.env import StepResult
from splatnav.nn import checkpoint
from splatnav.policy import (ActorCritic, ObservationBuilder, PPOConfig, RunningNorm, clipped_surrogate,
                             compute_advantages, compute_returns, encoder_digest, ppo_loss, train)
from splatnav.nn.tensor import Tensor

from oracles import grad_error


def test_returns_examples():
    np.testing.assert_allclose(compute_returns([1.0, 1.0], [False, True], 0.5), [1.5, 1.0])
    np.testing.assert_allclose(compute_returns([1.0, 2.0, 3.0], [False, False, True], 0.0), [1, 2, 3])
    np.testing.assert_array_equal(compute_returns(np.zeros(5), [False] * 4 + [True], 0.99), np.zeros(5))
    # cut-off episode bootstraps, and an episode boundary stops the discounting
    np.testing.assert_allclose(compute_returns([1.0, 1.0], [False, False], 0.5, bootstrap=4.0), [2.5, 3.0])
    np.testing.assert_allclose(compute_returns([1.0, 1.0, 1.0], [True, False, False], 0.5, bootstrap=2.0),
                               [1.0, 2.0, 2.0])


def test_advantage_examples():
    np.testing.assert_allclose(compute_advantages([2.0, 0.0], [1.0, 1.0], standardize=False), [1.0, -1.0])
    a = compute_advantages([3.0, 1.0, 0.0, 5.0], [0.5, 0.5, 0.5, 0.5])
    assert a.mean() == pytest.approx(0.0, abs=1e-12) and a.std() == pytest.approx(1.0)
    np.testing.assert_array_equal(compute_advantages([1.0, 1.0], [0.0, 0.0]), [0.0, 0.0])


def test_clipped_surrogate_examples():
    assert clipped_surrogate(1.5, 1.0) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0) == pytest.approx(-0.8)
    assert clipped_surrogate(1.5, -1.0) == pytest.approx(-1.5)
    adv = np.array([0.3, -1.2, 2.0])
    assert clipped_surrogate(np.ones(3), adv).mean() == pytest.approx(adv.mean())


def test_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(horizon=1000, batch_size=300)
    with pytest.raises(ValueError):
        PPOConfig(clip=0.0)


def test_ppo_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    ac = ActorCritic(5, 4, hidden=(6, 6), log_std_init=-0.3, seed=1)
    obs = rng.normal(size=(8, 5)).astype(np.float32)
    with nn.no_grad():
        mean, log_std, _ = ac.forward(obs)
    actions = mean.data + 0.3 * rng.normal(size=mean.shape)
    with nn.no_grad():
        old = ac.log_prob(mean, log_std, actions).data + rng.normal(0, 0.05, 8)  # ratios near, but not at, 1
    adv = rng.normal(size=8)
    returns = rng.normal(size=8)
    cfg = PPOConfig(entropy_coef=0.01, horizon=8, batch_size=8)

    def build(params):
        probe = ActorCritic(5, 4, hidden=(6, 6), seed=1)
        for tag, layers in (("pi", probe.actor), ("v", probe.critic)):
            for k, layer in enumerate(layers):
                key = f"{tag}.{'out' if k == len(layers) - 1 else k}"
                layer.W, layer.b = params[key + ".W"], params[key + ".b"]
        probe.params["pi.log_std"] = params["pi.log_std"]
        return ppo_loss(probe, obs, actions, old, adv, returns, cfg)[0]

    arrays = {k: v.astype(np.float64) for k, v in ac.params.arrays().items()}
    assert grad_error(build, arrays, eps=1e-4) <= 1e-3


def test_tiny_std_makes_sampling_deterministic():
    ac = ActorCritic(7, hidden=(8,), log_std_init=-50.0, seed=0)
    x = np.random.default_rng(1).normal(size=(3, 7))
    det = ac.act(x, stochastic=False)[0]
    sto = ac.act(x, stochastic=True, rng=np.random.default_rng(0))[0]
    np.testing.assert_allclose(sto, det, atol=5 * np.exp(-5.0))  # log-std is clamped at -5
    np.testing.assert_array_equal(ac.act(x, stochastic=False)[0], det)
    a1 = ac.act(x, rng=np.random.default_rng(3))[0]
    a2 = ac.act(x, rng=np.random.default_rng(3))[0]
    np.testing.assert_array_equal(a1, a2)


def test_log_prob_matches_gaussian_density():
    ac = ActorCritic(3, hidden=(4,), log_std_init=0.4, seed=2)
    x = np.ones((2, 3), np.float32)
    a, logp, _ = ac.act(x, rng=np.random.default_rng(0))
    mean = ac.act(x, stochastic=False)[0]
    sd = np.exp(0.4)
    ref = np.sum(-0.5 * ((a - mean) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi), axis=1)
    np.testing.assert_allclose(logp, ref, rtol=1e-5)


def test_observation_history_pads_with_first_latent():
    b = ObservationBuilder(2)
    b.reset([1.0, 2.0])
    v = b.vector(np.zeros(6), np.zeros(3))
    np.testing.assert_array_equal(v[:6], [1, 2, 1, 2, 1, 2])
    b.push([3.0, 4.0])
    np.testing.assert_array_equal(b.vector(np.zeros(6), np.zeros(3))[:6], [1, 2, 1, 2, 3, 4])
    assert b.size == 15


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.0, size=(500, 4))
    n = RunningNorm(4, eps=0.0 + 1e-12)
    for chunk in np.array_split(data, 7):
        n.update(chunk)
    np.testing.assert_allclose(n.mean, data.mean(axis=0), rtol=1e-9)
    np.testing.assert_allclose(n.var, data.var(axis=0), rtol=1e-6)
    n.frozen = True
    n.update(np.zeros((10, 4)))
    np.testing.assert_allclose(n.mean, data.mean(axis=0), rtol=1e-9)


def test_checkpoint_roundtrip(tmp_path):
    ac = ActorCritic(5, hidden=(8, 8), seed=3)
    norm = RunningNorm(9)
    norm.update(np.arange(18.0).reshape(2, 9))
    ac.save(tmp_path / "p.ckpt", norm)
    back, bnorm = ActorCritic.load(tmp_path / "p.ckpt")
    x = np.ones((2, 5), np.float32)
    np.testing.assert_array_equal(back.act(x, stochastic=False)[0], ac.act(x, stochastic=False)[0])
    assert bnorm.frozen
    np.testing.assert_allclose(bnorm.mean, norm.mean, rtol=1e-6)


class PointMass:
    """Scripted goal-reaching stand-in for NavEnv: image is a constant frame."""

    def __init__(self, t_limit=50):
        self.t_limit = t_limit

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        self.pos = np.zeros(3)
        self.goal = rng.uniform(-1, 1, 3)
        self.t = 0
        return self._res(0.0, "none")

    def _res(self, reward, terminal):
        return StepResult(np.zeros((8, 8, 3), np.float32), np.zeros(6), self.goal - self.pos, reward, terminal)

    def step(self, a):
        d0 = np.linalg.norm(self.goal - self.pos)
        self.pos = self.pos + 0.1 * np.clip(np.asarray(a)[:3], -1, 1)
        self.t += 1
        d = np.linalg.norm(self.goal - self.pos)
        r = 0.1 * (d0 - d) - 1 / self.t_limit
        term = "goal" if d < 0.2 else "timeout" if self.t >= self.t_limit else "none"
        return self._res(r + (10 if term == "goal" else 0), term)


SMALL = PPOConfig(horizon=128, batch_size=64, hidden=(16, 16), epochs=2, n_envs=2)


def test_zero_steps_returns_initial_policy():
    ac, norm, report = train(lambda i: PointMass(), None, SMALL, 0, seed=5)
    init = ActorCritic(9, hidden=(16, 16), seed=5)
    assert report.iterations == []
    for k, v in init.params.arrays().items():
        np.testing.assert_array_equal(ac.params.arrays()[k], v)


def test_training_is_deterministic(tmp_path):
    runs = []
    for _ in range(2):
        ac, norm, rep = train(lambda i: PointMass(), None, SMALL, 512, seed=7, log_path=tmp_path / "log.jsonl")
        runs.append((checkpoint.dumps(ac.state(norm)), rep.curve, (tmp_path / "log.jsonl").read_text()))
    assert runs[0] == runs[1]
    assert len(runs[0][2].splitlines()) == 4


def test_training_improves_return_on_point_mass():
    cfg = PPOConfig(horizon=512, batch_size=128, hidden=(32, 32), epochs=6, lr=1e-3, log_std_init=-0.5)
    _, _, rep = train(lambda i: PointMass(), None, cfg, 20 * 512, seed=0)
    rets = rep.episode_returns
    q = len(rets) // 4
    assert np.mean(rets[-q:]) > np.mean(rets[:q])


def test_encoder_is_not_modified(tmp_path):
    from splatnav.contrast import Encoder, EncoderSpec
    enc = Encoder(EncoderSpec(conv_channels=(4, 8), feature_dim=16, hidden_dim=16, out_dim=8, resolution=8), seed=0)
    before = encoder_digest(enc)
    train(lambda i: PointMass(), enc, SMALL, 256, seed=1)
    assert encoder_digest(enc) == before
