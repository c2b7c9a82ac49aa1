import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from loggrasp import env as genv
from loggrasp.errors import CheckpointError, ConfigError
from loggrasp.policy import ActorCritic, ObservationNormalizer, PolicySpec, flat_parameters
from loggrasp.trainer import (
    RolloutBuffer,
    TrainConfig,
    Trainer,
    collect_rollouts,
    compute_gae,
    load_policy,
    make_optimizer,
    metrics_digest,
    normalize_advantages,
    ppo_loss,
    ppo_update,
    read_checkpoint,
    train,
)
from oracles import gae_brute_force

TINY = dict(n_envs=2, rollout_len=16, epochs=2, minibatch_size=16, hidden=(16, 16), checkpoint_every=1)


def test_gae_single_step():
    adv, ret = compute_gae([[1.0]], [[0.0]], [[1.0]], [5.0], 0.99, 0.95)
    assert adv[0, 0] == 1.0 and ret[0, 0] == 1.0


def test_gae_gamma_zero_exact():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    with pytest.raises(ConfigError):
        TrainConfig(gamma=0.0)
    # the function itself accepts the limit
    adv, _ = compute_gae(r, v, np.zeros((2, 5)), np.ones(2), 0.0, 0.95)
    np.testing.assert_array_equal(adv, r - v)


def test_gae_matches_brute_force_1000_episodes():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        r, v = rng.normal(size=n), rng.normal(size=n)
        dones = (rng.uniform(size=n) < 0.3).astype(float)
        last = float(rng.normal())
        gamma, lam = rng.uniform(0.5, 0.999), rng.uniform(0.0, 1.0)
        adv, ret = compute_gae(r, v, dones, last, gamma, lam)
        oracle = gae_brute_force(r, v, dones, last, gamma, lam)
        worst = max(worst, np.abs(adv - oracle).max())
        np.testing.assert_allclose(ret, adv + v, atol=0)
    assert worst <= 1e-10


def test_advantage_normalization():
    rng = np.random.default_rng(3)
    for scale in (1e-3, 1.0, 1e4):
        a = normalize_advantages(rng.normal(5, scale, 4096))
        assert abs(a.mean()) <= 1e-9
        assert 1 - 1e-6 <= a.std() <= 1 + 1e-6
    np.testing.assert_array_equal(normalize_advantages(np.full(10, 3.0)), 0.0)


def test_normalization_invariant_to_positive_rescaling():
    rng = np.random.default_rng(4)
    a = rng.normal(size=1000)
    for c in (0.01, 3.0, 1e3):
        np.testing.assert_allclose(normalize_advantages(c * a), normalize_advantages(a), atol=1e-12)


def test_adam_hand_oracle():
    x0, lr = 1.5, 0.1
    p = torch.nn.Parameter(torch.tensor([x0], dtype=torch.float64))
    module = torch.nn.Module()
    module.p = p
    opt = make_optimizer(module, lr)
    b1, b2, eps = 0.9, 0.999, 1e-8
    x, m, v = x0, 0.0, 0.0
    for t in range(1, 6):
        opt.zero_grad()
        loss = (p - 3.0) ** 2
        loss.sum().backward()
        opt.step()
        g = 2 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1**t), v / (1 - b2**t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        assert abs(float(p.detach()) - x) <= 1e-12


def _batch(net, n=32, seed=0):
    rng = np.random.default_rng(seed)
    obs = torch.tensor(rng.normal(size=(n, 18)), dtype=net.dtype)
    a = torch.tensor(rng.uniform(0.05, 0.95, (n, 6)), dtype=net.dtype)
    with torch.no_grad():
        params, _ = net(obs)
        logp = net.log_prob(params, a)
    return obs, a, logp, rng


def test_noop_update_ratio_one():
    cfg = TrainConfig(**TINY)
    net = ActorCritic(PolicySpec(hidden=(16,)), dtype=torch.float64, seed=0)
    obs, a, logp, rng = _batch(net)
    adv = torch.tensor(rng.normal(size=32))
    _, stats = ppo_loss(net, obs, a, logp, adv, torch.zeros(32), cfg)
    assert stats["clip_fraction"] == 0.0
    assert stats["surrogate"] == pytest.approx(float(adv.mean()), abs=1e-12)


def test_zero_advantage_leaves_policy_gradient_zero():
    cfg = TrainConfig(**TINY, value_coef=0.0, entropy_coef=0.0)
    net = ActorCritic(PolicySpec(hidden=(16,)), dtype=torch.float64, seed=0)
    with torch.no_grad():
        net.actor.weight.normal_(0, 0.3)
    obs, a, logp, _ = _batch(net)
    loss, _ = ppo_loss(net, obs, a, logp, torch.zeros(32, dtype=torch.float64), torch.zeros(32), cfg)
    loss.backward()
    for p in net.parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0


@pytest.mark.parametrize("kind", ["beta", "gaussian"])
def test_network_gradient_matches_finite_differences(kind):
    cfg = TrainConfig(**TINY)
    rng = np.random.default_rng(5)
    worst = 0.0
    for point in range(100):
        net = ActorCritic(PolicySpec(hidden=(8, 8), kind=kind), dtype=torch.float64, seed=point)
        with torch.no_grad():
            for p in net.parameters():
                p.add_(torch.tensor(rng.normal(0, 0.3, p.shape)))
        obs = torch.tensor(rng.normal(size=(4, 18)))
        a = torch.tensor(rng.uniform(0.05, 0.95, (4, 6)))
        with torch.no_grad():
            params, _ = net(obs)
            # keep the ratio inside the clip band so the loss is smooth
            old = net.log_prob(params, a) + torch.tensor(rng.uniform(-0.05, 0.05, 4))
        adv, ret = torch.tensor(rng.normal(size=4)), torch.tensor(rng.normal(size=4))

        net.zero_grad()
        loss, _ = ppo_loss(net, obs, a, old, adv, ret, cfg)
        loss.backward()
        analytic = torch.cat([p.grad.reshape(-1) for p in net.parameters()]).numpy()

        flat = [p for p in net.parameters()]
        fd = []
        h = 1e-6
        with torch.no_grad():
            for p in flat:
                view = p.view(-1)
                for i in range(view.numel()):
                    orig = float(view[i])
                    view[i] = orig + h
                    up = float(ppo_loss(net, obs, a, old, adv, ret, cfg)[0])
                    view[i] = orig - h
                    down = float(ppo_loss(net, obs, a, old, adv, ret, cfg)[0])
                    view[i] = orig
                    fd.append((up - down) / (2 * h))
        fd = np.array(fd)
        rel = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-12)
        worst = max(worst, rel)
    assert worst <= 1e-3


def test_collect_rollouts_shape_and_order():
    cfg = genv.EnvConfig()
    net = ActorCritic(PolicySpec(hidden=(8,)), seed=0)

    def run():
        vec = genv.VecGraspEnv(2, cfg, seed=11)
        return collect_rollouts(vec, net, 3, np.random.default_rng(0), rpo=True)

    buf = run()
    assert len(buf) == 6
    assert buf.obs.shape == (2, 3, 18)
    np.testing.assert_array_equal(buf.flat("rewards")[:3], buf.rewards[0])
    np.testing.assert_array_equal(buf.flat("rewards")[3:], buf.rewards[1])
    assert run().digest() == buf.digest()


def test_zero_policy_rewards_match_static_scene():
    cfg = genv.EnvConfig()
    net = ActorCritic(PolicySpec(hidden=(8,)), seed=0)  # zero actor layer: alpha == beta
    vec = genv.VecGraspEnv(2, cfg, seed=4)
    start = vec.state
    buf = collect_rollouts(vec, net, 20, np.random.default_rng(0), deterministic=True)
    expected = genv.reward(start, np.zeros((2, 6)), cfg.reward).total
    np.testing.assert_allclose(buf.rewards, np.repeat(expected[:, None], 20, axis=1), atol=1e-12, rtol=0)


def test_update_restores_on_nonfinite_loss():
    cfg = TrainConfig(**TINY)
    net = ActorCritic(PolicySpec(hidden=(8,)), seed=0)
    vec = genv.VecGraspEnv(2, genv.EnvConfig(), seed=0)
    buf = collect_rollouts(vec, net, 8, np.random.default_rng(0))
    buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_values, 0.99, 0.95)
    buf.returns[0, 0] = np.nan
    before = flat_parameters(net)
    opt = make_optimizer(net, 1e-3)
    out = ppo_update(buf, net, opt, cfg, np.random.default_rng(0))
    assert out["aborted"]
    np.testing.assert_array_equal(flat_parameters(net), before)


def test_update_requires_advantages():
    cfg = TrainConfig(**TINY)
    net = ActorCritic(PolicySpec(hidden=(8,)), seed=0)
    buf = RolloutBuffer.empty(2, 4)
    with pytest.raises(ConfigError):
        ppo_update(buf, net, make_optimizer(net, 1e-3), cfg, np.random.default_rng(0))


def test_algo_selection():
    assert TrainConfig(algo="ppo").kind == "gaussian" and not TrainConfig(algo="ppo").use_rpo
    assert TrainConfig(algo="mppo").kind == "beta" and TrainConfig(algo="mppo").use_rpo
    assert not TrainConfig(algo="mppo", rpo=False).use_rpo
    with pytest.raises(ConfigError):
        TrainConfig(algo="trpo")
    with pytest.raises(ConfigError):
        TrainConfig(clip_ratio=0.0)


def test_train_exact_update_count(tmp_path):
    cfg = TrainConfig(**TINY, total_steps=2 * 2 * 16 + 5)
    tr = train(cfg, log_dir=tmp_path, checkpoint_dir=tmp_path / "ck")
    assert tr.update == 2
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["update"] for x in lines] == [1, 2]
    assert (tmp_path / "ck" / "latest.pt").exists()
    assert (tmp_path / "ck" / "ckpt_000002.pt").exists()


@pytest.mark.parametrize("algo", ["mppo", "ppo"])
def test_train_deterministic_and_resume_bit_identical(tmp_path, algo):
    cfg = TrainConfig(**TINY, total_steps=3 * 2 * 16, algo=algo, seed=9)
    full = train(cfg, log_dir=tmp_path / "a")
    again = train(cfg, log_dir=tmp_path / "b")
    assert metrics_digest(full.metrics) == metrics_digest(again.metrics)

    train(cfg, log_dir=tmp_path / "c", checkpoint_dir=tmp_path / "c" / "ck", stop_after=1)
    resumed = train(cfg, log_dir=tmp_path / "c", resume=tmp_path / "c" / "ck" / "ckpt_000001.pt")
    assert metrics_digest(resumed.metrics) == metrics_digest(full.metrics)
    np.testing.assert_array_equal(flat_parameters(resumed.net), flat_parameters(full.net))


def test_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(**TINY, total_steps=2 * 16)
    tr = train(cfg, checkpoint_dir=tmp_path)
    ck = read_checkpoint(tmp_path / "latest.pt")
    assert ck["version"] == 1
    for k, v in tr.net.state_dict().items():
        assert ck["weights"][k].dtype == torch.float64
        assert torch.equal(ck["weights"][k].to(v.dtype), v)
    net = load_policy(tmp_path / "latest.pt")
    for k, v in tr.net.state_dict().items():
        assert torch.equal(net.state_dict()[k].to(v.dtype), v)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.pt")
    torch.save({"version": 99}, tmp_path / "old.pt")
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "old.pt")
    cfg = TrainConfig(**TINY, total_steps=2 * 16)
    tr = train(cfg, checkpoint_dir=tmp_path / "ok")
    other = Trainer(replace(cfg, hidden=(8,)))
    with pytest.raises(CheckpointError, match="topology"):
        other.load_state(read_checkpoint(tmp_path / "ok" / "latest.pt"))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(CheckpointError):
        tr.save(blocker / "sub" / "ck.pt")


def test_beta_floor_after_updates():
    cfg = TrainConfig(**TINY, total_steps=2 * 16 * 2, learning_rate=1e-2)
    tr = train(cfg)
    obs = ObservationNormalizer()(np.random.default_rng(0).normal(size=(500, 18)))
    (a, b), _ = tr.net.numpy_forward(obs)
    assert np.all(a > 1) and np.all(b > 1)


def test_reward_scale_affects_targets_not_metrics(tmp_path):
    base = TrainConfig(**TINY, total_steps=2 * 16, seed=4, reward_scale=1.0)
    a = Trainer(base)
    b = Trainer(replace(base, reward_scale=0.01))
    ma, mb = a.run_update(), b.run_update()
    # first rollout is identical: same seed, same initial weights
    assert ma["mean_step_reward"] == mb["mean_step_reward"]
    assert ma["mean_episode_reward"] == mb["mean_episode_reward"]
    assert mb["value_loss"] < ma["value_loss"] * 1e-2
    with pytest.raises(ConfigError):
        TrainConfig(reward_scale=0.0)
