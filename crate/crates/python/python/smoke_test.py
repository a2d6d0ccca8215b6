"""Smoke test for the shieldrl_py extension.

Build and install first:

    pip install --no-build-isolation -e crates/python
    python3 crates/python/python/smoke_test.py
"""

import math
import random
import tempfile
from pathlib import Path

import shieldrl_py as sr

# tiny budgets: this checks the plumbing, not learning
SMALL = [
    "fe.episodes=24",
    "fe.heldout_episodes=4",
    "fe.steps_per_episode=60",
    "fe.epochs=30",
    "experiment.total_steps=1200",
    "train.steps_per_epoch=600",
]


def check_config():
    cfg = sr.Config(overrides=SMALL)
    again = sr.Config(cfg.to_toml())
    assert again.to_dict() == cfg.to_dict()
    try:
        sr.Config("[experiment]\nbogus = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")
    return cfg


def check_env(cfg):
    env = sr.Env(cfg, seed=3, phi=[1.0, 1.2, 0.8, 1.0])
    assert env.phi == [1.0, 1.2, 0.8, 1.0]
    obs = env.observation()
    steps = 0
    while not env.done:
        obs, reward, cost, done = env.step([random.uniform(-1, 1), random.uniform(-1, 1)])
        assert cost in (0, 1) and math.isfinite(reward)
        assert (cost == 1) == (env.nu() <= 0)
        steps += 1
    assert done and steps > 0 and len(obs) == len(env.observation())


def check_acp():
    acp = sr.Acp(delta=0.05, warmup_len=50)
    assert acp.radius == math.inf
    rng = random.Random(0)
    for _ in range(5000):
        acp.observe(abs(rng.gauss(0, 1)))
    assert acp.warmed_up and 0.02 < acp.miss_rate < 0.08, acp.miss_rate


def check_pipeline(cfg, tmp):
    basis = sr.pretrain_fe(cfg)
    path = tmp / "basis.json"
    basis.save(str(path))
    basis = sr.Basis.load(str(path))

    env = sr.Env(cfg, seed=1)
    states, actions, nexts = [], [], []
    for _ in range(40):
        a = [random.uniform(-1, 1), random.uniform(-1, 1)]
        s = env.kinematics
        env.step(a)
        states.append(s)
        actions.append(a)
        nexts.append(env.kinematics)
    coef, residual = basis.fit(states, actions, nexts)
    assert len(coef) == basis.k and residual >= 0
    assert len(basis.predict_next_state(coef, states[0], actions[0])) == 4

    ckpt, records = sr.train(cfg, basis)
    # epochs end on episode boundaries
    assert ckpt.epochs_done == 2 and ckpt.steps_done >= 1200
    assert [r["kind"] for r in records].count("epoch") == 2
    ckpt.save(str(tmp / "ckpt.json"))
    ckpt = sr.Checkpoint.load(str(tmp / "ckpt.json"))

    summary = ckpt.evaluate(episodes=3)
    assert summary["episodes"] == 3 and summary["shield"]
    assert ckpt.evaluate(episodes=0)["episodes"] == 0
    ood = ckpt.evaluate(episodes=2, ood=True, shield=False)
    assert ood["ood"] and not ood["shield"]
    return summary


def check_acceptance():
    report = sr.run_acceptance("conformal")
    assert all(r["pass"] for r in report), report
    try:
        sr.run_acceptance("nope")
    except ValueError as e:
        assert "conformal" in str(e)
    else:
        raise AssertionError("unknown suite accepted")


def main():
    random.seed(0)
    cfg = check_config()
    check_env(cfg)
    check_acp()
    with tempfile.TemporaryDirectory() as d:
        summary = check_pipeline(cfg, Path(d))
    check_acceptance()
    print("smoke test ok:", {k: summary[k] for k in ("mean_return", "cost_rate", "shield_trigger_rate")})


if __name__ == "__main__":
    main()
