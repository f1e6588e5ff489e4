"""Double deep Q-network over the 7-dim view state and 7 probe actions.

The Q function is a small explicit-backward MLP (7 -> hidden -> hidden -> 7,
ReLU). Training runs single-threaded for determinism: one master generator
seeds everything, evaluation rolls out greedily on generators derived from
the config seed, and the metrics stream is plain JSONL.

The default discount is 0: the reward already scores the view directly, so
the greedy policy is "rotate while some rotation is expected to read
better than the current view, hold otherwise". Holding ends the episode,
and any positive discount would make endless re-scanning outvalue every
stop, which is exactly the degenerate policy we do not want. The targets
still implement the decoupled double-DQN rule for any gamma.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nncore
from .anatomy import PriorSet, RewardWeights
from .env import N_ACTIONS, STATE_DIM, DeviationClass, EpisodeConfig, ProbeEnv
from .errors import NumericFault
from .imaging import ImageConfig
from .phantom import LabeledVolume

log = logging.getLogger("cardioview.agent")

# Area ratios are unbounded when the reference chamber is barely visible
# (a few LV pixels against a large excluded area), which would feed the
# MLP arbitrarily large inputs and regression targets. The approximator
# works on clipped copies; environment states and rewards are untouched.
OBS_CLIP = 5.0
TD_TARGET_RANGE = (-5.0, 2.0)


def _observe(state: np.ndarray) -> np.ndarray:
    return np.clip(state, -OBS_CLIP, OBS_CLIP)


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.0
    lr: float = 1e-3
    buffer_capacity: int = 50_000
    batch_size: int = 64
    target_sync_every: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 20_000
    total_steps: int = 30_000
    learn_start: int = 500
    eval_every: int = 5_000
    eval_episodes: int = 40
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.buffer_capacity <= 0 or self.batch_size <= 0:
            raise ValueError("buffer capacity and batch size must be positive")


# ---------------------------------------------------------------------------
# Q network
# ---------------------------------------------------------------------------

def qnet_init(rng: np.random.Generator, hidden: int = 64) -> dict[str, np.ndarray]:
    sizes = (STATE_DIM, hidden, hidden, N_ACTIONS)
    params: dict[str, np.ndarray] = {}
    for i in range(3):
        params[f"w{i}"] = nncore.uniform_init(rng, (sizes[i], sizes[i + 1]), sizes[i])
        params[f"b{i}"] = np.zeros(sizes[i + 1])
    return params


def qnet_forward(params: dict[str, np.ndarray], states: np.ndarray,
                 want_cache: bool = False):
    x = np.atleast_2d(states)
    z0 = nncore.linear(x, params["w0"], params["b0"])
    h0 = nncore.relu(z0)
    z1 = nncore.linear(h0, params["w1"], params["b1"])
    h1 = nncore.relu(z1)
    q = nncore.linear(h1, params["w2"], params["b2"])
    if want_cache:
        return q, (x, z0, h0, z1, h1)
    return q


def qnet_backward(params: dict[str, np.ndarray], cache, g_q: np.ndarray) -> dict[str, np.ndarray]:
    x, z0, h0, z1, h1 = cache
    g_h1, g_w2, g_b2 = nncore.linear_backward(g_q, h1, params["w2"])
    g_z1 = nncore.relu_backward(g_h1, z1)
    g_h0, g_w1, g_b1 = nncore.linear_backward(g_z1, h0, params["w1"])
    g_z0 = nncore.relu_backward(g_h0, z0)
    _, g_w0, g_b0 = nncore.linear_backward(g_z0, x, params["w0"])
    return {"w0": g_w0, "b0": g_b0, "w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def select_action(params: dict[str, np.ndarray], state: np.ndarray, eps: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties break to the lowest action index."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must be in [0, 1]")
    if rng.random() < eps:
        return int(rng.integers(N_ACTIONS))
    q = qnet_forward(params, _observe(state))[0]
    return int(np.argmax(q))


def dd_q_target(batch: dict[str, np.ndarray], q_online: dict[str, np.ndarray],
                q_target: dict[str, np.ndarray], gamma: float) -> np.ndarray:
    """Decoupled targets: the online net picks the next action, the target
    net evaluates it. Terminal transitions bootstrap nothing."""
    if batch["s"].shape[0] == 0:
        raise ValueError("empty batch")
    r = batch["r"]
    if gamma == 0.0:
        return r.copy()
    q_next_online = qnet_forward(q_online, batch["s_next"])
    a_star = np.argmax(q_next_online, axis=1)
    q_next_target = qnet_forward(q_target, batch["s_next"])
    boot = q_next_target[np.arange(len(a_star)), a_star]
    return r + gamma * (1.0 - batch["done"]) * boot


# ---------------------------------------------------------------------------
# replay buffer
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, STATE_DIM))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, STATE_DIM))
        self.done = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, s, a, r, s_next, done) -> None:
        i = self._next
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s_next[i] = s_next
        self.done[i] = float(done)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        idx = rng.integers(self._size, size=batch_size)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "s_next": self.s_next[idx],
            "done": self.done[idx],
        }


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _epsilon(cfg: TrainConfig, step: int) -> float:
    if step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)


def td_loss_grads(online: dict[str, np.ndarray], target: dict[str, np.ndarray],
                  batch: dict[str, np.ndarray], gamma: float):
    """Mean squared TD error on a batch and its parameter gradients."""
    batch = dict(batch, s=_observe(batch["s"]), s_next=_observe(batch["s_next"]))
    y = np.clip(dd_q_target(batch, online, target, gamma), *TD_TARGET_RANGE)
    q, cache = qnet_forward(online, batch["s"], want_cache=True)
    n = batch["s"].shape[0]
    taken = q[np.arange(n), batch["a"]]
    err = taken - y
    loss = float((err * err).mean())
    if not math.isfinite(loss):
        raise NumericFault("TD loss is non-finite")
    g_q = np.zeros_like(q)
    g_q[np.arange(n), batch["a"]] = 2.0 * err / n
    return loss, qnet_backward(online, cache, g_q)


class AdamState:
    """Adaptive per-parameter step sizes; the TD decision margins are tiny
    against the target scale, which plain fixed-step descent under-serves."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = 1 - self.beta1 ** self.t
        b2c = 1 - self.beta2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def td_step(online: dict[str, np.ndarray], target: dict[str, np.ndarray],
            batch: dict[str, np.ndarray], gamma: float, lr: float,
            opt: AdamState | None = None) -> float:
    """One gradient step on the mean squared TD error; returns the
    pre-update loss. Plain descent when no optimizer state is given."""
    loss, grads = td_loss_grads(online, target, batch, gamma)
    if opt is None:
        for k in online:
            online[k] = online[k] - lr * grads[k]
    else:
        opt.update(online, grads)
    return loss


def make_env_factory(volumes: list[LabeledVolume], priors: PriorSet,
                     weights: RewardWeights | None = None,
                     episode: EpisodeConfig | None = None,
                     img: ImageConfig | None = None):
    """Environment factory over a phantom pool: each call returns a fresh
    env on the pool entry chosen by the caller's generator."""
    if not volumes:
        raise ValueError("need at least one volume")

    def factory(rng: np.random.Generator) -> ProbeEnv:
        vol = volumes[int(rng.integers(len(volumes)))]
        return ProbeEnv(vol, priors, weights, episode, img, rng=rng)

    return factory


def train(env_factory, cfg: TrainConfig = TrainConfig()):
    """Run the double-DQN loop; returns (weights, metrics records).

    Deterministic given cfg.seed: exploration, phantom choice, replay
    sampling and evaluation all derive from one master generator.
    """
    master = np.random.default_rng(cfg.seed)
    online = qnet_init(master, cfg.hidden)
    target = {k: v.copy() for k, v in online.items()}
    buffer = ReplayBuffer(cfg.buffer_capacity)
    metrics: list[dict] = []

    env = env_factory(master)
    state, _ = env.reset(rng=master)
    recent_losses: list[float] = []
    opt = AdamState(online, cfg.lr)

    from .env import HOLD_ACTION

    for step in range(1, cfg.total_steps + 1):
        eps = _epsilon(cfg, step - 1)
        action = select_action(online, state, eps, master)
        result = env.step(action)
        buffer.push(state, action, result.reward, result.state, result.done)
        # holding is an identity transition with a known terminal value, so
        # visited states also contribute exact hold samples; thinned so
        # rotation transitions keep most of the gradient mass
        if step % 3 == 0:
            buffer.push(result.state, HOLD_ACTION, result.reward, result.state, True)
        state = result.state
        if result.done:
            env = env_factory(master)
            state, _ = env.reset(rng=master)

        if len(buffer) >= max(cfg.batch_size, cfg.learn_start):
            batch = buffer.sample(cfg.batch_size, master)
            recent_losses.append(td_step(online, target, batch, cfg.gamma, cfg.lr, opt))

        if step % cfg.target_sync_every == 0:
            target = {k: v.copy() for k, v in online.items()}

        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            stats = evaluate(online, env_factory, cfg.eval_episodes, seed=cfg.seed + step)
            loss = sum(recent_losses) / len(recent_losses) if recent_losses else 0.0
            recent_losses = []
            metrics.append(
                {
                    "step": step,
                    "eps": eps,
                    "loss": loss,
                    "eval_success": stats["success_rate"],
                    "eval_mean_steps": stats["mean_steps"],
                }
            )
            log.info(
                "step %d eps %.3f loss %.5f success %.3f steps %.1f",
                step, eps, loss, stats["success_rate"], stats["mean_steps"],
            )
    return online, metrics


def evaluate(weights: dict[str, np.ndarray], env_factory, episodes: int,
             seed: int = 0, episode_log: list | None = None) -> dict:
    """Greedy rollouts; reports overall and per-deviation-class stats keyed
    by the class of the initial view."""
    rng = np.random.default_rng(seed)
    per_class: dict[str, list[tuple[bool, int]]] = {c.value: [] for c in DeviationClass}
    for ep in range(episodes):
        env = env_factory(rng)
        state, dev_class = env.reset(rng=rng)
        steps = 0
        success = False
        records = []
        while True:
            action = select_action(weights, state, 0.0, rng)
            result = env.step(action)
            steps += 1
            if episode_log is not None:
                records.append(
                    {
                        "t": steps,
                        "action": action,
                        "state": [float(v) for v in result.state],
                        "reward": result.reward,
                        "done": result.done,
                        "success": result.info["success"],
                    }
                )
            state = result.state
            if result.done:
                success = result.info["success"]
                break
        per_class[dev_class.value].append((success, steps))
        if episode_log is not None:
            episode_log.append(records)

    all_runs = [run for runs in per_class.values() for run in runs]
    out = {
        "episodes": len(all_runs),
        "success_rate": sum(s for s, _ in all_runs) / len(all_runs),
        "mean_steps": sum(n for _, n in all_runs) / len(all_runs),
        "per_class": {},
    }
    for cls, runs in per_class.items():
        if runs:
            out["per_class"][cls] = {
                "episodes": len(runs),
                "success_rate": sum(s for s, _ in runs) / len(runs),
                "mean_steps": sum(n for _, n in runs) / len(runs),
            }
    return out


def write_metrics(path, metrics: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in metrics:
            fh.write(json.dumps(rec) + "\n")


def save_model(path, weights: dict[str, np.ndarray]) -> None:
    nncore.save_params(path, weights)


def load_model(path) -> dict[str, np.ndarray]:
    return nncore.load_params(path)
