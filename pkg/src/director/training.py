"""Training and evaluation loops.

Two acting modes share the learner:

``sync``
    All environments are stepped in lockstep from the learner thread with one
    batched policy call per step. Fully deterministic for a fixed seed.
``async``
    One thread per environment, each acting with a snapshot of the policy that
    the learner replaces after every train step. Transitions reach the learner
    through a bounded queue.

One train step runs per ``train_every`` environment steps summed over all
environments. Every train step appends a row to ``metrics.jsonl``.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .agent import ActingPolicy, Director
from .config import RunConfig, from_dict
from .diffcore import ConfigError, load_checkpoint, save_checkpoint
from .envs import make_env
from .replay import ReplayBuffer

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRIC_KEYS = (
    "env_steps", "train_step", "wm_loss", "kl", "goal_ae_loss", "expl_reward_mean",
    "goal_reward_mean", "manager_return", "worker_return", "episode_return",
    "image_loss", "reward_loss", "goal_ae_recon", "goal_ae_kl", "extr_reward_mean",
    "manager_actor_loss", "manager_critic_loss", "worker_actor_loss", "worker_critic_loss",
    "episodes", "reward_events", "divergence",
)

EXIT_OK, EXIT_DIVERGED, EXIT_INTERRUPTED = 0, 2, 130


@dataclass
class TrainResult:
    status: int
    env_steps: int
    train_steps: int
    logdir: Path
    episode_returns: list[float] = field(default_factory=list)
    reward_events: int = 0
    first_reward_step: int | None = None

    @property
    def metrics_path(self) -> Path:
        return self.logdir / "metrics.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return self.logdir / "checkpoint.ckpt"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def make_envs(config: RunConfig, offset: int = 0):
    return [make_env(config.env, seed=config.seed * 1000 + offset + i,
                     size=config.model.image_size, task_seed=config.seed)
            for i in range(config.parallel_envs)]


def make_eval_env(config: RunConfig):
    """Same task as training, separate position stream."""
    return make_env(config.env, seed=config.seed * 1000 + 999, size=config.model.image_size,
                    task_seed=config.seed)


def save_agent(path: Path, agent: Director, config: RunConfig, env_steps: int,
               buffer: ReplayBuffer | None = None, extra: dict | None = None) -> None:
    meta = {
        "kind": "director",
        "config": config.to_dict(),
        "env_steps": env_steps,
        "agent": agent.state_meta(),
        "buffer": buffer.cursor() if buffer is not None else None,
        "metrics_version": METRICS_VERSION,
    }
    meta.update(extra or {})
    save_checkpoint(path, agent.state_tensors(), meta)


def load_agent(path: str | Path, config: RunConfig | None = None) -> tuple[Director, RunConfig, dict]:
    """Rebuild an agent from a checkpoint, optionally against a given config."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "director" or "config" not in meta:
        raise ConfigError(f"{path} is not an agent checkpoint")
    stored = from_dict(meta["config"])
    config = config or stored
    agent = Director(config, int(meta["agent"]["action_dim"]))
    agent.load_state(tensors, meta["agent"])
    return agent, config, meta


class MetricsWriter:
    def __init__(self, path: Path, append: bool = False):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.file = open(path, "a" if append else "w")
        self.last_env_steps = -1

    def write(self, row: dict) -> None:
        if row["env_steps"] < self.last_env_steps:
            raise RuntimeError("metrics env_steps must be monotone")
        self.last_env_steps = row["env_steps"]
        ordered = {k: row.get(k) for k in METRIC_KEYS}
        self.file.write(json.dumps(ordered) + "\n")
        self.file.flush()

    def close(self) -> None:
        self.file.close()


def evaluate(policy: ActingPolicy | None, env, episodes: int, oracle: bool = False,
             max_steps: int | None = None) -> dict:
    """Run episodes with the distribution modes (or the scripted oracle)."""
    returns = []
    for _ in range(episodes):
        obs, first, state, total, t = env.reset(), True, None, 0.0, 0
        while True:
            if oracle:
                action = env.oracle()
            else:
                a, state, _ = policy.act(torch.as_tensor(obs[None]), torch.tensor([first]), state,
                                         mode=True)
                action = int(a.argmax())
            out = env.step(action)
            total += out.reward
            obs, first, t = out.observation, False, t + 1
            if out.done or (max_steps is not None and t >= max_steps):
                break
        returns.append(total)
    arr = np.asarray(returns, np.float64)
    return {"episodes": episodes, "returns": returns, "mean": float(arr.mean()),
            "std": float(arr.std())}


class Trainer:
    """Owns the agent, replay buffer and logging for one run."""

    def __init__(self, config: RunConfig, logdir: str | Path | None = None,
                 resume: str | Path | None = None):
        torch.set_num_threads(1)
        self.config = config
        self.logdir = Path(logdir or config.logdir)
        self.logdir.mkdir(parents=True, exist_ok=True)
        seed_everything(config.seed)
        self.envs = make_envs(config)
        self.action_dim = self.envs[0].num_actions
        self.env_steps = 0
        if resume is not None:
            self.agent, _, meta = load_agent(resume, config)
            self.env_steps = int(meta["env_steps"])
        else:
            self.agent = Director(config, self.action_dim)
        size = config.model.image_size
        self.buffer = ReplayBuffer(config.replay_capacity, (size, size, 3), self.action_dim,
                                   config.parallel_envs, config.seed)
        config.save(self.logdir / "config.yaml")
        self.metrics = MetricsWriter(self.logdir / "metrics.jsonl", append=resume is not None)
        self.episode_returns: list[float] = []
        self.reward_events = 0
        self.first_reward_step: int | None = None
        self.next_eval = self.env_steps + config.eval_every
        self.next_ckpt = self.env_steps + config.checkpoint_every

    # ----------------------------------------------------------- helpers

    def _record(self, reward: float) -> None:
        if reward > 0:
            self.reward_events += 1
            if self.first_reward_step is None:
                self.first_reward_step = self.env_steps

    def _train(self) -> int | None:
        cfg = self.config
        if not self.buffer.ready(cfg.batch_length):
            return None
        batch = self.buffer.sample(cfg.batch_size, cfg.batch_length)
        m = self.agent.train_step(batch)
        m.update(env_steps=self.env_steps, train_step=self.agent.train_steps,
                 episode_return=self.episode_returns[-1] if self.episode_returns else None,
                 episodes=len(self.episode_returns), reward_events=self.reward_events)
        self.metrics.write(m)
        if m["divergence"] or not self.agent.parameters_finite():
            path = self.logdir / "diverged.ckpt"
            save_agent(path, self.agent, cfg, self.env_steps, self.buffer,
                       {"diagnostic": "non-finite loss or parameters"})
            log.error("training diverged at env step %d; state saved to %s", self.env_steps, path)
            return EXIT_DIVERGED
        return None

    def _periodic(self) -> None:
        cfg = self.config
        if self.env_steps >= self.next_eval:
            self.next_eval += cfg.eval_every
            stats = evaluate(self.agent.policy, make_eval_env(cfg), cfg.eval_episodes)
            with open(self.logdir / "eval.jsonl", "a") as f:
                f.write(json.dumps({"env_steps": self.env_steps, **stats}) + "\n")
        if self.env_steps >= self.next_ckpt:
            self.next_ckpt += cfg.checkpoint_every
            self.checkpoint()

    def checkpoint(self) -> Path:
        path = self.logdir / "checkpoint.ckpt"
        save_agent(path, self.agent, self.config, self.env_steps, self.buffer)
        return path

    def _result(self, status: int) -> TrainResult:
        return TrainResult(status, self.env_steps, self.agent.train_steps, self.logdir,
                           list(self.episode_returns), self.reward_events, self.first_reward_step)

    # ------------------------------------------------------------- loops

    def run(self, steps: int | None = None, stop_on_reward: bool = False) -> TrainResult:
        total = steps if steps is not None else self.config.steps
        try:
            if self.config.mode == "sync":
                status = self._run_sync(total, stop_on_reward)
            else:
                status = self._run_async(total, stop_on_reward)
        except KeyboardInterrupt:
            status = EXIT_INTERRUPTED
        finally:
            self.metrics.close()
        if status != EXIT_DIVERGED:
            self.checkpoint()
        return self._result(status)

    def _run_sync(self, total: int, stop_on_reward: bool) -> int:
        cfg = self.config
        n = len(self.envs)
        obs = np.stack([env.reset() for env in self.envs])
        first = np.ones(n, bool)
        returns = np.zeros(n)
        state = None
        while self.env_steps < total:
            actions, state, _ = self.agent.act(obs, torch.as_tensor(first), state)
            act_np = actions.numpy()
            before = self.env_steps
            for i, env in enumerate(self.envs):
                out = env.step(int(act_np[i].argmax()))
                self.buffer.add(i, obs[i], act_np[i], out.reward, bool(first[i]))
                self.env_steps += 1
                self._record(out.reward)
                returns[i] += out.reward
                if out.done:
                    self.episode_returns.append(float(returns[i]))
                    returns[i] = 0.0
                    obs[i], first[i] = env.reset(), True
                else:
                    obs[i], first[i] = out.observation, False
            for _ in range(self.env_steps // cfg.train_every - before // cfg.train_every):
                status = self._train()
                if status is not None:
                    return status
            self._periodic()
            if stop_on_reward and self.reward_events:
                break
        return EXIT_OK

    def _run_async(self, total: int, stop_on_reward: bool) -> int:
        cfg = self.config
        transitions: queue.Queue = queue.Queue(maxsize=4 * cfg.train_every)
        stop = threading.Event()
        holder = {"policy": self.agent.snapshot()}
        threads = [
            threading.Thread(target=_actor_loop, args=(i, env, holder, transitions, stop),
                             daemon=True)
            for i, env in enumerate(self.envs)
        ]
        for t in threads:
            t.start()
        status = EXIT_OK
        try:
            while self.env_steps < total:
                i, obs, action, reward, first, ep_return = transitions.get()
                self.buffer.add(i, obs, action, reward, first)
                self.env_steps += 1
                self._record(reward)
                if ep_return is not None:
                    self.episode_returns.append(ep_return)
                if self.env_steps % cfg.train_every == 0:
                    res = self._train()
                    if res is not None:
                        status = res
                        break
                    holder["policy"] = self.agent.snapshot()
                self._periodic()
                if stop_on_reward and self.reward_events:
                    break
        finally:
            stop.set()
            while not transitions.empty():
                transitions.get_nowait()
            for t in threads:
                t.join(timeout=5)
        return status


def _actor_loop(index: int, env, holder: dict, out: queue.Queue, stop: threading.Event) -> None:
    torch.set_num_threads(1)
    obs, first, state, total = env.reset(), True, None, 0.0
    while not stop.is_set():
        policy = holder["policy"]
        a, state, _ = policy.act(torch.as_tensor(obs[None]), torch.tensor([first]), state)
        action = a[0].numpy()
        step = env.step(int(action.argmax()))
        total += step.reward
        ep_return = None
        if step.done:
            ep_return, total = total, 0.0
        item = (index, obs, action, step.reward, first, ep_return)
        while not stop.is_set():
            try:
                out.put(item, timeout=0.1)
                break
            except queue.Full:
                continue
        if step.done:
            obs, first = env.reset(), True
        else:
            obs, first = step.observation, False


def run_train(config: RunConfig, logdir: str | Path | None = None,
              resume: str | Path | None = None, stop_on_reward: bool = False) -> TrainResult:
    trainer = Trainer(config, logdir, resume)
    return trainer.run(stop_on_reward=stop_on_reward)


def run_eval(checkpoint: str | Path | None = None, episodes: int = 1,
             config: RunConfig | None = None, oracle: bool = False, **overrides) -> dict:
    """Mean, std and per-episode returns of the mode policy (or the oracle).

    ``overrides`` (e.g. ``env``, ``seed``) apply on top of the checkpoint's
    stored config, or of ``config`` when one is given.
    """
    policy = None
    if not oracle:
        if checkpoint is None:
            raise ConfigError("evaluation needs a checkpoint unless the oracle is used")
        agent, stored, _ = load_agent(checkpoint)
        config = config or stored
        policy = agent.policy
    if config is None:
        raise ConfigError("oracle evaluation needs a config")
    config = config.override(**{k: v for k, v in overrides.items() if v is not None})
    return evaluate(policy, make_eval_env(config), episodes, oracle=oracle)
