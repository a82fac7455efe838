"""The hierarchical agent: manager over goal codes, goal-conditioned worker.

Imagined trajectories are time-major. For a horizon ``H`` and goal duration
``K`` the trajectory holds ``H + 1`` states, ``H`` actions and ``H`` rewards
per stream; the goal chosen at step ``i`` is the one the manager picked at
``K * (i // K)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .config import RunConfig
from .diffcore import (
    MLP,
    Adam,
    ConfigError,
    ContractViolation,
    Tensor,
    TrainingDivergence,
    check_finite,
)
from .goalae import GoalAutoencoder, GoalCode, row_entropy
from .policy import (
    CriticHead,
    EMANormalizer,
    actor_loss,
    combine_advantages,
    critic_loss,
    lambda_returns,
)
from .worldmodel import ModelState, ReplaySequence, WorldModel


# ----------------------------------------------------------- goal rewards


def max_cosine_reward(goal: Tensor, feat: Tensor) -> Tensor:
    """(g / m) . (s / m) with m = max(|g|, |s|); zero when both vectors vanish."""
    if goal.shape[-1] != feat.shape[-1]:
        raise ContractViolation("goal and state widths differ")
    m = torch.maximum(goal.norm(dim=-1), feat.norm(dim=-1))
    dot = (goal * feat).sum(-1)
    safe = torch.where(m > 0, m, torch.ones_like(m))
    return torch.where(m > 0, dot / safe**2, torch.zeros_like(dot))


def goal_reward(goal: Tensor, feat: Tensor, kind: str = "max_cosine") -> Tensor:
    if kind == "max_cosine":
        return max_cosine_reward(goal, feat)
    if kind == "inner":
        return (goal * feat).sum(-1)
    if kind == "inner_normed":
        n = goal.norm(dim=-1)
        safe = torch.where(n > 0, n, torch.ones_like(n))
        return torch.where(n > 0, (goal * feat).sum(-1) / safe**2, torch.zeros_like(n))
    if kind == "l2":
        return -(goal - feat).norm(dim=-1)
    raise ConfigError(f"unknown goal reward {kind!r}")


# ------------------------------------------------------------------ actors


def zero_head(net: MLP) -> MLP:
    """Zero the output layer so a fresh policy starts uniform (or at its prior)."""
    nn.init.zeros_(net.head.weight)
    nn.init.zeros_(net.head.bias)
    return net


class CodeActor(nn.Module):
    """Manager head: a vector of L categoricals with C classes each."""

    def __init__(self, feature_dim: int, latents: int, classes: int, layers: int, units: int):
        super().__init__()
        self.latents, self.classes = latents, classes
        self.net = zero_head(MLP(feature_dim, latents * classes, layers, units))

    def dist(self, feat: Tensor) -> "CodeDist":
        return CodeDist(self.net(feat).reshape(*feat.shape[:-1], self.latents, self.classes))


@dataclass
class CodeDist:
    logits: Tensor

    def sample(self, mode: bool = False) -> Tensor:
        c = self.logits.shape[-1]
        if mode:
            idx = self.logits.argmax(-1)
        else:
            probs = torch.softmax(self.logits, -1)
            idx = torch.multinomial(probs.reshape(-1, c), 1).reshape(probs.shape[:-1])
        return F.one_hot(idx, c).float().flatten(-2)

    def log_prob(self, action: Tensor) -> Tensor:
        return GoalCode(self.logits, action.reshape(self.logits.shape)).log_prob()

    def entropy(self) -> Tensor:
        return row_entropy(self.logits).sum(-1)


class GaussianGoalActor(nn.Module):
    """Ablation manager emitting a feature-width goal vector directly."""

    def __init__(self, feature_dim: int, layers: int, units: int, min_std: float = 0.1):
        super().__init__()
        self.min_std = min_std
        self.net = zero_head(MLP(feature_dim, 2 * feature_dim, layers, units))

    def dist(self, feat: Tensor) -> "GaussianDist":
        mean, std = self.net(feat).chunk(2, -1)
        return GaussianDist(torch.distributions.Normal(mean, F.softplus(std) + self.min_std))


@dataclass
class GaussianDist:
    normal: torch.distributions.Normal

    def sample(self, mode: bool = False) -> Tensor:
        return self.normal.mean if mode else self.normal.sample()

    def log_prob(self, action: Tensor) -> Tensor:
        return self.normal.log_prob(action).sum(-1)

    def entropy(self) -> Tensor:
        return self.normal.entropy().sum(-1)


class WorkerActor(nn.Module):
    """Categorical policy over primitive actions given [features, goal]."""

    def __init__(self, feature_dim: int, action_dim: int, layers: int, units: int):
        super().__init__()
        self.net = zero_head(MLP(2 * feature_dim, action_dim, layers, units))

    def dist(self, feat: Tensor, goal: Tensor) -> torch.distributions.Categorical:
        return torch.distributions.Categorical(logits=self.net(torch.cat([feat, goal], -1)))


# --------------------------------------------------------------- acting


@dataclass
class ActState:
    """Per-environment recurrent state carried between ``act`` calls."""

    latent: ModelState
    prev_action: Tensor
    step: Tensor  # steps since episode start, int64
    goal: Tensor
    code: Tensor


class ActingPolicy(nn.Module):
    """The modules needed to act; a deep copy serves as an actor snapshot."""

    def __init__(self, wm: WorldModel, goal_ae: GoalAutoencoder, manager: nn.Module,
                 worker: WorkerActor, goal_duration: int, continuous_goals: bool):
        super().__init__()
        self.wm, self.goal_ae, self.manager, self.worker = wm, goal_ae, manager, worker
        self.goal_duration = goal_duration
        self.continuous_goals = continuous_goals

    def goal_from_action(self, action: Tensor) -> Tensor:
        return action if self.continuous_goals else self.goal_ae.decode(action)

    def initial(self, n: int) -> ActState:
        f = self.wm.feature_dim
        code_dim = f if self.continuous_goals else self.goal_ae.code_dim
        return ActState(self.wm.initial(n), torch.zeros(n, self.wm.action_dim),
                        torch.zeros(n, dtype=torch.long), torch.zeros(n, f), torch.zeros(n, code_dim))

    @torch.no_grad()
    def act(self, image: Tensor, is_first: Tensor, state: ActState | None = None,
            mode: bool = False, manager_mode: bool | None = None
            ) -> tuple[Tensor, ActState, dict[str, Tensor]]:
        """One acting step for a batch of environments.

        ``mode`` selects distribution modes instead of samples; ``manager_mode``
        overrides it for the manager alone. Returns one-hot actions, the updated
        state, and a dict with the posterior features, the active goal and
        whether it was refreshed.
        """
        manager_mode = mode if manager_mode is None else manager_mode
        n = image.shape[0]
        state = state or self.initial(n)
        is_first = torch.as_tensor(is_first, dtype=torch.bool)
        step = torch.where(is_first, torch.zeros_like(state.step), state.step)
        embed = self.wm.encoder(image)
        post, _ = self.wm.obs_step(state.latent, state.prev_action, embed, is_first, sample=not mode)
        feat = post.features
        refresh = step % self.goal_duration == 0
        goal, code = state.goal.clone(), state.code.clone()
        if bool(refresh.any()):
            new_code = self.manager.dist(feat[refresh]).sample(manager_mode)
            code[refresh] = new_code
            goal[refresh] = self.goal_from_action(new_code)
        dist = self.worker.dist(feat, goal)
        idx = dist.probs.argmax(-1) if mode else dist.sample()
        action = F.one_hot(idx, self.wm.action_dim).float()
        new = ActState(post, action, step + 1, goal, code)
        return action, new, {"features": feat, "goal": goal, "code": code, "refresh": refresh}


# ------------------------------------------------------------ trajectories


@dataclass
class ImaginedTrajectory:
    features: Tensor  # (H + 1, N, F)
    actions: Tensor  # (H, N, A)
    codes: Tensor  # (H, N, code width), constant over each K-window
    goals: Tensor  # (H, N, F)
    reward_extr: Tensor  # (H, N)
    reward_expl: Tensor  # (H, N)
    reward_goal: Tensor  # (H, N)

    @property
    def horizon(self) -> int:
        return self.actions.shape[0]


@dataclass
class AbstractTrajectory:
    features: Tensor  # (H / K + 1, N, F)
    actions: Tensor  # (H / K, N, code width)
    rewards: dict[str, Tensor]  # stream -> (H / K, N)


@dataclass
class WorkerSegments:
    features: Tensor  # (K + 1, M, F), M = N * H / K
    goals: Tensor  # (K + 1, M, F), constant along time
    actions: Tensor  # (K, M, A)
    rewards: dict[str, Tensor]  # stream -> (K, M)


STREAM_REWARDS = {"extr": "reward_extr", "expl": "reward_expl", "goal": "reward_goal",
                  "task": "reward_extr"}


def _check_divisible(horizon: int, k: int) -> None:
    if k < 1 or horizon % k:
        raise ConfigError(f"horizon {horizon} is not a multiple of goal duration {k}")


def abstract_trajectory(traj: ImaginedTrajectory, k: int, streams=("extr", "expl")) -> AbstractTrajectory:
    """Keep every K-th state and sum each stream's rewards over K-windows."""
    h = traj.horizon
    _check_divisible(h, k)
    n = traj.features.shape[1]
    rewards = {
        s: getattr(traj, STREAM_REWARDS[s]).reshape(h // k, k, n).sum(1) for s in streams
    }
    return AbstractTrajectory(traj.features[::k], traj.codes[::k], rewards)


def split_worker_trajectory(traj: ImaginedTrajectory, k: int,
                            streams=("goal",)) -> WorkerSegments:
    """Cut into H / K segments of K transitions, stacked along the batch axis.

    Segment ``j`` covers states ``jK .. jK + K`` (the last one only
    bootstraps) under the goal chosen at ``jK``.
    """
    h = traj.horizon
    _check_divisible(h, k)
    segs = h // k
    feats = torch.cat([traj.features[j * k: j * k + k + 1] for j in range(segs)], 1)
    goal = torch.cat([traj.goals[j * k] for j in range(segs)], 0)
    goals = goal[None].expand(k + 1, *goal.shape)
    actions = torch.cat([traj.actions[j * k: (j + 1) * k] for j in range(segs)], 1)
    rewards = {
        s: torch.cat([getattr(traj, STREAM_REWARDS[s])[j * k: (j + 1) * k] for j in range(segs)], 1)
        for s in streams
    }
    return WorkerSegments(feats, goals, actions, rewards)


# ------------------------------------------------------------------- agent


class Director(nn.Module):
    def __init__(self, config: RunConfig, action_dim: int):
        super().__init__()
        self.config = config
        m, g, p = config.model, config.goal, config.policy
        self.action_dim = action_dim
        self.wm = WorldModel(action_dim, m.image_size, m.deter, m.stoch, m.min_std,
                             m.mlp_layers, m.mlp_units, m.cnn_depth, m.kl_scale)
        f = self.wm.feature_dim
        self.goal_ae = GoalAutoencoder(f, g.latents, g.classes, g.beta, m.mlp_layers,
                                       m.mlp_units, g.samples)
        if p.continuous_goals:
            self.manager = GaussianGoalActor(f, m.mlp_layers, m.mlp_units)
        else:
            self.manager = CodeActor(f, g.latents, g.classes, m.mlp_layers, m.mlp_units)
        self.worker = WorkerActor(f, action_dim, m.mlp_layers, m.mlp_units)

        self.manager_weights = {"extr": p.extr_weight}
        if p.explore in ("manager", "both"):
            self.manager_weights["expl"] = p.expl_weight
        self.worker_weights = {"goal": p.worker_goal_weight}
        if p.worker_task_weight > 0:
            self.worker_weights["task"] = p.worker_task_weight
        if p.explore in ("worker", "both"):
            self.worker_weights["expl"] = p.expl_weight
        self.manager_critics = nn.ModuleDict(
            {s: CriticHead(f, m.mlp_layers, m.mlp_units) for s in self.manager_weights})
        self.worker_critics = nn.ModuleDict(
            {s: CriticHead(2 * f, m.mlp_layers, m.mlp_units) for s in self.worker_weights})
        self.normalizers = {
            f"{who}_{s}": EMANormalizer(p.norm_decay, p.norm_floor)
            for who, weights in (("manager", self.manager_weights), ("worker", self.worker_weights))
            for s in weights
        }
        self.policy = ActingPolicy(self.wm, self.goal_ae, self.manager, self.worker,
                                   p.goal_duration, p.continuous_goals)
        o = config.optim
        self.optimizers = {
            "wm": Adam(self.wm.parameters(), o),
            "goal_ae": Adam(self.goal_ae.parameters(), o),
            "manager_actor": Adam(self.manager.parameters(), o),
            "manager_critic": Adam(self.manager_critics.parameters(), o),
            "worker_actor": Adam(self.worker.parameters(), o),
            "worker_critic": Adam(self.worker_critics.parameters(), o),
        }
        self.train_steps = 0

    # The acting policy aliases the same modules; keep it out of state_dict.
    def state_dict(self, *args, **kwargs):
        return {k: v for k, v in super().state_dict(*args, **kwargs).items()
                if not k.startswith("policy.")}

    def load_state_dict(self, state, strict: bool = True):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = {k for k in set(state) - set(own) if not k.startswith("policy.")}
        mismatched = [k for k in own if k in state and tuple(own[k].shape) != tuple(state[k].shape)]
        if strict and (missing or extra or mismatched):
            raise ConfigError(
                f"checkpoint does not match config: missing={sorted(missing)[:3]} "
                f"unexpected={sorted(extra)[:3]} shape={mismatched[:3]}")
        with torch.no_grad():
            for k, v in own.items():
                if k in state:
                    v.copy_(state[k])

    def snapshot(self) -> ActingPolicy:
        return copy.deepcopy(self.policy)

    def act(self, image, is_first, state=None, mode=False):
        return self.policy.act(torch.as_tensor(image, dtype=torch.float32), is_first, state, mode)

    # ------------------------------------------------------------ imagine

    @torch.no_grad()
    def imagine(self, start: ModelState, horizon: int | None = None) -> ImaginedTrajectory:
        """Roll manager and worker forward in the model from ``start`` (N, .)."""
        p = self.config.policy
        horizon = horizon or p.horizon
        k = p.goal_duration
        state = start
        feats, actions, codes, goals = [state.features], [], [], []
        code = goal = None
        for i in range(horizon):
            feat = state.features
            if i % k == 0:
                code = self.manager.dist(feat).sample()
                goal = self.policy.goal_from_action(code)
            idx = self.worker.dist(feat, goal).sample()
            action = F.one_hot(idx, self.action_dim).float()
            state = self.wm.imagine_step(state, action)
            feats.append(state.features)
            actions.append(action)
            codes.append(code)
            goals.append(goal)
        feats = torch.stack(feats)
        goals_t = torch.stack(goals)
        nxt = feats[1:]
        return ImaginedTrajectory(
            features=feats,
            actions=torch.stack(actions),
            codes=torch.stack(codes),
            goals=goals_t,
            reward_extr=self.wm.predict_reward(nxt),
            reward_expl=self.goal_ae.exploration_reward(nxt),
            reward_goal=goal_reward(goals_t, nxt, p.goal_reward),
        )

    # ------------------------------------------------------------ updates

    def _returns_and_advantages(self, who: str, critics: nn.ModuleDict, weights: dict,
                                critic_in: Tensor, rewards: dict, discount: float):
        p = self.config.policy
        closs = 0.0
        advs, ws, rets = [], [], {}
        for s, w in weights.items():
            values = critics[s](critic_in)
            ret = lambda_returns(rewards[s], values.detach(), discount, p.return_lambda)
            closs = closs + critic_loss(values[:-1], ret)
            norm = self.normalizers[f"{who}_{s}"]
            norm.update(ret)
            advs.append((ret - values[:-1].detach()) / norm.scale)
            ws.append(w)
            rets[s] = ret
        return closs, combine_advantages(advs, ws), rets

    def manager_losses(self, traj: ImaginedTrajectory):
        p = self.config.policy
        k = p.goal_duration
        abst = abstract_trajectory(traj, k, tuple(self.manager_weights))
        disc = p.discount ** k if p.abstract_discount == "power" else p.discount
        closs, adv, rets = self._returns_and_advantages(
            "manager", self.manager_critics, self.manager_weights, abst.features, abst.rewards, disc)
        dist = self.manager.dist(abst.features[:-1])
        aloss = actor_loss(dist.log_prob(abst.actions), adv, dist.entropy(), p.manager_entropy)
        return aloss, closs, {"manager_return": rets["extr"].mean().item(),
                              "manager_adv_std": adv.std().item()}

    def worker_losses(self, traj: ImaginedTrajectory):
        p = self.config.policy
        segs = split_worker_trajectory(traj, p.goal_duration, tuple(self.worker_weights))
        critic_in = torch.cat([segs.features, segs.goals], -1)
        closs, adv, rets = self._returns_and_advantages(
            "worker", self.worker_critics, self.worker_weights, critic_in, segs.rewards, p.discount)
        dist = self.worker.dist(segs.features[:-1], segs.goals[:-1])
        logp = dist.log_prob(segs.actions.argmax(-1))
        aloss = actor_loss(logp, adv, dist.entropy(), p.worker_entropy)
        return aloss, closs, {"worker_return": rets["goal"].mean().item()}

    def _update(self, name: str, loss: Tensor) -> None:
        check_finite(loss.detach(), f"{name} loss")
        self.optimizers[name].minimize(loss)

    def train_step(self, batch: ReplaySequence) -> dict[str, float]:
        """World model, goal autoencoder, then manager and worker updates."""
        metrics: dict[str, float] = {"divergence": 0.0}
        try:
            wm_loss, post, m = self.wm.loss(batch)
            self._update("wm", wm_loss)
            metrics.update(m)
            feats = post.features.detach()
            ae_loss, m = self.goal_ae.loss(feats.reshape(-1, feats.shape[-1]))
            self._update("goal_ae", ae_loss)
            metrics.update(m)
            start = post.detach().map(lambda x: x.reshape(-1, x.shape[-1]))
            traj = self.imagine(start)
            m_actor, m_critic, m = self.manager_losses(traj)
            self._update("manager_actor", m_actor)
            self._update("manager_critic", m_critic)
            metrics.update(m)
            w_actor, w_critic, m = self.worker_losses(traj)
            self._update("worker_actor", w_actor)
            self._update("worker_critic", w_critic)
            metrics.update(m)
        except TrainingDivergence:
            metrics["divergence"] = 1.0
            return metrics
        metrics.update({
            "manager_actor_loss": m_actor.item(),
            "manager_critic_loss": m_critic.item(),
            "worker_actor_loss": w_actor.item(),
            "worker_critic_loss": w_critic.item(),
            "extr_reward_mean": traj.reward_extr.mean().item(),
            "expl_reward_mean": traj.reward_expl.mean().item(),
            "goal_reward_mean": traj.reward_goal.mean().item(),
        })
        self.train_steps += 1
        return metrics

    # -------------------------------------------------------- persistence

    def parameters_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())

    def state_tensors(self) -> dict[str, Tensor]:
        out = {f"params/{k}": v for k, v in self.state_dict().items()}
        for name, opt in self.optimizers.items():
            out.update(opt.state_tensors(f"opt/{name}"))
        return out

    def state_meta(self) -> dict:
        return {
            "normalizers": {k: n.state_dict() for k, n in self.normalizers.items()},
            "optimizer_steps": {k: o.step_counts() for k, o in self.optimizers.items()},
            "train_steps": self.train_steps,
            "action_dim": self.action_dim,
        }

    def load_state(self, tensors: dict[str, Tensor], meta: dict) -> None:
        params = {k[len("params/"):]: v for k, v in tensors.items() if k.startswith("params/")}
        self.load_state_dict(params)
        for name, opt in self.optimizers.items():
            opt.load_state(f"opt/{name}", tensors, meta["optimizer_steps"].get(name, {}))
        for k, state in meta["normalizers"].items():
            if k not in self.normalizers:
                raise ConfigError(f"checkpoint normalizer {k!r} not used by this config")
            self.normalizers[k].load_state_dict(state)
        self.train_steps = int(meta.get("train_steps", 0))


def to_numpy_actions(actions: Tensor) -> np.ndarray:
    return actions.argmax(-1).cpu().numpy()
