"""Actor-critic pieces shared by the manager and the worker.

All trajectory tensors are time-major: ``values`` is (T, N), rewards and
returns are (T - 1, N).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .diffcore import MLP, ContractViolation, Tensor


def lambda_returns(rewards: Tensor, values: Tensor, discount: float | Tensor, lam: float) -> Tensor:
    """Backward recursion V_t = r_t + g((1 - lam) v_{t+1} + lam V_{t+1}), V_T = v_T."""
    if values.shape[0] != rewards.shape[0] + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ContractViolation(
            f"need len(values) == len(rewards) + 1, got {values.shape[0]} and {rewards.shape[0]}")
    disc = torch.as_tensor(discount, dtype=rewards.dtype).expand_as(rewards)
    out = []
    last = values[-1]
    for t in reversed(range(rewards.shape[0])):
        last = rewards[t] + disc[t] * ((1 - lam) * values[t + 1] + lam * last)
        out.append(last)
    return torch.stack(out[::-1])


def critic_loss(values: Tensor, targets: Tensor) -> Tensor:
    """Half squared error against stop-gradient targets, summed over time."""
    return 0.5 * ((values - targets.detach()) ** 2).sum(0).mean()


def actor_loss(log_probs: Tensor, advantages: Tensor, entropies: Tensor, eta: float) -> Tensor:
    return -(log_probs * advantages.detach() + eta * entropies).sum(0).mean()


@dataclass
class EMANormalizer:
    """Exponential moving standard deviation of a return stream."""

    decay: float = 0.999
    floor: float = 1e-8
    running_std: float = 0.0
    initialized: bool = False

    def __post_init__(self) -> None:
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")

    def update(self, returns: Tensor) -> None:
        std = returns.detach().double().std(unbiased=False).item() if returns.numel() > 1 else 0.0
        if not self.initialized:
            self.running_std = std
            self.initialized = True
        else:
            self.running_std = self.decay * self.running_std + (1 - self.decay) * std

    @property
    def scale(self) -> float:
        return max(self.running_std, self.floor)

    def state_dict(self) -> dict:
        return {"running_std": self.running_std, "initialized": self.initialized}

    def load_state_dict(self, state: dict) -> None:
        self.running_std = float(state["running_std"])
        self.initialized = bool(state["initialized"])


def normalize_returns(returns: Tensor, norm: EMANormalizer) -> tuple[Tensor, EMANormalizer]:
    norm.update(returns)
    return returns / norm.scale, norm


def combine_advantages(streams: list[Tensor], weights: list[float]) -> Tensor:
    if len(streams) != len(weights) or not streams:
        raise ContractViolation("need one weight per advantage stream")
    shape = streams[0].shape
    if any(s.shape != shape for s in streams):
        raise ContractViolation("advantage streams differ in shape")
    return sum(w * s for w, s in zip(weights, streams))


class CriticHead(nn.Module):
    """State-value network for a single reward stream."""

    def __init__(self, in_dim: int, layers: int = 4, units: int = 512):
        super().__init__()
        self.net = MLP(in_dim, 1, layers, units)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x).squeeze(-1)
