"""Recurrent state-space world model with Gaussian stochastic latents.

Replay batches are batch-major ``(B, T, ...)``. Row ``t`` of a sequence holds
the observation ``x_t``, the action ``a_t`` taken after seeing it, the reward
``r_t`` that action produced, and the ``is_first`` flag of ``x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from .diffcore import (
    GRUCell,
    ImageDecoder,
    ImageEncoder,
    MLP,
    ContractViolation,
    Tensor,
    check_finite,
)


@dataclass
class ModelState:
    """Latent state; every field shares the same leading dimensions."""

    deter: Tensor
    mean: Tensor
    std: Tensor
    stoch: Tensor

    @property
    def features(self) -> Tensor:
        return torch.cat([self.deter, self.stoch], -1)

    def map(self, fn) -> "ModelState":
        return ModelState(*(fn(getattr(self, f.name)) for f in fields(self)))

    def detach(self) -> "ModelState":
        return self.map(lambda x: x.detach())

    @staticmethod
    def stack(states: list["ModelState"], dim: int = 0) -> "ModelState":
        return ModelState(*(
            torch.stack([getattr(s, f.name) for s in states], dim) for f in fields(ModelState)
        ))


@dataclass
class ReplaySequence:
    """A batch of fixed-length chunks, as numpy arrays of shape (B, T, ...)."""

    image: np.ndarray  # uint8 or float, (B, T, H, W, 3)
    action: np.ndarray  # one-hot float32, (B, T, A)
    reward: np.ndarray  # float32, (B, T)
    is_first: np.ndarray  # bool, (B, T)

    def __post_init__(self) -> None:
        b, t = self.reward.shape
        for name in ("image", "action", "is_first"):
            if getattr(self, name).shape[:2] != (b, t):
                raise ContractViolation(f"sequence field {name} misaligned with reward")

    @property
    def shape(self) -> tuple[int, int]:
        return self.reward.shape

    def tensors(self) -> dict[str, Tensor]:
        image = torch.as_tensor(self.image)
        if image.dtype == torch.uint8:
            image = image.float() / 255.0
        return {
            "image": image.float(),
            "action": torch.as_tensor(self.action, dtype=torch.float32),
            "reward": torch.as_tensor(self.reward, dtype=torch.float32),
            "is_first": torch.as_tensor(self.is_first, dtype=torch.bool),
        }


def gaussian_kl(mean_p: Tensor, std_p: Tensor, mean_q: Tensor, std_q: Tensor) -> Tensor:
    """Closed-form KL(p || q) for diagonal Gaussians, elementwise."""
    var_ratio = (std_p / std_q) ** 2
    return 0.5 * (var_ratio + ((mean_p - mean_q) / std_q) ** 2 - 1.0 - torch.log(var_ratio))


class WorldModel(nn.Module):
    def __init__(
        self,
        action_dim: int,
        image_size: int = 64,
        deter: int = 512,
        stoch: int = 32,
        min_std: float = 0.1,
        layers: int = 4,
        units: int = 512,
        cnn_depth: int = 32,
        kl_scale: float = 1.0,
    ):
        super().__init__()
        self.action_dim = action_dim
        self.image_size = image_size
        self.deter_dim = deter
        self.stoch_dim = stoch
        self.min_std = min_std
        self.kl_scale = kl_scale
        self.encoder = ImageEncoder(image_size, cnn_depth, units)
        self.gru = GRUCell(stoch + action_dim, deter)
        self.prior_net = MLP(deter, 2 * stoch, layers=1, units=units)
        self.post_net = MLP(deter + self.encoder.out_dim, 2 * stoch, layers=1, units=units)
        self.decoder = ImageDecoder(deter + stoch, image_size, cnn_depth, units)
        self.reward_head = MLP(deter + stoch, 1, layers=layers, units=units)

    @property
    def feature_dim(self) -> int:
        return self.deter_dim + self.stoch_dim

    def initial(self, batch: int) -> ModelState:
        zeros = torch.zeros(batch, self.deter_dim)
        z = torch.zeros(batch, self.stoch_dim)
        return ModelState(zeros, z, torch.ones(batch, self.stoch_dim), z.clone())

    def _dist(self, raw: Tensor, sample: bool) -> tuple[Tensor, Tensor, Tensor]:
        mean, std = raw.chunk(2, -1)
        std = nn.functional.softplus(std) + self.min_std
        stoch = mean + std * torch.randn_like(mean) if sample else mean
        return mean, std, stoch

    def imagine_step(self, state: ModelState, action: Tensor, sample: bool = True) -> ModelState:
        """Prior transition: predict the next state without an observation."""
        if action.shape[-1] != self.action_dim:
            raise ContractViolation(f"action width {action.shape[-1]} != {self.action_dim}")
        deter = self.gru(state.deter, torch.cat([state.stoch, action], -1))
        mean, std, stoch = self._dist(self.prior_net(deter), sample)
        return ModelState(deter, mean, std, check_finite(stoch, "prior state"))

    def obs_step(
        self,
        prev: ModelState,
        prev_action: Tensor,
        embed: Tensor,
        is_first: Tensor,
        sample: bool = True,
    ) -> tuple[ModelState, ModelState]:
        """Posterior and prior for one step; resets to zeros where ``is_first``."""
        keep = (~is_first).float()[:, None]
        prev = prev.map(lambda x: x * keep)
        prev_action = prev_action * keep
        prior = self.imagine_step(prev, prev_action, sample)
        raw = self.post_net(torch.cat([prior.deter, embed], -1))
        mean, std, stoch = self._dist(raw, sample)
        return ModelState(prior.deter, mean, std, stoch), prior

    def observe(
        self,
        image: Tensor,
        action: Tensor,
        is_first: Tensor,
        initial: ModelState | None = None,
        initial_action: Tensor | None = None,
        sample: bool = True,
    ) -> tuple[ModelState, ModelState]:
        """Filter a (B, T) sequence; returns posterior and prior states (B, T, .)."""
        b, t = is_first.shape
        if image.shape[:2] != (b, t) or action.shape[:2] != (b, t):
            raise ContractViolation("image, action and is_first lengths differ")
        embed = self.encoder(image)
        state = initial if initial is not None else self.initial(b)
        prev_action = initial_action if initial_action is not None else torch.zeros(b, self.action_dim)
        posts, priors = [], []
        for i in range(t):
            post, prior = self.obs_step(state, prev_action, embed[:, i], is_first[:, i], sample)
            posts.append(post)
            priors.append(prior)
            state, prev_action = post, action[:, i]
        return ModelState.stack(posts, 1), ModelState.stack(priors, 1)

    def decode_obs(self, features: Tensor) -> Tensor:
        return self.decoder(features)

    def predict_reward(self, features: Tensor) -> Tensor:
        return self.reward_head(features).squeeze(-1)

    def loss(self, batch: ReplaySequence) -> tuple[Tensor, ModelState, dict[str, float]]:
        """Variational loss summed over time, averaged over the batch.

        The reward for row ``t`` is predicted from the state at ``t + 1``;
        the last row and transitions into a new episode carry no reward term.
        """
        data = batch.tensors()
        post, prior = self.observe(data["image"], data["action"], data["is_first"])
        kl = gaussian_kl(post.mean, post.std, prior.mean, prior.std).sum(-1)
        feat = post.features
        recon = self.decode_obs(feat)
        image_loss = ((recon - data["image"]) ** 2).sum((-3, -2, -1))
        reward_pred = self.predict_reward(feat[:, 1:])
        mask = (~data["is_first"][:, 1:]).float()
        reward_loss = mask * (reward_pred - data["reward"][:, :-1]) ** 2
        loss = (self.kl_scale * kl + image_loss).sum(1).mean() + reward_loss.sum(1).mean()
        check_finite(loss, "world model loss")
        metrics = {
            "wm_loss": loss.item(),
            "kl": kl.mean().item(),
            "image_loss": image_loss.mean().item(),
            "reward_loss": reward_loss.mean().item(),
        }
        return loss, post, metrics
