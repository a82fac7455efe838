"""Goal autoencoder over world-model features with a vector-of-categoricals code."""

from __future__ import annotations

from dataclasses import dataclass
import math

import torch
from torch import nn
import torch.nn.functional as F

from .diffcore import MLP, ContractViolation, Tensor


def straight_through_sample(logits: Tensor, sample: bool = True) -> Tensor:
    """One-hot draw per row whose gradient flows to the softmax probabilities.

    The forward value is an exact one-hot over the last axis; backward treats
    it as ``probs``. With ``sample=False`` the row-wise mode is returned.
    """
    probs = torch.softmax(logits, -1)
    classes = logits.shape[-1]
    if sample:
        idx = torch.multinomial(probs.detach().reshape(-1, classes), 1).reshape(probs.shape[:-1])
    else:
        idx = probs.detach().argmax(-1)
    onehot = F.one_hot(idx, classes).to(probs.dtype)
    return onehot + (probs - probs.detach())


def row_entropy(logits: Tensor) -> Tensor:
    logp = torch.log_softmax(logits, -1)
    return -(logp.exp() * logp).sum(-1)


def kl_to_uniform(logits: Tensor) -> Tensor:
    """KL(softmax(logits) || uniform) summed over the latent rows."""
    return (math.log(logits.shape[-1]) - row_entropy(logits)).sum(-1)


@dataclass
class GoalCode:
    """``logits`` and one-hot ``sample`` of shape (..., L, C)."""

    logits: Tensor
    sample: Tensor

    @property
    def flat(self) -> Tensor:
        return self.sample.flatten(-2)

    @property
    def probs(self) -> Tensor:
        return torch.softmax(self.logits, -1)

    def log_prob(self) -> Tensor:
        logp = torch.log_softmax(self.logits, -1)
        return (logp * self.sample.detach()).sum((-2, -1))

    def entropy(self) -> Tensor:
        return row_entropy(self.logits).sum(-1)


def check_one_hot(flat: Tensor, latents: int, classes: int) -> None:
    rows = flat.detach().reshape(*flat.shape[:-1], latents, classes)
    ok = ((rows - rows.round()).abs() < 1e-4).all() and (
        (rows.sum(-1) - 1).abs() < 1e-4).all()
    if not bool(ok):
        raise ContractViolation("goal code rows must be one-hot")


class GoalAutoencoder(nn.Module):
    def __init__(
        self,
        feature_dim: int,
        latents: int = 8,
        classes: int = 8,
        beta: float = 1.0,
        layers: int = 4,
        units: int = 512,
        samples: int = 1,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.latents = latents
        self.classes = classes
        self.beta = beta
        self.samples = samples
        self.encoder = MLP(feature_dim, latents * classes, layers, units)
        self.decoder = MLP(latents * classes, feature_dim, layers, units)

    @property
    def code_dim(self) -> int:
        return self.latents * self.classes

    def code_logits(self, features: Tensor) -> Tensor:
        return self.encoder(features).reshape(*features.shape[:-1], self.latents, self.classes)

    def encode(self, features: Tensor, sample: bool = True) -> GoalCode:
        logits = self.code_logits(features)
        return GoalCode(logits, straight_through_sample(logits, sample))

    def decode(self, code: GoalCode | Tensor) -> Tensor:
        flat = code.flat if isinstance(code, GoalCode) else code
        if flat.shape[-1] != self.code_dim:
            raise ContractViolation(f"code width {flat.shape[-1]} != {self.code_dim}")
        check_one_hot(flat, self.latents, self.classes)
        return self.decoder(flat)

    def loss(self, features: Tensor) -> tuple[Tensor, dict[str, float]]:
        features = features.detach()
        code = self.encode(features)
        recon = ((self.decode(code) - features) ** 2).sum(-1)
        kl = kl_to_uniform(code.logits)
        loss = (recon + self.beta * kl).mean()
        return loss, {"goal_ae_loss": loss.item(), "goal_ae_recon": recon.mean().item(),
                      "goal_ae_kl": kl.mean().item()}

    @torch.no_grad()
    def exploration_reward(self, features: Tensor) -> Tensor:
        """Squared reconstruction error of ``features`` through a sampled code."""
        total = torch.zeros(features.shape[:-1])
        for _ in range(self.samples):
            total += ((self.decode(self.encode(features)) - features) ** 2).sum(-1)
        return total / self.samples
