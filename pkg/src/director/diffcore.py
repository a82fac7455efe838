"""Differentiable building blocks shared by every network in the agent.

Reverse-mode gradients come from torch autograd. The layers here pin down
the exact layer math that the rest of the package relies on (GRU gating, LayerNorm+ELU
MLPs, the strided conv encoder/decoder pair), plus
an Adam optimizer with decoupled weight decay and a versioned binary
checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

Tensor = torch.Tensor


class ConfigError(ValueError):
    """Raised for invalid shapes, widths or configuration values."""


class ContractViolation(ValueError):
    """Raised when an input breaks an operation's documented precondition."""


class TrainingDivergence(RuntimeError):
    """Raised when a forward pass or loss produces non-finite values."""


def check_finite(x: Tensor, what: str) -> Tensor:
    if not bool(torch.isfinite(x).all()):
        raise TrainingDivergence(f"non-finite values in {what}")
    return x


def trunc_normal_init(weight: Tensor, fan_in: int) -> None:
    std = 1.0 / math.sqrt(max(fan_in, 1))
    nn.init.trunc_normal_(weight, mean=0.0, std=std, a=-2 * std, b=2 * std)


class Linear(nn.Linear):
    """nn.Linear with truncated-normal fan-in init and zero bias."""

    def reset_parameters(self) -> None:
        trunc_normal_init(self.weight, self.in_features)
        if self.bias is not None:
            nn.init.zeros_(self.bias)


class MLP(nn.Module):
    """Stack of linear -> LayerNorm -> ELU hidden layers and a linear head.

    ``layers`` counts hidden layers; ``layers=0`` is a single linear map.
    The forward pass raises :class:`ConfigError` on an input width mismatch
    and :class:`TrainingDivergence` on non-finite output.
    """

    def __init__(self, in_dim: int, out_dim: int, layers: int = 4, units: int = 512):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        hidden = []
        width = in_dim
        for _ in range(layers):
            hidden += [Linear(width, units), nn.LayerNorm(units), nn.ELU()]
            width = units
        self.hidden = nn.Sequential(*hidden)
        self.head = Linear(width, out_dim)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ConfigError(f"MLP expects width {self.in_dim}, got {x.shape[-1]}")
        out = self.head(self.hidden(x))
        return check_finite(out, "MLP output")


class GRUCell(nn.Module):
    """Gated recurrent unit with reset gate, update gate and tanh candidate.

    r = sigmoid(W_r x + b_r + U_r h + c_r)
    u = sigmoid(W_u x + b_u + U_u h + c_u)
    n = tanh(W_n x + b_n + r * (U_n h + c_n))
    h' = (1 - u) * h + u * n
    """

    def __init__(self, in_dim: int, hidden_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.w_x = nn.Parameter(torch.empty(in_dim, 3 * hidden_dim))
        self.w_h = nn.Parameter(torch.empty(hidden_dim, 3 * hidden_dim))
        self.b_x = nn.Parameter(torch.zeros(3 * hidden_dim))
        self.b_h = nn.Parameter(torch.zeros(3 * hidden_dim))
        trunc_normal_init(self.w_x, in_dim)
        trunc_normal_init(self.w_h, hidden_dim)

    def forward(self, hidden: Tensor, x: Tensor) -> Tensor:
        if hidden.shape[-1] != self.hidden_dim:
            raise ConfigError(f"GRU hidden width {hidden.shape[-1]} != {self.hidden_dim}")
        gx = x @ self.w_x + self.b_x
        gh = hidden @ self.w_h + self.b_h
        rx, ux, nx = gx.chunk(3, -1)
        rh, uh, nh = gh.chunk(3, -1)
        reset = torch.sigmoid(rx + rh)
        update = torch.sigmoid(ux + uh)
        cand = torch.tanh(nx + reset * nh)
        out = (1 - update) * hidden + update * cand
        return check_finite(out, "GRU state")


def _conv_init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else (
                m.in_channels * m.kernel_size[0] * m.kernel_size[1])
            trunc_normal_init(m.weight, fan_in)
            nn.init.zeros_(m.bias)


class ImageEncoder(nn.Module):
    """Maps HxWx3 images in [0, 1] to a flat embedding.

    64x64 inputs go through four stride-2 convolutions (kernel 4); images of
    at most 16x16 pixels are flattened and passed through an MLP instead.
    """

    def __init__(self, image_size: int = 64, depth: int = 32, mlp_units: int = 256):
        super().__init__()
        self.image_size = image_size
        if image_size == 64:
            d = depth
            self.net = nn.Sequential(
                nn.Conv2d(3, d, 4, 2), nn.ELU(),
                nn.Conv2d(d, 2 * d, 4, 2), nn.ELU(),
                nn.Conv2d(2 * d, 4 * d, 4, 2), nn.ELU(),
                nn.Conv2d(4 * d, 8 * d, 4, 2), nn.ELU(),
            )
            _conv_init(self.net)
            self.out_dim = 8 * d * 2 * 2
            self.conv = True
        elif image_size <= 16:
            self.net = MLP(image_size * image_size * 3, mlp_units, layers=1, units=mlp_units)
            self.out_dim = mlp_units
            self.conv = False
        else:
            raise ConfigError(f"unsupported image size {image_size}; use 64 or <= 16")

    def forward(self, image: Tensor) -> Tensor:
        lead = image.shape[:-3]
        x = image.reshape(-1, *image.shape[-3:]) - 0.5
        if self.conv:
            x = self.net(x.permute(0, 3, 1, 2)).flatten(1)
        else:
            x = self.net(x.flatten(1))
        return x.reshape(*lead, self.out_dim)


class ImageDecoder(nn.Module):
    """Deterministic map from features to a mean image (HxWx3)."""

    def __init__(self, in_dim: int, image_size: int = 64, depth: int = 32,
                 mlp_units: int = 256):
        super().__init__()
        self.image_size = image_size
        if image_size == 64:
            d = depth
            self.proj = Linear(in_dim, 32 * d)
            self.net = nn.Sequential(
                nn.ConvTranspose2d(32 * d, 4 * d, 5, 2), nn.ELU(),
                nn.ConvTranspose2d(4 * d, 2 * d, 5, 2), nn.ELU(),
                nn.ConvTranspose2d(2 * d, d, 6, 2), nn.ELU(),
                nn.ConvTranspose2d(d, 3, 6, 2),
            )
            _conv_init(self.net)
            self.conv = True
        elif image_size <= 16:
            self.net = MLP(in_dim, image_size * image_size * 3, layers=1, units=mlp_units)
            self.conv = False
        else:
            raise ConfigError(f"unsupported image size {image_size}; use 64 or <= 16")

    def forward(self, features: Tensor) -> Tensor:
        lead = features.shape[:-1]
        x = features.reshape(-1, features.shape[-1])
        s = self.image_size
        if self.conv:
            x = self.proj(x)[:, :, None, None]
            x = self.net(x).permute(0, 2, 3, 1)
        else:
            x = self.net(x).reshape(-1, s, s, 3)
        return x.reshape(*lead, s, s, 3) + 0.5


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    eps: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if not (self.lr > 0 and self.eps > 0 and self.weight_decay >= 0):
            raise ConfigError("lr and eps must be positive, weight decay non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")


def adam_update(value: Tensor, grad: Tensor, state: dict, config: OptimizerConfig) -> None:
    """One in-place Adam step with decoupled weight decay.

    ``state`` holds ``step`` (int) and ``m``/``v`` moment tensors; missing
    entries are zero-initialized. Decay is applied before the Adam step.
    """
    if "step" not in state:
        state["step"] = 0
        state["m"] = torch.zeros_like(value)
        state["v"] = torch.zeros_like(value)
    state["step"] += 1
    t = state["step"]
    m, v = state["m"], state["v"]
    if config.weight_decay:
        value.mul_(1 - config.lr * config.weight_decay)
    m.mul_(config.beta1).add_(grad, alpha=1 - config.beta1)
    v.mul_(config.beta2).addcmul_(grad, grad, value=1 - config.beta2)
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    value.sub_(config.lr * m_hat / (v_hat.sqrt() + config.eps))


class Adam:
    """Adam with decoupled weight decay over a fixed parameter list."""

    def __init__(self, params: Iterable[nn.Parameter], config: OptimizerConfig | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.config = config or OptimizerConfig()
        self.state: dict[int, dict] = {i: {} for i in range(len(self.params))}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> float:
        """Apply the update; returns the global gradient norm before clipping."""
        grads = [p.grad for p in self.params if p.grad is not None]
        if not grads:
            return 0.0
        norm = torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])).item()
        scale = 1.0
        if self.config.grad_clip is not None and norm > self.config.grad_clip:
            scale = self.config.grad_clip / (norm + 1e-6)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            adam_update(p.data, p.grad * scale if scale != 1.0 else p.grad,
                        self.state[i], self.config)
        return norm

    def minimize(self, loss: Tensor) -> float:
        self.zero_grad()
        loss.backward()
        return self.step()

    def state_tensors(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, st in self.state.items():
            if st:
                out[f"{prefix}/{i}/m"] = st["m"]
                out[f"{prefix}/{i}/v"] = st["v"]
        return out

    def step_counts(self) -> dict[str, int]:
        return {str(i): st["step"] for i, st in self.state.items() if st}

    def load_state(self, prefix: str, tensors: Mapping[str, Tensor], steps: Mapping[str, int]) -> None:
        for key, step in steps.items():
            i = int(key)
            self.state[i] = {
                "step": int(step),
                "m": tensors[f"{prefix}/{i}/m"].clone(),
                "v": tensors[f"{prefix}/{i}/v"].clone(),
            }


# --------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"DIRC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write ``tensors`` as path -> (shape, little-endian float32) records.

    Layout: magic, u32 version, u64 metadata length, UTF-8 JSON metadata,
    u32 record count, then per record: u16 name length, name, u8 ndim,
    ndim x u64 shape, raw ``<f4`` data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
            key = name.encode()
            f.write(struct.pack("<H", len(key)))
            f.write(key)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as f:
        data = f.read()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path} is truncated or corrupt: {e}") from e


def _parse_checkpoint(data: bytes, path) -> tuple[dict[str, Tensor], dict]:
    if len(data) < 8:
        raise ConfigError(f"{path} is not a checkpoint file")
    magic, version = struct.unpack_from("<4sI", data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 8
    (meta_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    meta = json.loads(data[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, meta

