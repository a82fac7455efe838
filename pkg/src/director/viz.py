"""Goal visualization: environment frames above the decoded manager goals."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .agent import Director


@dataclass
class GoalVideo:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    goals: np.ndarray  # (T, H, W, 3) decoded goal images
    refresh: np.ndarray  # (T,) bool, manager chose a new goal at this step
    roundtrip_mse: float  # render MSE of decode(dec(enc(s))) against decode(s)


@torch.no_grad()
def collect_goals(agent: Director, env, steps: int, sample_manager: bool = True) -> GoalVideo:
    """Act for ``steps`` steps and record frames with decoded goals.

    The manager samples by default so the goal image visibly changes at each
    goal boundary; the worker always takes its mode.
    """
    policy = agent.policy
    obs, first, state = env.reset(), True, None
    frames, goals, refresh, feats = [], [], [], []
    for _ in range(steps):
        image = torch.as_tensor(obs[None], dtype=torch.float32)
        action, state, info = policy.act(image, torch.tensor([first]), state, mode=True,
                                         manager_mode=not sample_manager)
        frames.append(obs)
        goals.append(policy.wm.decode_obs(info["goal"])[0].clamp(0, 1).numpy())
        refresh.append(bool(info["refresh"][0]))
        feats.append(info["features"][0])
        out = env.step(int(action[0].argmax()))
        obs, first = out.observation, False
        if out.done:
            obs, first = env.reset(), True
    feats_t = torch.stack(feats)
    recon = agent.goal_ae.decode(agent.goal_ae.encode(feats_t, sample=False).flat)
    mse = float(((agent.wm.decode_obs(recon).clamp(0, 1)
                  - agent.wm.decode_obs(feats_t).clamp(0, 1)) ** 2).mean())
    return GoalVideo(np.stack(frames), np.stack(goals), np.asarray(refresh), mse)


def goal_strip(video: GoalVideo, max_columns: int = 32) -> np.ndarray:
    """Two-row uint8 image: frames on top, decoded goals below."""
    t = min(len(video.frames), max_columns)
    top = np.concatenate(list(video.frames[:t]), axis=1)
    bottom = np.concatenate(list(video.goals[:t]), axis=1)
    grid = np.concatenate([top, bottom], axis=0)
    return np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)


def visualize_goals(agent: Director, env, out: str | Path, steps: int = 32,
                    sample_manager: bool = True) -> GoalVideo:
    video = collect_goals(agent, env, steps, sample_manager)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(goal_strip(video, steps)).save(out)
    return video
