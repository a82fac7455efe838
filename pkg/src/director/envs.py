"""Visual Pin Pad and two small debug environments.

Pin Pad geometry: a 16x16 cell canvas. Rows 0-13 hold the walled arena
(12x14 walkable interior), rows 14-15 hold the activation-history strip.
Pads are 4x4 cell blocks in fixed positions per pad count. Images are
rendered at ``size // 16`` pixels per cell, float32 in [0, 1].

Environment ids: ``pinpad:<two|three|four|five|six>`` (or ``pinpad:<n>``),
``reachcolor`` and ``twostate``. Actions are integer indices; the agent side
uses one-hot vectors of width ``env.num_actions``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .diffcore import ConfigError

UP, DOWN, LEFT, RIGHT, NOOP = range(5)
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1), NOOP: (0, 0)}

GRID = 16
ARENA_ROWS = 14
PAD = 4
EPISODE_LENGTH = 2000
SUCCESS_REWARD = 10.0

PAD_COLORS = {
    "red": (255, 0, 0),
    "green": (0, 204, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
}
FLOOR = (255, 255, 255)
WALL = (128, 128, 128)
STRIP = (51, 51, 51)
AGENT = (0, 0, 0)

_TL, _TR, _BL, _BR = (1, 1), (1, 11), (9, 1), (9, 11)
_TM, _BM, _LM, _RM = (1, 6), (9, 6), (5, 1), (5, 11)
PAD_LAYOUTS = {
    2: [_LM, _RM],
    3: [_TL, _TR, _BM],
    4: [_TL, _TR, _BR, _BL],
    5: [_TL, _TM, _TR, _BR, _BL],
    6: [_TL, _TM, _TR, _BR, _BM, _BL],
}
PAD_COUNT_NAMES = {"two": 2, "three": 3, "four": 4, "five": 5, "six": 6}


@dataclass(frozen=True)
class Pad:
    id: int
    color: str
    top: int
    left: int

    def contains(self, pos: tuple[int, int]) -> bool:
        r, c = pos
        return self.top <= r < self.top + PAD and self.left <= c < self.left + PAD


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class PinPadState:
    pos: tuple[int, int]
    pads: tuple[Pad, ...]
    target: tuple[int, ...]
    history: tuple[int, ...] = ()
    step: int = 0

    @property
    def num_pads(self) -> int:
        return len(self.pads)

    def pad_at(self, pos: tuple[int, int]) -> Pad | None:
        for pad in self.pads:
            if pad.contains(pos):
                return pad
        return None


def pad_layout(num_pads: int) -> tuple[Pad, ...]:
    if num_pads not in PAD_LAYOUTS:
        raise ConfigError(f"unsupported pad count {num_pads}; choose from 2-6")
    colors = list(PAD_COLORS)
    return tuple(Pad(i, colors[i], r, c) for i, (r, c) in enumerate(PAD_LAYOUTS[num_pads]))


def is_walkable(pos: tuple[int, int]) -> bool:
    r, c = pos
    return 1 <= r < ARENA_ROWS - 1 and 1 <= c < GRID - 1


def free_cells(pads: tuple[Pad, ...]) -> list[tuple[int, int]]:
    return [
        (r, c)
        for r in range(1, ARENA_ROWS - 1)
        for c in range(1, GRID - 1)
        if not any(p.contains((r, c)) for p in pads)
    ]


def task_target(num_pads: int, seed: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.random.default_rng(seed).permutation(num_pads))


def pinpad_reset(num_pads: int, seed: int, rng: np.random.Generator | None = None
                 ) -> tuple[PinPadState, np.ndarray]:
    """Fresh episode. The target sequence depends only on ``seed``."""
    pads = pad_layout(num_pads)
    rng = rng if rng is not None else np.random.default_rng([seed, 1])
    cells = free_cells(pads)
    pos = cells[rng.integers(len(cells))]
    state = PinPadState(pos=pos, pads=pads, target=task_target(num_pads, seed))
    return state, render(state)


def pinpad_step(state: PinPadState, action: int, rng: np.random.Generator,
                length: int = EPISODE_LENGTH, size: int = 64) -> tuple[PinPadState, EnvStep]:
    if action not in MOVES:
        raise ValueError(f"invalid action {action}")
    dr, dc = MOVES[action]
    pos = (state.pos[0] + dr, state.pos[1] + dc)
    if not is_walkable(pos):
        pos = state.pos
    history = state.history
    pad = state.pad_at(pos)
    if pad is not None and (not history or history[-1] != pad.id):
        history = (history + (pad.id,))[-state.num_pads:]
    reward = 0.0
    success = history == state.target
    if success:
        reward = SUCCESS_REWARD
        history = ()
        cells = free_cells(state.pads)
        pos = cells[rng.integers(len(cells))]
    step = state.step + 1
    new = replace(state, pos=pos, history=history, step=step)
    info = {"success": success, "history": history}
    return new, EnvStep(render(new, size), reward, step >= length, info)


def _upscale(cells: np.ndarray, size: int, grid: int) -> np.ndarray:
    if size % grid:
        raise ConfigError(f"image size {size} must be a multiple of {grid}")
    k = size // grid
    return np.repeat(np.repeat(cells, k, 0), k, 1)


def history_swatch_box(index: int, size: int = 64) -> tuple[slice, slice]:
    """Pixel region of the ``index``-th history swatch."""
    k = size // GRID
    m = k // 4
    rows = slice(ARENA_ROWS * k + m, GRID * k - m)
    cols = slice((1 + 2 * index) * k + m, (3 + 2 * index) * k - m)
    return rows, cols


def render(state: PinPadState, size: int = 64) -> np.ndarray:
    """Arena with pads and agent; history swatches along the bottom strip."""
    img = np.empty((GRID, GRID, 3), np.uint8)
    img[:ARENA_ROWS] = WALL
    img[1:ARENA_ROWS - 1, 1:GRID - 1] = FLOOR
    for pad in state.pads:
        img[pad.top:pad.top + PAD, pad.left:pad.left + PAD] = PAD_COLORS[pad.color]
    img[state.pos] = AGENT
    img[ARENA_ROWS:] = STRIP
    out = _upscale(img, size, GRID)
    for i, pad_id in enumerate(state.history):
        out[history_swatch_box(i, size)] = PAD_COLORS[state.pads[pad_id].color]
    return out.astype(np.float32) / 255.0


def oracle_action(state: PinPadState) -> int:
    """Shortest-path action towards the next pad the target sequence needs.

    Paths avoid every other pad so that no stray activation enters the
    history; the pad currently stood on may be crossed since it is already
    the latest entry.
    """
    hist, target = state.history, state.target
    done = 0
    for k in range(min(len(hist), len(target)), 0, -1):
        if hist[-k:] == target[:k]:
            done = k
            break
    goal_pad = state.pads[target[done]]
    start = state.pos
    here = state.pad_at(start)
    allowed = {goal_pad.id} | ({here.id} if here is not None else set())

    def passable(cell):
        pad = state.pad_at(cell)
        return is_walkable(cell) and (pad is None or pad.id in allowed)

    prev: dict[tuple[int, int], tuple | None] = {start: None}
    queue = deque([start])
    cell = start
    while queue:
        cell = queue.popleft()
        if goal_pad.contains(cell):
            break
        for a in (UP, DOWN, LEFT, RIGHT):
            dr, dc = MOVES[a]
            nxt = (cell[0] + dr, cell[1] + dc)
            if passable(nxt) and nxt not in prev:
                prev[nxt] = (cell, a)
                queue.append(nxt)
    action = NOOP
    while prev[cell] is not None:
        cell, action = prev[cell]
    return action


class PinPad:
    """Stateful wrapper around the pure Pin Pad functions.

    ``task_seed`` fixes the target sequence (defaults to ``seed``); ``seed``
    drives start and re-placement positions, so parallel copies of one task
    share ``task_seed`` and differ in ``seed``.
    """

    def __init__(self, num_pads: int = 3, seed: int = 0, size: int = 64,
                 length: int = EPISODE_LENGTH, noop: bool = True, task_seed: int | None = None):
        pad_layout(num_pads)
        _upscale(np.zeros((GRID, GRID, 3)), size, GRID)
        self.num_pads = num_pads
        self.seed = seed
        self.task_seed = seed if task_seed is None else task_seed
        self.size = size
        self.length = length
        self.num_actions = 5 if noop else 4
        self.rng = np.random.default_rng([seed, 1])
        self.state: PinPadState | None = None

    def reset(self) -> np.ndarray:
        self.state, _ = pinpad_reset(self.num_pads, self.task_seed, self.rng)
        return render(self.state, self.size)

    def step(self, action: int) -> EnvStep:
        if not 0 <= action < self.num_actions:
            raise ValueError(f"invalid action {action}")
        self.state, out = pinpad_step(self.state, int(action), self.rng, self.length, self.size)
        return out

    def oracle(self) -> int:
        return oracle_action(self.state)


class ReachColor:
    """8x8 walled room; reward 1 for stepping onto the colored cell."""

    GRID = 8
    GOAL = (2, 5)

    def __init__(self, seed: int = 0, size: int = 64, length: int = 200):
        _upscale(np.zeros((self.GRID, self.GRID, 3)), size, self.GRID)
        self.size = size
        self.length = length
        self.num_actions = 5
        self.rng = np.random.default_rng([seed, 2])
        self.pos = (0, 0)
        self.t = 0

    def _cells(self) -> list[tuple[int, int]]:
        g = self.GRID
        return [(r, c) for r in range(1, g - 1) for c in range(1, g - 1) if (r, c) != self.GOAL]

    def _render(self) -> np.ndarray:
        img = np.empty((self.GRID, self.GRID, 3), np.uint8)
        img[:] = WALL
        img[1:-1, 1:-1] = FLOOR
        img[self.GOAL] = PAD_COLORS["red"]
        img[self.pos] = AGENT
        return _upscale(img, self.size, self.GRID).astype(np.float32) / 255.0

    def reset(self) -> np.ndarray:
        cells = self._cells()
        self.pos = cells[self.rng.integers(len(cells))]
        self.t = 0
        return self._render()

    def step(self, action: int) -> EnvStep:
        dr, dc = MOVES[int(action)]
        pos = (self.pos[0] + dr, self.pos[1] + dc)
        if 1 <= pos[0] < self.GRID - 1 and 1 <= pos[1] < self.GRID - 1:
            self.pos = pos
        reward = 0.0
        if self.pos == self.GOAL:
            reward = 1.0
            cells = self._cells()
            self.pos = cells[self.rng.integers(len(cells))]
        self.t += 1
        return EnvStep(self._render(), reward, self.t >= self.length, {})

    def oracle(self) -> int:
        r, c = self.pos
        gr, gc = self.GOAL
        if r != gr:
            return DOWN if gr > r else UP
        return RIGHT if gc > c else LEFT


class TwoState:
    """Scripted debug env: action 0 or 1 selects the next state; state 1 pays 1.

    State 0 renders black, state 1 white. Reward ``r_t`` is 1 exactly when the
    state following action ``a_t`` is state 1.
    """

    def __init__(self, seed: int = 0, size: int = 16, length: int = 50):
        self.size = size
        self.length = length
        self.num_actions = 2
        self.state = 0
        self.t = 0

    def _render(self) -> np.ndarray:
        return np.full((self.size, self.size, 3), float(self.state), np.float32)

    def reset(self) -> np.ndarray:
        self.state = 0
        self.t = 0
        return self._render()

    def step(self, action: int) -> EnvStep:
        self.state = int(action)
        self.t += 1
        return EnvStep(self._render(), float(self.state), self.t >= self.length, {})

    def oracle(self) -> int:
        return 1


def make_env(name: str, seed: int = 0, size: int = 64, task_seed: int | None = None):
    kind, _, arg = name.partition(":")
    if kind == "pinpad":
        count = PAD_COUNT_NAMES.get(arg)
        if count is None and arg.isdigit():
            count = int(arg)
        if count is None:
            raise ConfigError(f"unknown pin pad variant {arg!r}")
        return PinPad(count, seed, size, task_seed=task_seed)
    if kind == "reachcolor" and not arg:
        return ReachColor(seed, size)
    if kind == "twostate" and not arg:
        return TwoState(seed, size)
    raise ConfigError(f"unknown environment {name!r}")
