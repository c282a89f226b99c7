"""Draws gridworld frames to PNG so image-based components have real inputs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .distill.task import CELL, DEFAULT_GRID
from .trajectory import Dataset, Trajectory

PX = 12
_GOAL = (60, 160, 60)
_BLOCK = (200, 60, 40)
_AGENT = (40, 80, 220)
_HELD = (230, 200, 40)


def frame_states(traj: Trajectory) -> list[dict]:
    """Agent, block and holding flag as seen at each frame (before its action)."""
    pos = tuple(traj.meta["agent"])
    block = tuple(traj.meta["block"])
    holding = False
    out = []
    for fr in traj.frames:
        pos = (int(round(fr.pose[0] / CELL)), int(round(fr.pose[1] / CELL)))
        if holding:
            block = pos
        out.append({"agent": pos, "block": block, "holding": holding})
        _, _, grip = fr.action
        if grip > 0 and pos == block:
            holding = True
        elif grip < 0:
            holding = False
    return out


def draw(agent, block, goal, holding: bool, grid: int = DEFAULT_GRID) -> np.ndarray:
    img = np.full((grid * PX, grid * PX, 3), 235, dtype=np.uint8)
    img[::PX, :] = 180
    img[:, ::PX] = 180

    def fill(cell, colour, inset):
        x, y = cell
        r0 = (grid - 1 - y) * PX + inset
        c0 = x * PX + inset
        img[r0:r0 + PX - 2 * inset, c0:c0 + PX - 2 * inset] = colour

    fill(goal, _GOAL, 1)
    fill(block, _BLOCK, 3)
    fill(agent, _HELD if holding else _AGENT, 4)
    return img


def render_trajectory(traj: Trajectory, base_dir: str | Path, grid: int = DEFAULT_GRID) -> list[Path]:
    from PIL import Image

    goal = tuple(traj.meta["goal"])
    written = []
    for fr, st in zip(traj.frames, frame_states(traj)):
        path = Path(base_dir) / fr.observation_ref
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(draw(st["agent"], st["block"], goal, st["holding"], grid)).save(path)
        written.append(path)
    return written


def render_dataset(ds: Dataset, base_dir: str | Path, grid: int = DEFAULT_GRID) -> int:
    """Write every robot frame's PNG under ``base_dir``; returns the count."""
    return sum(len(render_trajectory(t, base_dir, grid)) for t in ds.trajectories if t.is_robot)
