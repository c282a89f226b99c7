"""Gridworld pick-and-place corpus used to exercise distillation at desk scale.

Robot trajectories: an agent walks to a block, grasps it, carries it to a
goal cell and releases it. Every frame carries templated reasoning for its
phase and the planner's action. Multimodal samples ask for the colour of a
cell named by one of the coordinate pairs in the scene; their answer is a
reasoning token and they have no action.

Frame conventions for robot trajectories:

* ``pose`` is the agent position *before* the frame's action, in metres
  (``CELL`` per grid step), with zero orientation.
* ``gripper`` is the gripper command issued at the frame (1 = closed), so a
  grasp or release frame differs from its predecessor.
* ``action`` is ``(dx, dy, grip)`` with ``grip`` in {-1, 0, 1}.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from ..trajectory import Dataset, DomainTag, Frame, Trajectory
from .policy import PAD, Kind, TokenSequence

CELL = 0.05
DEFAULT_GRID = 5
INSTRUCTION = "put the block on the goal"

ACTIONS = ("left", "right", "up", "down", "close", "open")
ACTION_VECTORS = {
    "left": (-1.0, 0.0, 0.0),
    "right": (1.0, 0.0, 0.0),
    "up": (0.0, 1.0, 0.0),
    "down": (0.0, -1.0, 0.0),
    "close": (0.0, 0.0, 1.0),
    "open": (0.0, 0.0, -1.0),
}
PHASE_REASONING = {
    "approach": "move near the block",
    "grasp": "grasp the block",
    "transport": "carry the block to the goal",
    "release": "release the block",
}
COLOURS = ("red", "green", "blue", "yellow")
QUESTIONS = ("agent", "block", "goal")


@dataclass(frozen=True)
class Vocab:
    """Token table shared by every policy trained on the task."""

    grid: int = DEFAULT_GRID

    @property
    def words(self) -> tuple[str, ...]:
        reasoning = sorted({w for text in PHASE_REASONING.values() for w in text.split()})
        return (
            ("<pad>",)
            + tuple(f"c{i}" for i in range(self.grid))
            + ("free", "holding", "<pick_place>")
            + tuple(f"<ask_{q}>" for q in QUESTIONS)
            + tuple(reasoning)
            + COLOURS
            + tuple(f"act_{a}" for a in ACTIONS)
        )

    @property
    def size(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return _index(self)[word]

    def ids(self, words: Iterable[str]) -> list[int]:
        table = _index(self)
        return [table[w] for w in words]

    def word(self, token: int) -> str:
        return self.words[token]

    @property
    def action_ids(self) -> tuple[int, ...]:
        return tuple(self.id(f"act_{a}") for a in ACTIONS)

    @property
    def reasoning_ids(self) -> tuple[int, ...]:
        words = {w for text in PHASE_REASONING.values() for w in text.split()} | set(COLOURS)
        return tuple(sorted(self.id(w) for w in words))


@lru_cache(maxsize=None)
def _index(vocab: Vocab) -> dict[str, int]:
    table = {w: i for i, w in enumerate(vocab.words)}
    assert table["<pad>"] == PAD
    return table


@lru_cache(maxsize=None)
def colour_map(grid: int) -> np.ndarray:
    """Fixed colour of every cell: one colour per quadrant of the grid."""
    half = grid // 2
    xs, ys = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    return 2 * (xs >= half) + (ys >= half)


def _step_towards(pos: tuple[int, int], target: tuple[int, int]) -> str | None:
    if pos[0] != target[0]:
        return "right" if target[0] > pos[0] else "left"
    if pos[1] != target[1]:
        return "up" if target[1] > pos[1] else "down"
    return None


def plan_episode(agent: tuple[int, int], block: tuple[int, int], goal: tuple[int, int]) -> list[tuple[str, str]]:
    """Shortest-path plan as ``(phase, action)`` pairs; x is corrected before y."""
    steps = []
    pos = tuple(agent)
    while (move := _step_towards(pos, block)) is not None:
        steps.append(("approach", move))
        pos = _apply(pos, move)
    steps.append(("grasp", "close"))
    while (move := _step_towards(pos, goal)) is not None:
        steps.append(("transport", move))
        pos = _apply(pos, move)
    steps.append(("release", "open"))
    return steps


def _apply(pos: tuple[int, int], action: str) -> tuple[int, int]:
    dx, dy, _ = ACTION_VECTORS[action]
    return pos[0] + int(dx), pos[1] + int(dy)


def robot_trajectory(traj_id: str, agent, block, goal, *, scene_noise: float = 0.0,
                     rng: np.random.Generator | None = None) -> Trajectory:
    """Expert trajectory with ground-truth scene labels in ``meta["scene_labels"]``.

    Scene labels mark the first frame of each new phase. With ``scene_noise``
    > 0, other frames are also marked at that rate, imitating spurious visual
    events that the kinematic layer has to filter.
    """
    plan = plan_episode(agent, block, goal)
    frames, phases = [], []
    pos, grip = tuple(agent), 0
    for t, (phase, action) in enumerate(plan):
        if action == "close":
            grip = 1
        elif action == "open":
            grip = 0
        frames.append(Frame(
            index=t,
            pose=(pos[0] * CELL, pos[1] * CELL, 0.0, 0.0, 0.0, 0.0),
            gripper=grip,
            action=ACTION_VECTORS[action],
            reasoning=PHASE_REASONING[phase],
            observation_ref=f"{traj_id}/frame_{t:03d}.png",
        ))
        phases.append(phase)
        pos = _apply(pos, action)
    scene = [int(t > 0 and phases[t] != phases[t - 1]) for t in range(len(plan))]
    if scene_noise > 0 and rng is not None:
        scene = [s or int(rng.random() < scene_noise) for s in scene]
    return Trajectory(
        id=traj_id,
        instruction=INSTRUCTION,
        frames=tuple(frames),
        domain_tag=DomainTag.ROBOT,
        meta={"agent": list(agent), "block": list(block), "goal": list(goal), "scene_labels": scene},
    )


def multimodal_sample(sample_id: str, scene: Sequence[int], holding: int, question: str, grid: int) -> Trajectory:
    pairs = {"agent": scene[0:2], "block": scene[2:4], "goal": scene[4:6]}
    x, y = pairs[question]
    answer = COLOURS[int(colour_map(grid)[x, y])]
    return Trajectory(
        id=sample_id,
        instruction=f"what colour is the {question} cell",
        frames=(Frame(index=0, pose=(0.0,) * 6, gripper=0, action=(), reasoning=answer,
                      observation_ref=f"{sample_id}/scene.png"),),
        domain_tag=DomainTag.MULTIMODAL,
        meta={"scene": list(scene), "holding": holding, "question": question},
    )


def make_synthetic_task(seed: int, n: int, n_multimodal: int | None = None, *, grid: int = DEFAULT_GRID,
                        scene_noise: float = 0.2, prefix: str = "") -> Dataset:
    """``n`` robot trajectories followed by ``n_multimodal`` (default ``n``) QA samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n_mm = n if n_multimodal is None else n_multimodal
    rng = np.random.default_rng(seed)
    trajs = []
    for k in range(n):
        agent, block, goal = (tuple(int(v) for v in rng.integers(0, grid, size=2)) for _ in range(3))
        trajs.append(robot_trajectory(f"{prefix}robot-{seed}-{k:05d}", agent, block, goal,
                                      scene_noise=scene_noise, rng=rng))
    for k in range(n_mm):
        scene = [int(v) for v in rng.integers(0, grid, size=6)]
        holding = int(rng.integers(0, 2))
        question = QUESTIONS[int(rng.integers(0, len(QUESTIONS)))]
        trajs.append(multimodal_sample(f"{prefix}mm-{seed}-{k:05d}", scene, holding, question, grid))
    return Dataset(tuple(trajs))


def replay(traj: Trajectory) -> dict:
    """Run the recorded actions; returns the final agent/block state."""
    pos = tuple(traj.meta["agent"])
    block = tuple(traj.meta["block"])
    holding = False
    for fr in traj.frames:
        dx, dy, grip = fr.action
        if grip > 0 and pos == block:
            holding = True
        elif grip < 0:
            holding = False
        pos = (pos[0] + int(dx), pos[1] + int(dy))
        if holding:
            block = pos
    return {"agent": pos, "block": block, "holding": holding}


def _action_name(vec: Sequence[float]) -> str:
    for name, ref in ACTION_VECTORS.items():
        if tuple(float(v) for v in vec) == ref:
            return name
    raise ValueError(f"not a gridworld action: {vec}")


def robot_prompt(vocab: Vocab, traj: Trajectory, t: int) -> list[int]:
    """Observation tokens for frame ``t``: agent, block and goal cells, gripper, instruction."""
    fr = traj.frames[t]
    agent = (int(round(fr.pose[0] / CELL)), int(round(fr.pose[1] / CELL)))
    holding = t > 0 and traj.frames[t - 1].gripper == 1
    block = agent if holding else tuple(traj.meta["block"])
    goal = tuple(traj.meta["goal"])
    words = [f"c{v}" for v in (*agent, *block, *goal)]
    words += ["holding" if holding else "free", "<pick_place>"]
    return vocab.ids(words)


def multimodal_prompt(vocab: Vocab, traj: Trajectory) -> list[int]:
    words = [f"c{v}" for v in traj.meta["scene"]]
    words += ["holding" if traj.meta["holding"] else "free", f"<ask_{traj.meta['question']}>"]
    return vocab.ids(words)


PROMPT_LEN = 8


def frame_sequence(vocab: Vocab, traj: Trajectory, t: int, *, with_reasoning: bool = True) -> TokenSequence:
    """Prompt, then the frame's reasoning words (if any), then its action token."""
    prompt = robot_prompt(vocab, traj, t)
    fr = traj.frames[t]
    reasoning = vocab.ids(fr.reasoning.split()) if with_reasoning else []
    action = vocab.id("act_" + _action_name(fr.action))
    tokens = prompt + reasoning + [action]
    kinds = [Kind.PROMPT] * len(prompt) + [Kind.REASONING] * len(reasoning) + [Kind.ACTION]
    return TokenSequence(tuple(tokens), tuple(kinds))


def multimodal_sequence(vocab: Vocab, traj: Trajectory) -> TokenSequence:
    prompt = multimodal_prompt(vocab, traj)
    answer = vocab.ids(traj.frames[0].reasoning.split())
    return TokenSequence(tuple(prompt + answer), tuple([Kind.PROMPT] * len(prompt) + [Kind.REASONING] * len(answer)))


def to_samples(vocab: Vocab, ds: Dataset, *, robot: bool = True, multimodal: bool = True,
               with_reasoning: bool = True) -> list[tuple[TokenSequence, DomainTag]]:
    """Per-frame robot sequences and per-sample multimodal sequences."""
    out = []
    for traj in ds.trajectories:
        if traj.is_robot and robot:
            out.extend((frame_sequence(vocab, traj, t, with_reasoning=with_reasoning), DomainTag.ROBOT)
                       for t in range(len(traj.frames)))
        elif not traj.is_robot and multimodal:
            out.append((multimodal_sequence(vocab, traj), DomainTag.MULTIMODAL))
    return out
