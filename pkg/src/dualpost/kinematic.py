"""Kinematic keyframe labels from end-effector acceleration and gripper flips.

A frame gets action label 1 when the norm of the pose's second difference is
strictly above the trajectory mean, or when the gripper state differs from the
previous frame. There are no tunable thresholds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .trajectory import Trajectory

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class KinematicLabels:
    accel_norm: tuple[float, ...]
    mean_accel: float
    gripper_change: tuple[bool, ...]
    action_label: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.action_label)

    def to_record(self, trajectory_id: str) -> dict:
        return {
            "trajectory_id": trajectory_id,
            "accel_norm": list(self.accel_norm),
            "mean_accel": self.mean_accel,
            "gripper_change": list(self.gripper_change),
            "action_label": list(self.action_label),
        }


def unwrap_angles(traj: Trajectory) -> list[tuple[float, ...]]:
    """Poses with the three angle channels made continuous.

    Each angle is shifted by a multiple of 2*pi so that consecutive
    differences fall in [-pi, pi]. Position channels pass through untouched.
    """
    out = [tuple(traj.frames[0].pose)]
    offsets = [0.0, 0.0, 0.0]
    for prev_frame, frame in zip(traj.frames, traj.frames[1:]):
        row = list(frame.pose[:3])
        for c in range(3):
            raw_prev, raw = prev_frame.pose[3 + c], frame.pose[3 + c]
            d = raw - raw_prev
            if abs(d) > math.pi:
                offsets[c] -= TWO_PI * round(d / TWO_PI)
            row.append(raw + offsets[c])
        out.append(tuple(row))
    return out


def accelerations(poses: Sequence[Sequence[float]]) -> list[float]:
    """Norm of the unit-step central second difference; boundary frames get 0."""
    arr = np.asarray(poses, dtype=np.float64)
    n = len(arr)
    acc = [0.0] * n
    for t in range(1, n - 1):
        acc[t] = float(np.linalg.norm(arr[t + 1] - 2.0 * arr[t] + arr[t - 1]))
    return acc


def label_kinematic(traj: Trajectory) -> KinematicLabels:
    acc = accelerations(unwrap_angles(traj))
    n = len(acc)
    mean = float(sum(acc[1:-1]) / (n - 2)) if n >= 3 else 0.0
    grip = [f.gripper for f in traj.frames]
    change = tuple(t > 0 and grip[t] != grip[t - 1] for t in range(n))
    labels = tuple(int(acc[t] > mean or change[t]) for t in range(n))
    return KinematicLabels(tuple(acc), mean, change, labels)
