import json

import numpy as np
import pytest

from dualpost.trajectory import Dataset, DomainTag, Frame, Trajectory


def make_traj(tid="t0", n=5, *, poses=None, grippers=None, reasoning=None, domain=DomainTag.ROBOT, meta=None):
    poses = poses if poses is not None else [[0.01 * k, 0, 0, 0, 0, 0] for k in range(n)]
    n = len(poses)
    grippers = grippers if grippers is not None else [0] * n
    reasoning = reasoning if reasoning is not None else [f"step {k} move" for k in range(n)]
    robot = domain is DomainTag.ROBOT
    frames = tuple(
        Frame(index=k, pose=poses[k], gripper=grippers[k], action=(0.1, 0.0, 0.0) if robot else (),
              reasoning=reasoning[k], observation_ref=f"{tid}/{k}.png")
        for k in range(n)
    )
    return Trajectory(tid, "put the block on the goal" if robot else "what colour", frames, domain, meta or {})


@pytest.fixture
def two_traj_file(tmp_path):
    ds = Dataset((
        make_traj("a", 4, reasoning=["Move Near"] * 4),
        make_traj("b", 3, reasoning=["a", "b", ""]),
    ))
    path = tmp_path / "two.jsonl"
    from dualpost.trajectory import save_dataset
    save_dataset(ds, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path
