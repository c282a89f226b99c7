"""Trajectory data model, line-delimited interchange format and corpus statistics.

One record per line, one trajectory per record::

    {"domain_tag": "Robot", "frames": [{"action": [...], "gripper": 0, "index": 0,
     "observation_ref": "...", "pose": [x, y, z, rx, ry, rz], "reasoning": "..."}],
     "id": "...", "instruction": "...", "meta": {}, "schema_version": "dualpost/1"}

Unknown keys on records and frames survive a load/save round trip.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

SCHEMA_VERSION = "dualpost/1"

_FRAME_KEYS = ("index", "pose", "gripper", "action", "reasoning", "observation_ref", "meta")
_TRAJ_KEYS = ("id", "instruction", "domain_tag", "frames", "meta", "schema_version")


class DomainTag(str, Enum):
    ROBOT = "Robot"
    MULTIMODAL = "Multimodal"


class SchemaError(ValueError):
    """A record violates the interchange schema.

    ``line`` is 1-based (``None`` when validating in memory), ``field`` names
    the offending key path.
    """

    def __init__(self, message: str, *, field: str, line: int | None = None):
        self.field = field
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}: {message}")


@dataclass(frozen=True)
class Frame:
    index: int
    pose: tuple[float, ...]
    gripper: int
    action: tuple[float, ...] = ()
    reasoning: str = ""
    observation_ref: str = ""
    meta: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "pose", tuple(float(v) for v in self.pose))
        object.__setattr__(self, "action", tuple(float(v) for v in self.action))

    def validate(self) -> None:
        if len(self.pose) != 6:
            raise SchemaError(f"expected 6 entries, got {len(self.pose)}", field="pose")
        if not all(math.isfinite(v) for v in self.pose):
            raise SchemaError("non-finite entry", field="pose")
        if self.gripper not in (0, 1) or isinstance(self.gripper, float):
            raise SchemaError(f"must be 0 or 1, got {self.gripper!r}", field="gripper")
        if not all(math.isfinite(v) for v in self.action):
            raise SchemaError("non-finite entry", field="action")

    def to_record(self) -> dict[str, Any]:
        rec = dict(self.extra)
        rec.update(
            index=self.index,
            pose=list(self.pose),
            gripper=self.gripper,
            action=list(self.action),
            reasoning=self.reasoning,
            observation_ref=self.observation_ref,
        )
        if self.meta:
            rec["meta"] = self.meta
        return rec


@dataclass(frozen=True)
class Trajectory:
    id: str
    instruction: str
    frames: tuple[Frame, ...]
    domain_tag: DomainTag = DomainTag.ROBOT
    meta: dict[str, Any] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def is_robot(self) -> bool:
        return self.domain_tag is DomainTag.ROBOT

    def validate(self) -> None:
        if not self.id:
            raise SchemaError("must be a non-empty string", field="id")
        if not self.frames:
            raise SchemaError("trajectory has no frames", field="frames")
        if self.is_robot and not self.instruction:
            raise SchemaError("robot trajectories need an instruction", field="instruction")
        prev = -1
        for k, fr in enumerate(self.frames):
            try:
                fr.validate()
            except SchemaError as err:
                raise SchemaError(str(err).split(": ", 1)[-1], field=f"frames[{k}].{err.field}") from None
            if (k == 0 and fr.index != 0) or fr.index <= prev:
                raise SchemaError("indices must increase strictly from 0", field=f"frames[{k}].index")
            prev = fr.index
            if not self.is_robot and fr.action:
                raise SchemaError("multimodal samples carry no action", field=f"frames[{k}].action")

    def with_frames(self, frames: Iterable[Frame], **changes) -> "Trajectory":
        return replace(self, frames=tuple(frames), **changes)

    def to_record(self) -> dict[str, Any]:
        rec = dict(self.extra)
        rec.update(
            id=self.id,
            instruction=self.instruction,
            domain_tag=self.domain_tag.value,
            frames=[f.to_record() for f in self.frames],
            meta=self.meta,
            schema_version=SCHEMA_VERSION,
        )
        return rec


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...] = ()
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def validate(self) -> None:
        seen = set()
        for traj in self.trajectories:
            traj.validate()
            if traj.id in seen:
                raise SchemaError(f"duplicate trajectory id {traj.id!r}", field="id")
            seen.add(traj.id)

    def by_id(self) -> dict[str, Trajectory]:
        return {t.id: t for t in self.trajectories}


def _frame_from_record(rec: Any, k: int) -> Frame:
    where = f"frames[{k}]"
    if not isinstance(rec, dict):
        raise SchemaError("frame must be an object", field=where)
    for key in ("index", "pose", "gripper"):
        if key not in rec:
            raise SchemaError("missing", field=f"{where}.{key}")
    pose, action = rec["pose"], rec.get("action", [])
    if not isinstance(pose, list) or not all(_is_number(v) for v in pose):
        raise SchemaError("must be a list of numbers", field=f"{where}.pose")
    if not isinstance(action, list) or not all(_is_number(v) for v in action):
        raise SchemaError("must be a list of numbers", field=f"{where}.action")
    gripper = rec["gripper"]
    if isinstance(gripper, bool) or not _is_number(gripper) or gripper not in (0, 1):
        raise SchemaError(f"must be 0 or 1, got {gripper!r}", field=f"{where}.gripper")
    index = rec["index"]
    if isinstance(index, bool) or not isinstance(index, int):
        raise SchemaError("must be an integer", field=f"{where}.index")
    reasoning = rec.get("reasoning", "")
    if not isinstance(reasoning, str):
        raise SchemaError("must be a string", field=f"{where}.reasoning")
    meta = rec.get("meta", {})
    if not isinstance(meta, dict):
        raise SchemaError("must be an object", field=f"{where}.meta")
    return Frame(
        index=index,
        pose=pose,
        gripper=int(gripper),
        action=action,
        reasoning=reasoning,
        observation_ref=str(rec.get("observation_ref", "")),
        meta=meta,
        extra={k: v for k, v in rec.items() if k not in _FRAME_KEYS},
    )


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def trajectory_from_record(rec: Any) -> Trajectory:
    if not isinstance(rec, dict):
        raise SchemaError("record must be an object", field="<record>")
    for key in ("id", "frames"):
        if key not in rec:
            raise SchemaError("missing", field=key)
    if not isinstance(rec["frames"], list):
        raise SchemaError("must be a list", field="frames")
    version = rec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported version {version!r}", field="schema_version")
    try:
        tag = DomainTag(rec.get("domain_tag", DomainTag.ROBOT.value))
    except ValueError:
        raise SchemaError(f"unknown tag {rec.get('domain_tag')!r}", field="domain_tag") from None
    meta = rec.get("meta", {})
    if not isinstance(meta, dict):
        raise SchemaError("must be an object", field="meta")
    traj = Trajectory(
        id=str(rec["id"]),
        instruction=str(rec.get("instruction", "")),
        frames=tuple(_frame_from_record(f, k) for k, f in enumerate(rec["frames"])),
        domain_tag=tag,
        meta=meta,
        extra={k: v for k, v in rec.items() if k not in _TRAJ_KEYS},
    )
    traj.validate()
    return traj


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a trajectory file; the first bad record aborts the load."""
    trajectories = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise SchemaError(f"invalid JSON ({err.msg})", field="<record>", line=lineno) from None
            try:
                traj = trajectory_from_record(rec)
            except SchemaError as err:
                raise SchemaError(str(err), field=err.field, line=lineno) from None
            if traj.id in seen:
                raise SchemaError(f"duplicate trajectory id {traj.id!r}", field="id", line=lineno)
            seen.add(traj.id)
            trajectories.append(traj)
    return Dataset(tuple(trajectories))


def dumps_record(rec: dict[str, Any]) -> str:
    return json.dumps(rec, sort_keys=True, ensure_ascii=False, allow_nan=False)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    ds.validate()
    with open(path, "w", encoding="utf-8") as fh:
        for traj in ds.trajectories:
            fh.write(dumps_record(traj.to_record()))
            fh.write("\n")


def reasoning_tokens(text: str) -> int:
    return len(text.split())


def entropy_bits(counts: Iterable[int]) -> float:
    counts = [c for c in counts if c > 0]
    total = sum(counts)
    if total == 0:
        return 0.0
    h = -sum((c / total) * math.log2(c / total) for c in counts)
    return max(h, 0.0)


@dataclass(frozen=True)
class StatsReport:
    n_trajectories: int
    n_frames: int
    reasoning_tokens: int
    distinct_reasoning: int
    entropy_bits: float
    retention_ratio: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_trajectories": self.n_trajectories,
            "n_frames": self.n_frames,
            "reasoning_tokens": self.reasoning_tokens,
            "distinct_reasoning": self.distinct_reasoning,
            "entropy_bits": self.entropy_bits,
            "retention_ratio": self.retention_ratio,
        }


def reasoning_counter(trajectories: Sequence[Trajectory]) -> Counter:
    """Counts of non-empty reasoning strings over every frame."""
    return Counter(f.reasoning for t in trajectories for f in t.frames if f.reasoning)


def dataset_stats(ds: Dataset) -> StatsReport:
    """Counts, whitespace-token totals and reasoning-string entropy (bits).

    Masked (empty) reasoning is left out of the distinct count and the
    entropy. ``retention_ratio`` is reported only when robot trajectories carry
    a ``keyframe_mask`` in their meta, i.e. after pruning.
    """
    counter = reasoning_counter(ds.trajectories)
    kept = total = 0
    for traj in ds.trajectories:
        mask = traj.meta.get("keyframe_mask")
        if traj.is_robot and mask is not None:
            kept += sum(int(m) for m in mask)
            total += len(mask)
    return StatsReport(
        n_trajectories=len(ds.trajectories),
        n_frames=sum(len(t.frames) for t in ds.trajectories),
        reasoning_tokens=sum(reasoning_tokens(f.reasoning) for t in ds.trajectories for f in t.frames),
        distinct_reasoning=len(counter),
        entropy_bits=entropy_bits(counter.values()),
        retention_ratio=(kept / total) if total else None,
    )
