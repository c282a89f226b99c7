"""Dual-layer reasoning pruning.

A frame keeps its reasoning only when both its scene label and its kinematic
action label are 1. Masked frames keep their slot in the trajectory with an
empty reasoning string and ``meta["reasoning_masked"] = True`` so that frame
alignment survives for loss masking downstream.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .kinematic import KinematicLabels, label_kinematic
from .scene import (
    DEFAULT_THRESHOLD,
    DEFAULT_WINDOW,
    SceneLabels,
    detect_boundaries,
    frame_features,
    labels_from_list,
    read_label_file,
    SceneLabelError,
)
from .trajectory import Dataset, Trajectory, dataset_stats, reasoning_tokens

log = logging.getLogger(__name__)


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneResult:
    pruned: Trajectory
    keyframe_mask: tuple[int, ...]
    retained_tokens: int
    original_tokens: int


def _apply_mask(traj: Trajectory, mask: Sequence[int]) -> PruneResult:
    frames = []
    for fr, keep in zip(traj.frames, mask):
        if keep:
            frames.append(fr)
        else:
            frames.append(replace(fr, reasoning="", meta={**fr.meta, "reasoning_masked": True}))
    pruned = traj.with_frames(frames, meta={**traj.meta, "keyframe_mask": list(mask)})
    return PruneResult(
        pruned=pruned,
        keyframe_mask=tuple(mask),
        retained_tokens=sum(reasoning_tokens(f.reasoning) for f in frames),
        original_tokens=sum(reasoning_tokens(f.reasoning) for f in traj.frames),
    )


def prune_trajectory(traj: Trajectory, scene: SceneLabels, kin: KinematicLabels) -> PruneResult:
    if not traj.is_robot:
        raise PruneError(f"{traj.id!r}: only robot trajectories are pruned")
    n = len(traj.frames)
    if len(scene) != n or len(kin) != n:
        raise PruneError(
            f"{traj.id!r}: label lengths {len(scene)}/{len(kin)} do not match {n} frames"
        )
    mask = [int(bool(s) and bool(a)) for s, a in zip(scene.scene_label, kin.action_label)]
    return _apply_mask(traj, mask)


def random_mask_like(mask: Sequence[int], rng: np.random.Generator) -> list[int]:
    """A random mask keeping the same number of frames as ``mask``."""
    n, k = len(mask), int(sum(mask))
    keep = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
    return [int(t in keep) for t in range(n)]


@dataclass(frozen=True)
class SceneSource:
    """Where scene labels come from.

    ``kind`` is ``"detector"`` (windowed cosine change points over frame
    features), ``"meta"`` (``traj.meta["scene_labels"]``) or ``"file"`` (a
    precomputed label file at ``path``).
    """

    kind: str = "detector"
    path: str | None = None
    window: int = DEFAULT_WINDOW
    threshold: float = DEFAULT_THRESHOLD
    base_dir: str | None = None

    @classmethod
    def parse(cls, spec: str, **kwargs) -> "SceneSource":
        if spec in ("detector", "meta"):
            return cls(kind=spec, **kwargs)
        return cls(kind="file", path=spec, **kwargs)

    def labeler(self) -> Callable[[Trajectory], SceneLabels]:
        if self.kind == "detector":
            return lambda t: detect_boundaries(frame_features(t, self.base_dir), self.window, self.threshold)
        if self.kind == "meta":
            def from_meta(t: Trajectory) -> SceneLabels:
                if "scene_labels" not in t.meta:
                    raise SceneLabelError(f"no scene labels for trajectory {t.id!r}")
                return labels_from_list(t, t.meta["scene_labels"], detector_id="meta")
            return from_meta
        if self.kind == "file":
            table = read_label_file(self.path)

            def from_file(t: Trajectory) -> SceneLabels:
                if t.id not in table:
                    raise SceneLabelError(f"no scene labels for trajectory {t.id!r}")
                return labels_from_list(t, table[t.id])
            return from_file
        raise ValueError(f"unknown scene source {self.kind!r}")


def prune_dataset(
    ds: Dataset,
    scene_source: SceneSource | str = "detector",
    report_path: str | Path | None = None,
    *,
    strategy: str = "dual_layer",
    seed: int = 0,
) -> tuple[Dataset, dict]:
    """Prune every robot trajectory; multimodal samples pass through.

    ``strategy="random"`` masks a random set of frames of the same size as the
    dual-layer mask in each trajectory (a matched-retention control).
    Returns the pruned dataset and the report, which is also written to
    ``report_path`` when given.
    """
    if isinstance(scene_source, str):
        scene_source = SceneSource.parse(scene_source)
    if strategy not in ("dual_layer", "random"):
        raise ValueError(f"unknown strategy {strategy!r}")
    scene_of = scene_source.labeler()
    rng = np.random.default_rng(seed)
    out = []
    for traj in ds.trajectories:
        if not traj.is_robot:
            out.append(traj)
            continue
        result = prune_trajectory(traj, scene_of(traj), label_kinematic(traj))
        if strategy == "random":
            result = _apply_mask(traj, random_mask_like(result.keyframe_mask, rng))
        out.append(result.pruned)
    pruned = Dataset(tuple(out), ds.schema_version)
    report = prune_report(ds, pruned)
    if report_path is not None:
        Path(report_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("pruned %d trajectories, retention %.3f", report["n_trajectories"], report["retention_ratio"])
    return pruned, report


def prune_report(before: Dataset, after: Dataset) -> dict:
    sb, sa = dataset_stats(before), dataset_stats(after)
    kept = total = 0
    for traj in after.trajectories:
        if traj.is_robot:
            mask = traj.meta.get("keyframe_mask", [1] * len(traj.frames))
            kept += sum(mask)
            total += len(mask)
    reduction = 100.0 * (1.0 - sa.reasoning_tokens / sb.reasoning_tokens) if sb.reasoning_tokens else 0.0
    return {
        "n_trajectories": sa.n_trajectories,
        "n_frames": sa.n_frames,
        "retention_ratio": kept / total if total else 1.0,
        "token_reduction_pct": reduction,
        "entropy_before_bits": sb.entropy_bits,
        "entropy_after_bits": sa.entropy_bits,
    }
