"""Per-frame scene (event boundary) labels.

Two sources are supported: precomputed labels read from a line-delimited file
(``{"trajectory_id": ..., "labels": [0, 1, ...]}``), and a deterministic
change-point detector comparing the mean feature of the window before each
frame with the window starting at it.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .trajectory import Trajectory

DEFAULT_WINDOW = 3
DEFAULT_THRESHOLD = 0.5
HISTOGRAM_BINS = 64


class SceneLabelError(ValueError):
    pass


@dataclass(frozen=True)
class SceneLabels:
    scene_label: tuple[int, ...]
    detector_id: str
    scores: tuple[float, ...]
    threshold: float = 0.0

    def __len__(self) -> int:
        return len(self.scene_label)

    def to_record(self, trajectory_id: str) -> dict:
        return {
            "trajectory_id": trajectory_id,
            "labels": list(self.scene_label),
            "scores": list(self.scores),
            "detector_id": self.detector_id,
        }


def read_label_file(path: str | Path) -> dict[str, list[int]]:
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            labels = rec.get("labels")
            if not isinstance(labels, list) or any(v not in (0, 1) or isinstance(v, float) for v in labels):
                raise SceneLabelError(f"line {lineno}: labels must be a list of 0/1")
            table[str(rec["trajectory_id"])] = [int(v) for v in labels]
    return table


def labels_from_list(traj: Trajectory, labels: Sequence[int], detector_id: str = "precomputed") -> SceneLabels:
    if len(labels) != len(traj.frames):
        raise SceneLabelError(
            f"length mismatch for {traj.id!r}: {len(labels)} labels for {len(traj.frames)} frames"
        )
    labels = tuple(int(v) for v in labels)
    return SceneLabels(labels, detector_id, tuple(float(v) for v in labels))


def load_scene_labels(traj: Trajectory, path: str | Path | dict[str, list[int]]) -> SceneLabels:
    """Labels for ``traj`` taken verbatim from a precomputed file (or its parsed table)."""
    table = path if isinstance(path, dict) else read_label_file(path)
    if traj.id not in table:
        raise SceneLabelError(f"no scene labels for trajectory {traj.id!r}")
    return labels_from_list(traj, table[traj.id])


def _cosine_score(left: np.ndarray, right: np.ndarray) -> float:
    nl, nr = np.linalg.norm(left), np.linalg.norm(right)
    if nl == 0.0 or nr == 0.0:
        return 0.0
    cos = float(left @ right) / (nl * nr)
    return min(max((1.0 - cos) / 2.0, 0.0), 1.0)


def boundary_scores(features: np.ndarray, window: int) -> np.ndarray:
    """Score for the boundary between frame t-1 and frame t.

    The preceding window is frames [t-window, t), the following one is
    [t, t+window). Score is half the cosine distance of the two means, and 0
    when either side is empty or has a zero mean.
    """
    n = len(features)
    scores = np.zeros(n)
    for t in range(1, n):
        left = features[max(0, t - window):t].mean(axis=0)
        right = features[t:min(n, t + window)].mean(axis=0)
        scores[t] = _cosine_score(left, right)
    return scores


def detect_boundaries(features, window: int = DEFAULT_WINDOW, threshold: float = DEFAULT_THRESHOLD) -> SceneLabels:
    """Label strict local maxima of the boundary score that exceed ``threshold``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise ValueError("features must be a non-empty (frames, dim) array")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    scores = boundary_scores(feats, window)
    n = len(scores)
    labels = []
    for t in range(n):
        peak = (t == 0 or scores[t] > scores[t - 1]) and (t == n - 1 or scores[t] > scores[t + 1])
        labels.append(int(peak and scores[t] > threshold))
    return SceneLabels(tuple(labels), f"cosine-window/w={window}", tuple(float(s) for s in scores), threshold)


def _image_histogram(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"), dtype=np.float64)
    hist, _ = np.histogram(gray, bins=HISTOGRAM_BINS, range=(0.0, 256.0))
    return hist / max(gray.size, 1)


def resolve_ref(ref: str, base_dir: str | Path | None) -> Path:
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def raw_frame_features(traj: Trajectory, base_dir: str | Path | None = None) -> np.ndarray:
    """64-bin grayscale histograms when every frame's image can be read,
    otherwise the pose-and-gripper 7-vector of each frame."""
    paths = [resolve_ref(f.observation_ref, base_dir) for f in traj.frames if f.observation_ref]
    if len(paths) == len(traj.frames) and all(p.is_file() for p in paths):
        try:
            return np.stack([_image_histogram(p) for p in paths])
        except OSError:
            pass
    return np.array([list(f.pose) + [float(f.gripper)] for f in traj.frames], dtype=np.float64)


def frame_features(traj: Trajectory, base_dir: str | Path | None = None) -> np.ndarray:
    """Raw features centred on the trajectory mean.

    Histograms are non-negative, so uncentred window means never have a
    cosine below 0 and the score could not pass 0.5. Centring lets two
    distinct segments point in opposite directions.
    """
    feats = raw_frame_features(traj, base_dir)
    return feats - feats.mean(axis=0, keepdims=True)
