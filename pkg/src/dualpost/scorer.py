"""VLA Score: judge verdicts gated by simulation success, per trajectory and aggregated."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .judge.gateway import JudgeError, JudgeGateway, JudgeVerdict
from .judge.prompts import ExemplarSummary, JudgeRequest, PromptError, Template
from .kb import Encoder, KBError, KnowledgeBase, read_jsonl, retrieve
from .trajectory import Dataset, Trajectory


class PolicyKind(str, Enum):
    REASONING = "Reasoning"
    SPECIALIST = "Specialist"

    @property
    def template(self) -> Template:
        return Template.REASONING if self is PolicyKind.REASONING else Template.SPECIALIST


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreCard:
    trajectory_id: str
    r: float | None
    a: float
    i: float
    ra: float
    b: int
    score: float
    policy_kind: PolicyKind

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy_kind"] = self.policy_kind.value
        return d


def _unit(value: int | None, name: str) -> float:
    if value is None:
        raise ScoreError(f"verdict is missing {name}")
    if not 0 <= value <= 10:
        raise ScoreError(f"{name}={value} outside 0-10")
    return value / 10.0


def score_trajectory(verdict: JudgeVerdict, b: int | bool, kind: PolicyKind | str,
                     trajectory_id: str = "") -> ScoreCard:
    """Reasoning: ((r + a*i)/2) * ra * b. Specialist: a * i * ra * b with ra = 1."""
    kind = PolicyKind(kind)
    b = int(bool(b))
    a = _unit(verdict.action, "Action")
    i = _unit(verdict.intention, "Intention")
    if kind is PolicyKind.REASONING:
        r = _unit(verdict.reasoning, "Reasoning")
        ra = _unit(verdict.alignment, "Alignment")
        score = ((r + a * i) / 2.0) * ra * b
    else:
        r, ra = None, 1.0
        score = a * i * ra * b
    return ScoreCard(trajectory_id, r, a, i, ra, b, score, kind)


@dataclass
class EvalReport:
    policy_kind: PolicyKind
    cards: list[ScoreCard] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    outcomes: dict[str, int] = field(default_factory=dict)

    @staticmethod
    def _mean100(values: Sequence[float]) -> float | None:
        return 100.0 * sum(values) / len(values) if values else None

    @property
    def means(self) -> dict[str, float | None]:
        """Means x100 over scored trajectories; absent (None) when nothing was scored."""
        cards = self.cards
        r = [c.r for c in cards if c.r is not None]
        return {
            "R": self._mean100(r) if self.policy_kind is PolicyKind.REASONING else None,
            "A": self._mean100([c.a for c in cards]),
            "I": self._mean100([c.i for c in cards]),
            "RA": self._mean100([c.ra for c in cards]),
            "Sim.": self._mean100(list(self.outcomes.values())),
            "VLA Score": self._mean100([c.score for c in cards]),
        }

    def to_dict(self) -> dict:
        return {
            "policy_kind": self.policy_kind.value,
            "n_trajectories": len(self.outcomes),
            "n_scored": len(self.cards),
            "n_errors": len(self.errors),
            "means": self.means,
            "normalization": "judge scores divided by 10, means reported x100",
            "cards": [c.to_dict() for c in sorted(self.cards, key=lambda c: c.trajectory_id)],
            "errors": dict(sorted(self.errors.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self, name: str = "policy") -> str:
        cols = ("R", "A", "I", "RA", "Sim.", "VLA Score")
        m = self.means
        cells = ["-" if m[c] is None else f"{m[c]:.1f}" for c in cols]
        width = max(len(name), 6)
        head = f"{'Model':<{width}} | " + " | ".join(f"{c:>9}" for c in cols)
        row = f"{name:<{width}} | " + " | ".join(f"{c:>9}" for c in cells)
        return "\n".join([head, "-" * len(head), row]) + "\n"


def read_outcomes(path: str | Path) -> dict[str, int]:
    """Outcome file: ``{trajectory_id, success: bool}`` per line."""
    table = {}
    for rec in read_jsonl(path):
        tid, ok = rec.get("trajectory_id"), rec.get("success")
        if not tid or not isinstance(ok, bool):
            raise ScoreError(f"{path}: outcome records need trajectory_id and a boolean success")
        table[tid] = int(ok)
    return table


def reasoning_text(traj: Trajectory) -> str:
    """The trajectory's non-empty per-frame reasoning, in order."""
    return " | ".join(f.reasoning for f in traj.frames if f.reasoning)


def _summary(ex, channel: str) -> ExemplarSummary:
    return ExemplarSummary(ex.task_text, dict(ex.scores), ex.expert_note, channel)


def build_request(traj: Trajectory, kind: PolicyKind, kb: KnowledgeBase | None,
                  encoder: Encoder | None) -> JudgeRequest:
    exemplars: list[ExemplarSummary] = []
    refs = [f.observation_ref for f in traj.frames if f.observation_ref]
    if kb is not None and len(kb) and encoder is not None:
        hit = retrieve(kb, traj.instruction, refs, encoder)
        exemplars.append(_summary(hit.text_hit, "task"))
        if hit.scene_hit.id != hit.text_hit.id:
            exemplars.append(_summary(hit.scene_hit, "scene"))
    return JudgeRequest(
        template=kind.template,
        task_description=traj.instruction,
        reasoning=reasoning_text(traj) if kind is PolicyKind.REASONING else None,
        frame_refs=tuple(refs),
        exemplars=tuple(exemplars),
        trajectory_id=traj.id,
    )


def judge_dataset(ds: Dataset, gateway: JudgeGateway, kind: PolicyKind | str,
                  kb: KnowledgeBase | None = None, encoder: Encoder | None = None
                  ) -> dict[str, JudgeVerdict | Exception]:
    """Judge every trajectory; failures are returned in place of verdicts."""
    kind = PolicyKind(kind)
    results: dict[str, JudgeVerdict | Exception] = {}
    requests = []
    for traj in ds.trajectories:
        try:
            req = build_request(traj, kind, kb, encoder)
            req.validate()
            requests.append(req)
        except (PromptError, KBError, OSError, RuntimeError) as err:
            results[traj.id] = err
    for req, out in zip(requests, gateway.judge_many(requests)):
        results[req.trajectory_id] = out
    return {t.id: results[t.id] for t in ds.trajectories}


def evaluate_run(ds: Dataset, outcomes: str | Path | Mapping[str, int], kb: KnowledgeBase | None,
                 gateway: JudgeGateway, kind: PolicyKind | str, encoder: Encoder | None = None) -> EvalReport:
    kind = PolicyKind(kind)
    table = read_outcomes(outcomes) if isinstance(outcomes, (str, Path)) else {k: int(bool(v)) for k, v in outcomes.items()}
    missing = [t.id for t in ds.trajectories if t.id not in table]
    if missing:
        raise ScoreError(f"no simulation outcome for {len(missing)} trajectories, first {missing[0]!r}")
    report = EvalReport(kind, outcomes={t.id: table[t.id] for t in ds.trajectories})
    for tid, result in judge_dataset(ds, gateway, kind, kb, encoder).items():
        if isinstance(result, Exception):
            report.errors[tid] = f"{type(result).__name__}: {result}"
            continue
        try:
            report.cards.append(score_trajectory(result, table[tid], kind, tid))
        except ScoreError as err:
            report.errors[tid] = f"ScoreError: {err}"
    return report


def verdict_record(trajectory_id: str, verdict: JudgeVerdict) -> dict:
    return {"trajectory_id": trajectory_id, **verdict.to_dict()}


__all__ = [
    "PolicyKind", "ScoreCard", "ScoreError", "EvalReport", "score_trajectory", "read_outcomes",
    "build_request", "judge_dataset", "evaluate_run", "verdict_record", "JudgeError",
]
