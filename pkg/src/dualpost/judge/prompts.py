"""Judge prompt templates for reasoning and specialist policies.

Rendering is deterministic; ``tests/golden`` pins the exact bytes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence


class Template(str, Enum):
    REASONING = "ReasoningVLA"
    SPECIALIST = "SpecialistVLA"


class PromptError(ValueError):
    pass


MAX_FRAMES = 16

_INTRO = """\
**Character Introduction**
You are an **engineer proficient in evaluating robotic operations**.
Your task is to perform a **fine-grained, rigorous evaluation** of a robot’s behavior.
"""

_INPUTS = {
    Template.REASONING: """\
**Input Information**
You will receive the following four components:
1. **Task Description** — natural language description of the robot’s assigned task.
2. **Motion Trajectory** — a sequence of images representing the robot’s movements over time.
3. **Reasoning Content** — the robot’s moment-by-moment reasoning corresponding to the trajectory.
""",
    Template.SPECIALIST: """\
**Input Information**
You will receive the following four components:
1. **Task Description** — natural language description of the robot’s assigned task.
2. **Motion Trajectory** — a sequence of images representing the robot’s movements over time.
""",
}

_ROWS = {
    "Reasoning": ("Reasoning Score", "Measures the correctness, logical consistency, and usefulness of the reasoning in guiding the task."),
    "Action": ("Action Score", "Measures the coherence, precision, and efficiency of the action sequence in achieving the task."),
    "Intention": ("Intention Score", "Evaluates whether the reasoning and actions constructively contribute toward solving the task."),
    "Alignment": ("Reason–Act Alignment Score", "Measures the consistency between reasoning and corresponding actions, ensuring logical and behavioral alignment."),
}

DIMENSIONS = {
    Template.REASONING: ("Reasoning", "Action", "Intention", "Alignment"),
    Template.SPECIALIST: ("Action", "Intention"),
}

_REQUIREMENTS = """\
*Scoring Guideline:* 10 = excellent; 5 = acceptable; 0 = poor or missing evidence.

**Evaluation Requirements**
- Be **objective**, **thorough**, and **specific** — do not overlook details or fabricate facts.
- If the task or data is ambiguous, **acknowledge uncertainty explicitly**.
- Mention any **critical failure modes** (e.g., collisions, unsafe motions, too slow).
- What you are seeing is the complete process of a robotic arm performing a task. **A task must be fully executed to be considered successful**; if opening a drawer, it must be fully opened, and if closing a drawer, it must be fully closed.
- Please provide a rigorous evaluation.
"""

_EXAMPLE_HEADING = {Template.REASONING: "**Example**", Template.SPECIALIST: "**Examples**"}

_RESULT_KEYS = {
    Template.REASONING: ("Action", "Intention", "Reasoning", "Alignment"),
    Template.SPECIALIST: ("Action", "Intention"),
}


def _output_format(template: Template) -> str:
    keys = "".join(f'    "{k}": int,\n' for k in _RESULT_KEYS[template])
    return (
        "**Output Format**\n"
        'Output must be **strictly formatted in JSON** and include your internal reasoning under "Thought".\n'
        "{\n"
        '  "Thought": string, // Briefly describe your thought process and reasoning steps to evaluate the robot\'s performance.\n'
        '  "Result": {\n'
        f"{keys}"
        '    "Success": bool [optional]\n'
        "  }\n"
        "}\n"
    )


def _table(template: Template) -> str:
    lines = ["| **Dimension** | **Description** |", "|---|---|"]
    lines += [f"| {_ROWS[d][0]} | {_ROWS[d][1]} |" for d in DIMENSIONS[template]]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ExemplarSummary:
    """What the judge sees of one retrieved knowledge-base entry."""

    task_text: str
    scores: dict[str, int | None]
    expert_note: str = ""
    channel: str = "task"


@dataclass(frozen=True)
class JudgeRequest:
    template: Template
    task_description: str
    reasoning: str | None = None
    frame_refs: tuple[str, ...] = ()
    exemplars: tuple[ExemplarSummary, ...] = ()
    trajectory_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "template", Template(self.template))
        object.__setattr__(self, "frame_refs", subsample_frames(tuple(self.frame_refs)))
        object.__setattr__(self, "exemplars", tuple(self.exemplars))

    def validate(self) -> None:
        if not self.task_description:
            raise PromptError("task_description is required")
        if self.template is Template.REASONING and not self.reasoning:
            raise PromptError("reasoning is required for the ReasoningVLA template")
        if self.template is Template.SPECIALIST and self.reasoning:
            raise PromptError("the SpecialistVLA template takes no reasoning")
        if len(self.exemplars) > 2:
            raise PromptError("at most two exemplars are allowed")


def subsample_frames(refs: Sequence[str], limit: int = MAX_FRAMES) -> tuple[str, ...]:
    """At most ``limit`` evenly spaced references, first and last included."""
    n = len(refs)
    if n <= limit:
        return tuple(refs)
    picks = sorted({round(k * (n - 1) / (limit - 1)) for k in range(limit)})
    return tuple(refs[i] for i in picks)


_SCORE_LABELS = {"Reasoning": "R", "Action": "A", "Intention": "I", "Alignment": "RA"}


def _exemplar_block(k: int, ex: ExemplarSummary, template: Template) -> str:
    parts = []
    for dim in DIMENSIONS[template]:
        value = ex.scores.get(_SCORE_LABELS[dim])
        parts.append(f"{dim} {value if value is not None else 'n/a'}")
    note = ex.expert_note or "none"
    return (
        f"Example {k} (retrieved by {ex.channel}):\n"
        f"Task: {ex.task_text}\n"
        f"Scores: {', '.join(parts)}\n"
        f"Expert note: {note}\n"
    )


@dataclass(frozen=True)
class Prompt:
    system: str
    user: str
    images: tuple[str, ...] = field(default=())

    def render(self) -> str:
        return f"### System\n{self.system}\n### User\n{self.user}\n"


def build_prompt(req: JudgeRequest) -> Prompt:
    req.validate()
    t = req.template
    examples = "".join(_exemplar_block(k, ex, t) for k, ex in enumerate(req.exemplars, start=1))
    system = (
        _INTRO
        + "\n"
        + _INPUTS[t]
        + "\n**Your Task**\n"
        + "Evaluate the robot’s performance along **four dimensions**, each scored on a **0–10** scale:\n\n"
        + _table(t)
        + "\n"
        + _REQUIREMENTS
        + "\n"
        + _EXAMPLE_HEADING[t]
        + "\n"
        + examples
        + "\n"
        + _output_format(t)
    )
    if t is Template.REASONING:
        user = f"Task: {req.task_description}; Reasoning: {req.reasoning}; Trajectory:[Images]"
    else:
        user = f"Task: {req.task_description}; Trajectory:[Images]"
    return Prompt(system=system, user=user, images=req.frame_refs)
