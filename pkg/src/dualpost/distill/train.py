"""Training protocols on the gridworld task.

Three protocols share one seed-determined pipeline:

``specialist``
    Fresh policy trained on robot frames with actions only (CE on actions).
``mixed_baseline``
    The specialist, trained further on robot frames with full reasoning plus
    multimodal QA (CE on every non-prompt token), then trained for the same
    number of epochs again on that data.
``dual_distilled``
    Same first two stages; the last stage instead uses dual-layer pruned robot
    reasoning and adds ``lam * KD`` with the specialist as action teacher and
    the stage-two model as reasoning teacher.

Every stage runs ``epochs`` passes of plain gradient descent over shuffled
mini-batches. By default the mini-batch CE is the mean over every trainable
position in the batch and KD the mean over every distilled position.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from ..prune import SceneSource, prune_dataset
from ..trajectory import Dataset, DomainTag
from .policy import (
    ACTION_ROLE,
    NON_PROMPT,
    ROLE_DROP,
    ROLE_KINDS,
    DistillConfig,
    Kind,
    Policy,
    TokenSequence,
    add_grads,
    log_softmax,
    positions,
    teacher_probs,
)
from .task import DEFAULT_GRID, PROMPT_LEN, Vocab, make_synthetic_task, to_samples

log = logging.getLogger(__name__)

PROTOCOLS = ("specialist", "mixed_baseline", "dual_distilled")
PRUNING = ("dual_layer", "random", "none")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolSpec:
    protocol: str = "dual_distilled"
    epochs: int = 40
    step_size: float = 0.05
    batch_size: int = 32
    temperature: float = 2.0
    lam: float = 0.15
    seed: int = 0
    n_robot: int = 2000
    n_multimodal: int = 2000
    n_heldout: int = 500
    grid: int = DEFAULT_GRID
    embed: int = 6
    hidden: int = 8
    context: int = 14
    pruning: str = "dual_layer"
    scene_noise: float = 0.2
    reduction: str = "token"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.reduction not in ("sample", "token"):
            raise ValueError(f"reduction must be 'sample' or 'token', got {self.reduction!r}")
        if self.pruning not in PRUNING:
            raise ValueError(f"pruning must be one of {PRUNING}, got {self.pruning!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.step_size <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and step_size > 0 are required")
        if self.temperature <= 0 or self.lam < 0:
            raise ValueError("temperature must be positive and lambda non-negative")
        if self.n_robot < 1 or self.n_multimodal < 0 or self.n_heldout < 1:
            raise ValueError("dataset sizes must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolSpec":
        data = dict(data)
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        sizes = data.pop("dataset_sizes", None) or {}
        data.update({k: v for k, v in sizes.items() if k in ("n_robot", "n_multimodal", "n_heldout")})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "ProtocolSpec":
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        return cls.from_dict(data.get("distill", data))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @property
    def distill_config(self) -> DistillConfig:
        return DistillConfig(temperature=self.temperature, lam=self.lam)


@dataclass
class EpochMetrics:
    epoch: int
    action_acc: float
    reasoning_acc: float
    loss_total: float
    loss_kd: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedPolicy:
    policy: Policy
    spec: ProtocolSpec
    trace: list[EpochMetrics] = field(default_factory=list)

    @property
    def final(self) -> EpochMetrics:
        return self.trace[-1]


class PositionTable:
    """Flattened training positions of a list of samples.

    Rows are grouped by sample; ``offsets[s]:offsets[s+1]`` are the rows of
    sample ``s``. ``ce_w`` is ``1/n`` over a sample's non-prompt rows; ``kd_w``
    is ``1/m`` over its routed distillation rows and 0 elsewhere.
    """

    def __init__(self, samples: Sequence[tuple[TokenSequence, DomainTag]], context: int,
                 cfg: DistillConfig | None = None, teachers: dict[str, Policy] | None = None,
                 on_teacher: Callable[[str, np.ndarray], None] | None = None):
        ctx, tgt, ce_w, kd_w, owner, counts = [], [], [], [], [], []
        kd_rows: dict[str, list[int]] = {}
        kd_tctx: dict[str, list[np.ndarray]] = {}
        row = 0
        for s, (seq, domain) in enumerate(samples):
            c, t = positions(seq, NON_PROMPT, context)
            idx = seq.positions_of(NON_PROMPT)
            n = len(idx)
            ctx.append(c)
            tgt.append(t)
            ce_w.append(np.full(n, 1.0 / n))
            owner.append(np.full(n, s))
            counts.append(n)
            w = np.zeros(n)
            if cfg is not None and teachers is not None and cfg.lam > 0:
                role = cfg.role_for(domain)
                kinds = ROLE_KINDS[role]
                sel = [j for j, k in enumerate(idx) if seq.kinds[k] in kinds]
                if sel:
                    w[sel] = 1.0 / len(sel)
                    teacher = teachers[role]
                    tc, _ = positions(seq, kinds, teacher.context, drop=ROLE_DROP[role])
                    kd_rows.setdefault(role, []).extend(row + j for j in sel)
                    kd_tctx.setdefault(role, []).append(tc)
            kd_w.append(w)
            row += n
        self.ctx = np.concatenate(ctx) if ctx else np.zeros((0, context), dtype=np.int64)
        self.tgt = np.concatenate(tgt) if tgt else np.zeros(0, dtype=np.int64)
        self.ce_w = np.concatenate(ce_w) if ce_w else np.zeros(0)
        self.kd_w = np.concatenate(kd_w) if kd_w else np.zeros(0)
        self.owner = np.concatenate(owner) if owner else np.zeros(0, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.q = None
        if kd_rows:
            self.q = np.zeros((len(self.tgt), teachers[next(iter(kd_rows))].vocab_size))
            for role, rows in kd_rows.items():
                rows = np.asarray(rows)
                if on_teacher is not None:
                    on_teacher(role, np.unique(self.owner[rows]))
                self.q[rows] = teacher_probs(teachers[role], np.concatenate(kd_tctx[role]), cfg.temperature)

    @property
    def n_samples(self) -> int:
        return len(self.offsets) - 1

    def rows_for(self, samples: np.ndarray) -> np.ndarray:
        starts, ends = self.offsets[samples], self.offsets[samples + 1]
        lengths = ends - starts
        base = np.repeat(starts - np.cumsum(np.concatenate([[0], lengths[:-1]])), lengths)
        return base + np.arange(lengths.sum())


def batch_loss(student: Policy, table: PositionTable, rows: np.ndarray, n_samples: int,
               cfg: DistillConfig, reduction: str = "sample") -> tuple[float, float, dict]:
    """``CE + lam * KD`` over a mini-batch; returns (total, kd, grad).

    ``reduction="sample"`` averages the per-sample losses. ``"token"`` averages
    CE over every trainable position in the batch and KD over every distilled
    position, so long sequences weigh proportionally more.
    """
    ctx, tgt = table.ctx[rows], table.tgt[rows]
    if reduction == "token":
        ce_w = np.full(len(rows), 1.0 / max(len(rows), 1))
        kd_all = (table.kd_w[rows] > 0).astype(float)
        kd_all /= max(kd_all.sum(), 1.0)
    elif reduction == "sample":
        ce_w = table.ce_w[rows] / n_samples
        kd_all = table.kd_w[rows] / n_samples
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    x, h = student.hidden(ctx)
    logits = h @ student.params["w2"] + student.params["b2"]
    logp = log_softmax(logits)
    r = np.arange(len(rows))
    ce = float(-(ce_w * logp[r, tgt]).sum())
    d = np.exp(logp)
    d[r, tgt] -= 1.0
    d *= ce_w[:, None]
    kd = 0.0
    if table.q is not None and cfg.lam > 0:
        kd_w = kd_all
        live = kd_w > 0
        if live.any():
            T = cfg.temperature
            q = table.q[rows][live]
            logp_t = log_softmax(logits[live], T)
            with np.errstate(divide="ignore", invalid="ignore"):
                qlogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
            kl = np.maximum((qlogq - q * logp_t).sum(axis=1), 0.0)
            kd = float(T * T * (kd_w[live] * kl).sum())
            d[live] += cfg.lam * T * kd_w[live][:, None] * (np.exp(logp_t) - q)
    grad = student.backward(ctx, x, h, d)
    return ce + cfg.lam * kd, kd, grad


def greedy_first_action(policy: Policy, prompts: np.ndarray, action_ids: Sequence[int],
                        reasoning_ids: Sequence[int], max_reasoning: int = 8) -> np.ndarray:
    """Decode greedily from each prompt until an action token appears.

    Reasoning tokens are appended and decoding continues; any other token, or
    running out of budget, yields -1.
    """
    n = len(prompts)
    hist = [list(p) for p in prompts]
    out = np.full(n, -1, dtype=np.int64)
    live = np.arange(n)
    is_action = np.zeros(policy.vocab_size, dtype=bool)
    is_action[list(action_ids)] = True
    is_reason = np.zeros(policy.vocab_size, dtype=bool)
    is_reason[list(reasoning_ids)] = True
    C = policy.context
    for _ in range(max_reasoning + 1):
        if len(live) == 0:
            break
        ctx = np.array([([policy.pad] * C + hist[i])[-C:] for i in live], dtype=np.int64)
        tok = policy.logits(ctx).argmax(axis=1)
        act = is_action[tok]
        out[live[act]] = tok[act]
        cont = is_reason[tok] & ~act
        for i, t in zip(live[cont], tok[cont]):
            hist[i].append(int(t))
        live = live[cont]
    return out


@dataclass
class EvalSet:
    robot_prompts: np.ndarray
    robot_actions: np.ndarray
    mm_prompts: np.ndarray
    mm_answers: np.ndarray


def build_eval_set(vocab: Vocab, ds: Dataset) -> EvalSet:
    rp, ra, mp, ma = [], [], [], []
    for seq, domain in to_samples(vocab, ds, with_reasoning=False):
        if domain is DomainTag.ROBOT:
            rp.append(seq.tokens[:PROMPT_LEN])
            ra.append(seq.tokens[-1])
        else:
            mp.append(seq.tokens[:PROMPT_LEN])
            ma.append(seq.tokens[PROMPT_LEN])
    return EvalSet(np.array(rp, dtype=np.int64), np.array(ra, dtype=np.int64),
                   np.array(mp, dtype=np.int64).reshape(-1, PROMPT_LEN), np.array(ma, dtype=np.int64))


def evaluate(policy: Policy, vocab: Vocab, ev: EvalSet) -> tuple[float, float]:
    """(action accuracy on held-out robot frames, answer accuracy on held-out QA)."""
    pred = greedy_first_action(policy, ev.robot_prompts, vocab.action_ids, vocab.reasoning_ids)
    action_acc = float(np.mean(pred == ev.robot_actions)) if len(pred) else 0.0
    if len(ev.mm_prompts):
        ctx = np.array([([policy.pad] * policy.context + list(p))[-policy.context:] for p in ev.mm_prompts])
        answers = policy.logits(ctx).argmax(axis=1)
        reasoning_acc = float(np.mean(answers == ev.mm_answers))
    else:
        reasoning_acc = 0.0
    return action_acc, reasoning_acc


def run_stage(policy: Policy, table: PositionTable, spec: ProtocolSpec, cfg: DistillConfig,
              rng: np.random.Generator, vocab: Vocab, ev: EvalSet, epochs: int,
              epoch_offset: int = 0) -> list[EpochMetrics]:
    """Plain gradient descent over shuffled mini-batches, in place on ``policy``."""
    trace = []
    n = table.n_samples
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = kd_total = 0.0
        for start in range(0, n, spec.batch_size):
            batch = order[start:start + spec.batch_size]
            loss, kd, grad = batch_loss(policy, table, table.rows_for(batch), len(batch), cfg, spec.reduction)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch_offset + epoch + 1}, batch starting {start}: "
                    f"loss={loss}, kd={kd}, step_size={spec.step_size}"
                )
            for k, g in grad.items():
                policy.params[k] -= spec.step_size * g
            total += loss * len(batch)
            kd_total += kd * len(batch)
        if not policy.is_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch_offset + epoch + 1}")
        action_acc, reasoning_acc = evaluate(policy, vocab, ev)
        m = EpochMetrics(epoch_offset + epoch + 1, action_acc, reasoning_acc, total / max(n, 1), kd_total / max(n, 1))
        log.debug("epoch %d: %s", m.epoch, m)
        trace.append(m)
    return trace


@dataclass
class Corpus:
    vocab: Vocab
    train: Dataset
    heldout: Dataset
    eval_set: EvalSet


def build_corpus(spec: ProtocolSpec) -> Corpus:
    vocab = Vocab(spec.grid)
    train = make_synthetic_task(spec.seed, spec.n_robot, spec.n_multimodal, grid=spec.grid,
                                scene_noise=spec.scene_noise, prefix="train-")
    heldout = make_synthetic_task(10_000 + spec.seed, spec.n_heldout, spec.n_heldout, grid=spec.grid,
                                  scene_noise=spec.scene_noise, prefix="heldout-")
    return Corpus(vocab, train, heldout, build_eval_set(vocab, heldout))


@dataclass
class Teachers:
    """Stage outputs reused across protocols for one seed."""

    specialist: TrainedPolicy
    reasoner: TrainedPolicy


def init_policy(spec: ProtocolSpec, vocab: Vocab) -> Policy:
    rng = np.random.default_rng([spec.seed, 1])
    return Policy.init(vocab.size, spec.embed, spec.context, spec.hidden, rng)


def _stage_rng(spec: ProtocolSpec, stage: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, 100 + stage])


def train_teachers(spec: ProtocolSpec, corpus: Corpus | None = None) -> Teachers:
    corpus = corpus or build_corpus(spec)
    vocab, ev = corpus.vocab, corpus.eval_set
    ce_only = replace(spec.distill_config, lam=0.0)

    specialist = init_policy(spec, vocab)
    table = PositionTable(to_samples(vocab, corpus.train, multimodal=False, with_reasoning=False), spec.context)
    trace = run_stage(specialist, table, spec, ce_only, _stage_rng(spec, 1), vocab, ev, spec.epochs)

    reasoner = specialist.copy()
    table = PositionTable(to_samples(vocab, corpus.train), spec.context)
    trace2 = run_stage(reasoner, table, spec, ce_only, _stage_rng(spec, 2), vocab, ev, spec.epochs, spec.epochs)
    return Teachers(TrainedPolicy(specialist, replace(spec, protocol="specialist"), trace),
                    TrainedPolicy(reasoner, spec, trace + trace2))


def train(spec: ProtocolSpec, *, corpus: Corpus | None = None, teachers: Teachers | None = None,
          on_teacher: Callable[[str, np.ndarray], None] | None = None) -> TrainedPolicy:
    """Run one protocol end to end; deterministic given ``spec.seed``."""
    corpus = corpus or build_corpus(spec)
    vocab, ev = corpus.vocab, corpus.eval_set
    if spec.protocol == "specialist" and teachers is None:
        policy = init_policy(spec, vocab)
        table = PositionTable(to_samples(vocab, corpus.train, multimodal=False, with_reasoning=False), spec.context)
        ce_only = replace(spec.distill_config, lam=0.0)
        trace = run_stage(policy, table, spec, ce_only, _stage_rng(spec, 1), vocab, ev, spec.epochs)
        return TrainedPolicy(policy, spec, trace)

    teachers = teachers or train_teachers(spec, corpus)
    if spec.protocol == "specialist":
        return TrainedPolicy(teachers.specialist.policy.copy(), spec, list(teachers.specialist.trace))

    student = teachers.reasoner.policy.copy()
    prior = list(teachers.reasoner.trace)
    offset = 2 * spec.epochs
    if spec.protocol == "mixed_baseline":
        table = PositionTable(to_samples(vocab, corpus.train), spec.context)
        cfg = replace(spec.distill_config, lam=0.0)
    else:
        data = corpus.train
        if spec.pruning != "none":
            data, _ = prune_dataset(data, SceneSource(kind="meta"), strategy=spec.pruning, seed=spec.seed)
        cfg = spec.distill_config
        roles = {ACTION_ROLE: teachers.specialist.policy, "reasoning": teachers.reasoner.policy}
        table = PositionTable(to_samples(vocab, data), spec.context, cfg, roles, on_teacher)
    trace = run_stage(student, table, spec, cfg, _stage_rng(spec, 3), vocab, ev, spec.epochs, offset)
    return TrainedPolicy(student, spec, prior + trace)


def write_trace(trace: Sequence[EpochMetrics], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in trace:
            fh.write(json.dumps(m.to_dict(), sort_keys=True) + "\n")
