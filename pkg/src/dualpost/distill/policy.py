"""Fixed-context two-layer categorical policy with hand-written gradients.

    x      = concat(emb[c_1], ..., emb[c_C])          (C*E,)
    h      = tanh(x @ w1 + b1)                        (H,)
    logits = h @ w2 + b2                              (V,)

Losses work on flattened *positions*: a left-padded context window and a
target token. Every loss returns ``(value, grad)`` where ``grad`` has the
same keys as :attr:`Policy.params`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..trajectory import DomainTag

PAD = 0
PARAM_NAMES = ("emb", "w1", "b1", "w2", "b2")


class Kind(IntEnum):
    PROMPT = 0
    REASONING = 1
    ACTION = 2


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    kinds: tuple[Kind, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "kinds", tuple(Kind(k) for k in self.kinds))
        if len(self.tokens) != len(self.kinds):
            raise PolicyError("tokens and kinds differ in length")

    def __len__(self) -> int:
        return len(self.tokens)

    def positions_of(self, kinds: Iterable[Kind]) -> list[int]:
        kinds = set(kinds)
        return [k for k, kind in enumerate(self.kinds) if kind in kinds]


@dataclass
class Policy:
    params: dict[str, np.ndarray]
    context: int
    pad: int = PAD

    @classmethod
    def init(cls, vocab: int, embed: int, context: int, hidden: int, rng: np.random.Generator,
             scale: float = 0.5) -> "Policy":
        fan_in = context * embed
        params = {
            "emb": rng.normal(0.0, scale, size=(vocab, embed)),
            "w1": rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, vocab)),
            "b2": np.zeros(vocab),
        }
        return cls(params, context)

    @classmethod
    def zeros(cls, vocab: int, embed: int, context: int, hidden: int) -> "Policy":
        params = {
            "emb": np.zeros((vocab, embed)),
            "w1": np.zeros((context * embed, hidden)),
            "b1": np.zeros(hidden),
            "w2": np.zeros((hidden, vocab)),
            "b2": np.zeros(vocab),
        }
        return cls(params, context)

    @property
    def vocab_size(self) -> int:
        return self.params["emb"].shape[0]

    @property
    def hidden_size(self) -> int:
        return self.params["b1"].shape[0]

    def copy(self) -> "Policy":
        return Policy({k: v.copy() for k, v in self.params.items()}, self.context, self.pad)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def load_flat(self, vec: np.ndarray) -> None:
        off = 0
        for k in PARAM_NAMES:
            n = self.params[k].size
            self.params[k] = vec[off:off + n].reshape(self.params[k].shape).copy()
            off += n

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def hidden(self, contexts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self.params["emb"][contexts].reshape(len(contexts), -1)
        return x, np.tanh(x @ self.params["w1"] + self.params["b1"])

    def logits(self, contexts: np.ndarray) -> np.ndarray:
        """Logits for a (P, C) array of context windows."""
        _, h = self.hidden(contexts)
        return h @ self.params["w2"] + self.params["b2"]

    def backward(self, contexts: np.ndarray, x: np.ndarray, h: np.ndarray, dlogits: np.ndarray) -> dict:
        p = self.params
        grad = {"w2": h.T @ dlogits, "b2": dlogits.sum(axis=0)}
        dz = (dlogits @ p["w2"].T) * (1.0 - h * h)
        grad["w1"] = x.T @ dz
        grad["b1"] = dz.sum(axis=0)
        dx = (dz @ p["w1"].T).reshape(contexts.shape[0], contexts.shape[1], -1)
        demb = np.zeros_like(p["emb"])
        np.add.at(demb, contexts, dx)
        grad["emb"] = demb
        return grad

    def save(self, path) -> None:
        np.savez(path, context=self.context, pad=self.pad, **self.params)

    @classmethod
    def load(cls, path) -> "Policy":
        with np.load(path) as z:
            return cls({k: z[k].copy() for k in PARAM_NAMES}, int(z["context"]), int(z["pad"]))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def context_window(tokens: Sequence[int], context: int, pad: int = PAD) -> list[int]:
    """The most recent ``context`` tokens, left-padded with ``pad``."""
    recent = list(tokens[-context:]) if context else []
    return [pad] * (context - len(recent)) + recent


def _check_tokens(policy: Policy, tokens: Sequence[int]) -> None:
    v = policy.vocab_size
    for t in tokens:
        if not 0 <= t < v:
            raise PolicyError(f"token {t} outside vocabulary of size {v}")


def forward(policy: Policy, context: TokenSequence | Sequence[int]) -> np.ndarray:
    """Next-token distribution after ``context``."""
    tokens = context.tokens if isinstance(context, TokenSequence) else tuple(context)
    _check_tokens(policy, tokens)
    ctx = np.array([context_window(tokens, policy.context, policy.pad)], dtype=np.int64)
    return softmax(policy.logits(ctx))[0]


def positions(seq: TokenSequence, kinds: Iterable[Kind], context: int,
              drop: Iterable[Kind] = (), pad: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    """Context windows and targets for every position whose kind is in ``kinds``.

    Tokens whose kind is in ``drop`` are removed from the history before the
    window is cut, e.g. to show a teacher the prompt without the reasoning.
    """
    drop = set(drop)
    idx = seq.positions_of(kinds)
    ctx, tgt = [], []
    for k in idx:
        hist = [t for t, kd in zip(seq.tokens[:k], seq.kinds[:k]) if kd not in drop]
        ctx.append(context_window(hist, context, pad))
        tgt.append(seq.tokens[k])
    return np.array(ctx, dtype=np.int64).reshape(len(idx), context), np.array(tgt, dtype=np.int64)


def ce_from_positions(policy: Policy, contexts: np.ndarray, targets: np.ndarray,
                      weights: np.ndarray) -> tuple[float, dict]:
    """Weighted negative log-likelihood ``sum_p w_p * -log p(target_p)``."""
    x, h = policy.hidden(contexts)
    logits = h @ policy.params["w2"] + policy.params["b2"]
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    loss = float(-(weights * logp[rows, targets]).sum())
    d = np.exp(logp)
    d[rows, targets] -= 1.0
    return loss, policy.backward(contexts, x, h, d * weights[:, None])


def kd_from_positions(student: Policy, contexts: np.ndarray, teacher_probs: np.ndarray,
                      weights: np.ndarray, temperature: float) -> tuple[float, dict]:
    """Weighted ``T^2 * KL(teacher_T || student_T)`` with teacher probabilities given."""
    x, h = student.hidden(contexts)
    logits = h @ student.params["w2"] + student.params["b2"]
    logp = log_softmax(logits, temperature)
    q = teacher_probs
    with np.errstate(divide="ignore", invalid="ignore"):
        plogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    # rounding can leave a tiny negative KL between near-identical distributions
    kl = np.maximum((plogq - q * logp).sum(axis=1), 0.0)
    t2 = temperature * temperature
    loss = float(t2 * (weights * kl).sum())
    d = (np.exp(logp) - q) * (temperature * weights)[:, None]
    return loss, student.backward(contexts, x, h, d)


def _require_trainable(n: int, what: str) -> None:
    if n == 0:
        raise PolicyError(f"no {what} positions in sequence")


def ce_loss(policy: Policy, seq: TokenSequence, train_kinds: Iterable[Kind]) -> tuple[float, dict]:
    """Mean negative log-likelihood over positions whose kind is in ``train_kinds``."""
    _check_tokens(policy, seq.tokens)
    ctx, tgt = positions(seq, train_kinds, policy.context, pad=policy.pad)
    _require_trainable(len(tgt), "trainable")
    return ce_from_positions(policy, ctx, tgt, np.full(len(tgt), 1.0 / len(tgt)))


def teacher_probs(teacher: Policy, contexts: np.ndarray, temperature: float) -> np.ndarray:
    return softmax(teacher.logits(contexts), temperature)


def kd_loss(student: Policy, teacher: Policy, seq: TokenSequence, kinds: Iterable[Kind],
            temperature: float, teacher_drop: Iterable[Kind] = ()) -> tuple[float, dict]:
    """Mean over positions in ``kinds`` of ``T^2 KL(teacher_T || student_T)``.

    Gradient flows to the student only. ``teacher_drop`` hides token kinds
    from the teacher's history (the action teacher never saw reasoning).
    """
    if temperature <= 0:
        raise PolicyError("temperature must be positive")
    if student.vocab_size != teacher.vocab_size:
        raise PolicyError(f"vocabulary mismatch: {student.vocab_size} vs {teacher.vocab_size}")
    _check_tokens(student, seq.tokens)
    kinds = tuple(kinds)
    s_ctx, _ = positions(seq, kinds, student.context, pad=student.pad)
    _require_trainable(len(s_ctx), "distillation")
    t_ctx, _ = positions(seq, kinds, teacher.context, drop=teacher_drop, pad=teacher.pad)
    q = teacher_probs(teacher, t_ctx, temperature)
    return kd_from_positions(student, s_ctx, q, np.full(len(s_ctx), 1.0 / len(s_ctx)), temperature)


ACTION_ROLE = "action"
REASONING_ROLE = "reasoning"

# Which positions each teacher supervises and what part of the history it is shown.
ROLE_KINDS = {ACTION_ROLE: (Kind.ACTION,), REASONING_ROLE: (Kind.REASONING,)}
ROLE_DROP = {ACTION_ROLE: (Kind.REASONING,), REASONING_ROLE: ()}
NON_PROMPT = (Kind.REASONING, Kind.ACTION)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    lam: float = 0.15
    routing: Mapping[DomainTag, str] = field(
        default_factory=lambda: {DomainTag.ROBOT: ACTION_ROLE, DomainTag.MULTIMODAL: REASONING_ROLE}
    )

    def __post_init__(self):
        if not self.temperature > 0:
            raise PolicyError("temperature must be positive")
        if self.lam < 0:
            raise PolicyError("lambda must be non-negative")

    def role_for(self, domain: DomainTag) -> str:
        try:
            return self.routing[DomainTag(domain)]
        except (KeyError, ValueError):
            raise PolicyError(f"no teacher routed for domain {domain!r}") from None


def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    return {k: a[k] + scale * b[k] for k in a}


def total_loss(student: Policy, action_teacher: Policy, reason_teacher: Policy, seq: TokenSequence,
               cfg: DistillConfig, domain: DomainTag,
               on_teacher: Callable[[str], None] | None = None) -> tuple[float, dict, dict]:
    """``L_VLA + lam * L_KD`` for one sample.

    ``L_VLA`` is hard-label CE over every non-prompt position; ``L_KD`` uses
    the single teacher routed for ``domain``. Returns ``(loss, grad, parts)``
    with ``parts = {"ce": ..., "kd": ..., "role": ...}``.
    """
    role = cfg.role_for(domain)
    ce, grad = ce_loss(student, seq, NON_PROMPT)
    if cfg.lam == 0.0:
        return ce, grad, {"ce": ce, "kd": 0.0, "role": role}
    teacher = action_teacher if role == ACTION_ROLE else reason_teacher
    if on_teacher is not None:
        on_teacher(role)
    kd, kd_grad = kd_loss(student, teacher, seq, ROLE_KINDS[role], cfg.temperature, ROLE_DROP[role])
    return ce + cfg.lam * kd, add_grads(grad, kd_grad, cfg.lam), {"ce": ce, "kd": kd, "role": role}
