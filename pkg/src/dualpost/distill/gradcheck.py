"""Central finite-difference check of the analytic CE and KD gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .policy import Kind, Policy, TokenSequence, ce_loss, kd_loss

STEP = 1e-5
TEMPERATURES = (0.5, 1.0, 2.0, 4.0)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; 0 when both are zero."""
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale if scale > 0 else 0.0


def numeric_grad(policy: Policy, fn: Callable[[Policy], float], h: float = STEP) -> np.ndarray:
    base = policy.flat()
    out = np.zeros_like(base)
    probe = policy.copy()
    for k in range(len(base)):
        v = base.copy()
        v[k] += h
        probe.load_flat(v)
        up = fn(probe)
        v[k] -= 2 * h
        probe.load_flat(v)
        out[k] = (up - fn(probe)) / (2 * h)
    return out


def _flat(policy: Policy, grad: dict) -> np.ndarray:
    return np.concatenate([grad[k].ravel() for k in policy.params])


def random_instance(rng: np.random.Generator, max_vocab: int = 8, max_context: int = 6, max_hidden: int = 8):
    v = int(rng.integers(3, max_vocab + 1))
    c = int(rng.integers(1, max_context + 1))
    h = int(rng.integers(1, max_hidden + 1))
    e = int(rng.integers(1, 4))
    student = Policy.init(v, e, c, h, rng, scale=1.0)
    teacher = Policy.init(v, e, int(rng.integers(1, max_context + 1)), int(rng.integers(1, max_hidden + 1)),
                          rng, scale=1.0)
    n = int(rng.integers(3, 10))
    n_prompt = int(rng.integers(1, n - 1))
    kinds = [Kind.PROMPT] * n_prompt + [Kind(int(k)) for k in rng.integers(1, 3, size=n - n_prompt)]
    seq = TokenSequence(tuple(int(t) for t in rng.integers(0, v, size=n)), tuple(kinds))
    return student, teacher, seq


@dataclass
class GradCheckResult:
    max_error: float
    per_instance: list[float]

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_error <= tol


def check_gradients(seed: int = 0, instances: int = 50, temperatures: Sequence[float] = TEMPERATURES,
                    h: float = STEP) -> GradCheckResult:
    """Worst relative error of CE and KD gradients over seeded random instances."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(instances):
        student, teacher, seq = random_instance(rng)
        kinds = (Kind.REASONING, Kind.ACTION)
        _, g = ce_loss(student, seq, kinds)
        worst = relative_error(_flat(student, g), numeric_grad(student, lambda p: ce_loss(p, seq, kinds)[0], h))
        for T in temperatures:
            _, g = kd_loss(student, teacher, seq, kinds, T)
            num = numeric_grad(student, lambda p: kd_loss(p, teacher, seq, kinds, T)[0], h)
            worst = max(worst, relative_error(_flat(student, g), num))
        errors.append(worst)
    return GradCheckResult(max(errors) if errors else 0.0, errors)
