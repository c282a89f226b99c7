"""Expert-refined exemplar store with dual (task text + scene image) retrieval."""
from __future__ import annotations

import base64
import hashlib
import json
import mimetypes
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .trajectory import Dataset, Trajectory

TEXT_DIM = 256
IMAGE_DIM = 64
EMBED_KEY_ENV = "DUALPOST_EMBED_KEY"
SCORE_KEYS = ("R", "A", "I", "RA")
# cosines closer than this count as a tie, so rescaling a stored vector never flips a hit
TIE_EPS = 1e-12


class KBError(ValueError):
    pass


class EmbeddingError(RuntimeError):
    pass


class Encoder(Protocol):
    encoder_id: str

    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, ref: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0.0 or not np.isfinite(n):
        raise EmbeddingError("embedding has zero or non-finite norm")
    return v / n


def text_ngrams(text: str, n: int = 3) -> list[str]:
    """Character n-grams of the lower-cased, space-padded text."""
    s = " " + " ".join(text.lower().split()) + " "
    return [s[i:i + n] for i in range(len(s) - n + 1)]


def _bucket(gram: str, dim: int) -> int:
    return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little") % dim


def resolve_ref(ref: str, base_dir: str | Path | None) -> Path:
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return path


class LocalEncoder:
    """Deterministic offline encoders.

    Text: hashed character-trigram counts. Images: 8x8 grayscale patch means.
    Both are L2-normalized.
    """

    encoder_id = "local/trigram256+patch64"

    def __init__(self, base_dir: str | Path | None = None, text_dim: int = TEXT_DIM):
        self.base_dir = base_dir
        self.text_dim = text_dim
        self.image_dim = IMAGE_DIM

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbeddingError("cannot embed empty text")
        v = np.zeros(self.text_dim)
        for g in text_ngrams(text):
            v[_bucket(g, self.text_dim)] += 1.0
        return _unit(v)

    def embed_image(self, ref: str) -> np.ndarray:
        from PIL import Image, UnidentifiedImageError

        if not ref:
            raise EmbeddingError("cannot embed an empty image reference")
        path = resolve_ref(ref, self.base_dir)
        try:
            with Image.open(path) as img:
                small = img.convert("L").resize((8, 8), Image.Resampling.BOX)
        except (OSError, UnidentifiedImageError) as err:
            raise EmbeddingError(f"unreadable image {ref!r}: {err}") from None
        v = np.asarray(small, dtype=np.float64).reshape(-1) / 255.0
        if not v.any():
            # an all-black frame still needs a usable direction
            v = np.ones(IMAGE_DIM)
        return _unit(v)


class RemoteEncoder:
    """Embedding endpoint speaking the common ``{"input": ...} -> data[0].embedding`` shape."""

    def __init__(self, url: str, text_model: str, image_model: str, *, api_key: str | None = None,
                 base_dir: str | Path | None = None, timeout: float = 60.0, client=None):
        import httpx

        self.url = url
        self.text_model = text_model
        self.image_model = image_model
        self.api_key = api_key if api_key is not None else os.environ.get(EMBED_KEY_ENV, "")
        if not self.api_key:
            raise EmbeddingError(f"missing embedding credentials: set {EMBED_KEY_ENV}")
        self.base_dir = base_dir
        self.client = client or httpx.Client(timeout=timeout)
        self.encoder_id = f"remote/{text_model}+{image_model}"

    def _post(self, model: str, payload) -> np.ndarray:
        import httpx

        try:
            resp = self.client.post(self.url, json={"model": model, "input": payload},
                                    headers={"Authorization": f"Bearer {self.api_key}"})
            resp.raise_for_status()
            vec = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except (httpx.HTTPError, OSError) as err:
            raise EmbeddingError(f"embedding request failed: {err}") from err
        except (KeyError, IndexError, TypeError, ValueError) as err:
            raise EmbeddingError(f"unexpected embedding response shape: {err}") from err
        return _unit(vec)

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise EmbeddingError("cannot embed empty text")
        return self._post(self.text_model, text)

    def embed_image(self, ref: str) -> np.ndarray:
        if ref.startswith(("http://", "https://", "data:")):
            return self._post(self.image_model, ref)
        path = resolve_ref(ref, self.base_dir)
        try:
            data = base64.b64encode(path.read_bytes()).decode("ascii")
        except OSError as err:
            raise EmbeddingError(f"unreadable image {ref!r}: {err}") from None
        mime = mimetypes.guess_type(path.name)[0] or "image/png"
        return self._post(self.image_model, f"data:{mime};base64,{data}")


def make_encoder(settings: Mapping | None, base_dir: str | Path | None = None) -> Encoder:
    settings = dict(settings or {})
    kind = settings.get("kind", "local")
    if kind == "local":
        return LocalEncoder(base_dir)
    if kind == "remote":
        return RemoteEncoder(settings["url"], settings["text_model"], settings["image_model"],
                             base_dir=base_dir, timeout=float(settings.get("timeout", 60.0)))
    raise KBError(f"unknown encoder kind {kind!r}")


def _check_scores(scores: Mapping[str, int | None], where: str) -> dict[str, int | None]:
    out = {}
    for k in SCORE_KEYS:
        v = scores.get(k)
        if v is not None:
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v <= 10:
                raise KBError(f"{where}: score {k}={v!r} must be an integer in 0-10")
        out[k] = v
    return out


@dataclass(frozen=True)
class Exemplar:
    id: str
    task_text: str
    text_embedding: np.ndarray
    image_embedding: np.ndarray
    scores: dict = field(default_factory=dict)
    expert_note: str = ""

    def validate(self) -> None:
        for name in ("text_embedding", "image_embedding"):
            v = getattr(self, name)
            if v.ndim != 1 or not np.all(np.isfinite(v)) or not v.any():
                raise KBError(f"exemplar {self.id}: {name} must be a finite non-zero vector")
        _check_scores(self.scores, f"exemplar {self.id}")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "task_text": self.task_text,
            "text_embedding": self.text_embedding.tolist(),
            "image_embedding": self.image_embedding.tolist(),
            "scores": {k: self.scores.get(k) for k in SCORE_KEYS},
            "expert_note": self.expert_note,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Exemplar":
        return cls(rec["id"], rec["task_text"], np.asarray(rec["text_embedding"], dtype=np.float64),
                   np.asarray(rec["image_embedding"], dtype=np.float64),
                   dict(rec.get("scores", {})), rec.get("expert_note", ""))


class KnowledgeBase:
    """Immutable exemplar set; rows are kept sorted by id so argmax ties resolve to the smallest id."""

    def __init__(self, exemplars: Sequence[Exemplar], encoder_id: str = LocalEncoder.encoder_id):
        ex = sorted(exemplars, key=lambda e: e.id)
        ids = [e.id for e in ex]
        if len(set(ids)) != len(ids):
            raise KBError("exemplar ids must be unique")
        for e in ex:
            e.validate()
        if ex:
            if len({e.text_embedding.shape for e in ex}) != 1 or len({e.image_embedding.shape for e in ex}) != 1:
                raise KBError("all exemplars must share text_dim and image_dim")
        self.exemplars = tuple(ex)
        self.encoder_id = encoder_id
        self.text_dim = len(ex[0].text_embedding) if ex else 0
        self.image_dim = len(ex[0].image_embedding) if ex else 0
        self._text = self._unit_rows([e.text_embedding for e in ex], self.text_dim)
        self._image = self._unit_rows([e.image_embedding for e in ex], self.image_dim)

    @staticmethod
    def _unit_rows(rows, dim) -> np.ndarray:
        if not rows:
            return np.zeros((0, dim))
        m = np.vstack(rows)
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    def __len__(self) -> int:
        return len(self.exemplars)

    def by_id(self, ident: str) -> Exemplar:
        for e in self.exemplars:
            if e.id == ident:
                return e
        raise KeyError(ident)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"kind": "header", "encoder": self.encoder_id, "text_dim": self.text_dim,
                  "image_dim": self.image_dim, "count": len(self)}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(e.to_record(), sort_keys=True) for e in self.exemplars]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        header, exemplars = {}, []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise KBError(f"line {n}: invalid JSON ({err.msg})") from None
            if rec.get("kind") == "header":
                header = rec
            else:
                exemplars.append(Exemplar.from_record(rec))
        return cls(exemplars, header.get("encoder", LocalEncoder.encoder_id))

    def text_scores(self, query: np.ndarray) -> np.ndarray:
        return self._text @ _unit(np.asarray(query, dtype=np.float64))

    def image_scores(self, query: np.ndarray) -> np.ndarray:
        return self._image @ _unit(np.asarray(query, dtype=np.float64))


def _top1(scores: np.ndarray) -> int:
    best = float(scores.max())
    return int(np.flatnonzero(scores >= best - TIE_EPS)[0])


def trajectory_image_embedding(encoder: Encoder, refs: Sequence[str]) -> np.ndarray:
    """Mean of per-frame image embeddings."""
    refs = [r for r in refs if r]
    if not refs:
        raise KBError("scene retrieval needs at least one frame reference")
    return np.mean([encoder.embed_image(r) for r in refs], axis=0)


@dataclass(frozen=True)
class Retrieval:
    text_hit: Exemplar
    scene_hit: Exemplar
    text_cosine: float
    scene_cosine: float


def retrieve(kb: KnowledgeBase, task_text: str, frame_refs: Sequence[str], encoder: Encoder) -> Retrieval:
    """Top-1 exemplar by task-text cosine and top-1 by mean-frame image cosine."""
    if len(kb) == 0:
        raise KBError("cannot retrieve from an empty knowledge base")
    ts = kb.text_scores(encoder.embed_text(task_text))
    ss = kb.image_scores(trajectory_image_embedding(encoder, frame_refs))
    i, j = _top1(ts), _top1(ss)
    return Retrieval(kb.exemplars[i], kb.exemplars[j], float(ts[i]), float(ss[j]))


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise KBError(f"{path}:{n}: invalid JSON ({err.msg})") from None
    return out


def read_verdicts(path: str | Path) -> dict[str, dict]:
    """Verdict file: one ``{trajectory_id, R, A, I, RA, ...}`` record per line."""
    table = {}
    for rec in read_jsonl(path):
        tid = rec.get("trajectory_id")
        if not tid:
            raise KBError(f"{path}: verdict record without trajectory_id")
        table[tid] = _check_scores(rec, f"verdict {tid}")
    return table


def read_refinements(path: str | Path) -> dict[str, dict]:
    """Refinement file: ``{id, overrides: {R?, A?, I?, RA?}, note}`` per line."""
    table = {}
    for rec in read_jsonl(path):
        if "id" not in rec:
            raise KBError(f"{path}: refinement record without id")
        overrides = rec.get("overrides") or {}
        unknown = set(overrides) - set(SCORE_KEYS)
        if unknown:
            raise KBError(f"refinement {rec['id']}: unknown score keys {sorted(unknown)}")
        _check_scores(overrides, f"refinement {rec['id']}")
        table[rec["id"]] = {"overrides": dict(overrides), "note": rec.get("note", "")}
    return table


def build_exemplar(traj: Trajectory, scores: Mapping, note: str, encoder: Encoder) -> Exemplar:
    return Exemplar(
        id=traj.id,
        task_text=traj.instruction,
        text_embedding=encoder.embed_text(traj.instruction),
        image_embedding=trajectory_image_embedding(encoder, [f.observation_ref for f in traj.frames]),
        scores={k: scores.get(k) for k in SCORE_KEYS},
        expert_note=note,
    )


def kb_build(ds: Dataset, verdicts: str | Path | Mapping[str, dict], refinements: str | Path | Mapping | None,
             encoder: Encoder, out_path: str | Path | None = None) -> KnowledgeBase:
    """One exemplar per trajectory; refinement overrides win over raw verdict scores."""
    raw = read_verdicts(verdicts) if isinstance(verdicts, (str, Path)) else dict(verdicts)
    refs = read_refinements(refinements) if isinstance(refinements, (str, Path)) else dict(refinements or {})
    ids = {t.id for t in ds.trajectories}
    missing = sorted(ids - set(raw))
    if missing:
        raise KBError(f"no verdict for {len(missing)} trajectories, first {missing[0]!r}")
    unknown = sorted(set(refs) - ids)
    if unknown:
        raise KBError(f"refinement references unknown id {unknown[0]!r}")
    exemplars = []
    for traj in ds.trajectories:
        scores = _check_scores(raw[traj.id], f"verdict {traj.id}")
        ref = refs.get(traj.id, {})
        scores.update(ref.get("overrides", {}))
        exemplars.append(build_exemplar(traj, scores, ref.get("note", ""), encoder))
    kb = KnowledgeBase(exemplars, encoder.encoder_id)
    if out_path is not None:
        kb.save(out_path)
    return kb
