"""Judge backends, verdict parsing and the retrying gateway."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

from .prompts import Prompt, JudgeRequest, Template, build_prompt

log = logging.getLogger(__name__)

JUDGE_KEY_ENV = "DUALPOST_JUDGE_KEY"
MAX_ATTEMPTS = 3


class JudgeError(RuntimeError):
    pass


class TransportError(JudgeError):
    pass


class VerdictParseError(JudgeError):
    pass


class ScoreRangeError(VerdictParseError):
    pass


@dataclass(frozen=True)
class JudgeVerdict:
    thought: str
    action: int
    intention: int
    reasoning: int | None = None
    alignment: int | None = None
    success: bool | None = None

    def scores(self) -> dict[str, int | None]:
        return {"R": self.reasoning, "A": self.action, "I": self.intention, "RA": self.alignment}

    def to_dict(self) -> dict:
        return {"thought": self.thought, **self.scores(), "success": self.success}


def _score(result: dict, key: str) -> int:
    if key not in result:
        raise VerdictParseError(f"Result.{key} missing")
    v = result[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (isinstance(v, float) and not v.is_integer()):
        raise VerdictParseError(f"Result.{key} is not an integer: {v!r}")
    v = int(v)
    if not 0 <= v <= 10:
        raise ScoreRangeError(f"Result.{key}={v} outside 0-10")
    return v


_FENCE = re.compile(r"^```(?:json)?\s*|\s*```$", re.MULTILINE)


def parse_verdict(text: str, template: Template) -> JudgeVerdict:
    """Parse the judge's JSON body; every score is range-checked before return."""
    body = _FENCE.sub("", text.strip())
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end <= start:
        raise VerdictParseError("no JSON object in response")
    try:
        doc = json.loads(body[start:end + 1])
    except json.JSONDecodeError as err:
        raise VerdictParseError(f"invalid JSON: {err.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("Result"), dict):
        raise VerdictParseError("missing Result object")
    result = doc["Result"]
    thought = doc.get("Thought", "")
    if not isinstance(thought, str):
        raise VerdictParseError("Thought must be a string")
    success = result.get("Success")
    if success is not None and not isinstance(success, bool):
        raise VerdictParseError("Result.Success must be a boolean")
    verdict = JudgeVerdict(thought=thought, action=_score(result, "Action"),
                           intention=_score(result, "Intention"), success=success)
    if template is Template.REASONING:
        verdict = JudgeVerdict(thought, verdict.action, verdict.intention,
                               _score(result, "Reasoning"), _score(result, "Alignment"), success)
    return verdict


class JudgeBackend(Protocol):
    def complete(self, prompt: Prompt, request: JudgeRequest) -> str:
        """Return the judge's raw text reply."""


class MockBackend:
    """Offline judge: scores come from a stable hash of the trajectory id."""

    backend_id = "mock"

    def __init__(self, salt: str = ""):
        self.salt = salt

    def scores_for(self, trajectory_id: str) -> dict[str, int]:
        digest = hashlib.sha256(f"{self.salt}{trajectory_id}".encode("utf-8")).digest()
        return {"Reasoning": digest[0] % 11, "Action": digest[1] % 11,
                "Intention": digest[2] % 11, "Alignment": digest[3] % 11}

    def complete(self, prompt: Prompt, request: JudgeRequest) -> str:
        s = self.scores_for(request.trajectory_id)
        keys = ("Action", "Intention", "Reasoning", "Alignment") if request.template is Template.REASONING \
            else ("Action", "Intention")
        return json.dumps({"Thought": f"mock verdict for {request.trajectory_id}",
                           "Result": {k: s[k] for k in keys}})


def _image_part(ref: str, base_dir: str | Path | None) -> dict:
    if ref.startswith(("http://", "https://", "data:")):
        return {"type": "image_url", "image_url": {"url": ref}}
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    mime = mimetypes.guess_type(path.name)[0] or "image/png"
    data = base64.b64encode(path.read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}


class ChatCompletionBackend:
    """Remote judge speaking the chat-completions JSON protocol over HTTPS."""

    backend_id = "remote"

    def __init__(self, endpoint: str, model: str, *, api_key: str | None = None, timeout: float = 120.0,
                 base_dir: str | Path | None = None, client=None):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get(JUDGE_KEY_ENV, "")
        if not self.api_key:
            raise JudgeError(f"missing judge credentials: set {JUDGE_KEY_ENV}")
        self.base_dir = base_dir
        self.client = client or httpx.Client(timeout=timeout)

    def payload(self, prompt: Prompt) -> dict:
        content = [{"type": "text", "text": prompt.user}]
        content += [_image_part(ref, self.base_dir) for ref in prompt.images]
        return {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "system", "content": prompt.system},
                         {"role": "user", "content": content}],
        }

    def complete(self, prompt: Prompt, request: JudgeRequest) -> str:
        import httpx

        try:
            resp = self.client.post(self.endpoint, json=self.payload(prompt),
                                    headers={"Authorization": f"Bearer {self.api_key}"})
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"]
        except (httpx.HTTPError, OSError) as err:
            raise TransportError(f"judge request failed: {err}") from err
        except (KeyError, IndexError, TypeError, ValueError) as err:
            raise TransportError(f"unexpected judge response shape: {err}") from err


class ReplayBackend:
    """Serves recorded responses keyed by trajectory id (fixture transcripts)."""

    backend_id = "replay"

    def __init__(self, transcripts: dict[str, Sequence[str]]):
        self._queues = {k: list(v) for k, v in transcripts.items()}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayBackend":
        table: dict[str, list[str]] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                table.setdefault(rec["trajectory_id"], []).append(rec["response"])
        return cls(table)

    def complete(self, prompt: Prompt, request: JudgeRequest) -> str:
        with self._lock:
            queue = self._queues.get(request.trajectory_id)
            if not queue:
                raise TransportError(f"no recorded response for {request.trajectory_id!r}")
            return queue.pop(0) if len(queue) > 1 else queue[0]


def judge(req: JudgeRequest, backend: JudgeBackend, *, attempts: int = MAX_ATTEMPTS,
          backoff: float = 0.0, sleep: Callable[[float], None] = time.sleep) -> JudgeVerdict:
    """Render, send and parse; malformed or failed replies are retried."""
    prompt = build_prompt(req)
    last: JudgeError | None = None
    for attempt in range(1, attempts + 1):
        try:
            return parse_verdict(backend.complete(prompt, req), req.template)
        except JudgeError as err:
            last = err
            log.warning("judge attempt %d/%d for %s failed: %s", attempt, attempts, req.trajectory_id, err)
            if attempt < attempts and backoff > 0:
                sleep(backoff * attempt)
    raise type(last)(f"{req.trajectory_id or 'request'}: {last} (after {attempts} attempts)")


class JudgeGateway:
    """Runs judge calls concurrently under an in-flight cap."""

    def __init__(self, backend: JudgeBackend, max_in_flight: int = 4, backoff: float = 0.0):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.max_in_flight = max_in_flight
        self.backoff = backoff

    def judge(self, req: JudgeRequest) -> JudgeVerdict:
        return judge(req, self.backend, backoff=self.backoff)

    def judge_many(self, requests: Sequence[JudgeRequest]) -> list[JudgeVerdict | JudgeError]:
        """Results in request order; failures are returned, not raised."""
        def one(req):
            try:
                return self.judge(req)
            except JudgeError as err:
                return err
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(one, requests))


def make_backend(settings: dict | None) -> JudgeBackend:
    settings = dict(settings or {})
    kind = settings.pop("backend", "mock")
    if kind == "mock":
        return MockBackend(settings.get("salt", ""))
    if kind == "replay":
        return ReplayBackend.from_file(settings["transcripts"])
    if kind == "remote":
        return ChatCompletionBackend(settings["endpoint"], settings["model"],
                                     timeout=float(settings.get("timeout", 120.0)),
                                     base_dir=settings.get("base_dir"))
    raise ValueError(f"unknown judge backend {kind!r}")
