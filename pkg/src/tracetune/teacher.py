"""Client for the teacher model: traces, preferences, rankings, caching.

The teacher is any chat endpoint speaking a minimal JSON protocol.  Every
call goes through a content-addressed cache keyed by a digest of the
canonicalized request, giving three modes: record (call once, store),
replay (cache only, no network), and live (always call).  A scripted
transport stands in for the real endpoint in tests and toy pipelines.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import PreferencePair, ReasoningExample, RepairTask
from .errors import (CacheMissError, ExtractionError, InputError,
                     JudgmentParseError, TransportError, ValidationError)

TRACE_INSTRUCTION = (
    "Please fix the bug in this code. First analyze the problem, identify "
    "the bug, explain your reasoning, and then provide the corrected code."
)

COMPARE_INSTRUCTION = (
    "I'll show you a programming task and two solution attempts, labeled A "
    "and B. Evaluate each solution according to these criteria:\n"
    "- Correctness: Does it properly fix the bug?\n"
    "- Efficiency: Is the solution efficient and optimized?\n"
    "- Readability: Is the code clean and easy to understand?\n"
    "- Minimal change: Does it modify only what's necessary to fix the bug?\n"
    "After your analysis, answer with a single letter, A or B, alone on the "
    "final line."
)

RANK_INSTRUCTION = (
    "I'll show you a programming task and multiple solution attempts. Your "
    "job is to evaluate each solution carefully, then rank them from best "
    "to worst. Give the ranking as comma-separated solution numbers on the "
    "final line, best first."
)

JUDGE_TEMPERATURE = 0.2
API_KEY_ENV = "TEACHER_API_KEY"


@dataclass(frozen=True)
class PromptTemplates:
    trace_template: str = TRACE_INSTRUCTION
    compare_template: str = COMPARE_INSTRUCTION
    rank_template: str = RANK_INSTRUCTION

    def __post_init__(self):
        if "Please fix the bug in this code." not in self.trace_template:
            raise ValidationError("trace template lost its core instruction")
        if "rank them from best to worst" not in self.rank_template:
            raise ValidationError("rank template lost its core instruction")


@dataclass(frozen=True)
class TeacherRequest:
    model_name: str
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self):
        if not self.messages:
            raise ValidationError("request needs at least one message")
        if self.messages[0][0] not in ("system", "user"):
            raise ValidationError("first message role must be system or user")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValidationError("max_tokens must be positive")


@dataclass(frozen=True)
class TeacherReply:
    text: str
    parsed_reasoning: str | None = None
    parsed_code: str | None = None
    token_usage: tuple[int, int] = (0, 0)


_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.DOTALL)


def extract_last_code_block(text: str) -> str:
    """Content of the last fenced code block; raises if there is none."""
    blocks = _FENCE.findall(text)
    if not blocks:
        raise ExtractionError("reply contains no fenced code block")
    return blocks[-1].rstrip("\n")


def split_reasoning_and_code(text: str) -> tuple[str, str]:
    """Reasoning = everything around the final fenced block; code = its body."""
    matches = list(_FENCE.finditer(text))
    if not matches:
        raise ExtractionError("reply contains no fenced code block")
    last = matches[-1]
    reasoning = (text[:last.start()] + text[last.end():]).strip()
    return reasoning, last.group(1).rstrip("\n")


def canonical_request(request: TeacherRequest) -> str:
    return json.dumps({
        "model": request.model_name,
        "messages": [{"role": r, "content": c} for r, c in request.messages],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    }, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def request_digest(request: TeacherRequest) -> str:
    return hashlib.sha256(canonical_request(request).encode("utf-8")).hexdigest()


class HttpTransport:
    """POST the generic chat JSON shape to a configured endpoint.

    The credential comes from the TEACHER_API_KEY environment variable and
    never appears in logs or errors.
    """

    def __init__(self, endpoint: str, timeout_seconds: float = 60.0):
        self.endpoint = endpoint
        self.timeout_seconds = timeout_seconds

    def __call__(self, request: TeacherRequest) -> TeacherReply:
        body = canonical_request(request).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers,
                                     method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_seconds) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(f"teacher endpoint unreachable: {exc}") from exc
        usage = payload.get("usage", {})
        return TeacherReply(
            text=payload["content"],
            token_usage=(int(usage.get("input_tokens", 0)),
                         int(usage.get("output_tokens", 0))),
        )


class ScriptedTransport:
    """Deterministic stand-in teacher: a callable mapping requests to text."""

    def __init__(self, script):
        self.script = script
        self.calls = 0

    def __call__(self, request: TeacherRequest) -> TeacherReply:
        self.calls += 1
        result = self.script(request)
        if isinstance(result, TeacherReply):
            return result
        out_tokens = len(result.split())
        in_tokens = sum(len(c.split()) for _, c in request.messages)
        return TeacherReply(text=result, token_usage=(in_tokens, out_tokens))


class TeacherClient:
    """Cache-fronted teacher access with bounded retries.

    Modes: "record" calls the transport on a cache miss and stores the
    reply; "replay" serves only from cache; "live" always calls through.
    """

    def __init__(self, transport=None, cache_dir: str | Path | None = None,
                 mode: str = "record", max_attempts: int = 3,
                 backoff_seconds: float = 1.0, sleep=time.sleep,
                 max_concurrency: int = 4):
        if mode not in ("record", "replay", "live"):
            raise InputError(f"unknown cache mode {mode!r}")
        if mode != "replay" and transport is None:
            raise InputError(f"mode {mode!r} requires a transport")
        if mode == "replay" and cache_dir is None:
            raise InputError("replay mode requires a cache directory")
        self.transport = transport
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.mode = mode
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.sleep = sleep
        self.semaphore = threading.BoundedSemaphore(max_concurrency)
        self._cache_lock = threading.Lock()
        self.usage_log: list[tuple[int, int]] = []

    def _cache_path(self, digest: str) -> Path:
        return self.cache_dir / f"{digest}.json"

    def _read_cache(self, digest: str) -> TeacherReply | None:
        if self.cache_dir is None:
            return None
        path = self._cache_path(digest)
        if not path.exists():
            return None
        obj = json.loads(path.read_text(encoding="utf-8"))
        reply = obj["reply"]
        return TeacherReply(text=reply["text"],
                            token_usage=tuple(reply["token_usage"]))

    def _write_cache(self, digest: str, request: TeacherRequest,
                     reply: TeacherReply) -> None:
        if self.cache_dir is None:
            return
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        record = {
            "digest": digest,
            "request": json.loads(canonical_request(request)),
            "reply": {"text": reply.text, "token_usage": list(reply.token_usage)},
        }
        with self._cache_lock:
            self._cache_path(digest).write_text(
                json.dumps(record, ensure_ascii=False, sort_keys=True, indent=1),
                encoding="utf-8")

    def _call_transport(self, request: TeacherRequest) -> TeacherReply:
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                with self.semaphore:
                    return self.transport(request)
            except TransportError as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    self.sleep(self.backoff_seconds * (2 ** attempt))
        raise TransportError(
            f"teacher unreachable after {self.max_attempts} attempts: "
            f"{last_error}")

    def cached_call(self, request: TeacherRequest) -> TeacherReply:
        digest = request_digest(request)
        if self.mode == "replay":
            reply = self._read_cache(digest)
            if reply is None:
                raise CacheMissError(f"no cached reply for digest {digest}")
            self.usage_log.append(reply.token_usage)
            return reply
        if self.mode == "record":
            cached = self._read_cache(digest)
            if cached is not None:
                self.usage_log.append(cached.token_usage)
                return cached
        reply = self._call_transport(request)
        if self.mode == "record":
            self._write_cache(digest, request, reply)
        self.usage_log.append(reply.token_usage)
        return reply


# --- high-level elicitation ----------------------------------------------


def format_task_block(task: RepairTask) -> str:
    parts = [task.prompt, "", "Buggy code:", "```", task.buggy_code, "```"]
    for name, text in task.context:
        parts.extend(["", f"File {name}:", "```", text, "```"])
    return "\n".join(parts)


def elicit_trace(client: TeacherClient, task: RepairTask, model_name: str,
                 templates: PromptTemplates = PromptTemplates(),
                 temperature: float = 0.0,
                 max_tokens: int = 2048) -> ReasoningExample:
    """Ask the teacher for a reasoning trace and repaired code for one task."""
    if not task.prompt or not task.buggy_code:
        raise InputError(f"task {task.id}: prompt and buggy_code must be non-empty")
    content = f"{templates.trace_template}\n\n{format_task_block(task)}"
    request = TeacherRequest(model_name=model_name,
                             messages=(("user", content),),
                             temperature=temperature, max_tokens=max_tokens)
    reply = client.cached_call(request)
    reasoning, code = split_reasoning_and_code(reply.text)
    return ReasoningExample(task_id=task.id, reasoning=reasoning, solution=code,
                            teacher_model=model_name, verified=False)


def _final_nonempty_line(text: str) -> str:
    for line in reversed(text.splitlines()):
        if line.strip():
            return line.strip()
    return ""


def judge_pair(client: TeacherClient, task: RepairTask, a: str, b: str,
               model_name: str,
               templates: PromptTemplates = PromptTemplates(),
               rng: np.random.Generator | None = None,
               max_tokens: int = 1024) -> PreferencePair:
    """One pairwise comparison; presentation order is randomized and recorded.

    The verdict is the letter on the reply's final non-empty line.
    """
    if a == b:
        raise InputError("cannot judge identical candidates")
    rng = rng or np.random.default_rng(0)
    swap = bool(rng.integers(0, 2))
    first, second = (b, a) if swap else (a, b)
    content = (f"{templates.compare_template}\n\n{format_task_block(task)}\n\n"
               f"Solution A:\n```\n{first}\n```\n\n"
               f"Solution B:\n```\n{second}\n```")
    request = TeacherRequest(model_name=model_name,
                             messages=(("user", content),),
                             temperature=JUDGE_TEMPERATURE,
                             max_tokens=max_tokens)
    reply = client.cached_call(request)
    verdict = _final_nonempty_line(reply.text)
    if verdict not in ("A", "B"):
        raise JudgmentParseError(
            f"task {task.id}: verdict line {verdict!r} is not 'A' or 'B'")
    winner_is_first = verdict == "A"
    label = 1 if winner_is_first != swap else 0
    return PreferencePair(task_id=task.id, candidate_a=a, candidate_b=b,
                          label=label, judge_model=model_name,
                          extra={"presented_first": "b" if swap else "a"})


def rank_candidates(client: TeacherClient, task: RepairTask,
                    candidates: list[str], model_name: str,
                    templates: PromptTemplates = PromptTemplates(),
                    max_tokens: int = 2048) -> list[int]:
    """Rank >= 2 distinct candidates; returns 0-based indices, best first."""
    if len(candidates) < 2:
        raise InputError("ranking needs at least two candidates")
    if len(set(candidates)) != len(candidates):
        raise InputError("candidates must be distinct")
    numbered = "\n\n".join(
        f"Solution {i + 1}:\n```\n{c}\n```" for i, c in enumerate(candidates))
    content = f"{templates.rank_template}\n\n{format_task_block(task)}\n\n{numbered}"
    request = TeacherRequest(model_name=model_name,
                             messages=(("user", content),),
                             temperature=JUDGE_TEMPERATURE,
                             max_tokens=max_tokens)
    reply = client.cached_call(request)
    line = _final_nonempty_line(reply.text)
    try:
        order = [int(tok) - 1 for tok in re.split(r"[,\s]+", line) if tok]
    except ValueError:
        raise JudgmentParseError(
            f"task {task.id}: ranking line {line!r} is not a number list") from None
    if sorted(order) != list(range(len(candidates))):
        raise JudgmentParseError(
            f"task {task.id}: ranking {line!r} is not a permutation of "
            f"1..{len(candidates)}")
    return order


def ranking_to_pairs(task_id: str, candidates: list[str], ranking: list[int],
                     judge_model: str) -> list[PreferencePair]:
    """Expand a ranking into all C(k,2) pairwise preferences it implies."""
    pairs = []
    for i in range(len(ranking)):
        for j in range(i + 1, len(ranking)):
            pairs.append(PreferencePair(
                task_id=task_id,
                candidate_a=candidates[ranking[i]],
                candidate_b=candidates[ranking[j]],
                label=1,
                judge_model=judge_model,
                extra={"from_ranking": True}))
    return pairs


def dedup_candidates(candidates: list[str]) -> list[str]:
    """Merge byte-identical candidates, preserving first-seen order."""
    seen = set()
    out = []
    for c in candidates:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out
