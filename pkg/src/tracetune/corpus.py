"""Data model and persistence for repair tasks, traces, and preference pairs.

Everything here is an immutable value type plus pure functions: JSONL
loading/saving with unknown-field preservation, deterministic dataset
splitting, and stratified capping of trace datasets.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InputError, ParseError, ValidationError

DEFAULT_SEED = 42


@dataclass(frozen=True)
class TestSpec:
    """One functional test: either a shell command or a stdin/stdout pair."""

    kind: str  # "command" | "io_pair"
    command: str | None = None
    stdin: str | None = None
    expected_stdout: str | None = None
    timeout_seconds: float = 10.0

    def __post_init__(self):
        if self.kind not in ("command", "io_pair"):
            raise ValidationError(f"unknown test kind {self.kind!r}")
        if self.kind == "command" and not self.command:
            raise ValidationError("command test requires a command")
        if self.kind == "io_pair" and (self.stdin is None or self.expected_stdout is None):
            raise ValidationError("io_pair test requires stdin and expected_stdout")
        if self.timeout_seconds <= 0:
            raise ValidationError("timeout_seconds must be positive")


@dataclass(frozen=True)
class RepairTask:
    """One problem instance: buggy code, context files, and its tests."""

    id: str
    source_benchmark: str
    prompt: str
    buggy_code: str
    context: tuple[tuple[str, str], ...] = ()
    tests: tuple[TestSpec, ...] = ()
    ground_truth: str | None = None
    language_tag: str = "python"
    extra: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class ReasoningExample:
    """A (task, reasoning, solution) triple elicited from the teacher."""

    task_id: str
    reasoning: str
    solution: str
    teacher_model: str
    verified: bool = False
    extra: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class PreferencePair:
    """A judged pair of candidate repairs; label 1 means candidate_a won."""

    task_id: str
    candidate_a: str
    candidate_b: str
    label: int
    judge_model: str
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.candidate_a == self.candidate_b:
            raise ValidationError("preference pair compares identical candidates")
        if self.label not in (0, 1):
            raise ValidationError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test fractions plus the permutation seed."""

    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions sum to {total}, expected 1")
        for f in (self.train_fraction, self.val_fraction, self.test_fraction):
            if f < 0 or f > 1:
                raise ValidationError("split fractions must lie in [0, 1]")


class TaskSet:
    """An ordered collection of RepairTasks with unique ids."""

    def __init__(self, tasks: Iterable[RepairTask] = ()):
        self._tasks: list[RepairTask] = []
        self._by_id: dict[str, RepairTask] = {}
        for task in tasks:
            self.add(task)

    def add(self, task: RepairTask) -> None:
        if task.id in self._by_id:
            raise ValidationError(f"duplicate task id {task.id!r}")
        self._tasks.append(task)
        self._by_id[task.id] = task

    def __len__(self) -> int:
        return len(self._tasks)

    def __iter__(self):
        return iter(self._tasks)

    def __getitem__(self, task_id: str) -> RepairTask:
        try:
            return self._by_id[task_id]
        except KeyError:
            raise ValidationError(f"unknown task id {task_id!r}") from None

    def __contains__(self, task_id: str) -> bool:
        return task_id in self._by_id

    def ids(self) -> list[str]:
        return [t.id for t in self._tasks]


# --- JSONL serialization ------------------------------------------------
#
# One JSON object per line, UTF-8.  Unknown fields survive a round-trip via
# the `extra` dict on each record type.

_TASK_FIELDS = {
    "id", "source_benchmark", "prompt", "buggy_code", "context",
    "tests", "ground_truth", "language_tag",
}
_TEST_FIELDS = {"kind", "command", "stdin", "expected_stdout", "timeout_seconds"}
_EXAMPLE_FIELDS = {"task_id", "reasoning", "solution", "teacher_model", "verified"}
_PAIR_FIELDS = {"task_id", "candidate_a", "candidate_b", "label", "judge_model"}


def _task_from_dict(obj: dict) -> RepairTask:
    tests = tuple(
        TestSpec(**{k: v for k, v in t.items() if k in _TEST_FIELDS})
        for t in obj.get("tests", [])
    )
    context = tuple((c["name"], c["text"]) for c in obj.get("context", []))
    extra = {k: v for k, v in obj.items() if k not in _TASK_FIELDS}
    return RepairTask(
        id=obj["id"],
        source_benchmark=obj.get("source_benchmark", ""),
        prompt=obj.get("prompt", ""),
        buggy_code=obj.get("buggy_code", ""),
        context=context,
        tests=tests,
        ground_truth=obj.get("ground_truth"),
        language_tag=obj.get("language_tag", "python"),
        extra=extra,
    )


def _task_to_dict(task: RepairTask) -> dict:
    obj = {
        "id": task.id,
        "source_benchmark": task.source_benchmark,
        "prompt": task.prompt,
        "buggy_code": task.buggy_code,
        "context": [{"name": n, "text": t} for n, t in task.context],
        "tests": [
            {k: v for k, v in dataclasses.asdict(t).items() if v is not None}
            for t in task.tests
        ],
        "ground_truth": task.ground_truth,
        "language_tag": task.language_tag,
    }
    obj.update(task.extra)
    return obj


def _example_from_dict(obj: dict) -> ReasoningExample:
    extra = {k: v for k, v in obj.items() if k not in _EXAMPLE_FIELDS}
    return ReasoningExample(
        task_id=obj["task_id"],
        reasoning=obj.get("reasoning", ""),
        solution=obj.get("solution", ""),
        teacher_model=obj.get("teacher_model", ""),
        verified=bool(obj.get("verified", False)),
        extra=extra,
    )


def _example_to_dict(ex: ReasoningExample) -> dict:
    obj = {
        "task_id": ex.task_id,
        "reasoning": ex.reasoning,
        "solution": ex.solution,
        "teacher_model": ex.teacher_model,
        "verified": ex.verified,
    }
    obj.update(ex.extra)
    return obj


def _pair_from_dict(obj: dict) -> PreferencePair:
    extra = {k: v for k, v in obj.items() if k not in _PAIR_FIELDS}
    return PreferencePair(
        task_id=obj["task_id"],
        candidate_a=obj["candidate_a"],
        candidate_b=obj["candidate_b"],
        label=int(obj["label"]),
        judge_model=obj.get("judge_model", ""),
        extra=extra,
    )


def _pair_to_dict(pair: PreferencePair) -> dict:
    obj = {
        "task_id": pair.task_id,
        "candidate_a": pair.candidate_a,
        "candidate_b": pair.candidate_b,
        "label": pair.label,
        "judge_model": pair.judge_model,
    }
    obj.update(pair.extra)
    return obj


def _load_jsonl(path: str | Path, decode: Callable[[dict], object]) -> list:
    path = Path(path)
    records = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                records.append(decode(obj))
            except (KeyError, TypeError, ValidationError) as exc:
                raise ParseError(f"{path}:{lineno}: bad record: {exc}") from exc
    return records


def _save_jsonl(path: str | Path, objs: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def load_tasks(path: str | Path) -> TaskSet:
    """Read a tasks JSONL file; duplicate ids are rejected with the line number."""
    tasks = TaskSet()
    for lineno, task in enumerate(_load_jsonl(path, _task_from_dict), start=1):
        try:
            tasks.add(task)
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return tasks


def save_tasks(path: str | Path, tasks: Iterable[RepairTask]) -> None:
    _save_jsonl(path, (_task_to_dict(t) for t in tasks))


def load_examples(path: str | Path) -> list[ReasoningExample]:
    return _load_jsonl(path, _example_from_dict)


def save_examples(path: str | Path, examples: Iterable[ReasoningExample]) -> None:
    _save_jsonl(path, (_example_to_dict(e) for e in examples))


def load_pairs(path: str | Path) -> list[PreferencePair]:
    return _load_jsonl(path, _pair_from_dict)


def save_pairs(path: str | Path, pairs: Iterable[PreferencePair]) -> None:
    _save_jsonl(path, (_pair_to_dict(p) for p in pairs))


# --- Splitting and capping ----------------------------------------------


def split_dataset(tasks: TaskSet, spec: SplitSpec) -> tuple[TaskSet, TaskSet, TaskSet]:
    """Partition a TaskSet into train/val/test.

    Sizes are round(N * fraction) for val and test; the remainder goes to
    train.  The permutation is a pure function of spec.seed.
    """
    items = list(tasks)
    n = len(items)
    n_val = round(n * spec.val_fraction)
    n_test = round(n * spec.test_fraction)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValidationError("rounding produced a negative train split")
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [items[i] for i in order]
    return (
        TaskSet(shuffled[:n_train]),
        TaskSet(shuffled[n_train:n_train + n_val]),
        TaskSet(shuffled[n_train + n_val:]),
    )


def cap_dataset(
    examples: Sequence[ReasoningExample],
    fraction: float,
    strata: Callable[[ReasoningExample], str] | None = None,
    tasks: TaskSet | None = None,
    seed: int = DEFAULT_SEED,
) -> list[ReasoningExample]:
    """Keep ceil(fraction * N) examples, proportionally per stratum.

    The default stratum is the source benchmark of the example's task (when
    a TaskSet is supplied) so capping preserves benchmark balance.  Selection
    within a stratum is a seeded draw; per-stratum counts follow largest-
    remainder allocation, so each is within 1 of exact proportionality.
    """
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(examples)
    if n == 0:
        return []
    if fraction == 1.0:
        return list(examples)

    if strata is None:
        if tasks is not None:
            def strata(ex: ReasoningExample) -> str:
                return tasks[ex.task_id].source_benchmark
        else:
            def strata(ex: ReasoningExample) -> str:
                return ""

    total = math.ceil(fraction * n)
    groups: dict[str, list[int]] = {}
    for idx, ex in enumerate(examples):
        groups.setdefault(strata(ex), []).append(idx)

    # Largest-remainder allocation of `total` across strata.
    keys = sorted(groups)
    quotas = {k: total * len(groups[k]) / n for k in keys}
    counts = {k: min(math.floor(quotas[k]), len(groups[k])) for k in keys}
    short = total - sum(counts.values())
    by_remainder = sorted(
        keys, key=lambda k: (-(quotas[k] - math.floor(quotas[k])), k)
    )
    i = 0
    while short > 0:
        k = by_remainder[i % len(by_remainder)]
        if counts[k] < len(groups[k]):
            counts[k] += 1
            short -= 1
        i += 1
        if i > 2 * len(by_remainder) * (total + 1):
            raise InputError("cannot allocate cap across strata")

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for k in keys:
        idxs = groups[k]
        take = counts[k]
        picked = rng.choice(len(idxs), size=take, replace=False)
        chosen.extend(idxs[i] for i in picked)
    chosen.sort()  # keep input order
    return [examples[i] for i in chosen]
