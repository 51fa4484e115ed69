"""Bundled toy repair family and a scripted teacher for offline runs.

Twenty single-digit "echo" repair tasks: the instruction names a digit,
the buggy program prints a placeholder, and the fix prints the digit.
Small enough for the byte-level policy to learn, real enough to exercise
the full pipeline: every stage, the verifier, and the metrics.
"""

from __future__ import annotations

import re

from .corpus import RepairTask, TaskSet, TestSpec
from .teacher import TeacherReply, TeacherRequest, extract_last_code_block

BUGGY_PROGRAM = 'print("?")'
_VARIANTS = ("echo", "write")


def toy_task(digit: int, variant: int) -> RepairTask:
    verb = _VARIANTS[variant]
    return RepairTask(
        id=f"toy-{verb}-{digit}",
        source_benchmark="toy-echo",
        prompt=f"{verb} {digit}",
        buggy_code=BUGGY_PROGRAM,
        tests=(TestSpec(kind="io_pair", stdin="", expected_stdout=f"{digit}\n",
                        timeout_seconds=5.0),),
        ground_truth=f"print({digit})",
        language_tag="python",
    )


def make_toy_tasks(count: int = 20) -> TaskSet:
    """Digits 0-9 crossed with two instruction verbs, interleaved."""
    tasks = TaskSet()
    for i in range(count):
        tasks.add(toy_task(digit=i % 10, variant=(i // 10) % len(_VARIANTS)))
    return tasks


_DIGIT = re.compile(r"\b(?:echo|write) (\d)\b")
_SOLUTION_BLOCKS = re.compile(
    r"Solution (?:[A-Z]|\d+):\n```\n(.*?)\n```", re.DOTALL)


def expected_solution(prompt_text: str) -> str:
    match = _DIGIT.search(prompt_text)
    if match is None:
        raise ValueError("toy teacher saw a prompt without a digit instruction")
    return f"print({match.group(1)})"


def _candidate_rank_key(candidate: str, expected: str):
    # correct first, then closest in length, then lexicographic for stability
    return (candidate != expected, abs(len(candidate) - len(expected)), candidate)


class ToyTeacherScript:
    """Deterministic stand-in for the remote teacher on the toy family.

    Trace requests get a one-line reasoning plus the correct fenced fix;
    ranking and comparison requests are answered by checking candidates
    against the digit named in the task instruction.
    """

    def __init__(self, trace_noise: dict[str, str] | None = None):
        self.trace_noise = trace_noise or {}

    def __call__(self, request: TeacherRequest) -> TeacherReply:
        content = request.messages[-1][1]
        expected = expected_solution(content)
        digit = expected[len("print("):-1]
        if "rank them from best to worst" in content:
            return self._rank(content, expected)
        if "Solution A:" in content:
            return self._compare(content, expected)
        task_key = f"echo {digit}" if f"echo {digit}" in content else f"write {digit}"
        override = self.trace_noise.get(task_key)
        solution = override if override is not None else expected
        text = f"use {digit}\n```\n{solution}\n```"
        return TeacherReply(text=text, token_usage=(len(content.split()),
                                                    len(text.split())))

    def _rank(self, content: str, expected: str) -> TeacherReply:
        candidates = _SOLUTION_BLOCKS.findall(content)
        order = sorted(range(len(candidates)),
                       key=lambda i: _candidate_rank_key(candidates[i], expected))
        line = ",".join(str(i + 1) for i in order)
        text = f"Ranking by correctness against the instruction.\n{line}"
        return TeacherReply(text=text, token_usage=(len(content.split()), 2))

    def _compare(self, content: str, expected: str) -> TeacherReply:
        candidates = _SOLUTION_BLOCKS.findall(content)
        if len(candidates) < 2:
            return TeacherReply(text="cannot tell", token_usage=(0, 2))
        a, b = candidates[0], candidates[1]
        verdict = "A" if _candidate_rank_key(a, expected) <= \
            _candidate_rank_key(b, expected) else "B"
        return TeacherReply(text=f"Comparing both fixes.\n{verdict}",
                            token_usage=(len(content.split()), 2))


def toy_reward_text(sample_text: str, expected: str) -> float:
    """Shaped toy reward: 1.0 for a correct extracted fix, partial otherwise."""
    try:
        code = extract_last_code_block(sample_text)
    except Exception:
        return 0.0
    return 1.0 if code == expected else 0.25 if code.startswith("print(") else 0.0
