"""Sandboxed functional verification of candidate repairs.

A candidate is materialized with its task's context files in a fresh
temporary directory, each test runs as a subprocess under its timeout,
and the candidate is valid iff every test passes.  Commands are plain
argv vectors (no shell) restricted by a configurable allowlist.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import re
import shlex
import shutil
import subprocess
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import ReasoningExample, RepairTask, TaskSet, TestSpec
from .errors import (ConfigError, InputError, PatchApplyError, SandboxError,
                     ValidationError)

TIMEOUT_EXIT_CODE = -1001  # sentinel outside any real process exit status


@dataclass(frozen=True)
class ExecutionResult:
    exit_code: int
    stdout: str
    stderr: str
    wall_time_ms: float
    timed_out: bool


@dataclass(frozen=True)
class VerificationReport:
    task_id: str
    candidate_digest: str
    per_test: tuple[tuple[int, bool, ExecutionResult], ...]
    valid: bool


@dataclass(frozen=True)
class LanguageTools:
    run_command: str          # template with {file}
    compile_command: str | None = None
    filename: str = "solution.txt"


@dataclass(frozen=True)
class RunnerConfig:
    languages: dict = field(default_factory=lambda: {
        "python": LanguageTools(run_command=f"{sys.executable} {{file}}",
                                compile_command=(f"{sys.executable} -m "
                                                 "py_compile {file}"),
                                filename="solution.py"),
    })
    allowlist: tuple[str, ...] = (
        "python", "python3", Path(sys.executable).name, "sh", "echo", "cat",
        "true", "false", "sleep",
    )
    default_timeout_seconds: float = 10.0
    max_workers: int = os.cpu_count() or 1

    def tools_for(self, language_tag: str) -> LanguageTools:
        try:
            return self.languages[language_tag]
        except KeyError:
            raise ConfigError(
                f"no runner configured for language {language_tag!r}") from None


def candidate_digest(candidate: str) -> str:
    return hashlib.sha256(candidate.encode("utf-8")).hexdigest()


def _sanitized_env() -> dict[str, str]:
    keep = ("PATH", "HOME", "TMPDIR", "LANG", "LC_ALL", "PYTHONHASHSEED")
    return {k: os.environ[k] for k in keep if k in os.environ}


def run_command(command: str, cwd: Path, config: RunnerConfig,
                stdin: str | None = None,
                timeout_seconds: float | None = None) -> ExecutionResult:
    """Run one allowlisted command in `cwd`, capturing output and timing."""
    argv = shlex.split(command)
    if not argv:
        raise InputError("empty command")
    program = Path(argv[0]).name
    if program not in config.allowlist:
        raise SandboxError(f"command {program!r} not in the sandbox allowlist")
    timeout = timeout_seconds or config.default_timeout_seconds
    import time as _time
    start = _time.perf_counter()
    try:
        proc = subprocess.run(
            argv, cwd=cwd, input=stdin, capture_output=True, text=True,
            timeout=timeout, env=_sanitized_env())
        elapsed = (_time.perf_counter() - start) * 1000.0
        return ExecutionResult(exit_code=proc.returncode, stdout=proc.stdout,
                               stderr=proc.stderr, wall_time_ms=elapsed,
                               timed_out=False)
    except subprocess.TimeoutExpired as exc:
        elapsed = (_time.perf_counter() - start) * 1000.0
        out = exc.stdout or b""
        err = exc.stderr or b""
        return ExecutionResult(
            exit_code=TIMEOUT_EXIT_CODE,
            stdout=out.decode("utf-8", "replace") if isinstance(out, bytes) else out,
            stderr=err.decode("utf-8", "replace") if isinstance(err, bytes) else err,
            wall_time_ms=elapsed, timed_out=True)
    except FileNotFoundError as exc:
        raise SandboxError(f"cannot execute {argv[0]!r}: {exc}") from exc


def _normalize_stdout(text: str) -> str:
    lines = [line.rstrip() for line in text.splitlines()]
    while lines and not lines[-1]:
        lines.pop()
    return "\n".join(lines)


def _run_test(test: TestSpec, solution_path: Path, cwd: Path,
              config: RunnerConfig, tools: LanguageTools) -> tuple[bool, ExecutionResult]:
    if test.kind == "command":
        command = test.command.format(file=str(solution_path), dir=str(cwd))
        result = run_command(command, cwd, config, stdin=test.stdin,
                             timeout_seconds=test.timeout_seconds)
        passed = result.exit_code == 0
    else:  # io_pair
        command = tools.run_command.format(file=str(solution_path))
        result = run_command(command, cwd, config, stdin=test.stdin,
                             timeout_seconds=test.timeout_seconds)
        passed = (result.exit_code == 0 and
                  _normalize_stdout(result.stdout) ==
                  _normalize_stdout(test.expected_stdout))
    return passed, result


def validate(task: RepairTask, candidate: str,
             config: RunnerConfig = RunnerConfig()) -> VerificationReport:
    """Run every test of a task against a candidate in a fresh sandbox."""
    if not task.tests:
        raise InputError(f"task {task.id} has no tests to validate against")
    tools = config.tools_for(task.language_tag)
    try:
        workdir = Path(tempfile.mkdtemp(prefix="tracetune-sbx-"))
    except OSError as exc:
        raise SandboxError(f"cannot create sandbox directory: {exc}") from exc
    try:
        solution_path = workdir / tools.filename
        solution_path.write_text(candidate, encoding="utf-8")
        for name, text in task.context:
            target = workdir / name
            if not target.resolve().is_relative_to(workdir.resolve()):
                raise SandboxError(f"context file {name!r} escapes the sandbox")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text, encoding="utf-8")
        per_test = []
        for index, test in enumerate(task.tests):
            passed, result = _run_test(test, solution_path, workdir, config, tools)
            per_test.append((index, passed, result))
        return VerificationReport(
            task_id=task.id,
            candidate_digest=candidate_digest(candidate),
            per_test=tuple(per_test),
            valid=all(p for _, p, _ in per_test),
        )
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def filter_verified(examples: list[ReasoningExample], tasks: TaskSet,
                    config: RunnerConfig = RunnerConfig(),
                    max_workers: int | None = None) -> list[ReasoningExample]:
    """Keep exactly the examples whose solutions pass all of their task's tests."""
    for ex in examples:
        if ex.task_id not in tasks:
            raise ValidationError(f"example references unknown task {ex.task_id!r}")

    def check(ex: ReasoningExample) -> bool:
        return validate(tasks[ex.task_id], ex.solution, config).valid

    workers = max_workers or config.max_workers
    if workers > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flags = list(pool.map(check, examples))
    else:
        flags = [check(ex) for ex in examples]
    return [dataclasses.replace(ex, verified=True)
            for ex, ok in zip(examples, flags) if ok]


def run_compile(candidate: str, language_tag: str,
                config: RunnerConfig = RunnerConfig(),
                timeout_seconds: float | None = None) -> ExecutionResult:
    tools = config.tools_for(language_tag)
    if not tools.compile_command:
        raise ConfigError(f"no compile command for language {language_tag!r}")
    workdir = Path(tempfile.mkdtemp(prefix="tracetune-cmp-"))
    try:
        path = workdir / tools.filename
        path.write_text(candidate, encoding="utf-8")
        command = tools.compile_command.format(file=str(path))
        return run_command(command, workdir, config,
                           timeout_seconds=timeout_seconds)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)


def compile_check(candidate: str, language_tag: str,
                  config: RunnerConfig = RunnerConfig(),
                  timeout_seconds: float | None = None) -> bool:
    """True iff the language's compile/parse command exits 0 within timeout."""
    return run_compile(candidate, language_tag, config,
                       timeout_seconds).exit_code == 0


# --- unified diff application ----------------------------------------------

_HUNK_HEADER = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


@dataclass
class _Hunk:
    old_start: int
    old_count: int
    new_start: int
    new_count: int
    lines: list[str]


def _parse_patch(patch: str) -> list[tuple[str, list[_Hunk]]]:
    files: list[tuple[str, list[_Hunk]]] = []
    current_name: str | None = None
    hunks: list[_Hunk] = []
    lines = patch.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- "):
            if current_name is not None:
                files.append((current_name, hunks))
                hunks = []
            if i + 1 >= len(lines) or not lines[i + 1].startswith("+++ "):
                raise PatchApplyError("malformed patch: '---' without '+++'")
            target = lines[i + 1][4:].split("\t")[0].strip()
            source = line[4:].split("\t")[0].strip()
            name = target if target != "/dev/null" else source
            for prefix in ("a/", "b/"):
                if name.startswith(prefix):
                    name = name[len(prefix):]
            current_name = name
            i += 2
            continue
        match = _HUNK_HEADER.match(line)
        if match:
            if current_name is None:
                raise PatchApplyError("hunk before any file header")
            old_start = int(match.group(1))
            old_count = int(match.group(2) or "1")
            new_start = int(match.group(3))
            new_count = int(match.group(4) or "1")
            body: list[str] = []
            i += 1
            need_old, need_new = old_count, new_count
            while i < len(lines) and (need_old > 0 or need_new > 0):
                body_line = lines[i]
                if body_line.startswith("\\"):  # "\ No newline at end of file"
                    i += 1
                    continue
                marker = body_line[:1] or " "
                if marker == " ":
                    need_old -= 1
                    need_new -= 1
                elif marker == "-":
                    need_old -= 1
                elif marker == "+":
                    need_new -= 1
                else:
                    raise PatchApplyError(
                        f"bad hunk line {body_line!r} in {current_name}")
                body.append(body_line if body_line else " ")
                i += 1
            if need_old != 0 or need_new != 0:
                raise PatchApplyError(
                    f"hunk counts do not match body in {current_name}")
            hunks.append(_Hunk(old_start, old_count, new_start, new_count, body))
            continue
        i += 1
    if current_name is not None:
        files.append((current_name, hunks))
    return files


def apply_patch(base_files: dict[str, str], patch: str) -> dict[str, str]:
    """Apply a unified diff strictly: every context line must match exactly.

    Returns a new file map; the input is never mutated.  Hunk mismatches
    and unknown files raise PatchApplyError naming the file and hunk.
    """
    result = dict(base_files)
    if not patch.strip():
        return result
    for name, hunks in _parse_patch(patch):
        if name not in result:
            raise PatchApplyError(f"patch touches unknown file {name!r}")
        lines = result[name].splitlines()
        delta = 0
        for hunk_no, hunk in enumerate(hunks, start=1):
            # 1-based start; a zero-count hunk inserts after the given line
            pos = hunk.old_start - 1 + delta if hunk.old_count else hunk.old_start + delta
            out = lines[:pos]
            cursor = pos
            for body_line in hunk.lines:
                marker, content = body_line[0], body_line[1:]
                if marker in (" ", "-"):
                    if cursor >= len(lines) or lines[cursor] != content:
                        found = lines[cursor] if cursor < len(lines) else "<eof>"
                        raise PatchApplyError(
                            f"{name}: hunk {hunk_no} context mismatch at line "
                            f"{cursor + 1}: expected {content!r}, found {found!r}")
                    if marker == " ":
                        out.append(content)
                    cursor += 1
                else:  # "+"
                    out.append(content)
            out.extend(lines[cursor:])
            delta += (hunk.new_count - hunk.old_count)
            lines = out
        trailing = "\n" if result[name].endswith("\n") or not result[name] else ""
        result[name] = "\n".join(lines) + (trailing if lines else "")
    return result


def reverse_patch(patch: str) -> str:
    """Swap the roles of old and new so applying it undoes the original."""
    out = []
    for line in patch.splitlines():
        if line.startswith("--- "):
            out.append("+++ " + line[4:])
        elif line.startswith("+++ "):
            out.append("--- " + line[4:])
        else:
            match = _HUNK_HEADER.match(line)
            if match:
                old = f"-{match.group(3)}" + (f",{match.group(4)}" if match.group(4) else "")
                new = f"+{match.group(1)}" + (f",{match.group(2)}" if match.group(2) else "")
                out.append(f"@@ {old} {new} @@")
            elif line.startswith("+"):
                out.append("-" + line[1:])
            elif line.startswith("-"):
                out.append("+" + line[1:])
            else:
                out.append(line)
    # keep swapped header pairs in ---/+++ order
    for i in range(len(out) - 1):
        if out[i].startswith("+++ ") and out[i + 1].startswith("--- "):
            out[i], out[i + 1] = out[i + 1], out[i]
    return "\n".join(out) + ("\n" if patch.endswith("\n") else "")
