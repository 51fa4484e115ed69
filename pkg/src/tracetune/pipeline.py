"""Stage orchestration: configuration, manifest gating, and the seven stages.

Stages run in a fixed order (collect, filter, sft, gen-candidates, judge,
train-rm, ppo, eval), each gated on its predecessors through a manifest
file in the output directory.  A finished stage with an unchanged config
digest is never re-run, and trace collection resumes mid-file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, verifier
from .corpus import SplitSpec, TaskSet
from .errors import (ConfigError, ExtractionError, JudgmentParseError,
                     StageOrderError, TracetuneError, TrainingError,
                     TransportError)
from .metrics import (BLEU_TOKENIZER_VERSION, EvalOutcome, EvalSample, bleu,
                      mean_pass_at_k, performance_gap)
from .policy import (PolicyModel, Vocabulary, load_checkpoint, sample,
                     save_checkpoint)
from .reward import RewardModel, RmConfig, train_reward_model
from .rllf import (PpoConfig, ValueModel, reward_fn_from_model,
                   reward_fn_tests_passed, train_ppo)
from .sft import (SftConfig, format_task_input, parse_completion, train_sft)
from .teacher import (HttpTransport, PromptTemplates, ScriptedTransport,
                      TeacherClient, dedup_candidates, elicit_trace,
                      judge_pair, rank_candidates, ranking_to_pairs)
from .toy import ToyTeacherScript

STAGE_ORDER = ["collect", "filter", "sft", "gen-candidates", "judge",
               "train-rm", "ppo", "eval"]
STAGE_DEPS = {
    "collect": [],
    "filter": ["collect"],
    "sft": ["filter"],
    "gen-candidates": ["sft"],
    "judge": ["gen-candidates"],
    "train-rm": ["judge"],
    "ppo": ["train-rm"],
    "eval": ["ppo"],
}


@dataclass
class PipelineConfig:
    tasks_file: str = "tasks.jsonl"
    cache_dir: str = "teacher-cache"
    output_dir: str = "runs/default"
    seed: int = 42
    teacher_model: str = "teacher"
    teacher_transport: str = "toy"      # "toy" | "http"
    teacher_endpoint: str = ""
    teacher_mode: str = "record"        # "record" | "replay" | "live"
    teacher_concurrency: int = 4
    teacher_max_tokens: int = 2048
    policy_d_model: int = 16
    policy_d_hidden: int = 32
    policy_context_window: int = 256
    cap_fraction: float = 0.2
    gen_temperature: float = 0.8
    judge_method: str = "ranking"       # "ranking" | "pairwise"
    ppo_reward_source: str = "reward_model"  # "reward_model" | "tests"
    eval_num_samples: int = 5
    eval_temperature: float = 0.7
    eval_metrics: tuple[str, ...] = ("pass_at_1", "accuracy",
                                     "compilation_rate", "bleu")
    split: SplitSpec = field(default_factory=SplitSpec)
    sft: SftConfig = field(default_factory=SftConfig)
    rm: RmConfig = field(default_factory=RmConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTION_TYPES = {"split": SplitSpec, "sft": SftConfig, "rm": RmConfig,
                  "ppo": PpoConfig}


def config_from_dict(obj: dict) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            kwargs[key] = _SECTION_TYPES[key](**value)
        elif key == "eval_metrics":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return PipelineConfig(**kwargs)


def load_config(path: str | Path, mode: str | None = None,
                seed: int | None = None) -> PipelineConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    config = config_from_dict(obj)
    if mode is not None:
        config.teacher_mode = mode
    if seed is not None:
        config.seed = seed
    return config


class RunManifest:
    """Per-run stage ledger enforcing §-free dependency order."""

    def __init__(self, path: Path, config_digest: str):
        self.path = path
        self.config_digest = config_digest
        if path.exists():
            self.state = json.loads(path.read_text(encoding="utf-8"))
        else:
            self.state = {"config_digest": config_digest, "stages": {}}

    def _save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.state, indent=1, sort_keys=True),
                             encoding="utf-8")

    def status(self, stage: str) -> str:
        return self.state["stages"].get(stage, {}).get("status", "pending")

    def is_done(self, stage: str) -> bool:
        entry = self.state["stages"].get(stage, {})
        return (entry.get("status") == "done" and
                entry.get("config_digest") == self.config_digest)

    def require_ready(self, stage: str) -> None:
        for dep in STAGE_DEPS[stage]:
            if not self.is_done(dep):
                raise StageOrderError(
                    f"stage {stage!r} requires {dep!r} to be done first")

    def mark(self, stage: str, status: str, outputs: list[str] | None = None,
             error: str | None = None) -> None:
        entry = self.state["stages"].setdefault(stage, {})
        entry["status"] = status
        entry["config_digest"] = self.config_digest
        entry["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
        if outputs is not None:
            entry["outputs"] = outputs
        if error is not None:
            entry["error"] = error
        self._save()


@dataclass
class RunPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def traces(self) -> Path:
        return self.root / "traces.jsonl"

    @property
    def dsft(self) -> Path:
        return self.root / "dsft.jsonl"

    @property
    def candidates(self) -> Path:
        return self.root / "candidates.jsonl"

    @property
    def prefs(self) -> Path:
        return self.root / "prefs.jsonl"

    @property
    def usage(self) -> Path:
        return self.root / "usage.json"

    def checkpoint(self, name: str) -> Path:
        return self.root / f"{name}.ckpt"

    @property
    def sft_history(self) -> Path:
        return self.root / "sft_history.jsonl"

    @property
    def rm_report(self) -> Path:
        return self.root / "rm_report.json"

    @property
    def ppo_report(self) -> Path:
        return self.root / "ppo_report.jsonl"

    @property
    def metrics_report(self) -> Path:
        return self.root / "metrics_report.json"


class Pipeline:
    """Binds a config to its run directory and executes stages."""

    def __init__(self, config: PipelineConfig,
                 runner: verifier.RunnerConfig | None = None,
                 transport=None):
        self.config = config
        self.paths = RunPaths(Path(config.output_dir))
        self.paths.root.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.paths.manifest, config.digest)
        self.runner = runner or verifier.RunnerConfig()
        self.templates = PromptTemplates()
        self._transport = transport

    # -- shared helpers ----------------------------------------------------

    def teacher_client(self) -> TeacherClient:
        transport = self._transport
        if transport is None:
            if self.config.teacher_transport == "toy":
                transport = ScriptedTransport(ToyTeacherScript())
            elif self.config.teacher_transport == "http":
                if not self.config.teacher_endpoint:
                    raise ConfigError("http transport requires teacher_endpoint")
                transport = HttpTransport(self.config.teacher_endpoint)
            else:
                raise ConfigError(
                    f"unknown teacher transport "
                    f"{self.config.teacher_transport!r}")
        return TeacherClient(transport=transport,
                             cache_dir=self.config.cache_dir,
                             mode=self.config.teacher_mode,
                             max_concurrency=self.config.teacher_concurrency)

    def load_splits(self) -> tuple[TaskSet, TaskSet, TaskSet, TaskSet]:
        tasks = corpus.load_tasks(self.config.tasks_file)
        train, val, test = corpus.split_dataset(tasks, self.config.split)
        return tasks, train, val, test

    def new_policy(self, seed_offset: int = 0) -> PolicyModel:
        return PolicyModel(d_model=self.config.policy_d_model,
                           d_hidden=self.config.policy_d_hidden,
                           context_window=self.config.policy_context_window,
                           seed=self.config.seed + seed_offset)

    def load_policy(self, name: str) -> PolicyModel:
        model = self.new_policy()
        load_checkpoint(self.paths.checkpoint(name), model)
        return model

    # -- stages -------------------------------------------------------------

    def run_stage(self, stage: str) -> None:
        if stage not in STAGE_ORDER:
            raise ConfigError(f"unknown stage {stage!r}")
        if self.manifest.is_done(stage):
            return
        self.manifest.require_ready(stage)
        impl = getattr(self, "stage_" + stage.replace("-", "_"))
        try:
            outputs = impl()
        except TracetuneError as exc:
            self.manifest.mark(stage, "failed", error=str(exc))
            raise
        self.manifest.mark(stage, "done", outputs=outputs)

    def run(self, up_to: str | None = None) -> None:
        for stage in STAGE_ORDER:
            self.run_stage(stage)
            if stage == up_to:
                break

    def stage_collect(self) -> list[str]:
        _, train, _, _ = self.load_splits()
        done_ids = set()
        existing = []
        if self.paths.traces.exists():
            existing = corpus.load_examples(self.paths.traces)
            done_ids = {ex.task_id for ex in existing}
        todo = [t for t in train if t.id not in done_ids]
        client = self.teacher_client()

        def fetch(task):
            return elicit_trace(client, task, self.config.teacher_model,
                                self.templates,
                                max_tokens=self.config.teacher_max_tokens)

        failures: list[tuple[str, str]] = []
        collected = []
        if todo:
            with ThreadPoolExecutor(
                    max_workers=self.config.teacher_concurrency) as pool:
                futures = [(task.id, pool.submit(fetch, task)) for task in todo]
                for task_id, future in futures:
                    try:
                        collected.append(future.result())
                    except (TransportError, ExtractionError) as exc:
                        failures.append((task_id, str(exc)))
        corpus.save_examples(self.paths.traces, existing + collected)
        usage = {
            "calls": len(client.usage_log),
            "total_input_tokens": int(sum(u[0] for u in client.usage_log)),
            "total_output_tokens": int(sum(u[1] for u in client.usage_log)),
            "per_call": [list(u) for u in client.usage_log],
        }
        self.paths.usage.write_text(json.dumps(usage, indent=1, sort_keys=True),
                                    encoding="utf-8")
        if failures:
            raise TransportError(
                f"{len(failures)} task(s) failed trace collection "
                f"(partial progress saved): {failures[:3]}")
        return [str(self.paths.traces), str(self.paths.usage)]

    def stage_filter(self) -> list[str]:
        tasks, _, _, _ = self.load_splits()
        traces = corpus.load_examples(self.paths.traces)
        verified = verifier.filter_verified(traces, tasks, self.runner)
        capped = corpus.cap_dataset(verified, self.config.cap_fraction,
                                    tasks=tasks, seed=self.config.seed)
        if not capped:
            print("warning: no traces survived verification; D_SFT is empty",
                  file=sys.stderr)
        corpus.save_examples(self.paths.dsft, capped)
        return [str(self.paths.dsft)]

    def stage_sft(self) -> list[str]:
        tasks, _, _, _ = self.load_splits()
        examples = corpus.load_examples(self.paths.dsft)
        model = self.new_policy()
        save_checkpoint(self.paths.checkpoint("base"), model)
        model, report = train_sft(model, tasks, examples, self.config.sft)
        save_checkpoint(self.paths.checkpoint("sft"), model)
        with self.paths.sft_history.open("w", encoding="utf-8") as fh:
            for entry in report.history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return [str(self.paths.checkpoint("base")),
                str(self.paths.checkpoint("sft")), str(self.paths.sft_history)]

    def stage_gen_candidates(self) -> list[str]:
        _, _, val, _ = self.load_splits()
        model = self.load_policy("sft")
        rng = np.random.default_rng(self.config.seed)
        records = []
        for task in val:
            prompt_ids = [Vocabulary.BOS] + Vocabulary.encode(
                format_task_input(task))
            texts = []
            for _ in range(self.config.ppo.candidates_per_prompt):
                sub_seed = int(rng.integers(0, 2 ** 62))
                ids = sample(model, prompt_ids,
                             temperature=self.config.gen_temperature,
                             max_len=self.config.ppo.max_response_tokens,
                             seed=sub_seed)
                text = Vocabulary.decode(ids)
                code = parse_completion(text)
                texts.append(code if code is not None else text)
            distinct = dedup_candidates([t for t in texts if t.strip()])
            records.append({"task_id": task.id, "candidates": distinct})
        with self.paths.candidates.open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True,
                                    ensure_ascii=False) + "\n")
        return [str(self.paths.candidates)]

    def stage_judge(self) -> list[str]:
        tasks, _, _, _ = self.load_splits()
        client = self.teacher_client()
        rng = np.random.default_rng(self.config.seed)
        pairs = []
        skipped = 0
        with self.paths.candidates.open("r", encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        for record in records:
            task = tasks[record["task_id"]]
            candidates = record["candidates"]
            if len(candidates) < 2:
                continue
            if self.config.judge_method == "ranking":
                try:
                    order = rank_candidates(client, task, candidates,
                                            self.config.teacher_model,
                                            self.templates)
                except JudgmentParseError:
                    skipped += 1
                    continue
                pairs.extend(ranking_to_pairs(task.id, candidates, order,
                                              self.config.teacher_model))
            else:
                for i in range(len(candidates)):
                    for j in range(i + 1, len(candidates)):
                        pair = self._judge_once(client, task, candidates[i],
                                                candidates[j], rng)
                        if pair is None:
                            skipped += 1
                        else:
                            pairs.append(pair)
        corpus.save_pairs(self.paths.prefs, pairs)
        if skipped:
            print(f"warning: {skipped} judgment(s) skipped after retry",
                  file=sys.stderr)
        return [str(self.paths.prefs)]

    def _judge_once(self, client, task, a, b, rng):
        for _ in range(2):  # one retry on a malformed verdict
            try:
                return judge_pair(client, task, a, b,
                                  self.config.teacher_model, self.templates,
                                  rng=rng)
            except JudgmentParseError:
                continue
        return None

    def stage_train_rm(self) -> list[str]:
        tasks, _, _, _ = self.load_splits()
        pairs = corpus.load_pairs(self.paths.prefs)
        inputs = {t.id: format_task_input(t) for t in tasks}
        rm = RewardModel(d_model=self.config.policy_d_model,
                         d_hidden=self.config.policy_d_hidden,
                         context_window=self.config.policy_context_window,
                         seed=self.config.seed + 1)
        rm, report = train_reward_model(rm, pairs, self.config.rm, inputs)
        save_checkpoint(self.paths.checkpoint("reward"), rm)
        self.paths.rm_report.write_text(
            json.dumps({"heldout_accuracy": report["heldout_accuracy"],
                        "heldout_pairs": report["heldout_pairs"]},
                       indent=1, sort_keys=True), encoding="utf-8")
        return [str(self.paths.checkpoint("reward")), str(self.paths.rm_report)]

    def stage_ppo(self) -> list[str]:
        tasks, train, _, _ = self.load_splits()
        policy = self.load_policy("sft")
        ref = self.load_policy("sft")
        value_model = ValueModel(d_model=self.config.policy_d_model,
                                 d_hidden=self.config.policy_d_hidden,
                                 context_window=self.config.policy_context_window,
                                 seed=self.config.seed + 2)
        if self.config.ppo_reward_source == "tests":
            reward_fn = reward_fn_tests_passed(tasks, self.runner)
        else:
            rm = RewardModel(d_model=self.config.policy_d_model,
                             d_hidden=self.config.policy_d_hidden,
                             context_window=self.config.policy_context_window,
                             seed=self.config.seed + 1)
            load_checkpoint(self.paths.checkpoint("reward"), rm)
            reward_fn = reward_fn_from_model(rm, tasks)
        try:
            policy, report = train_ppo(policy, value_model, reward_fn, train,
                                       self.config.ppo, ref_policy=ref)
        except TrainingError:
            save_checkpoint(self.paths.checkpoint("ppo"), policy)
            raise
        save_checkpoint(self.paths.checkpoint("ppo"), policy)
        save_checkpoint(self.paths.checkpoint("value"), value_model)
        with self.paths.ppo_report.open("w", encoding="utf-8") as fh:
            for entry in report.rounds:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return [str(self.paths.checkpoint("ppo")), str(self.paths.ppo_report)]

    def stage_eval(self) -> list[str]:
        tasks, _, _, test = self.load_splits()
        report = evaluate_checkpoints(self, test)
        self.paths.metrics_report.write_text(
            json.dumps(report, indent=1, sort_keys=True, ensure_ascii=False),
            encoding="utf-8")
        return [str(self.paths.metrics_report)]


def evaluate_policy(model: PolicyModel, tasks, runner: verifier.RunnerConfig,
                    num_samples: int, temperature: float,
                    seed: int, check_compile: bool = True) -> list[EvalOutcome]:
    """Sample candidates per task, verify them, and build eval outcomes."""
    outcomes = []
    verdict_cache: dict[tuple[str, str], bool] = {}
    rng = np.random.default_rng(seed)
    for task in tasks:
        prompt_ids = [Vocabulary.BOS] + Vocabulary.encode(format_task_input(task))
        samples = []
        for _ in range(num_samples):
            sub_seed = int(rng.integers(0, 2 ** 62))
            ids = sample(model, prompt_ids, temperature=temperature,
                         max_len=128, seed=sub_seed)
            text = Vocabulary.decode(ids)
            code = parse_completion(text)
            applied = code is not None
            candidate = code if applied else ""
            key = (task.id, candidate)
            if key not in verdict_cache:
                verdict_cache[key] = bool(
                    candidate) and verifier.validate(task, candidate, runner).valid
            valid = verdict_cache[key]
            compiled = False
            if check_compile and candidate:
                ckey = (task.id, "compile:" + candidate)
                if ckey not in verdict_cache:
                    verdict_cache[ckey] = verifier.compile_check(
                        candidate, task.language_tag, runner)
                compiled = verdict_cache[ckey]
            samples.append(EvalSample(candidate=candidate, valid=valid,
                                      compiled=compiled, applied=applied))
        outcomes.append(EvalOutcome(task_id=task.id, samples=tuple(samples)))
    return outcomes


def _metric_block(outcomes: list[EvalOutcome], tasks,
                  metric_names: tuple[str, ...]) -> dict:
    block: dict = {}
    if "pass_at_1" in metric_names:
        block["pass_at_1"] = mean_pass_at_k(outcomes, k=1)
    if "accuracy" in metric_names:
        block["accuracy"] = sum(
            1 for o in outcomes if o.samples[0].valid) / len(outcomes)
    if "compilation_rate" in metric_names:
        block["compilation_rate"] = sum(
            1 for o in outcomes if o.samples[0].compiled) / len(outcomes)
    if "resolved" in metric_names:
        block["resolved"] = sum(
            1 for o in outcomes
            if o.samples[0].applied and o.samples[0].valid) / len(outcomes)
    if "bleu" in metric_names:
        scores = []
        for outcome in outcomes:
            truth = tasks[outcome.task_id].ground_truth
            if truth:
                scores.append(bleu(outcome.samples[0].candidate or "", [truth])
                              if outcome.samples[0].candidate else 0.0)
        block["bleu"] = sum(scores) / len(scores) if scores else 0.0
    return block


def evaluate_checkpoints(pipe: Pipeline, test: TaskSet) -> dict:
    """Metrics for base/sft/ppo checkpoints plus pairwise gap reports."""
    config = pipe.config
    all_tasks = pipe.load_splits()[0]
    per_task_scores: dict[str, dict[str, float]] = {}
    models = {}
    for name in ("base", "sft", "ppo"):
        model = pipe.load_policy(name)
        outcomes = evaluate_policy(model, test, pipe.runner,
                                   config.eval_num_samples,
                                   config.eval_temperature, config.seed)
        models[name] = _metric_block(outcomes, all_tasks, config.eval_metrics)
        per_task_scores[name] = {
            o.task_id: mean_pass_at_k([o], k=1) for o in outcomes}
    gaps = {}
    for a, b in (("sft", "base"), ("ppo", "sft"), ("ppo", "base")):
        gap = performance_gap(per_task_scores[a], per_task_scores[b],
                              metric_name="pass_at_1")
        gaps[f"{a}_vs_{b}"] = dataclasses.asdict(gap)
    return {
        "bleu_tokenizer": BLEU_TOKENIZER_VERSION,
        "config_digest": config.digest,
        "num_test_tasks": len(test),
        "models": models,
        "gaps": gaps,
        "per_task_pass_at_1": per_task_scores,
    }
