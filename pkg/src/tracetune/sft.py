"""Supervised fine-tuning on verified reasoning traces.

Two objectives share one encoding: in trace mode the target is the
reasoning followed by the fenced solution; in direct-output mode the
reasoning is dropped entirely.  An example with empty reasoning encodes
identically under both modes, so the two losses agree exactly there.

Also hosts the optimizer machinery (decoupled-weight-decay Adam, linear
warmup with cosine decay) and an optional distillation loss for settings
where teacher logits are available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .corpus import ReasoningExample, RepairTask
from .errors import InputError, NumericError, TrainingError, ValidationError
from .policy import PolicyModel, Vocabulary, sequence_logprob_graph

TRACE_MODE = "trace"
DIRECT_MODE = "direct_output"


@dataclass(frozen=True)
class SftConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    warmup_steps: int = 0
    total_steps: int | None = None
    micro_batch: int = 1
    grad_accum_steps: int = 8
    epochs: int = 3
    mode: str = TRACE_MODE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.total_steps is not None and self.warmup_steps > self.total_steps:
            raise ValidationError("warmup_steps must not exceed total_steps")
        if self.grad_accum_steps < 1:
            raise ValidationError("grad_accum_steps must be >= 1")
        if self.mode not in (TRACE_MODE, DIRECT_MODE):
            raise ValidationError(f"unknown SFT mode {self.mode!r}")


@dataclass(frozen=True)
class KdConfig:
    alpha: float = 0.5
    temperature_tau: float = 1.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValidationError("alpha must lie in [0, 1]")
        if self.temperature_tau <= 0:
            raise ValidationError("temperature_tau must be positive")


# Reference hyperparameter presets (see README).
SFT_PRESET_DEFAULT = SftConfig()
SFT_PRESET_LOW_LR = SftConfig(learning_rate=5e-6)
SFT_PRESET_FIVE_EPOCHS = SftConfig(epochs=5)


# --- example encoding ---------------------------------------------------


def format_task_input(task: RepairTask) -> str:
    """The text the model conditions on: instruction plus buggy code."""
    return f"{task.prompt}\n{task.buggy_code}\n"


def format_completion(reasoning: str, solution: str) -> str:
    """Canonical completion: optional reasoning, then a fenced code block.

    Using the same fenced layout the teacher produces lets one parser
    extract solutions from both teacher replies and policy samples.
    """
    prefix = f"{reasoning}\n" if reasoning else ""
    return f"{prefix}```\n{solution}\n```"


def parse_completion(text: str) -> str | None:
    """Extract the solution from a sampled completion (last fenced block)."""
    from .teacher import extract_last_code_block
    try:
        return extract_last_code_block(text)
    except Exception:
        return None


def encode_example(task: RepairTask, example: ReasoningExample,
                   mode: str = TRACE_MODE) -> tuple[list[int], list[int]]:
    """Token ids (prompt, target) for one training example.

    The prompt begins with BOS; the target ends with EOS so sampling
    learns to terminate.
    """
    reasoning = example.reasoning if mode == TRACE_MODE else ""
    completion = format_completion(reasoning, example.solution)
    prompt_ids = [Vocabulary.BOS] + Vocabulary.encode(format_task_input(task))
    target_ids = Vocabulary.encode(completion) + [Vocabulary.EOS]
    return prompt_ids, target_ids


# --- objectives ---------------------------------------------------------


def sft_loss(model: PolicyModel, prompt_ids: list[int],
             target_ids: list[int]) -> ag.Tensor:
    """Negative log-likelihood of the full target given the prompt.

    Prompt positions are masked out entirely; the loss is the sum of
    per-target-token negative log-probs.
    """
    if len(prompt_ids) + len(target_ids) > model.context_window:
        raise InputError(
            f"example length {len(prompt_ids) + len(target_ids)} exceeds "
            f"context window {model.context_window}")
    per_token = sequence_logprob_graph(model, prompt_ids, target_ids)
    return ag.mul(ag.sum_(per_token), -1.0)


def direct_output_loss(model: PolicyModel, prompt_ids: list[int],
                       solution_ids: list[int]) -> ag.Tensor:
    """Negative log-likelihood of the solution alone (no reasoning tokens)."""
    return sft_loss(model, prompt_ids, solution_ids)


def example_loss(model: PolicyModel, task: RepairTask,
                 example: ReasoningExample, mode: str = TRACE_MODE) -> ag.Tensor:
    prompt_ids, target_ids = encode_example(task, example, mode)
    return sft_loss(model, prompt_ids, target_ids)


def kd_loss(student_logits, teacher_logits, true_label: int,
            config: KdConfig) -> ag.Tensor:
    """Distillation objective: label cross-entropy blended with a
    temperature-scaled KL term pulling the student toward the teacher."""
    student = student_logits if isinstance(student_logits, ag.Tensor) \
        else ag.constant(student_logits, "student_logits")
    teacher = np.asarray(
        teacher_logits.data if isinstance(teacher_logits, ag.Tensor)
        else teacher_logits, dtype=np.float64)
    if student.data.shape != teacher.shape:
        raise InputError("student and teacher logits must have the same shape")
    if not 0 <= true_label < student.data.shape[-1]:
        raise InputError(f"label {true_label} outside logit range")

    tau = config.temperature_tau
    ce = ag.mul(ag.take_per_row(
        ag.log_softmax(_as_row(student), axis=-1), np.array([true_label])), -1.0)
    ce = ag.sum_(ce)

    t_scaled = teacher / tau
    t_shift = t_scaled - t_scaled.max()
    t_prob = np.exp(t_shift) / np.exp(t_shift).sum()
    t_entropy_term = float((t_prob * (t_shift - np.log(np.exp(t_shift).sum()))).sum())
    s_logp = ag.log_softmax(_as_row(ag.mul(student, 1.0 / tau)), axis=-1)
    cross = ag.sum_(ag.mul(s_logp, t_prob[None, :]))
    kl = ag.add(ag.mul(cross, -1.0), t_entropy_term)

    return ag.add(ag.mul(ce, config.alpha),
                  ag.mul(kl, (1.0 - config.alpha) * tau * tau))


def _as_row(t: ag.Tensor) -> ag.Tensor:
    if t.data.ndim == 1:
        reshaped = ag.Tensor(t.data[None, :], name="as_row", parents=(t,))

        def backward(grad):
            if t.requires_grad:
                t._accumulate(grad[0])

        reshaped._backward = backward
        return reshaped
    return t


# --- optimizer and schedule ----------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size), step=0)


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
               config: SftConfig, lr: float | None = None
               ) -> tuple[np.ndarray, AdamState]:
    """One decoupled-weight-decay Adam update on flat vectors.

    Weight decay acts directly on the parameters, never through the
    moment estimates; moments use bias correction.
    """
    if params.shape != grads.shape:
        raise InputError("params and grads must have the same shape")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adamw_step")
    lr = config.learning_rate if lr is None else lr
    step = state.step + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grads
    v = config.beta2 * state.v + (1 - config.beta2) * grads * grads
    m_hat = m / (1 - config.beta1 ** step)
    v_hat = v / (1 - config.beta2 ** step)
    updated = params - lr * m_hat / (np.sqrt(v_hat) + config.eps) \
        - lr * config.weight_decay * params
    return updated, AdamState(m=m, v=v, step=step)


def lr_schedule(step: int, config: SftConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero."""
    total = config.total_steps
    if total is None:
        raise InputError("lr_schedule requires total_steps")
    if step < 0 or step > total:
        raise InputError(f"step {step} outside [0, {total}]")
    peak = config.learning_rate
    if step < config.warmup_steps:
        return peak * step / config.warmup_steps
    if total == config.warmup_steps:
        return peak
    progress = (step - config.warmup_steps) / (total - config.warmup_steps)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Stateful wrapper applying adamw_step to a model's trainable tensors."""

    def __init__(self, params: list[ag.Tensor], config: SftConfig):
        self.params = params
        self.config = config
        self.state = AdamState.zeros(sum(p.data.size for p in params))

    def step(self, lr: float | None = None) -> None:
        flat = ag.flatten_params(self.params)
        grads = ag.flatten_grads(self.params)
        updated, self.state = adamw_step(flat, grads, self.state, self.config, lr)
        ag.unflatten_into(self.params, updated)
        ag.zero_grads(self.params)


# --- training loop --------------------------------------------------------


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)
    skipped: int = 0


def train_sft(model: PolicyModel, tasks, examples: list[ReasoningExample],
              config: SftConfig) -> tuple[PolicyModel, TrainReport]:
    """Run the supervised stage over verified examples.

    Effective batch = micro_batch * grad_accum_steps; data is reshuffled
    each epoch; returns the trained model plus per-step loss history.
    On divergence the parameters roll back to the last finite step and a
    TrainingError is raised.
    """
    if not examples:
        raise InputError("train_sft requires a non-empty dataset")
    report = TrainReport()
    encoded: list[tuple[list[int], list[int]]] = []
    for ex in examples:
        task = tasks[ex.task_id]
        prompt_ids, target_ids = encode_example(task, ex, config.mode)
        if len(prompt_ids) + len(target_ids) > model.context_window:
            report.skipped += 1
            continue
        encoded.append((prompt_ids, target_ids))
    if not encoded:
        raise InputError("every example overflowed the context window")

    batch = config.micro_batch * config.grad_accum_steps
    steps_per_epoch = max(1, math.ceil(len(encoded) / batch))
    total = config.total_steps or config.epochs * steps_per_epoch
    schedule_cfg = replace(config, total_steps=total)

    params = model.trainable_parameters()
    optimizer = AdamW(params, config)
    rng = np.random.default_rng(config.seed)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        for start in range(0, len(encoded), batch):
            if step >= total:
                break
            chunk = [encoded[i] for i in order[start:start + batch]]
            snapshot = ag.flatten_params(params)
            ag.zero_grads(params)
            losses = []
            try:
                for prompt_ids, target_ids in chunk:
                    loss = ag.mul(sft_loss(model, prompt_ids, target_ids),
                                  1.0 / len(chunk))
                    loss.backward()
                    losses.append(loss.item() * len(chunk))
                lr = lr_schedule(step, schedule_cfg)
                optimizer.step(lr)
            except NumericError as exc:
                ag.unflatten_into(params, snapshot)
                raise TrainingError(
                    f"divergence at step {step}: {exc}; parameters rolled back"
                ) from exc
            step += 1
            report.history.append({
                "step": step,
                "lr": lr,
                "loss": float(np.mean(losses)),
                "mode": config.mode,
            })
    return model, report
