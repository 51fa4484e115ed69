"""Preference reward model: a scalar scorer trained on judged pairs.

The scorer reuses the policy encoder body and reads a single real value
off the final position.  Training minimizes the negative log-likelihood
of the observed pairwise preferences under the logistic (Bradley-Terry)
link, and reports held-out pairwise accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .corpus import PreferencePair
from .errors import InputError, NumericError, TrainingError, ValidationError
from .policy import Encoder, Vocabulary
from .sft import AdamW, SftConfig


@dataclass(frozen=True)
class RmConfig:
    learning_rate: float = 5e-5
    epochs: int = 3
    micro_batch: int = 4
    grad_accum_steps: int = 4
    heldout_fraction: float = 0.2
    seed: int = 42

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0 <= self.heldout_fraction < 1:
            raise ValidationError("heldout_fraction must lie in [0, 1)")


class RewardModel(Encoder):
    """Encoder body plus a zero-initialized scalar head on the last position."""

    kind = "reward"

    def __init__(self, d_model: int = 16, d_hidden: int = 32,
                 context_window: int = 256, seed: int = 1):
        super().__init__(d_model, d_hidden, context_window, seed)
        self.w_head = ag.parameter(np.zeros(d_hidden), "w_head")
        self.b_head = ag.parameter(np.zeros(1), "b_head")

    def parameters(self) -> list[ag.Tensor]:
        return self.encoder_params() + [self.w_head, self.b_head]

    def trainable_parameters(self) -> list[ag.Tensor]:
        return self.parameters()

    def registry(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(p.name, p.data.shape) for p in self.parameters()]

    def score_graph(self, ids: np.ndarray) -> ag.Tensor:
        h = self.hidden_graph(ids)
        last = ag.gather_rows(h, np.array([ids.size - 1 if hasattr(ids, "size")
                                           else len(ids) - 1]))
        return ag.sum_(ag.add(ag.matmul(last, _as_col(self.w_head)), self.b_head))

    def score(self, ids) -> float:
        h = self.hidden(np.asarray(ids, dtype=np.int64))
        return float(h[-1] @ self.w_head.data + self.b_head.data[0])


def _as_col(t: ag.Tensor) -> ag.Tensor:
    out = ag.Tensor(t.data[:, None], name="as_col", parents=(t,))

    def backward(grad):
        if t.requires_grad:
            t._accumulate(grad[:, 0])

    out._backward = backward
    return out


def encode_pair_input(x_text: str, y_text: str) -> list[int]:
    """Token ids the scorer consumes: prompt then candidate."""
    return [Vocabulary.BOS] + Vocabulary.encode(x_text) + Vocabulary.encode(y_text)


def reward_score(rm: RewardModel, x_ids: list[int], y_ids: list[int]) -> float:
    """Deterministic scalar score of candidate y in context x."""
    ids = list(x_ids) + list(y_ids)
    if len(ids) > rm.context_window:
        raise InputError(
            f"scorer input length {len(ids)} exceeds context window "
            f"{rm.context_window}")
    return rm.score(ids)


def reward_score_graph(rm: RewardModel, x_ids: list[int],
                       y_ids: list[int]) -> ag.Tensor:
    ids = np.asarray(list(x_ids) + list(y_ids), dtype=np.int64)
    if ids.size > rm.context_window:
        raise InputError("scorer input exceeds context window")
    return rm.score_graph(ids)


def pref_prob(score_a: float, score_b: float) -> float:
    """P(a preferred over b) under the logistic link."""
    if not (math.isfinite(score_a) and math.isfinite(score_b)):
        raise InputError("scores must be finite")
    diff = score_a - score_b
    if diff >= 0:
        return 1.0 / (1.0 + math.exp(-diff))
    return math.exp(diff) / (1.0 + math.exp(diff))


def rm_loss_from_scores(scores_a: ag.Tensor, scores_b: ag.Tensor,
                        labels: np.ndarray) -> ag.Tensor:
    """Mean negative log-likelihood of labels given paired scores."""
    diff = ag.add(scores_a, ag.mul(scores_b, -1.0))
    logp_a = _log_sigmoid(diff)
    logp_b = _log_sigmoid(ag.mul(diff, -1.0))
    picked = ag.add(ag.mul(logp_a, labels), ag.mul(logp_b, 1.0 - labels))
    return ag.mul(ag.mean(picked), -1.0)


def _log_sigmoid(x: ag.Tensor) -> ag.Tensor:
    # log sigma(x) = -log(1 + exp(-x)); keep it in graph form via softplus
    neg = ag.mul(x, -1.0)
    # softplus(z) = max(z,0) + log1p(exp(-|z|)) is stable; compose from clips
    relu = ag.clip(neg, 0.0, np.inf)
    softplus = ag.add(relu, ag.log(ag.add(ag.exp(ag.mul(ag.abs_(neg), -1.0)), 1.0)))
    return ag.mul(softplus, -1.0)


def rm_loss(rm: RewardModel, pairs: list[PreferencePair],
            inputs: dict[str, str] | None = None,
            encode=encode_pair_input) -> ag.Tensor:
    """Differentiable preference loss over a batch of judged pairs.

    `inputs` maps task_id to the context text the candidates answered.
    """
    if not pairs:
        raise InputError("rm_loss requires a non-empty batch")
    scores_a = []
    scores_b = []
    labels = np.zeros(len(pairs))
    for i, pair in enumerate(pairs):
        x_text = (inputs or {}).get(pair.task_id, "")
        xa = encode(x_text, pair.candidate_a)
        xb = encode(x_text, pair.candidate_b)
        scores_a.append(rm.score_graph(np.asarray(xa, dtype=np.int64)))
        scores_b.append(rm.score_graph(np.asarray(xb, dtype=np.int64)))
        labels[i] = pair.label
    return rm_loss_from_scores(_stack_scalars(scores_a),
                               _stack_scalars(scores_b), labels)


def _stack_scalars(scalars: list[ag.Tensor]) -> ag.Tensor:
    out = ag.Tensor(np.array([s.item() for s in scalars]), name="stack",
                    parents=tuple(scalars))

    def backward(grad):
        for i, s in enumerate(scalars):
            if s.requires_grad:
                s._accumulate(np.asarray(grad[i]))

    out._backward = backward
    return out


def pairwise_accuracy(rm: RewardModel, pairs: list[PreferencePair],
                      inputs: dict[str, str] | None = None,
                      encode=encode_pair_input) -> float:
    """Fraction of pairs whose score ordering matches the label; ties 0.5."""
    if not pairs:
        raise InputError("accuracy over an empty set is undefined")
    total = 0.0
    for pair in pairs:
        x_text = (inputs or {}).get(pair.task_id, "")
        sa = rm.score(encode(x_text, pair.candidate_a))
        sb = rm.score(encode(x_text, pair.candidate_b))
        if sa == sb:
            total += 0.5
        elif (sa > sb) == (pair.label == 1):
            total += 1.0
    return total / len(pairs)


def train_reward_model(rm: RewardModel, pairs: list[PreferencePair],
                       config: RmConfig,
                       inputs: dict[str, str] | None = None,
                       encode=encode_pair_input
                       ) -> tuple[RewardModel, dict]:
    """Fit the scorer on preference pairs; returns held-out accuracy.

    The held-out split is seed-fixed.  Candidate pairs that compare
    byte-identical texts are rejected upstream by PreferencePair.
    """
    if not pairs:
        raise InputError("train_reward_model requires pairs")
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(pairs))
    n_held = int(round(config.heldout_fraction * len(pairs)))
    held = [pairs[i] for i in order[:n_held]]
    train = [pairs[i] for i in order[n_held:]]
    if not train:
        raise InputError("held-out fraction leaves no training pairs")

    params = rm.trainable_parameters()
    opt_config = SftConfig(learning_rate=config.learning_rate, weight_decay=0.0,
                           seed=config.seed)
    optimizer = AdamW(params, opt_config)
    batch = config.micro_batch * config.grad_accum_steps
    history = []
    for epoch in range(config.epochs):
        epoch_order = rng.permutation(len(train))
        for start in range(0, len(train), batch):
            chunk = [train[i] for i in epoch_order[start:start + batch]]
            snapshot = ag.flatten_params(params)
            ag.zero_grads(params)
            try:
                loss = rm_loss(rm, chunk, inputs, encode)
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                ag.unflatten_into(params, snapshot)
                raise TrainingError(f"reward training diverged: {exc}") from exc
            history.append({"epoch": epoch, "loss": loss.item()})
    accuracy = pairwise_accuracy(rm, held, inputs, encode) if held else float("nan")
    return rm, {"heldout_accuracy": accuracy, "heldout_pairs": len(held),
                "history": history}
