"""PPO fine-tuning of the policy against preference-model rewards.

One rollout samples responses from the current policy while recording
per-token log-probs under both the live policy and the frozen post-SFT
reference.  Rewards are shaped per token as -beta * (log pi - log ref),
with the scalar reward credited at the final token; advantages come from
GAE over TD errors of a per-position value head.  The update maximizes
the clipped surrogate minus a value-regression penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import InputError, StateError, TrainingError, ValidationError
from .policy import (Encoder, PolicyModel, Vocabulary, sequence_logprob,
                     sequence_logprob_graph)
from .sft import AdamW, SftConfig, format_task_input

KL_SHAPING = "shaping"
KL_PENALTY = "penalty"


@dataclass(frozen=True)
class PpoConfig:
    beta_kl: float = 0.1
    clip_epsilon: float = 0.2
    gamma: float = 1.0
    lambda_gae: float = 0.95
    ppo_epochs_per_batch: int = 5
    rollout_temperature: float = 1.0
    candidates_per_prompt: int = 3
    value_loss_coefficient: float = 0.5
    max_response_tokens: int = 128
    rounds: int = 10
    learning_rate: float = 1e-3
    value_learning_rate: float = 1e-2
    kl_ceiling: float = 10.0
    kl_mode: str = KL_SHAPING
    normalize_advantages: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.beta_kl < 0:
            raise ValidationError("beta_kl must be >= 0")
        if self.clip_epsilon <= 0:
            raise ValidationError("clip_epsilon must be positive")
        if not 0 < self.gamma <= 1:
            raise ValidationError("gamma must lie in (0, 1]")
        if not 0 <= self.lambda_gae <= 1:
            raise ValidationError("lambda_gae must lie in [0, 1]")
        if self.rollout_temperature <= 0:
            raise ValidationError("rollout_temperature must be positive")
        if self.kl_mode not in (KL_SHAPING, KL_PENALTY):
            raise ValidationError(f"unknown kl_mode {self.kl_mode!r}")


class ValueModel(Encoder):
    """Per-position scalar predictor sharing the policy encoder shape."""

    kind = "value"

    def __init__(self, d_model: int = 16, d_hidden: int = 32,
                 context_window: int = 256, seed: int = 2):
        super().__init__(d_model, d_hidden, context_window, seed)
        self.w_head = ag.parameter(np.zeros(d_hidden), "w_head")
        self.b_head = ag.parameter(np.zeros(1), "b_head")

    def parameters(self) -> list[ag.Tensor]:
        return self.encoder_params() + [self.w_head, self.b_head]

    def trainable_parameters(self) -> list[ag.Tensor]:
        return self.parameters()

    def registry(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(p.name, p.data.shape) for p in self.parameters()]

    def _state_rows(self, prompt_len: int, response_len: int) -> np.ndarray:
        # V(s_t) reads the position holding the last token of x + y_<t.
        return np.arange(prompt_len - 1, prompt_len + response_len - 1)

    def values(self, prompt_ids: list[int], response_ids: list[int]) -> np.ndarray:
        if not response_ids:
            return np.zeros(0)
        ids = np.asarray(list(prompt_ids) + list(response_ids[:-1]), dtype=np.int64)
        h = self.hidden(ids)
        rows = self._state_rows(len(prompt_ids), len(response_ids))
        return h[rows] @ self.w_head.data + self.b_head.data[0]

    def values_graph(self, prompt_ids: list[int],
                     response_ids: list[int]) -> ag.Tensor:
        ids = np.asarray(list(prompt_ids) + list(response_ids[:-1]), dtype=np.int64)
        h = self.hidden_graph(ids)
        rows = self._state_rows(len(prompt_ids), len(response_ids))
        picked = ag.gather_rows(h, rows)
        return ag.flatten(ag.add(ag.matmul(picked, _as_col(self.w_head)),
                                 self.b_head))


def _as_col(t: ag.Tensor) -> ag.Tensor:
    out = ag.Tensor(t.data[:, None], name="as_col", parents=(t,))

    def backward(grad):
        if t.requires_grad:
            t._accumulate(grad[:, 0])

    out._backward = backward
    return out


@dataclass
class TrajectorySample:
    task_id: str
    prompt_ids: list[int]
    response_ids: list[int]  # includes terminal EOS when one was produced
    text: str
    truncated: bool
    logp_policy: np.ndarray
    logp_ref: np.ndarray
    terminal_reward: float = 0.0
    shaped_rewards: np.ndarray | None = None
    values: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None


@dataclass
class TrajectoryBatch:
    samples: list[TrajectorySample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


def encode_prompt(task) -> list[int]:
    return [Vocabulary.BOS] + Vocabulary.encode(format_task_input(task))


def sample_actions(model: PolicyModel, prompt_ids: list[int], temperature: float,
                   max_len: int, seed: int) -> tuple[list[int], bool]:
    """Sample a response as an action sequence; EOS counts as an action.

    Returns (action ids, truncated).  A natural stop appends EOS; hitting
    the cap or the context limit truncates and flags the sample.
    """
    rng = np.random.default_rng(seed)
    ids = list(prompt_ids)
    actions: list[int] = []
    embed = model.embed.data
    w1, w2 = model.w1.data, model.w2.data
    if "w1" in model.adapters:
        w1 = w1 + model.adapters["w1"].delta().T
    if "w2" in model.adapters:
        w2 = w2 + model.adapters["w2"].delta().T
    running = embed[ids].sum(axis=0)
    while True:
        if len(actions) >= max_len or len(ids) >= model.context_window:
            return actions, True
        e = embed[ids[-1]]
        z = np.concatenate([e, running / len(ids)])
        h1 = np.tanh(z @ w1 + model.b1.data)
        h2 = np.tanh(h1 @ w2 + model.b2.data)
        logits = h2 @ model.w_out.data + model.b_out.data
        scaled = logits / temperature
        shifted = scaled - scaled.max()
        probs = np.exp(shifted) / np.exp(shifted).sum()
        token = int(rng.choice(Vocabulary.size, p=probs))
        actions.append(token)
        if token == Vocabulary.EOS:
            return actions, False
        ids.append(token)
        running = running + embed[token]


def per_token_logprobs(model: PolicyModel, prompt_ids: list[int],
                       action_ids: list[int]) -> np.ndarray:
    _, per_token = sequence_logprob(model, prompt_ids, action_ids)
    return np.asarray(per_token)


def rollout(policy: PolicyModel, ref_policy: PolicyModel, tasks,
            config: PpoConfig, seed: int | None = None) -> TrajectoryBatch:
    """Sample candidates_per_prompt responses per task, with both log-probs."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    batch = TrajectoryBatch()
    for task in tasks:
        prompt_ids = encode_prompt(task)
        for _ in range(config.candidates_per_prompt):
            sub_seed = int(rng.integers(0, 2 ** 62))
            actions, truncated = sample_actions(
                policy, prompt_ids, config.rollout_temperature,
                config.max_response_tokens, sub_seed)
            if not actions:
                continue
            batch.samples.append(TrajectorySample(
                task_id=task.id,
                prompt_ids=prompt_ids,
                response_ids=actions,
                text=Vocabulary.decode(actions),
                truncated=truncated,
                logp_policy=per_token_logprobs(policy, prompt_ids, actions),
                logp_ref=per_token_logprobs(ref_policy, prompt_ids, actions),
            ))
    return batch


def shape_rewards(batch: TrajectoryBatch, reward_fn,
                  config: PpoConfig) -> TrajectoryBatch:
    """Per-token reward: -beta * (log pi - log ref), scalar reward at the end.

    `reward_fn(sample)` maps a trajectory to its scalar terminal reward.
    In penalty mode the KL term moves into the update loss instead.
    """
    for sample in batch:
        if sample.logp_policy is None or sample.logp_ref is None:
            raise StateError("rollout log-probs missing; run rollout first")
        if len(sample.logp_policy) != len(sample.logp_ref):
            raise StateError("policy and reference log-prob lengths differ")
        sample.terminal_reward = float(reward_fn(sample))
        shaped = np.zeros(len(sample.response_ids))
        if config.kl_mode == KL_SHAPING:
            shaped -= config.beta_kl * (sample.logp_policy - sample.logp_ref)
        shaped[-1] += sample.terminal_reward
        sample.shaped_rewards = shaped
    return batch


def td_errors(rewards: np.ndarray, values: np.ndarray,
              gamma: float) -> np.ndarray:
    """Temporal-difference errors; `values` must include the terminal value."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.size != rewards.size + 1:
        raise InputError(
            f"values must have length T+1 ({rewards.size + 1}), got {values.size}")
    return rewards + gamma * values[1:] - values[:-1]


def gae(deltas: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Advantages via the backward recursion A_t = delta_t + gamma*lam*A_{t+1}."""
    deltas = np.asarray(deltas, dtype=np.float64)
    advantages = np.zeros_like(deltas)
    acc = 0.0
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        advantages[t] = acc
    return advantages


def gae_direct(deltas: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """O(T^2) double-sum definition; the oracle the recursion is checked against."""
    deltas = np.asarray(deltas, dtype=np.float64)
    t_len = deltas.size
    out = np.zeros(t_len)
    for t in range(t_len):
        out[t] = sum((gamma * lam) ** l * deltas[t + l] for l in range(t_len - t))
    return out


def ppo_clip_objective(ratios, advantages, epsilon: float):
    """Mean over tokens of min(r*A, clip(r, 1-eps, 1+eps)*A).

    Accepts autograd ratios (differentiable path) or plain arrays.
    """
    graph = isinstance(ratios, ag.Tensor)
    r = ratios if graph else ag.constant(np.asarray(ratios, dtype=np.float64),
                                         "ratios")
    adv = np.asarray(advantages, dtype=np.float64)
    if r.data.shape != adv.shape:
        raise InputError("ratios and advantages must align")
    unclipped = ag.mul(r, adv)
    clipped = ag.mul(ag.clip(r, 1.0 - epsilon, 1.0 + epsilon), adv)
    objective = ag.mean(ag.minimum(unclipped, clipped))
    return objective if graph else objective.item()


def value_loss(value_model: ValueModel, batch: TrajectoryBatch) -> ag.Tensor:
    """Mean squared error between predicted values and returns."""
    preds = []
    targets = []
    for sample in batch:
        if sample.returns is None:
            raise StateError("returns missing; compute advantages first")
        preds.append(value_model.values_graph(sample.prompt_ids,
                                              sample.response_ids))
        targets.append(sample.returns)
    stacked = ag.concat(preds, axis=0)
    target = np.concatenate(targets)
    return ag.mean(ag.square(ag.add(stacked, ag.mul(ag.constant(target), -1.0))))


def kl_estimate(logp_theta: np.ndarray, logp_ref: np.ndarray) -> float:
    """Sampled-token estimator of forward KL: mean log-prob gap."""
    logp_theta = np.asarray(logp_theta, dtype=np.float64)
    logp_ref = np.asarray(logp_ref, dtype=np.float64)
    if logp_theta.shape != logp_ref.shape:
        raise InputError("log-prob arrays must align")
    if logp_theta.size == 0:
        return 0.0
    return float(np.mean(logp_theta - logp_ref))


def compute_advantages(batch: TrajectoryBatch, value_model: ValueModel,
                       config: PpoConfig) -> TrajectoryBatch:
    """Fill values, advantages, and returns; optionally normalize advantages.

    Returns are advantages + values (computed before normalization), and a
    truncated episode bootstraps its own final value instead of zero.
    """
    for sample in batch:
        values = value_model.values(sample.prompt_ids, sample.response_ids)
        terminal = values[-1] if sample.truncated and values.size else 0.0
        stacked = np.concatenate([values, [terminal]])
        deltas = td_errors(sample.shaped_rewards, stacked, config.gamma)
        sample.values = values
        sample.advantages = gae(deltas, config.gamma, config.lambda_gae)
        sample.returns = sample.advantages + values
    if config.normalize_advantages and len(batch):
        pooled = np.concatenate([s.advantages for s in batch])
        mean, std = pooled.mean(), pooled.std()
        for sample in batch:
            sample.advantages = (sample.advantages - mean) / (std + 1e-8)
    return batch


@dataclass
class PpoReport:
    rounds: list[dict] = field(default_factory=list)


def train_ppo(policy: PolicyModel, value_model: ValueModel, reward_fn, tasks,
              config: PpoConfig,
              ref_policy: PolicyModel | None = None
              ) -> tuple[PolicyModel, PpoReport]:
    """Alternate rollout / reward shaping / GAE / clipped-surrogate epochs.

    `reward_fn(sample)` supplies the scalar reward; pass
    `reward_fn_from_model(...)` to use a trained preference model.  The
    reference policy defaults to a frozen copy of the incoming policy.
    Raises TrainingError (model kept at its last state) if the monitored
    KL exceeds the configured ceiling.
    """
    if ref_policy is None:
        ref_policy = policy.clone()
    report = PpoReport()
    policy_opt = AdamW(policy.trainable_parameters(),
                       SftConfig(learning_rate=config.learning_rate,
                                 weight_decay=0.0, seed=config.seed))
    value_opt = AdamW(value_model.trainable_parameters(),
                      SftConfig(learning_rate=config.value_learning_rate,
                                weight_decay=0.0, seed=config.seed))
    for round_idx in range(config.rounds):
        batch = rollout(policy, ref_policy, tasks, config,
                        seed=config.seed + round_idx)
        if not len(batch):
            continue
        shape_rewards(batch, reward_fn, config)
        compute_advantages(batch, value_model, config)

        mean_kl = float(np.mean([
            kl_estimate(s.logp_policy, s.logp_ref) for s in batch]))
        if mean_kl > config.kl_ceiling:
            raise TrainingError(
                f"KL estimate {mean_kl:.3f} breached ceiling "
                f"{config.kl_ceiling}; model retained at round {round_idx}")

        round_stats = {"round": round_idx,
                       "mean_terminal_reward": float(np.mean(
                           [s.terminal_reward for s in batch])),
                       "mean_kl": mean_kl}
        clip_fractions = []
        last_vloss = 0.0
        last_obj = 0.0
        for _ in range(config.ppo_epochs_per_batch):
            new_logps = []
            old_logps = []
            advantages = []
            ref_logps = []
            for sample in batch:
                new_logps.append(sequence_logprob_graph(
                    policy, sample.prompt_ids, sample.response_ids))
                old_logps.append(sample.logp_policy)
                ref_logps.append(sample.logp_ref)
                advantages.append(sample.advantages)
            new_cat = ag.concat(new_logps, axis=0)
            old_cat = np.concatenate(old_logps)
            adv_cat = np.concatenate(advantages)
            ratios = ag.exp(ag.add(new_cat, ag.mul(ag.constant(old_cat), -1.0)))
            objective = ppo_clip_objective(ratios, adv_cat, config.clip_epsilon)
            vloss = value_loss(value_model, batch)
            loss = ag.add(ag.mul(objective, -1.0),
                          ag.mul(vloss, config.value_loss_coefficient))
            if config.kl_mode == KL_PENALTY:
                ref_cat = np.concatenate(ref_logps)
                penalty = ag.mean(ag.add(new_cat,
                                         ag.mul(ag.constant(ref_cat), -1.0)))
                loss = ag.add(loss, ag.mul(penalty, config.beta_kl))
            ag.zero_grads(policy.trainable_parameters())
            ag.zero_grads(value_model.trainable_parameters())
            loss.backward()
            policy_opt.step()
            value_opt.step()
            outside = np.abs(ratios.data - 1.0) > config.clip_epsilon
            clip_fractions.append(float(outside.mean()))
            last_vloss = vloss.item()
            last_obj = objective.item()
        round_stats["clip_fraction"] = float(np.mean(clip_fractions))
        round_stats["value_loss"] = last_vloss
        round_stats["objective"] = last_obj
        report.rounds.append(round_stats)
    return policy, report


def reward_fn_from_model(rm, tasks, encode_context=format_task_input):
    """Adapter: score trajectories with a trained preference model."""
    from .reward import encode_pair_input

    def fn(sample: TrajectorySample) -> float:
        task = tasks[sample.task_id]
        ids = encode_pair_input(encode_context(task), sample.text)
        return rm.score(ids)

    return fn


def reward_fn_tests_passed(tasks, runner, parse=None):
    """Adapter: reward = fraction of the task's tests the candidate passes."""
    from .sft import parse_completion
    from .verifier import validate
    parse = parse or parse_completion

    def fn(sample: TrajectorySample) -> float:
        task = tasks[sample.task_id]
        candidate = parse(sample.text)
        if candidate is None:
            return 0.0
        report = validate(task, candidate, runner)
        if not report.per_test:
            return 0.0
        return sum(1 for entry in report.per_test if entry[1]) / len(report.per_test)

    return fn
