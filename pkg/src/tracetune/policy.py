"""Tiny byte-level autoregressive policy with exact gradients.

The model is deliberately small: token embeddings, a parameter-free causal
prefix-mean context, two tanh transforms, and an output projection.  Position
t sees only tokens 0..t, so causality holds by construction.  The same
encoder body is reused by the reward and value models with scalar heads.

All arithmetic is float64 and seeded, so sampling and training are
bit-reproducible on one platform.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .errors import InputError, ValidationError

MAGIC = b"TTCKPT\x00"
FORMAT_VERSION = 1


class Vocabulary:
    """Fixed byte-level vocabulary: 256 byte values plus BOS, EOS, PAD."""

    BOS = 256
    EOS = 257
    PAD = 258
    size = 259

    @staticmethod
    def encode_bytes(data: bytes) -> list[int]:
        return list(data)

    @staticmethod
    def encode(text: str) -> list[int]:
        return list(text.encode("utf-8"))

    @staticmethod
    def decode_bytes(ids: list[int] | np.ndarray) -> bytes:
        return bytes(i for i in ids if i < 256)

    @staticmethod
    def decode(ids: list[int] | np.ndarray) -> str:
        return Vocabulary.decode_bytes(ids).decode("utf-8", errors="replace")


@dataclass
class LowRankAdapter:
    """Additive low-rank weight delta (alpha/r) * B @ A on a frozen base.

    A is (rank, d_in), gaussian-initialized; B is (d_out, rank), zeros, so a
    fresh adapter is an exact identity.  `dropout_rate` drops input features
    of the adapter path during training.
    """

    a: ag.Tensor
    b: ag.Tensor
    rank: int
    alpha: float
    dropout_rate: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.b.data @ self.a.data)


def make_adapter(d_in: int, d_out: int, rank: int = 4, alpha: float = 16.0,
                 dropout_rate: float = 0.05, seed: int = 0) -> LowRankAdapter:
    if rank < 1:
        raise InputError("adapter rank must be >= 1")
    if not 0 <= dropout_rate < 1:
        raise InputError("dropout_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    a = ag.parameter(rng.normal(0.0, 1.0 / rank, size=(rank, d_in)), "adapter_a")
    b = ag.parameter(np.zeros((d_out, rank)), "adapter_b")
    return LowRankAdapter(a=a, b=b, rank=rank, alpha=alpha, dropout_rate=dropout_rate)


def apply_adapter(base_weight: np.ndarray, adapter: LowRankAdapter,
                  train_mode: bool = False,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Effective weight = base + (alpha/r) * B @ A, with input-path dropout.

    `base_weight` is oriented (d_out, d_in) to match the adapter shapes.
    """
    d_out, r = adapter.b.data.shape
    r2, d_in = adapter.a.data.shape
    if base_weight.shape != (d_out, d_in) or r != r2:
        raise InputError(
            f"adapter shapes ({r2}x{d_in}, {d_out}x{r}) do not fit base "
            f"{base_weight.shape}")
    a = adapter.a.data
    if train_mode and adapter.dropout_rate > 0:
        if rng is None:
            rng = np.random.default_rng()
        keep = rng.random(d_in) >= adapter.dropout_rate
        a = a * (keep / (1.0 - adapter.dropout_rate))
    return base_weight + adapter.scale * (adapter.b.data @ a)


def _adapted_weight_graph(base: ag.Tensor, adapter: LowRankAdapter,
                          train_mode: bool,
                          rng: np.random.Generator | None) -> ag.Tensor:
    """Differentiable counterpart of apply_adapter for (d_in, d_out) weights."""
    a = adapter.a
    if train_mode and adapter.dropout_rate > 0:
        if rng is None:
            rng = np.random.default_rng()
        keep = rng.random(a.data.shape[1]) >= adapter.dropout_rate
        a = ag.mul(a, keep / (1.0 - adapter.dropout_rate))
    delta = ag.mul(ag.matmul(ag.transpose(a), ag.transpose(adapter.b)),
                   adapter.scale)
    return ag.add(base, delta)


class Encoder:
    """Shared body: embedding, causal prefix mean, two tanh transforms."""

    def __init__(self, d_model: int = 16, d_hidden: int = 32,
                 context_window: int = 256, seed: int = 0):
        self.d_model = d_model
        self.d_hidden = d_hidden
        self.context_window = context_window
        rng = np.random.default_rng(seed)
        v = Vocabulary.size
        self.embed = ag.parameter(rng.normal(0.0, 0.4, size=(v, d_model)), "embed")
        self.w1 = ag.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(2 * d_model), size=(2 * d_model, d_hidden)),
            "w1")
        self.b1 = ag.parameter(np.zeros(d_hidden), "b1")
        self.w2 = ag.parameter(
            rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_hidden, d_hidden)), "w2")
        self.b2 = ag.parameter(np.zeros(d_hidden), "b2")
        # optional low-rank adapters on the two hidden transforms
        self.adapters: dict[str, LowRankAdapter] = {}

    def encoder_params(self) -> list[ag.Tensor]:
        return [self.embed, self.w1, self.b1, self.w2, self.b2]

    def attach_adapters(self, rank: int = 4, alpha: float = 16.0,
                        dropout_rate: float = 0.05, seed: int = 0) -> None:
        self.adapters = {
            "w1": make_adapter(2 * self.d_model, self.d_hidden, rank, alpha,
                               dropout_rate, seed),
            "w2": make_adapter(self.d_hidden, self.d_hidden, rank, alpha,
                               dropout_rate, seed + 1),
        }

    def adapter_params(self) -> list[ag.Tensor]:
        params = []
        for key in sorted(self.adapters):
            params.extend([self.adapters[key].a, self.adapters[key].b])
        return params

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise InputError("token ids must be a 1-D sequence")
        if ids.size > self.context_window:
            raise InputError(
                f"sequence length {ids.size} exceeds context window "
                f"{self.context_window}")
        if ids.size and (ids.min() < 0 or ids.max() >= Vocabulary.size):
            raise InputError("token id outside vocabulary")
        return ids

    def _weights(self, train_mode: bool, rng: np.random.Generator | None):
        w1, w2 = self.w1, self.w2
        if "w1" in self.adapters:
            w1 = _adapted_weight_graph(w1, self.adapters["w1"], train_mode, rng)
        if "w2" in self.adapters:
            w2 = _adapted_weight_graph(w2, self.adapters["w2"], train_mode, rng)
        return w1, w2

    def hidden_graph(self, ids: np.ndarray, train_mode: bool = False,
                     rng: np.random.Generator | None = None) -> ag.Tensor:
        """Differentiable T x d_hidden activations for a token sequence."""
        ids = self._check_ids(ids)
        w1, w2 = self._weights(train_mode, rng)
        x = ag.gather_rows(self.embed, ids)
        z = ag.concat([x, ag.causal_mean(x)], axis=1)
        h1 = ag.tanh(ag.add(ag.matmul(z, w1), self.b1))
        return ag.tanh(ag.add(ag.matmul(h1, w2), self.b2))

    def hidden(self, ids: np.ndarray) -> np.ndarray:
        """Plain-numpy activations (no graph), for sampling and evaluation."""
        ids = self._check_ids(ids)
        w1 = self.w1.data
        w2 = self.w2.data
        if "w1" in self.adapters:
            w1 = w1 + self.adapters["w1"].delta().T
        if "w2" in self.adapters:
            w2 = w2 + self.adapters["w2"].delta().T
        x = self.embed.data[ids]
        c = np.cumsum(x, axis=0) / np.arange(1, ids.size + 1)[:, None]
        h1 = np.tanh(np.concatenate([x, c], axis=1) @ w1 + self.b1.data)
        return np.tanh(h1 @ w2 + self.b2.data)

    def registry(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(p.name, p.data.shape) for p in self.encoder_params()]


class PolicyModel(Encoder):
    """Autoregressive next-byte policy: encoder plus a V-way output head.

    The output projection starts at zero, so an untrained policy is exactly
    uniform over the vocabulary.
    """

    kind = "policy"

    def __init__(self, d_model: int = 16, d_hidden: int = 32,
                 context_window: int = 256, seed: int = 0):
        super().__init__(d_model, d_hidden, context_window, seed)
        self.w_out = ag.parameter(np.zeros((d_hidden, Vocabulary.size)), "w_out")
        self.b_out = ag.parameter(np.zeros(Vocabulary.size), "b_out")

    def parameters(self) -> list[ag.Tensor]:
        return self.encoder_params() + [self.w_out, self.b_out]

    def trainable_parameters(self) -> list[ag.Tensor]:
        if self.adapters:
            return self.adapter_params() + [self.w_out, self.b_out]
        return self.parameters()

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def forward_graph(self, ids, train_mode: bool = False,
                      rng: np.random.Generator | None = None) -> ag.Tensor:
        h = self.hidden_graph(ids, train_mode, rng)
        return ag.add(ag.matmul(h, self.w_out), self.b_out)

    def forward(self, ids) -> np.ndarray:
        """T x V logits; position t conditions only on tokens 0..t."""
        return self.hidden(ids) @ self.w_out.data + self.b_out.data

    def clone(self) -> "PolicyModel":
        copy = PolicyModel(self.d_model, self.d_hidden, self.context_window)
        for src, dst in zip(self.parameters(), copy.parameters()):
            dst.data = src.data.copy()
        for key, ada in self.adapters.items():
            copy.adapters[key] = LowRankAdapter(
                a=ag.parameter(ada.a.data.copy(), "adapter_a"),
                b=ag.parameter(ada.b.data.copy(), "adapter_b"),
                rank=ada.rank, alpha=ada.alpha, dropout_rate=ada.dropout_rate)
        return copy

    def registry(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(p.name, p.data.shape) for p in self.parameters()]


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sequence_logprob(model: PolicyModel, x: list[int],
                     y: list[int]) -> tuple[float, list[float]]:
    """Log-probability of continuation y given prompt x under the model.

    Returns (total, per-token); prompt positions contribute nothing.
    """
    if len(y) == 0:
        return 0.0, []
    if len(x) == 0:
        raise InputError("prompt must be non-empty (start with BOS)")
    ids = np.asarray(list(x) + list(y), dtype=np.int64)
    logits = model.forward(ids[:-1])
    logp = _log_softmax_rows(logits)
    rows = np.arange(len(x) - 1, len(ids) - 1)
    per_token = logp[rows, ids[rows + 1]]
    return float(per_token.sum()), [float(v) for v in per_token]


def sequence_logprob_graph(model: PolicyModel, x: list[int], y: list[int],
                           train_mode: bool = False,
                           rng: np.random.Generator | None = None) -> ag.Tensor:
    """Differentiable per-token log-probs of y given x (length len(y))."""
    if len(y) == 0:
        raise InputError("empty continuation has no differentiable log-prob")
    ids = np.asarray(list(x) + list(y), dtype=np.int64)
    logits = model.forward_graph(ids[:-1], train_mode, rng)
    logp = ag.log_softmax(logits, axis=-1)
    rows = np.arange(len(x) - 1, len(ids) - 1)
    return ag.take_per_row(ag.gather_rows(logp, rows), ids[rows + 1])


def sample(model: PolicyModel, x: list[int], temperature: float = 1.0,
           max_len: int = 128, seed: int = 0, greedy: bool = False) -> list[int]:
    """Autoregressive sampling until EOS or max_len new tokens.

    temperature scales the logits; `greedy` is the temperature -> 0 limit.
    Deterministic for a fixed seed.
    """
    if not greedy and temperature <= 0:
        raise InputError("temperature must be positive (use greedy=True for argmax)")
    if len(x) == 0:
        raise InputError("prompt must be non-empty")
    rng = np.random.default_rng(seed)
    ids = list(x)
    out: list[int] = []
    embed = model.embed.data
    w1, w2 = model.w1.data, model.w2.data
    if "w1" in model.adapters:
        w1 = w1 + model.adapters["w1"].delta().T
    if "w2" in model.adapters:
        w2 = w2 + model.adapters["w2"].delta().T

    def logits_at(prefix: list[int], running_sum: np.ndarray) -> np.ndarray:
        e = embed[prefix[-1]]
        z = np.concatenate([e, running_sum / len(prefix)])
        h1 = np.tanh(z @ w1 + model.b1.data)
        h2 = np.tanh(h1 @ w2 + model.b2.data)
        return h2 @ model.w_out.data + model.b_out.data

    running = embed[ids].sum(axis=0)
    while len(out) < max_len and len(ids) < model.context_window:
        logits = logits_at(ids, running)
        if greedy:
            token = int(np.argmax(logits))
        else:
            logp = _log_softmax_rows(logits[None, :] / temperature)[0]
            token = int(rng.choice(Vocabulary.size, p=np.exp(logp)))
        if token == Vocabulary.EOS:
            break
        ids.append(token)
        out.append(token)
        running = running + embed[token]
    return out


def backprop(model, loss: ag.Tensor) -> np.ndarray:
    """Gradient of a scalar loss with respect to the model's trainable params."""
    params = model.trainable_parameters()
    ag.zero_grads(params)
    loss.backward()
    return ag.flatten_grads(params)


# --- checkpoints -------------------------------------------------------------
#
# Layout: MAGIC, 4-byte little-endian header length, UTF-8 JSON header,
# then the raw little-endian float64 payload in registry order.  Headers
# carry the shape registry so loading rejects mismatched architectures.


def save_checkpoint(path: str | Path, model, kind: str | None = None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind or getattr(model, "kind", "policy"),
        "vocab_size": Vocabulary.size,
        "context_window": model.context_window,
        "shapes": [[name, list(shape)] for name, shape in model.registry()],
    }
    payload = b"".join(
        np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        for p in _registry_params(model)
    )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _registry_params(model) -> list[ag.Tensor]:
    if hasattr(model, "parameters"):
        return model.parameters()
    return model.encoder_params()


def load_checkpoint(path: str | Path, model, kind: str | None = None) -> dict:
    """Load parameters into `model` in place; returns the header."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise ValidationError(f"{path}: not a checkpoint file")
    offset = len(MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version")
    expected_kind = kind or getattr(model, "kind", "policy")
    if header.get("kind") != expected_kind:
        raise ValidationError(
            f"{path}: checkpoint kind {header.get('kind')!r}, expected "
            f"{expected_kind!r}")
    if header.get("vocab_size") != Vocabulary.size:
        raise ValidationError(f"{path}: vocabulary size mismatch")
    registry = [[name, list(shape)] for name, shape in model.registry()]
    if header.get("shapes") != registry:
        raise ValidationError(f"{path}: shape registry mismatch")
    params = _registry_params(model)
    total = sum(p.data.size for p in params)
    flat = np.frombuffer(raw, dtype="<f8", count=total, offset=offset)
    ag.unflatten_into(params, flat.astype(np.float64))
    return header
