"""Evaluation metrics for repair output: pass@k, rates, BLEU, score gaps.

All functions are pure.  BLEU follows the original formulation: geometric
mean of clipped n-gram precisions with uniform weights and the brevity
penalty, no smoothing; the code tokenizer splits on whitespace after
isolating punctuation and is versioned so reports stay comparable.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass

from .errors import InputError

BLEU_TOKENIZER_VERSION = "separate-punct-whitespace-v1"

_PUNCT = set(string.punctuation)


@dataclass(frozen=True)
class EvalSample:
    candidate: str
    valid: bool
    compiled: bool = False
    applied: bool = False


@dataclass(frozen=True)
class EvalOutcome:
    task_id: str
    samples: tuple[EvalSample, ...]

    def __post_init__(self):
        if not self.samples:
            raise InputError(f"outcome for {self.task_id} has no samples")


@dataclass(frozen=True)
class GapReport:
    metric_name: str
    model_a_score: float
    model_b_score: float
    delta: float


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased estimator 1 - C(n-c, k)/C(n, k), via a stable product."""
    if not 0 <= c <= n:
        raise InputError(f"correct count {c} outside [0, {n}]")
    if not 1 <= k <= n:
        raise InputError(f"k={k} outside [1, {n}]")
    if n - c < k:
        return 1.0
    # C(n-c,k)/C(n,k) = prod_{i=0}^{k-1} (n-c-i)/(n-i)
    ratio = 1.0
    for i in range(k):
        ratio *= (n - c - i) / (n - i)
    return 1.0 - ratio


def accuracy(outcomes: list[EvalOutcome]) -> float:
    """Fraction of tasks whose first sample passes all tests."""
    if not outcomes:
        raise InputError("accuracy over an empty outcome list is undefined")
    return sum(1 for o in outcomes if o.samples[0].valid) / len(outcomes)


def compilation_rate(outcomes: list[EvalOutcome]) -> float:
    """Fraction of tasks whose first sample compiles."""
    if not outcomes:
        raise InputError("compilation rate over an empty list is undefined")
    return sum(1 for o in outcomes if o.samples[0].compiled) / len(outcomes)


def resolved_rate(outcomes: list[EvalOutcome]) -> float:
    """Fraction of tasks whose first sample both applies and passes."""
    if not outcomes:
        raise InputError("resolved rate over an empty list is undefined")
    return sum(1 for o in outcomes
               if o.samples[0].applied and o.samples[0].valid) / len(outcomes)


def mean_pass_at_k(outcomes: list[EvalOutcome], k: int = 1) -> float:
    """Average per-task pass@k using each task's sample validity counts."""
    if not outcomes:
        raise InputError("pass@k over an empty outcome list is undefined")
    total = 0.0
    for o in outcomes:
        n = len(o.samples)
        c = sum(1 for s in o.samples if s.valid)
        total += pass_at_k(n, c, min(k, n))
    return total / len(outcomes)


def tokenize_code(text: str) -> list[str]:
    """Whitespace tokens after surrounding punctuation chars with spaces."""
    padded = []
    for ch in text:
        if ch in _PUNCT:
            padded.append(f" {ch} ")
        else:
            padded.append(ch)
    return "".join(padded).split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_ngram_precision(candidate_tokens: list[str],
                             reference_tokens: list[list[str]],
                             n: int) -> tuple[int, int]:
    """Clipped match count and total candidate n-gram count."""
    counts = _ngrams(candidate_tokens, n)
    if not counts:
        return 0, 0
    max_ref = Counter()
    for ref in reference_tokens:
        ref_counts = _ngrams(ref, n)
        for gram, count in ref_counts.items():
            if count > max_ref[gram]:
                max_ref[gram] = count
    clipped = sum(min(count, max_ref[gram]) for gram, count in counts.items())
    return clipped, sum(counts.values())


def bleu(candidate: str, references: list[str], max_n: int = 4) -> float:
    """Sentence BLEU with uniform weights and no smoothing.

    The brevity penalty uses the reference length closest to the candidate
    (ties broken toward the shorter reference).  Orders with no candidate
    n-grams are excluded so an exact copy of a reference scores 1.0 even
    when shorter than max_n.
    """
    cand = tokenize_code(candidate)
    refs = [tokenize_code(r) for r in references]
    refs = [r for r in refs if r]
    if not refs:
        raise InputError("bleu requires at least one non-empty reference")
    if not cand:
        return 0.0

    orders = [n for n in range(1, max_n + 1) if len(cand) - n + 1 > 0]
    log_sum = 0.0
    for n in orders:
        clipped, total = modified_ngram_precision(cand, refs, n)
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total) / len(orders)

    c = len(cand)
    r = min((len(ref) for ref in refs),
            key=lambda ref_len: (abs(ref_len - c), ref_len))
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum)


def performance_gap(scores_a: dict[str, float], scores_b: dict[str, float],
                    metric_name: str = "metric") -> GapReport:
    """Mean score difference between two models over aligned task ids."""
    if set(scores_a) != set(scores_b):
        missing = set(scores_a) ^ set(scores_b)
        raise InputError(f"score maps disagree on task ids: {sorted(missing)[:5]}")
    if not scores_a:
        raise InputError("performance gap over an empty score map is undefined")
    mean_a = sum(scores_a.values()) / len(scores_a)
    mean_b = sum(scores_b.values()) / len(scores_b)
    return GapReport(metric_name=metric_name, model_a_score=mean_a,
                     model_b_score=mean_b, delta=mean_a - mean_b)
