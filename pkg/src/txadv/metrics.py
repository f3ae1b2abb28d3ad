"""Attack-quality and realism metrics, plus their CSV emission.

Edit distance runs over the category-token streams only; amount changes do
not count as edits. The confidence entering the probability-difference
metric is always the probability of the class predicted on the ORIGINAL
input, evaluated on both the original and the adversarial sequence, which
makes the identity attack score exactly zero and lets the metric go
negative when an attack backfires.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import ValidationError

METRICS_SCHEMA = "txadv.metrics.v1"
METRICS_COLUMNS = (
    "attack",
    "dataset",
    "NAD",
    "WER",
    "AA",
    "PD",
    "diversity",
    "repetition",
    "perplexity",
)


def wer(x, x_adv) -> int:
    """Unit-cost Levenshtein distance between two token sequences."""
    a = list(x)
    b = list(x_adv)
    if len(a) > len(b):
        a, b = b, a
    previous = list(range(len(a) + 1))
    for i, tb in enumerate(b, start=1):
        current = [i] + [0] * len(a)
        for j, ta in enumerate(a, start=1):
            current[j] = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ta != tb),
            )
        previous = current
    return int(previous[-1])


@dataclass(frozen=True)
class EvalPair:
    """Target-model view of one attacked example."""

    original_tokens: tuple
    adversarial_tokens: tuple
    label: int
    pred_original: int
    pred_adversarial: int
    conf_original: float | None = None  # P(pred_original | x)
    conf_adversarial: float | None = None  # P(pred_original | x_adv)


def _require_pairs(pairs):
    if not pairs:
        raise ValidationError("metric needs at least one evaluation pair")


def adversarial_accuracy(pairs) -> float:
    """Fraction of examples whose target prediction survived the attack."""
    _require_pairs(pairs)
    return float(np.mean([p.pred_original == p.pred_adversarial for p in pairs]))


def probability_difference(pairs) -> float:
    """Mean drop of the target's confidence in its original prediction."""
    _require_pairs(pairs)
    if any(p.conf_original is None or p.conf_adversarial is None for p in pairs):
        raise ValidationError("probability difference needs confidences on both sides")
    return float(np.mean([p.conf_original - p.conf_adversarial for p in pairs]))


def nad(pairs) -> float:
    """Mean misclassification indicator normalized by edit distance.

    A pair with distance zero necessarily kept its prediction, so its term
    is defined as zero.
    """
    _require_pairs(pairs)
    total = 0.0
    for p in pairs:
        if p.pred_original == p.pred_adversarial:
            continue
        distance = wer(p.original_tokens, p.adversarial_tokens)
        total += 1.0 / distance
    return total / len(pairs)


def mean_wer(pairs) -> float:
    _require_pairs(pairs)
    return float(
        np.mean([wer(p.original_tokens, p.adversarial_tokens) for p in pairs])
    )


def _new_tokens(result):
    return [edit.new for edit in result.edits]


def diversity_rate(results, vocab_size: int) -> float:
    """Unique inserted or replacement tokens over the attackable vocabulary."""
    if vocab_size <= 0:
        raise ValidationError("vocab_size must be positive")
    unique = {tok for r in results for tok in _new_tokens(r)}
    return len(unique) / vocab_size


def repetition_rate(results) -> float:
    """Fraction of added tokens already present in their own original sequence."""
    added = 0
    repeated = 0
    for r in results:
        present = set(int(t) for t in r.original.tokens)
        for tok in _new_tokens(r):
            added += 1
            repeated += tok in present
    if added == 0:
        raise ValidationError("repetition rate undefined: no tokens were added")
    return repeated / added


def mean_perplexity(results, lm) -> float:
    """Mean language-model perplexity of the adversarial sequences."""
    _require_pairs(results)
    values = [lm.perplexity(r.adversarial.tokens, r.adversarial.amounts) for r in results]
    return float(np.mean(values))


@dataclass
class MetricsReport:
    """One row of the per-attack summary table."""

    attack: str
    dataset: str
    nad: float
    wer: float
    aa: float
    pd: float | None
    diversity: float | None
    repetition: float | None
    perplexity: float | None

    def row(self):
        return (
            self.attack,
            self.dataset,
            self.nad,
            self.wer,
            self.aa,
            self.pd,
            self.diversity,
            self.repetition,
            self.perplexity,
        )


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def write_csv(path, schema: str, columns, rows) -> None:
    """Versioned CSV: a schema comment line, a header, then the rows.

    Every row is validated against the column count before anything is
    written, so a malformed report never half-writes a file.
    """
    rows = [tuple(r) for r in rows]
    for r in rows:
        if len(r) != len(columns):
            raise ValidationError(
                f"row of width {len(r)} does not match {len(columns)} columns"
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# schema: {schema}\n")
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(format_cell(v) for v in r) + "\n")


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    write_csv(path, METRICS_SCHEMA, METRICS_COLUMNS, [r.row() for r in reports])
