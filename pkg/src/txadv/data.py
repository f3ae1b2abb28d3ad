"""Transaction data model, synthetic generation, amount binning, persistence.

A dataset is a list of client transaction sequences. Each transaction is a
(category token, amount, timestamp) triple and each client carries a class
label. The synthetic generator plants a class signal in the token
distributions only: tokens are drawn i.i.d. per class, amounts are
label-independent, and timestamps are monotone filler that models ignore.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .validation import ValidationError, check_amounts, check_token_ids

# Reserved token ids shared across the package. Real category tokens start
# at FIRST_REAL_TOKEN; attacks never insert reserved ids.
PAD_TOKEN = 0
MASK_TOKEN = 1
UNK_TOKEN = 2
FIRST_REAL_TOKEN = 3


class DatasetFormatError(ValueError):
    """Raised when a dataset file cannot be parsed; carries the line number."""


@dataclass(frozen=True)
class Transaction:
    mcc: int
    amount: float
    ts: int


@dataclass
class TransactionSequence:
    """Ordered transactions of one client plus the class label."""

    client_id: str
    label: int
    transactions: list[Transaction]

    def __len__(self) -> int:
        return len(self.transactions)

    @property
    def tokens(self) -> np.ndarray:
        return np.array([t.mcc for t in self.transactions], dtype=np.intp)

    @property
    def amounts(self) -> np.ndarray:
        return np.array([t.amount for t in self.transactions], dtype=np.float64)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([t.ts for t in self.transactions], dtype=np.int64)

    @staticmethod
    def from_arrays(client_id, label, tokens, amounts, timestamps) -> "TransactionSequence":
        txs = [
            Transaction(int(m), float(a), int(s))
            for m, a, s in zip(tokens, amounts, timestamps)
        ]
        return TransactionSequence(client_id=client_id, label=int(label), transactions=txs)


class AmountDiscretizer(BaseEstimator, TransformerMixin):
    """Ordinal quantile binning of transaction amounts.

    Fitted attributes:
      edges_            strictly increasing interior bin edges
      representatives_  per-bin median of the training amounts, used to
                        materialize an actual amount when an attack picks a bin
      n_bins_           number of bins after collapsing duplicate edges

    Duplicate quantile edges (heavy ties at round amounts) are collapsed
    rather than rejected, so ``n_bins_`` can be smaller than ``n_bins``.
    """

    def __init__(self, n_bins: int = 100):
        self.n_bins = n_bins

    def fit(self, amounts, y=None):
        if not 1 <= self.n_bins <= 100:
            raise ValidationError("n_bins must be in [1, 100]")
        amounts = np.asarray(amounts, dtype=np.float64)
        if amounts.size == 0:
            raise ValidationError("cannot fit a discretizer on no amounts")
        if not np.all(np.isfinite(amounts)):
            raise ValidationError("amounts must be finite")
        quantiles = np.array(
            [np.quantile(amounts, i / self.n_bins) for i in range(1, self.n_bins)]
        )
        edges = np.unique(quantiles)
        # An edge at or above the maximum cannot separate anything and would
        # leave the top bin empty on the training data.
        edges = edges[edges < amounts.max()]
        self.edges_ = edges
        bins = np.searchsorted(edges, amounts, side="right")
        reps = np.empty(edges.size + 1, dtype=np.float64)
        for b in range(edges.size + 1):
            members = amounts[bins == b]
            reps[b] = np.median(members) if members.size else np.median(amounts)
        self.representatives_ = reps
        self.n_bins_ = edges.size + 1
        return self

    def transform(self, amounts) -> np.ndarray:
        self._check_fitted()
        amounts = np.asarray(amounts, dtype=np.float64)
        if np.any(~np.isfinite(amounts)):
            raise ValidationError("cannot discretize non-finite amounts")
        return np.searchsorted(self.edges_, amounts, side="right")

    def bin_index(self, amount: float) -> int:
        return int(self.transform(np.array([amount]))[0])

    def _check_fitted(self):
        if not hasattr(self, "edges_"):
            raise NotFittedError("AmountDiscretizer is not fitted")


@dataclass
class SyntheticSpec:
    """Recipe for a synthetic labelled transaction dataset.

    The class signal lives entirely in the token distributions: each class
    mixes a shared Zipf-weighted base distribution with a uniform
    distribution over a small disjoint signature-token block, with
    ``signal_strength`` as the mixture weight. Amounts are log-normal with a
    per-token location parameter and carry no label information.
    """

    n_sequences: int = 600
    num_classes: int = 4
    vocab_size: int = 200
    signal_strength: float = 0.35
    length_range: tuple[int, int] = (20, 150)
    signature_size: int = 12
    common_tilt: float = 0.0
    zipf_exponent: float = 1.0
    amount_median: float = 40.0
    amount_sigma: float = 0.6
    amount_token_spread: float = 0.5
    seed: int = 0

    def validate(self):
        lo, hi = self.length_range
        if not (1 <= lo <= hi <= 800):
            raise ValidationError("length_range must lie within [1, 800]")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValidationError("signal_strength must be in [0, 1]")
        if self.vocab_size <= FIRST_REAL_TOKEN:
            raise ValidationError("vocab_size leaves no room for real tokens")
        if self.num_classes < 2:
            raise ValidationError("need at least two classes")
        if self.signature_size * self.num_classes > self.vocab_size - FIRST_REAL_TOKEN:
            raise ValidationError("signature blocks exceed the real vocabulary")
        if self.signal_strength > 0.0 and self.signature_size < 1:
            raise ValidationError("planted signal needs at least one signature token")


def _generation_plan(spec: SyntheticSpec, rng: np.random.Generator):
    """Class token distributions and per-token amount locations.

    Signature tokens come from the rare tail of the Zipf base, which makes
    them nearly class-exclusive: a handful of rare tokens carries most of
    the label evidence. ``common_tilt`` optionally adds a weak dense signal
    on the shared common tokens (a random per-class up/down reweighting), so
    accuracy does not collapse on sequences that happen to draw no
    signature token.
    """
    n_real = spec.vocab_size - FIRST_REAL_TOKEN
    ranks = np.arange(1, n_real + 1, dtype=np.float64)
    base = ranks ** (-spec.zipf_exponent)
    base /= base.sum()
    tail = np.arange(n_real - spec.num_classes * spec.signature_size, n_real)
    order = rng.permutation(tail)
    tilt_signs = rng.choice([-1.0, 1.0], size=(spec.num_classes, n_real))
    dists = np.zeros((spec.num_classes, spec.vocab_size))
    for c in range(spec.num_classes):
        sig = order[c * spec.signature_size : (c + 1) * spec.signature_size]
        common = base * (1.0 + spec.common_tilt * tilt_signs[c])
        common[order] = base[order]  # signature slots keep the untilted base
        common /= common.sum()
        mix = (1.0 - spec.signal_strength) * common
        if spec.signal_strength > 0.0:
            mix[sig] += spec.signal_strength / spec.signature_size
        dists[c, FIRST_REAL_TOKEN:] = mix
    token_mu = rng.normal(
        math.log(spec.amount_median),
        spec.amount_token_spread,
        size=spec.vocab_size,
    )
    return dists, token_mu


def class_token_distributions(spec: SyntheticSpec) -> np.ndarray:
    """Per-class token distributions over token ids, shape (classes, vocab)."""
    spec.validate()
    dists, _ = _generation_plan(spec, np.random.default_rng(spec.seed))
    return dists


def generate_synthetic(spec: SyntheticSpec) -> list[TransactionSequence]:
    """Draw a dataset; a pure function of the spec (including its seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dists, token_mu = _generation_plan(spec, rng)
    lo, hi = spec.length_range
    sequences = []
    for i in range(spec.n_sequences):
        label = i % spec.num_classes
        length = int(rng.integers(lo, hi + 1))
        tokens = rng.choice(spec.vocab_size, size=length, p=dists[label])
        amounts = np.exp(token_mu[tokens] + spec.amount_sigma * rng.standard_normal(length))
        gaps = rng.integers(60, 86401, size=length)
        ts = 1_600_000_000 + np.cumsum(gaps)
        sequences.append(
            TransactionSequence.from_arrays(f"c{i:06d}", label, tokens, amounts, ts)
        )
    return sequences


@dataclass
class DatasetSplit:
    target: list[TransactionSequence]
    substitute: list[TransactionSequence]
    fraction: float = 0.65


def split_target_substitute(
    data: list[TransactionSequence], fraction: float = 0.65, seed: int = 0
) -> DatasetSplit:
    """Random client-level partition; no client appears on both sides."""
    if len(data) < 2:
        raise ValidationError("need at least two sequences to split")
    clients = sorted({s.client_id for s in data})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(clients))
    n_target = int(round(fraction * len(clients)))
    if n_target < 1 or n_target >= len(clients):
        raise ValidationError(
            f"fraction {fraction} leaves an empty portion for {len(clients)} clients"
        )
    target_ids = {clients[i] for i in order[:n_target]}
    target = [s for s in data if s.client_id in target_ids]
    substitute = [s for s in data if s.client_id not in target_ids]
    return DatasetSplit(target=target, substitute=substitute, fraction=fraction)


def write_dataset(path, data: list[TransactionSequence]) -> None:
    """One client per line: newline-delimited JSON, UTF-8, LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in data:
            record = {
                "client_id": seq.client_id,
                "label": seq.label,
                "mcc": [t.mcc for t in seq.transactions],
                "amount": [t.amount for t in seq.transactions],
                "ts": [t.ts for t in seq.transactions],
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_dataset(path, vocab_size: int | None = None) -> list[TransactionSequence]:
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                client_id = record["client_id"]
                label = int(record["label"])
                mcc = record["mcc"]
                amount = record["amount"]
                ts = record["ts"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"line {lineno}: malformed record ({exc})") from exc
            if not (len(mcc) == len(amount) == len(ts)):
                raise DatasetFormatError(f"line {lineno}: array lengths differ")
            try:
                tokens = check_token_ids(mcc, vocab_size if vocab_size else 1 << 30)
                amounts = check_amounts(amount, len(mcc))
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            stamps = np.asarray(ts, dtype=np.int64)
            if np.any(np.diff(stamps) < 0):
                raise ValidationError(f"line {lineno}: timestamps decrease")
            sequences.append(
                TransactionSequence.from_arrays(client_id, label, tokens, amounts, stamps)
            )
    return sequences
