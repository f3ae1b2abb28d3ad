"""Defenses: adversarial training and adversarial-example detection.

Both defenses consume attack outputs generated against the attacker's own
substitute model, never against the model being hardened, which keeps the
defender's data pipeline consistent with the black-box threat model.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .models import SequenceClassifier
from .validation import ValidationError


@dataclass
class AdvTrainConfig:
    """Settings for expand-and-fine-tune adversarial training."""

    count: int = 1000  # adversarial examples added to the training set
    fine_tune_epochs: int = 3
    seed: int = 0

    def validate(self):
        if self.count < 0:
            raise ValidationError("count must be non-negative")
        if self.fine_tune_epochs < 1:
            raise ValidationError("fine_tune_epochs must be at least 1")


def adversarial_train(model, attack_fn, ctx, budget, train_data, cfg: AdvTrainConfig):
    """Fine-tune a copy of `model` on training data plus attack outputs.

    Sources are drawn from `train_data`; when ``cfg.count`` exceeds the
    available inputs the sources are resampled with replacement. Adversarial
    examples keep their original labels. Returns the hardened copy; the
    input model is untouched.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    hardened = copy.deepcopy(model)
    augmented = list(train_data)
    if cfg.count > 0:
        replace = cfg.count > len(train_data)
        idx = rng.choice(len(train_data), size=cfg.count, replace=replace)
        for j, i in enumerate(idx):
            result = attack_fn(train_data[i], ctx.with_seed(cfg.seed + 7 * j + 1), budget)
            augmented.append(result.adversarial)
    hardened.fine_tune(augmented, epochs=cfg.fine_tune_epochs, seed=cfg.seed)
    return hardened


def build_detection_corpus(attack_fn, ctx, budget, data, n, seed=0):
    """Balanced real/adversarial corpus: n of each, disjoint sources.

    Attack outputs identical to their source (no edits) are discarded and
    replaced from the remaining pool; raises when the pool cannot supply n
    genuine adversarial examples.
    """
    if 2 * n > len(data):
        raise ValidationError(f"need at least {2 * n} sequences to build the corpus")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    real = [data[i] for i in order[:n]]
    adversarial = []
    cursor = n
    while len(adversarial) < n and cursor < len(order):
        source = data[order[cursor]]
        cursor += 1
        result = attack_fn(source, ctx.with_seed(seed + cursor), budget)
        if result.wer >= 1:
            adversarial.append(result.adversarial)
    if len(adversarial) < n:
        raise ValidationError(
            f"attack produced only {len(adversarial)} of {n} adversarial examples"
        )
    sequences = real + adversarial
    labels = np.array([0] * n + [1] * n, dtype=np.intp)
    return sequences, labels


class Detector:
    """GRU discriminator flagging sequences as attack-generated."""

    def __init__(self, classifier: SequenceClassifier, threshold: float = 0.5):
        self.classifier = classifier
        self.threshold = threshold
        self.accuracy_ = None

    def detect(self, seq) -> float:
        """Probability that the sequence is adversarial."""
        probs = self.classifier.predict_proba([seq])[0]
        return float(probs[self.classifier.class_index(1)])

    def predict(self, seq) -> bool:
        return self.detect(seq) >= self.threshold


def train_detector(sequences, labels, epochs=10, heldout_fraction=0.25, seed=0,
                   **classifier_params) -> Detector:
    """Train the binary discriminator and score it on a held-out slice.

    Ten epochs by default; more does not help this discriminator. The
    held-out accuracy lands in ``detector.accuracy_``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if set(np.unique(labels)) != {0, 1}:
        raise ValidationError("detector corpus must carry labels 0 (real) and 1 (adversarial)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sequences))
    n_heldout = max(1, int(round(heldout_fraction * len(sequences))))
    heldout_idx, train_idx = order[:n_heldout], order[n_heldout:]
    params = dict(
        architecture="gru",
        hidden_size=32,
        max_epochs=epochs,
        patience=epochs,
        seed=seed,
    )
    params.update(classifier_params)
    clf = SequenceClassifier(**params)
    clf.fit([sequences[i] for i in train_idx], labels[train_idx])
    detector = Detector(clf)
    heldout = [sequences[i] for i in heldout_idx]
    predictions = clf.predict(heldout)
    detector.accuracy_ = float(np.mean(predictions == labels[heldout_idx]))
    return detector
