"""Adversarial attacks, defenses, and evaluation for transaction-sequence
classifiers: synthetic data, from-scratch models, seven black-box attacks,
two defenses, the full metric set, and a wire-protocol scoring service.
"""

from .attacks import (
    ATTACKS,
    AttackBudget,
    AttackContext,
    AttackResult,
    Edit,
    assign_amounts,
    attackable_vocab,
    make_context,
)
from .data import (
    AmountDiscretizer,
    DatasetSplit,
    SyntheticSpec,
    Transaction,
    TransactionSequence,
    generate_synthetic,
    read_dataset,
    split_target_substitute,
    write_dataset,
)
from .defenses import AdvTrainConfig, Detector, adversarial_train, build_detection_corpus, train_detector
from .metrics import (
    EvalPair,
    MetricsReport,
    adversarial_accuracy,
    diversity_rate,
    mean_perplexity,
    nad,
    probability_difference,
    repetition_rate,
    wer,
)
from .models import CausalLM, MaskedLM, SequenceClassifier, load_model, save_model
from .service import ScoringClient, ScoringServer, serve
from .validation import ValidationError

__version__ = "0.1.0"
