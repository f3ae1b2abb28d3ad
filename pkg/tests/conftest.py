import numpy as np
import pytest

from txadv.attacks import AttackContext, attackable_vocab
from txadv.data import AmountDiscretizer, SyntheticSpec, generate_synthetic
from txadv.models import CausalLM, MaskedLM, SequenceClassifier


def tiny_spec(**overrides):
    base = dict(
        n_sequences=160,
        num_classes=2,
        vocab_size=20,
        signal_strength=0.3,
        signature_size=3,
        length_range=(5, 10),
        seed=11,
    )
    base.update(overrides)
    return SyntheticSpec(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic(tiny_spec())


@pytest.fixture(scope="session")
def tiny_classifier(tiny_data):
    clf = SequenceClassifier(
        hidden_size=8, token_dim=6, amount_dim=3, n_bins=6, batch_size=16,
        max_epochs=8, patience=3, vocab_size=20, seed=3,
    )
    return clf.fit(tiny_data)


@pytest.fixture(scope="session")
def tiny_mlm(tiny_data):
    lm = MaskedLM(
        hidden_size=8, token_dim=6, amount_dim=3, n_bins=6, batch_size=16,
        max_epochs=14, patience=4, vocab_size=20, seed=4,
    )
    return lm.fit(tiny_data)


@pytest.fixture(scope="session")
def tiny_causal(tiny_data):
    lm = CausalLM(
        hidden_size=8, token_dim=6, amount_dim=3, n_bins=6, batch_size=16,
        max_epochs=6, patience=3, vocab_size=20, seed=5,
    )
    return lm.fit(tiny_data)


@pytest.fixture(scope="session")
def tiny_ctx(tiny_classifier, tiny_mlm, tiny_causal):
    return AttackContext(
        substitute=tiny_classifier,
        discretizer=tiny_classifier.discretizer_,
        vocab=attackable_vocab(20),
        mlm=tiny_mlm,
        causal_lm=tiny_causal,
        seed=0,
    )


class LinearBagModel:
    """Substitute with logits = mean(token embeddings) @ W.

    Gradients have a closed form, which makes embedding-space attacks
    checkable against analytic argmins. Amounts are accepted and ignored.
    """

    def __init__(self, table, head, amounts=(1.0, 10.0, 100.0)):
        self.table = np.asarray(table, dtype=np.float64)
        self.head = np.asarray(head, dtype=np.float64)
        self.vocab_size_ = self.table.shape[0]
        self.n_classes_ = self.head.shape[1]
        self.classes_ = np.arange(self.n_classes_)
        self.discretizer_ = AmountDiscretizer(n_bins=3).fit(np.asarray(amounts))

    def _logits(self, tokens):
        return self.table[np.asarray(tokens, dtype=np.intp)].mean(axis=0) @ self.head

    @staticmethod
    def _softmax(z):
        e = np.exp(z - z.max())
        return e / e.sum()

    def predict_proba_one(self, tokens, amounts):
        return self._softmax(self._logits(tokens))

    def predict_proba_arrays(self, items):
        return np.stack([self.predict_proba_one(t, a) for t, a in items])

    def class_index(self, label):
        return int(label)

    def token_embeddings(self):
        return self.table

    def loss_grad_wrt_embeddings(self, tokens, amounts, label):
        tokens = np.asarray(tokens, dtype=np.intp)
        p = self._softmax(self._logits(tokens))
        p[int(label)] -= 1.0
        g_mean = self.head @ p
        return np.tile(g_mean / len(tokens), (len(tokens), 1))


@pytest.fixture(scope="session")
def linear_model():
    rng = np.random.default_rng(42)
    table = rng.normal(0.0, 1.0, size=(8, 4))
    head = rng.normal(0.0, 1.0, size=(4, 2))
    return LinearBagModel(table, head)


@pytest.fixture(scope="session")
def linear_ctx(linear_model, tiny_mlm_small):
    return AttackContext(
        substitute=linear_model,
        discretizer=linear_model.discretizer_,
        vocab=attackable_vocab(8),
        mlm=tiny_mlm_small,
        causal_lm=None,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_mlm_small():
    """MLM over the 8-token toy vocabulary used with the linear substitute."""
    spec = tiny_spec(vocab_size=8, signature_size=1, n_sequences=120, length_range=(4, 8))
    data = generate_synthetic(spec)
    lm = MaskedLM(
        hidden_size=6, token_dim=4, amount_dim=2, n_bins=3, batch_size=16,
        max_epochs=4, patience=2, vocab_size=8, seed=9,
    )
    return lm.fit(data)
