"""Sequence classifiers and language models over transaction records.

All models share one input scheme: a token embedding and an amount-bin
embedding are looked up per transaction and concatenated before the encoder.
Classifiers pool the encoder into a single feature vector and attach a
softmax head; the masked LM scores every position bidirectionally; the
causal LM is strictly left-to-right so that sequence probabilities (and
perplexity) factorize over prefixes.

Estimators follow the scikit-learn protocol: hyperparameters in __init__,
learned state in trailing-underscore attributes, ``fit`` returns self.
Batches pad on the right with the reserved pad token and freeze recurrent
states past each row's true length, so padding never leaks into results.
"""
from __future__ import annotations

import json

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .autodiff import Graph, Tensor
from .data import MASK_TOKEN, PAD_TOKEN, AmountDiscretizer
from .validation import ValidationError, check_amounts, check_token_ids

CHECKPOINT_FORMAT = "txadv-checkpoint-v1"

# Hyperparameters used at full scale; desk-scale defaults live in the
# estimator signatures.
PAPER_SCALE = {
    "hidden_size": 256,
    "batch_size": 1024,
    "max_epochs": 50,
    "patience": 3,
    "learning_rate": 0.001,
    "dropout": 0.1,
    "n_bins": 100,
}

ARCHITECTURES = ("gru", "lstm", "cnn")


# ---------------------------------------------------------------------------
# parameter initialization and the optimizer


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _init_gru(rng, in_dim, hidden):
    return {
        "W": Tensor(_glorot(rng, in_dim, 3 * hidden), requires_grad=True),
        "U": Tensor(_glorot(rng, hidden, 2 * hidden), requires_grad=True),
        "Uc": Tensor(_glorot(rng, hidden, hidden), requires_grad=True),
        "b_zr": Tensor(np.zeros(2 * hidden), requires_grad=True),
        "b_c": Tensor(np.zeros(hidden), requires_grad=True),
    }


def _init_lstm(rng, in_dim, hidden):
    bias = np.zeros(4 * hidden)
    bias[hidden : 2 * hidden] = 1.0  # forget gate starts open
    return {
        "W": Tensor(_glorot(rng, in_dim, 4 * hidden), requires_grad=True),
        "U": Tensor(_glorot(rng, hidden, 4 * hidden), requires_grad=True),
        "b": Tensor(bias, requires_grad=True),
    }


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.values.shape) for p in self.params]
        self.v = [np.zeros(p.values.shape) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.values -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# batching


def _pad_batch(items):
    """Right-pad (tokens, bins) pairs into (B, T) arrays plus a validity mask."""
    batch = len(items)
    max_len = max(len(t) for t, _ in items)
    ids = np.full((batch, max_len), PAD_TOKEN, dtype=np.intp)
    bins = np.zeros((batch, max_len), dtype=np.intp)
    mask = np.zeros((batch, max_len))
    for i, (tokens, tok_bins) in enumerate(items):
        n = len(tokens)
        ids[i, :n] = tokens
        bins[i, :n] = tok_bins
        mask[i, :n] = 1.0
    return ids, bins, mask


def _length_bucketed_batches(lengths, batch_size):
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _nll_rows(logits, labels):
    """Per-row negative log softmax probability, computed stably in numpy."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return lse - shifted[np.arange(logits.shape[0]), labels]


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# encoder forward passes (shared by every model)


def _embed_columns(g, params, ids, bins):
    """Per-column embedding lookups; returns inputs plus the token nodes."""
    T = ids.shape[1]
    token_nodes = []
    xs = []
    for t in range(T):
        e = g.gather(params["token_emb"], ids[:, t])
        a = g.gather(params["amount_emb"], bins[:, t])
        token_nodes.append(e)
        xs.append(g.concat([e, a], axis=1))
    return xs, token_nodes


def _gru_scan(g, p, prefix, xs, mask_cols, h0):
    """Masked GRU over the given column order; returns the state after each step."""
    W, U, Uc = p[f"{prefix}W"], p[f"{prefix}U"], p[f"{prefix}Uc"]
    b_zr, b_c = p[f"{prefix}b_zr"], p[f"{prefix}b_c"]
    hidden = Uc.values.shape[0]
    h = h0
    states = []
    for x, m in zip(xs, mask_cols):
        xw = g.matmul(x, W)
        zr = g.sigmoid(
            g.add(g.add(g.narrow(xw, 1, 0, 2 * hidden), g.matmul(h, U)), b_zr)
        )
        z = g.narrow(zr, 1, 0, hidden)
        r = g.narrow(zr, 1, hidden, 2 * hidden)
        cand = g.tanh(
            g.add(
                g.add(g.narrow(xw, 1, 2 * hidden, 3 * hidden), g.matmul(g.mul(r, h), Uc)),
                b_c,
            )
        )
        h = g.add(h, g.mul(m, g.mul(z, g.sub(cand, h))))
        states.append(h)
    return states


def _lstm_scan(g, p, prefix, xs, mask_cols, h0, c0):
    W, U, b = p[f"{prefix}W"], p[f"{prefix}U"], p[f"{prefix}b"]
    hidden = U.values.shape[0]
    h, c = h0, c0
    states = []
    for x, m in zip(xs, mask_cols):
        pre = g.add(g.add(g.matmul(x, W), g.matmul(h, U)), b)
        gates = g.sigmoid(g.narrow(pre, 1, 0, 3 * hidden))
        i = g.narrow(gates, 1, 0, hidden)
        f = g.narrow(gates, 1, hidden, 2 * hidden)
        o = g.narrow(gates, 1, 2 * hidden, 3 * hidden)
        cand = g.tanh(g.narrow(pre, 1, 3 * hidden, 4 * hidden))
        c_new = g.add(g.mul(f, c), g.mul(i, cand))
        c = g.add(c, g.mul(m, g.sub(c_new, c)))
        h_new = g.mul(o, g.tanh(c))
        h = g.add(h, g.mul(m, g.sub(h_new, h)))
        states.append(h)
    return states


def _recurrent_features(g, params, arch, xs, mask, bidirectional):
    """Final states (and per-position states) of the configured encoder.

    The reversed direction consumes the padded columns back to front, which
    turns right padding into left padding; state freezing at masked steps
    makes both final states independent of pad length.
    """
    B, T = mask.shape
    hidden = params["fwd_Uc" if arch == "gru" else "fwd_U"].values.shape[0]
    mask_cols = [Tensor(mask[:, t : t + 1]) for t in range(T)]
    zeros = Tensor(np.zeros((B, hidden)))
    if arch == "gru":
        fwd = _gru_scan(g, params, "fwd_", xs, mask_cols, zeros)
    else:
        fwd = _lstm_scan(g, params, "fwd_", xs, mask_cols, zeros, Tensor(np.zeros((B, hidden))))
    if not bidirectional:
        return fwd, None
    xs_rev = xs[::-1]
    mask_rev = mask_cols[::-1]
    if arch == "gru":
        bwd = _gru_scan(g, params, "bwd_", xs_rev, mask_rev, zeros)
    else:
        bwd = _lstm_scan(g, params, "bwd_", xs_rev, mask_rev, zeros, Tensor(np.zeros((B, hidden))))
    return fwd, bwd


def _cnn_features(g, params, xs, mask, kernel_width):
    """1-D convolution over time, ReLU, global max pooling over valid windows."""
    B, T = mask.shape
    n_windows = max(T - kernel_width + 1, 1)
    lengths = mask.sum(axis=1)
    pooled = None
    for t in range(n_windows):
        cols = [xs[min(t + j, T - 1)] for j in range(kernel_width)]
        window = g.concat(cols, axis=1)
        conv = g.relu(g.add(g.matmul(window, params["cnn_W"]), params["cnn_b"]))
        # Invalid windows (reaching past a row's true length) lose the max.
        # Window 0 always counts so short rows still pool something.
        valid = (t + kernel_width <= lengths) | (t == 0)
        penalty = Tensor(np.where(valid, 0.0, -1e30)[:, None])
        masked = g.add(conv, penalty)
        pooled = masked if pooled is None else g.maximum(pooled, masked)
    return pooled


def _classifier_logits(g, params, arch, ids, bins, mask, kernel_width,
                       pooling="max", dropout_mask=None):
    xs, token_nodes = _embed_columns(g, params, ids, bins)
    if arch == "cnn":
        feature = _cnn_features(g, params, xs, mask, kernel_width)
    else:
        fwd, bwd = _recurrent_features(g, params, arch, xs, mask, bidirectional=True)
        if pooling == "last":
            feature = g.concat([fwd[-1], bwd[-1]], axis=1)
        elif pooling == "max":
            B, T = mask.shape
            feature = None
            for t in range(T):
                f_t = g.concat([fwd[t], bwd[T - 1 - t]], axis=1)
                penalty = Tensor(np.where(mask[:, t] > 0.0, 0.0, -1e30)[:, None])
                f_t = g.add(f_t, penalty)
                feature = f_t if feature is None else g.maximum(feature, f_t)
        else:
            raise ValidationError(f"unknown pooling {pooling!r}")
    if dropout_mask is not None:
        feature = g.mul(feature, Tensor(dropout_mask))
    logits = g.add(g.matmul(feature, params["head_W"]), params["head_b"])
    return logits, token_nodes


def _position_logits(g, params, ids, bins, mask, causal):
    """Per-position vocabulary logits stacked into a ((T*B), V) tensor.

    Row t*B + i scores position t of batch row i. The causal variant uses
    only the forward direction, whose state at t has consumed inputs up to
    and including column t.
    """
    xs, _ = _embed_columns(g, params, ids, bins)
    B, T = mask.shape
    if causal:
        fwd, _ = _recurrent_features(g, params, "gru", xs, mask, bidirectional=False)
        per_position = fwd
    else:
        fwd, bwd = _recurrent_features(g, params, "gru", xs, mask, bidirectional=True)
        per_position = [g.concat([fwd[t], bwd[T - 1 - t]], axis=1) for t in range(T)]
    stacked = g.concat(per_position, axis=0)
    return g.add(g.matmul(stacked, params["head_W"]), params["head_b"])


# ---------------------------------------------------------------------------
# estimator base


class _SequenceModel(BaseEstimator):
    """Shared plumbing: discretizer, encoding, training loop, persistence."""

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")

    # -- encoding ----------------------------------------------------------

    def _resolve_vocab(self, X):
        if self.vocab_size is not None:
            return int(self.vocab_size)
        top = max(int(seq.tokens.max()) for seq in X)
        return top + 1

    def _fit_discretizer(self, X):
        all_amounts = np.concatenate([seq.amounts for seq in X])
        self.discretizer_ = AmountDiscretizer(n_bins=self.n_bins).fit(all_amounts)

    def _encode(self, tokens, amounts):
        tokens = check_token_ids(tokens, self.vocab_size_)
        amounts = check_amounts(amounts, len(tokens))
        return tokens, self.discretizer_.transform(amounts)

    def _encode_dataset(self, X):
        return [self._encode(seq.tokens, seq.amounts) for seq in X]

    # -- training loop ------------------------------------------------------

    def _split_validation(self, items, rng, val_items):
        """Use the supplied validation items, or hold out a slice of `items`."""
        if val_items is not None:
            if not val_items:
                raise ValidationError("validation data is empty")
            return items, val_items
        n = len(items)
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n - n_val < 1:
            raise ValidationError("not enough sequences to hold out validation data")
        order = rng.permutation(n)
        return [items[i] for i in order[n_val:]], [items[i] for i in order[:n_val]]

    def _train_loop(self, train_items, val_items, rng, loss_fn, eval_fn,
                    max_epochs, patience, batch_size):
        """Mini-batch Adam with early stopping on validation loss.

        ``loss_fn(graph, batch, rng)`` builds the training loss for a list of
        encoded items; ``eval_fn(batch, batch_index)`` returns (total nll,
        count) on frozen parameters. The parameters achieving the minimum
        recorded validation loss are restored before returning.
        """
        lengths = [len(it[0]) for it in train_items]
        batches = [
            [train_items[i] for i in b]
            for b in _length_bucketed_batches(lengths, batch_size)
        ]
        val_batches = [
            [val_items[i] for i in b]
            for b in _length_bucketed_batches([len(it[0]) for it in val_items], batch_size)
        ]
        optimizer = Adam(self.params_.values(), learning_rate=self.learning_rate)
        best_loss = np.inf
        best_params = None
        epochs_since_best = 0
        history = []
        for _ in range(max_epochs):
            for b in rng.permutation(len(batches)):
                g = Graph()
                loss = loss_fn(g, batches[b], rng)
                g.backward(loss)
                optimizer.step()
            total, count = 0.0, 0.0
            for vi, vb in enumerate(val_batches):
                t, c = eval_fn(vb, vi)
                total += t
                count += c
            val_loss = total / max(count, 1.0)
            history.append(val_loss)
            if val_loss < best_loss - 1e-12:
                best_loss = val_loss
                best_params = {k: t.values.copy() for k, t in self.params_.items()}
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best >= patience:
                    break
        if best_params is not None:
            for k, t in self.params_.items():
                t.values = best_params[k]
        self.validation_history_ = history
        self.best_validation_loss_ = best_loss
        return self

    # -- persistence ---------------------------------------------------------

    def _state_dict(self):
        self._check_fitted()
        return {
            "vocab_size": self.vocab_size_,
            "edges": self.discretizer_.edges_.tolist(),
            "representatives": self.discretizer_.representatives_.tolist(),
            "extra": self._extra_state(),
        }

    def _load_state(self, state, params):
        self.vocab_size_ = int(state["vocab_size"])
        disc = AmountDiscretizer(n_bins=self.n_bins)
        disc.edges_ = np.asarray(state["edges"], dtype=np.float64)
        disc.representatives_ = np.asarray(state["representatives"], dtype=np.float64)
        disc.n_bins_ = disc.edges_.size + 1
        self.discretizer_ = disc
        self.params_ = {
            name: Tensor(np.asarray(p["data"]).reshape(p["shape"]), requires_grad=True)
            for name, p in params.items()
        }
        self._restore_extra(state["extra"])

    def _extra_state(self):
        return {}

    def _restore_extra(self, extra):
        pass


def save_model(model, path) -> None:
    """Write a JSON checkpoint; floats survive the round trip bit for bit."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": type(model).__name__,
        "hyper": model.get_params(),
        "state": model._state_dict(),
        "params": {
            name: {"shape": list(t.values.shape), "data": t.values.ravel().tolist()}
            for name, t in model.params_.items()
        },
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh)


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format in {path}")
    kinds = {
        "SequenceClassifier": SequenceClassifier,
        "MaskedLM": MaskedLM,
        "CausalLM": CausalLM,
    }
    try:
        cls = kinds[payload["kind"]]
    except KeyError:
        raise ValidationError(f"unknown model kind {payload.get('kind')!r}") from None
    model = cls(**payload["hyper"])
    model._load_state(payload["state"], payload["params"])
    return model


# ---------------------------------------------------------------------------
# classifier


class SequenceClassifier(_SequenceModel, ClassifierMixin):
    """Token+amount embedding, GRU/LSTM/CNN encoder, softmax head.

    Recurrent encoders are bidirectional; the CNN is a width-`kernel_width`
    convolution with ReLU and global max pooling. Inference is deterministic
    (dropout only acts during fit).
    """

    def __init__(self, architecture="gru", hidden_size=64, token_dim=16,
                 amount_dim=8, cnn_filters=64, kernel_width=3, pooling="max",
                 dropout=0.1, n_bins=100, vocab_size=None, batch_size=64,
                 max_epochs=50, patience=3, learning_rate=0.001,
                 validation_fraction=0.15, seed=0):
        self.architecture = architecture
        self.pooling = pooling
        self.hidden_size = hidden_size
        self.token_dim = token_dim
        self.amount_dim = amount_dim
        self.cnn_filters = cnn_filters
        self.kernel_width = kernel_width
        self.dropout = dropout
        self.n_bins = n_bins
        self.vocab_size = vocab_size
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.seed = seed

    # -- parameters ----------------------------------------------------------

    def _init_params(self, rng):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        in_dim = self.token_dim + self.amount_dim
        params = {
            "token_emb": Tensor(
                rng.normal(0.0, 0.2, size=(self.vocab_size_, self.token_dim)),
                requires_grad=True,
            ),
            "amount_emb": Tensor(
                rng.normal(0.0, 0.2, size=(self.discretizer_.n_bins_, self.amount_dim)),
                requires_grad=True,
            ),
        }
        if self.architecture == "cnn":
            params["cnn_W"] = Tensor(
                _glorot(rng, in_dim * self.kernel_width, self.cnn_filters),
                requires_grad=True,
            )
            params["cnn_b"] = Tensor(np.zeros(self.cnn_filters), requires_grad=True)
            feat_dim = self.cnn_filters
        else:
            init = _init_gru if self.architecture == "gru" else _init_lstm
            for prefix in ("fwd_", "bwd_"):
                for name, tensor in init(rng, in_dim, self.hidden_size).items():
                    params[prefix + name] = tensor
            feat_dim = 2 * self.hidden_size
        params["head_W"] = Tensor(
            _glorot(rng, feat_dim, self.n_classes_), requires_grad=True
        )
        params["head_b"] = Tensor(np.zeros(self.n_classes_), requires_grad=True)
        self.params_ = params

    # -- fitting --------------------------------------------------------------

    def fit(self, X, y=None, validation_data=None):
        if not X:
            raise ValidationError("training data is empty")
        if y is None:
            y = [seq.label for seq in X]
        y = np.asarray(y, dtype=np.intp)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValidationError("training data contains a single class")
        self.n_classes_ = int(self.classes_.size)
        self.vocab_size_ = self._resolve_vocab(X)
        self._fit_discretizer(X)
        rng = np.random.default_rng(self.seed)
        self._init_params(rng)
        items = self._labelled_items(X, y)
        val_items = (
            self._labelled_items(validation_data, [s.label for s in validation_data])
            if validation_data is not None
            else None
        )
        train_items, val_items = self._split_validation(items, rng, val_items)
        self._train_loop(
            train_items,
            val_items,
            rng,
            loss_fn=self._batch_loss,
            eval_fn=self._batch_eval,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
        )
        return self

    def _labelled_items(self, X, y):
        targets = np.searchsorted(self.classes_, np.asarray(y, dtype=np.intp))
        return [
            (*self._encode(seq.tokens, seq.amounts), int(t)) for seq, t in zip(X, targets)
        ]

    def fine_tune(self, X, y=None, epochs=3, seed=None):
        """Continue training from the current parameters with a fresh optimizer."""
        self._check_fitted()
        if y is None:
            y = [seq.label for seq in X]
        y = np.asarray(y, dtype=np.intp)
        if np.any(~np.isin(y, self.classes_)):
            raise ValidationError("fine-tune labels outside the fitted classes")
        items = self._labelled_items(X, y)
        rng = np.random.default_rng(self.seed if seed is None else seed)
        lengths = [len(it[0]) for it in items]
        batches = [
            [items[i] for i in b] for b in _length_bucketed_batches(lengths, self.batch_size)
        ]
        optimizer = Adam(self.params_.values(), learning_rate=self.learning_rate)
        for _ in range(epochs):
            for b in rng.permutation(len(batches)):
                g = Graph()
                loss = self._batch_loss(g, batches[b], rng)
                g.backward(loss)
                optimizer.step()
        return self

    def _batch_loss(self, g, batch, rng):
        ids, bins, mask = _pad_batch([(t, b) for t, b, _ in batch])
        targets = np.array([t for _, _, t in batch], dtype=np.intp)
        dropout_mask = None
        if self.dropout > 0.0:
            feat_dim = self.params_["head_W"].values.shape[0]
            keep = rng.random((len(batch), feat_dim)) >= self.dropout
            dropout_mask = keep / (1.0 - self.dropout)
        logits, _ = _classifier_logits(
            g, self.params_, self.architecture, ids, bins, mask,
            self.kernel_width, self.pooling, dropout_mask,
        )
        return g.softmax_cross_entropy(logits, targets)

    def _batch_eval(self, batch, batch_index):
        logits = self._logits_raw([(t, b) for t, b, _ in batch])
        targets = np.array([t for _, _, t in batch], dtype=np.intp)
        return _nll_rows(logits, targets).sum(), float(len(batch))

    # -- inference --------------------------------------------------------------

    def _logits_raw(self, encoded_items):
        ids, bins, mask = _pad_batch(encoded_items)
        g = Graph(record=False)
        logits, _ = _classifier_logits(
            g, self.params_, self.architecture, ids, bins, mask,
            self.kernel_width, self.pooling,
        )
        return logits.values

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        encoded = self._encode_dataset(X)
        out = np.empty((len(X), self.n_classes_))
        for start in range(0, len(X), 256):
            chunk = encoded[start : start + 256]
            out[start : start + len(chunk)] = _softmax_rows(self._logits_raw(chunk))
        return out

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def predict_proba_arrays(self, items) -> np.ndarray:
        """Probabilities for raw (tokens, amounts) pairs, batched."""
        self._check_fitted()
        encoded = [self._encode(t, a) for t, a in items]
        out = np.empty((len(items), self.n_classes_))
        for start in range(0, len(items), 256):
            chunk = encoded[start : start + 256]
            out[start : start + len(chunk)] = _softmax_rows(self._logits_raw(chunk))
        return out

    def predict_proba_one(self, tokens, amounts) -> np.ndarray:
        return self.predict_proba_arrays([(tokens, amounts)])[0]

    def class_index(self, label) -> int:
        self._check_fitted()
        pos = int(np.searchsorted(self.classes_, label))
        if pos >= self.n_classes_ or self.classes_[pos] != label:
            raise ValidationError(f"label {label!r} not among fitted classes")
        return pos

    def token_embeddings(self) -> np.ndarray:
        """The token embedding table (V, token_dim). Treat as read-only."""
        self._check_fitted()
        return self.params_["token_emb"].values

    def loss_grad_wrt_embeddings(self, tokens, amounts, label) -> np.ndarray:
        """Gradient of the true-class cross-entropy at each gathered token
        embedding, shape (sequence length, token_dim)."""
        self._check_fitted()
        tokens, bins = self._encode(tokens, amounts)
        ids = tokens[None, :]
        mask = np.ones((1, len(tokens)))
        g = Graph()
        logits, token_nodes = _classifier_logits(
            g, self.params_, self.architecture, ids, bins[None, :], mask,
            self.kernel_width, self.pooling,
        )
        loss = g.softmax_cross_entropy(logits, [self.class_index(label)])
        g.backward(loss)
        grads = np.zeros((len(tokens), self.token_dim))
        for t, node in enumerate(token_nodes):
            if node.grad is not None:
                grads[t] = node.grad[0]
        return grads

    def _extra_state(self):
        return {"classes": self.classes_.tolist(), "n_classes": self.n_classes_}

    def _restore_extra(self, extra):
        self.classes_ = np.asarray(extra["classes"], dtype=np.intp)
        self.n_classes_ = int(extra["n_classes"])


# ---------------------------------------------------------------------------
# language models


class MaskedLM(_SequenceModel):
    """Bidirectional GRU masked language model over transaction tokens.

    Training hides a random fraction of tokens behind the mask id and scores
    only those positions; `distributions` then yields per-position sampling
    distributions at a chosen softmax temperature.
    """

    def __init__(self, hidden_size=64, token_dim=16, amount_dim=8, mask_rate=0.15,
                 n_bins=100, vocab_size=None, batch_size=64, max_epochs=30,
                 patience=3, learning_rate=0.001, validation_fraction=0.15, seed=0):
        self.hidden_size = hidden_size
        self.token_dim = token_dim
        self.amount_dim = amount_dim
        self.mask_rate = mask_rate
        self.n_bins = n_bins
        self.vocab_size = vocab_size
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _init_params(self, rng):
        in_dim = self.token_dim + self.amount_dim
        params = {
            "token_emb": Tensor(
                rng.normal(0.0, 0.2, size=(self.vocab_size_, self.token_dim)),
                requires_grad=True,
            ),
            "amount_emb": Tensor(
                rng.normal(0.0, 0.2, size=(self.discretizer_.n_bins_, self.amount_dim)),
                requires_grad=True,
            ),
        }
        for prefix in ("fwd_", "bwd_"):
            for name, tensor in _init_gru(rng, in_dim, self.hidden_size).items():
                params[prefix + name] = tensor
        params["head_W"] = Tensor(
            _glorot(rng, 2 * self.hidden_size, self.vocab_size_), requires_grad=True
        )
        params["head_b"] = Tensor(np.zeros(self.vocab_size_), requires_grad=True)
        self.params_ = params

    def fit(self, X, y=None, validation_data=None):
        if not X:
            raise ValidationError("training data is empty")
        if not 0.0 < self.mask_rate < 1.0:
            raise ValidationError("mask_rate must lie in (0, 1)")
        self.vocab_size_ = self._resolve_vocab(X)
        self._fit_discretizer(X)
        rng = np.random.default_rng(self.seed)
        self._init_params(rng)
        items = self._encode_dataset(X)
        val_items = self._encode_dataset(validation_data) if validation_data is not None else None
        train_items, val_items = self._split_validation(items, rng, val_items)
        self._train_loop(
            train_items,
            val_items,
            rng,
            loss_fn=self._batch_loss,
            eval_fn=self._batch_eval,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
        )
        return self

    @staticmethod
    def sample_mask(rng, mask, rate):
        """Boolean (B, T) mask selecting valid positions to hide during training.

        Guaranteed non-empty so every batch contributes a loss.
        """
        hide = (rng.random(mask.shape) < rate) & (mask > 0.0)
        if not hide.any():
            first_valid = int(np.argmax(mask[0] > 0.0))
            hide[0, first_valid] = True
        return hide

    def _batch_loss(self, g, batch, rng):
        ids, bins, mask = _pad_batch(batch)
        hide = self.sample_mask(rng, mask, self.mask_rate)
        inputs = np.where(hide, MASK_TOKEN, ids)
        logits = _position_logits(g, self.params_, inputs, bins, mask, causal=False)
        labels = ids.T.reshape(-1)
        weights = hide.T.reshape(-1).astype(np.float64)
        return g.softmax_cross_entropy(logits, labels, sample_weight=weights)

    def _batch_eval(self, batch, batch_index):
        # Deterministic validation masking so early stopping compares like
        # with like across epochs.
        ids, bins, mask = _pad_batch(batch)
        val_rng = np.random.default_rng(7919 + batch_index)
        hide = self.sample_mask(val_rng, mask, self.mask_rate)
        inputs = np.where(hide, MASK_TOKEN, ids)
        g = Graph(record=False)
        logits = _position_logits(g, self.params_, inputs, bins, mask, causal=False)
        labels = ids.T.reshape(-1)
        weights = hide.T.reshape(-1)
        nll = _nll_rows(logits.values, labels)
        return float((nll * weights).sum()), float(weights.sum())

    def position_logits(self, tokens, amounts, masked_positions) -> np.ndarray:
        """Vocabulary logits at the requested positions, with those positions
        replaced by the mask token."""
        self._check_fitted()
        tokens, bins = self._encode(tokens, amounts)
        inputs = tokens.copy()
        for p in masked_positions:
            if not 0 <= p < len(tokens):
                raise ValidationError(f"masked position {p} out of range")
            inputs[p] = MASK_TOKEN
        mask = np.ones((1, len(tokens)))
        g = Graph(record=False)
        logits = _position_logits(
            g, self.params_, inputs[None, :], bins[None, :], mask, causal=False
        )
        return logits.values[list(masked_positions), :]

    def distributions(self, tokens, amounts, masked_positions, temperature) -> np.ndarray:
        """Per-position categorical distributions softmax(logits / temperature)."""
        if temperature <= 0.0:
            raise ValidationError("temperature must be positive")
        logits = self.position_logits(tokens, amounts, masked_positions)
        return _softmax_rows(logits / temperature)


class CausalLM(_SequenceModel):
    """Left-to-right GRU language model; defines sequence perplexity.

    Position t is predicted from a pad-token start marker and the strict
    prefix, so editing a token never changes earlier predictions.
    """

    def __init__(self, hidden_size=64, token_dim=16, amount_dim=8, n_bins=100,
                 vocab_size=None, batch_size=64, max_epochs=30, patience=3,
                 learning_rate=0.001, validation_fraction=0.15, seed=0):
        self.hidden_size = hidden_size
        self.token_dim = token_dim
        self.amount_dim = amount_dim
        self.n_bins = n_bins
        self.vocab_size = vocab_size
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _init_params(self, rng):
        in_dim = self.token_dim + self.amount_dim
        params = {
            "token_emb": Tensor(
                rng.normal(0.0, 0.2, size=(self.vocab_size_, self.token_dim)),
                requires_grad=True,
            ),
            "amount_emb": Tensor(
                rng.normal(0.0, 0.2, size=(self.discretizer_.n_bins_, self.amount_dim)),
                requires_grad=True,
            ),
        }
        for name, tensor in _init_gru(rng, in_dim, self.hidden_size).items():
            params["fwd_" + name] = tensor
        params["head_W"] = Tensor(
            _glorot(rng, self.hidden_size, self.vocab_size_), requires_grad=True
        )
        params["head_b"] = Tensor(np.zeros(self.vocab_size_), requires_grad=True)
        self.params_ = params

    def fit(self, X, y=None, validation_data=None):
        if not X:
            raise ValidationError("training data is empty")
        self.vocab_size_ = self._resolve_vocab(X)
        self._fit_discretizer(X)
        rng = np.random.default_rng(self.seed)
        self._init_params(rng)
        items = self._encode_dataset(X)
        val_items = self._encode_dataset(validation_data) if validation_data is not None else None
        train_items, val_items = self._split_validation(items, rng, val_items)
        self._train_loop(
            train_items,
            val_items,
            rng,
            loss_fn=self._batch_loss,
            eval_fn=self._batch_eval,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
        )
        return self

    @staticmethod
    def _shift_inputs(ids, bins):
        ids_in = np.roll(ids, 1, axis=1)
        bins_in = np.roll(bins, 1, axis=1)
        ids_in[:, 0] = PAD_TOKEN
        bins_in[:, 0] = 0
        return ids_in, bins_in

    def _batch_loss(self, g, batch, rng):
        ids, bins, mask = _pad_batch(batch)
        ids_in, bins_in = self._shift_inputs(ids, bins)
        logits = _position_logits(g, self.params_, ids_in, bins_in, mask, causal=True)
        labels = ids.T.reshape(-1)
        weights = mask.T.reshape(-1)
        return g.softmax_cross_entropy(logits, labels, sample_weight=weights)

    def _batch_eval(self, batch, batch_index):
        ids, bins, mask = _pad_batch(batch)
        ids_in, bins_in = self._shift_inputs(ids, bins)
        g = Graph(record=False)
        logits = _position_logits(g, self.params_, ids_in, bins_in, mask, causal=True)
        nll = _nll_rows(logits.values, ids.T.reshape(-1))
        weights = mask.T.reshape(-1)
        return float((nll * weights).sum()), float(weights.sum())

    def token_logprobs(self, tokens, amounts) -> np.ndarray:
        """log p(x_t | x_<t) for every position, shape (L,)."""
        self._check_fitted()
        tokens, bins = self._encode(tokens, amounts)
        ids = tokens[None, :]
        ids_in, bins_in = self._shift_inputs(ids, bins[None, :])
        mask = np.ones((1, len(tokens)))
        g = Graph(record=False)
        logits = _position_logits(g, self.params_, ids_in, bins_in, mask, causal=True)
        return -_nll_rows(logits.values, tokens)

    def next_token_logits(self, tokens, amounts) -> np.ndarray:
        """Per-position next-token logits, shape (L, V); row t scores x_t."""
        self._check_fitted()
        tokens, bins = self._encode(tokens, amounts)
        ids_in, bins_in = self._shift_inputs(tokens[None, :], bins[None, :])
        mask = np.ones((1, len(tokens)))
        g = Graph(record=False)
        return _position_logits(g, self.params_, ids_in, bins_in, mask, causal=True).values

    def perplexity(self, tokens, amounts) -> float:
        """exp of the mean per-token negative log probability; lower is more
        plausible. Underflow to zero probability maps to +inf."""
        logp = self.token_logprobs(tokens, amounts)
        if np.any(np.isinf(logp)):
            return float("inf")
        return float(np.exp(-logp.mean()))
