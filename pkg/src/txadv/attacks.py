"""Black-box attacks on sequence classifiers through a substitute model.

Every attack sees only an :class:`AttackContext`: the attacker's own
substitute classifier (scores and gradients), optionally the attacker's
language models, the attackable vocabulary, and the attacker's amount
discretizer. The target model is never part of the context; whoever runs an
attack scores the result against the target afterwards, by plain queries.

Two families:

* replacement attacks (sampling fool, FGSM, LM FGSM, greedy in replace
  mode) edit tokens in place and keep the original amounts;
* concatenation attacks append exactly ``k`` new transactions at the end,
  never touching the original prefix, and draw the new amounts from the
  budget-constrained bin distribution. Their edit distance is exactly ``k``
  by construction, even when no appended candidate actually helps.

All attacks are deterministic functions of (sequence, context, budget); the
context carries the random seed.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import FIRST_REAL_TOKEN, MASK_TOKEN, TransactionSequence
from .validation import ValidationError

_APPEND_TS_GAP = 3600  # timestamps for appended transactions, one hour apart


@dataclass
class AttackBudget:
    """Knobs shared by all attacks; each attack reads the fields it needs.

    ``k`` is the number of tokens added (concat family, greedy rounds) or
    masked (sampling fool). ``steps`` caps FGSM replacement iterations.
    ``tau`` is the perplexity admissibility threshold of LM FGSM, with
    ``lm_top_candidates`` bounding how many nearest neighbours are tested
    against it per iteration. ``amount_limit`` caps the total money spent on
    appended transactions; None means unconstrained.
    """

    k: int = 2
    num_samples: int = 100
    eps: float = 1.0
    steps: int = 30
    temperature: float = 2.0
    tau: float | None = None
    amount_limit: float | None = None
    lm_top_candidates: int = 20

    def validate(self):
        if self.k < 1:
            raise ValidationError("budget k must be at least 1")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be at least 1")
        if self.eps <= 0.0:
            raise ValidationError("eps must be positive")
        if self.steps < 1:
            raise ValidationError("steps must be at least 1")
        if self.temperature <= 0.0:
            raise ValidationError("temperature must be positive")
        if self.amount_limit is not None and self.amount_limit <= 0.0:
            raise ValidationError("amount_limit must be positive when set")
        if self.lm_top_candidates < 1:
            raise ValidationError("lm_top_candidates must be at least 1")


@dataclass
class AttackContext:
    """Everything an attacker may touch. Never holds the target model."""

    substitute: object
    discretizer: object
    vocab: np.ndarray
    mlm: object = None
    causal_lm: object = None
    seed: int = 0

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def with_seed(self, seed: int) -> "AttackContext":
        return dataclasses.replace(self, seed=seed)


def attackable_vocab(vocab_size: int) -> np.ndarray:
    """All real token ids; the reserved pad/mask/unknown ids are excluded."""
    if vocab_size <= FIRST_REAL_TOKEN:
        raise ValidationError("vocabulary holds no attackable tokens")
    return np.arange(FIRST_REAL_TOKEN, vocab_size, dtype=np.intp)


def make_context(substitute, mlm=None, causal_lm=None, seed=0) -> AttackContext:
    """Context backed by the substitute's own discretizer and vocabulary."""
    return AttackContext(
        substitute=substitute,
        discretizer=substitute.discretizer_,
        vocab=attackable_vocab(substitute.vocab_size_),
        mlm=mlm,
        causal_lm=causal_lm,
        seed=seed,
    )


@dataclass(frozen=True)
class Edit:
    position: int
    old: int | None  # None for appended positions
    new: int
    kind: str  # "replace" | "append"


@dataclass
class AttackResult:
    original: TransactionSequence
    adversarial: TransactionSequence
    edits: list[Edit]
    wer: int
    conf_before: float  # substitute probability of the true class on x
    conf_after: float  # same on the adversarial sequence
    flipped: bool  # substitute prediction changed
    target_queries: int = 0


# ---------------------------------------------------------------------------
# shared helpers


def _true_class_probs(ctx, items, label):
    probs = ctx.substitute.predict_proba_arrays(items)
    return probs, probs[:, ctx.substitute.class_index(label)]


def _substitute_view(ctx, tokens, amounts, label):
    probs = ctx.substitute.predict_proba_one(tokens, amounts)
    return float(probs[ctx.substitute.class_index(label)]), int(np.argmax(probs))


def _appended_sequence(seq, new_tokens, new_amounts):
    last_ts = int(seq.transactions[-1].ts)
    ts = [last_ts + _APPEND_TS_GAP * (i + 1) for i in range(len(new_tokens))]
    return TransactionSequence.from_arrays(
        seq.client_id,
        seq.label,
        np.concatenate([seq.tokens, np.asarray(new_tokens, dtype=np.intp)]),
        np.concatenate([seq.amounts, np.asarray(new_amounts, dtype=np.float64)]),
        np.concatenate([seq.timestamps, np.asarray(ts, dtype=np.int64)]),
    )


def _replaced_sequence(seq, tokens):
    return TransactionSequence.from_arrays(
        seq.client_id, seq.label, tokens, seq.amounts, seq.timestamps
    )


def _identity_result(seq, conf):
    return AttackResult(
        original=seq,
        adversarial=_replaced_sequence(seq, seq.tokens),
        edits=[],
        wer=0,
        conf_before=conf,
        conf_after=conf,
        flipped=False,
    )


def _replacement_result(seq, ctx, tokens, conf_before, conf_after, pred_before):
    original = seq.tokens
    edits = [
        Edit(int(p), int(original[p]), int(tokens[p]), "replace")
        for p in np.flatnonzero(tokens != original)
    ]
    adv = _replaced_sequence(seq, tokens)
    _, pred_after = _substitute_view(ctx, adv.tokens, adv.amounts, seq.label)
    return AttackResult(
        original=seq,
        adversarial=adv,
        edits=edits,
        wer=len(edits),
        conf_before=conf_before,
        conf_after=conf_after,
        flipped=pred_after != pred_before,
    )


def _append_result(seq, ctx, new_tokens, new_amounts, conf_before, conf_after, pred_before):
    n = len(seq)
    edits = [
        Edit(n + i, None, int(tok), "append") for i, tok in enumerate(new_tokens)
    ]
    adv = _appended_sequence(seq, new_tokens, new_amounts)
    _, pred_after = _substitute_view(ctx, adv.tokens, adv.amounts, seq.label)
    return AttackResult(
        original=seq,
        adversarial=adv,
        edits=edits,
        wer=len(edits),
        conf_before=conf_before,
        conf_after=conf_after,
        flipped=pred_after != pred_before,
    )


def assign_amounts(n_positions, ctx, limit, rng) -> np.ndarray:
    """Amounts for appended transactions under a total budget.

    Each position draws a bin uniformly among the bins whose representative
    value still fits the per-position share of the remaining budget, then
    materializes that bin's representative amount. Without a limit the bin
    is uniform over all bins.
    """
    reps = ctx.discretizer.representatives_
    if limit is None:
        bins = rng.integers(0, reps.size, size=n_positions)
        return reps[bins].astype(np.float64)
    if limit <= 0.0:
        raise ValidationError("amount limit must be positive")
    if reps.min() > limit:
        raise ValidationError("amount limit is below the cheapest bin")
    remaining = float(limit)
    out = np.empty(n_positions)
    for i in range(n_positions):
        positions_left = n_positions - i
        admissible = np.flatnonzero(reps <= remaining / positions_left)
        if admissible.size == 0:
            raise ValidationError(
                f"amount limit {limit} cannot cover {n_positions} transactions"
            )
        chosen = int(rng.choice(admissible))
        out[i] = reps[chosen]
        remaining -= reps[chosen]
    return out


def _mlm_restricted_probs(ctx, tokens, amounts, positions, temperature):
    """MLM distributions at `positions`, renormalized over the attackable vocab."""
    if ctx.mlm is None:
        raise ValidationError("this attack needs a masked language model in the context")
    if ctx.vocab.size == 0:
        raise ValidationError("attackable vocabulary is empty")
    dists = ctx.mlm.distributions(tokens, amounts, positions, temperature)
    restricted = dists[:, ctx.vocab]
    return restricted / restricted.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# sampling-fool family


def attack_sampling_fool(seq, ctx, budget) -> AttackResult:
    """Mask random positions, sample MLM fills, keep the most adversarial.

    Falls back to the untouched sequence when no sampled candidate lowers
    the substitute's confidence in the true class.
    """
    budget.validate()
    rng = ctx.rng()
    tokens = seq.tokens
    amounts = seq.amounts
    n = len(tokens)
    n_masked = min(budget.k, n)
    positions = np.sort(rng.choice(n, size=n_masked, replace=False))
    probs = _mlm_restricted_probs(ctx, tokens, amounts, positions, budget.temperature)
    fills = np.stack(
        [rng.choice(ctx.vocab, size=budget.num_samples, p=probs[i]) for i in range(n_masked)],
        axis=1,
    )  # (num_samples, n_masked)
    candidates = np.repeat(tokens[None, :], budget.num_samples, axis=0)
    candidates[:, positions] = fills
    _, conf = _true_class_probs(ctx, [(c, amounts) for c in candidates], seq.label)
    conf_before, pred_before = _substitute_view(ctx, tokens, amounts, seq.label)
    best = int(np.argmin(conf))
    if conf[best] >= conf_before:
        return _identity_result(seq, conf_before)
    return _replacement_result(
        seq, ctx, candidates[best], conf_before, float(conf[best]), pred_before
    )


def attack_concat_sf(seq, ctx, budget) -> AttackResult:
    """Append k transactions and fill them with sampled MLM tokens.

    The original prefix is preserved verbatim; the best of ``num_samples``
    fills is committed unconditionally, so the edit distance is exactly k.
    """
    budget.validate()
    rng = ctx.rng()
    k = budget.k
    new_amounts = assign_amounts(k, ctx, budget.amount_limit, rng)
    ext = _appended_sequence(seq, [MASK_TOKEN] * k, new_amounts)
    positions = list(range(len(seq), len(seq) + k))
    probs = _mlm_restricted_probs(
        ctx, ext.tokens, ext.amounts, positions, budget.temperature
    )
    fills = np.stack(
        [rng.choice(ctx.vocab, size=budget.num_samples, p=probs[i]) for i in range(k)],
        axis=1,
    )
    base = ext.tokens
    candidates = np.repeat(base[None, :], budget.num_samples, axis=0)
    candidates[:, positions] = fills
    _, conf = _true_class_probs(ctx, [(c, ext.amounts) for c in candidates], seq.label)
    conf_before, pred_before = _substitute_view(ctx, seq.tokens, seq.amounts, seq.label)
    best = int(np.argmin(conf))
    return _append_result(
        seq, ctx, fills[best], new_amounts, conf_before, float(conf[best]), pred_before
    )


def attack_seq_concat_sf(seq, ctx, budget) -> AttackResult:
    """Append k transactions one at a time, committing the best sample per round."""
    budget.validate()
    rng = ctx.rng()
    k = budget.k
    new_amounts = assign_amounts(k, ctx, budget.amount_limit, rng)
    conf_before, pred_before = _substitute_view(ctx, seq.tokens, seq.amounts, seq.label)
    committed: list[int] = []
    conf_after = conf_before
    for i in range(k):
        ext = _appended_sequence(seq, committed + [MASK_TOKEN], new_amounts[: i + 1])
        position = len(ext) - 1
        probs = _mlm_restricted_probs(
            ctx, ext.tokens, ext.amounts, [position], budget.temperature
        )[0]
        draws = rng.choice(ctx.vocab, size=budget.num_samples, p=probs)
        base = ext.tokens
        candidates = np.repeat(base[None, :], budget.num_samples, axis=0)
        candidates[:, position] = draws
        _, conf = _true_class_probs(ctx, [(c, ext.amounts) for c in candidates], seq.label)
        best = int(np.argmin(conf))
        committed.append(int(draws[best]))
        conf_after = float(conf[best])
    return _append_result(
        seq, ctx, committed, new_amounts, conf_before, conf_after, pred_before
    )


# ---------------------------------------------------------------------------
# FGSM family


def _ranked_candidates(ctx, perturbed, exclude):
    """Attackable tokens ordered by embedding distance to `perturbed`."""
    table = ctx.substitute.token_embeddings()
    candidates = ctx.vocab[ctx.vocab != exclude] if exclude is not None else ctx.vocab
    if candidates.size == 0:
        raise ValidationError("no candidate tokens remain")
    diff = table[candidates] - perturbed
    distances = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(distances, kind="stable")
    return candidates[order]


def _fgsm_step_token(ctx, grads, position, current_token, eps):
    table = ctx.substitute.token_embeddings()
    perturbed = table[current_token] + eps * np.sign(grads[position])
    return _ranked_candidates(ctx, perturbed, exclude=current_token)


def _fgsm_replace(seq, ctx, budget, admit) -> AttackResult:
    """Greedy token replacement along the loss-gradient sign direction.

    Each iteration picks a uniformly random position, perturbs its embedding
    by eps * sign(grad of the true-class loss), and replaces the token with
    the nearest admissible embedding row. Stops when the substitute flips or
    after ``steps`` iterations. `admit` filters candidate replacements (used
    by the perplexity-constrained variant); None admits the nearest.
    """
    budget.validate()
    if ctx.vocab.size == 0:
        raise ValidationError("attackable vocabulary is empty")
    rng = ctx.rng()
    tokens = seq.tokens.copy()
    amounts = seq.amounts
    label = seq.label
    conf_before, pred_before = _substitute_view(ctx, seq.tokens, amounts, label)
    conf_after = conf_before
    for _ in range(budget.steps):
        position = int(rng.integers(len(tokens)))
        grads = ctx.substitute.loss_grad_wrt_embeddings(tokens, amounts, label)
        ranked = _fgsm_step_token(ctx, grads, position, int(tokens[position]), budget.eps)
        if admit is None:
            chosen = int(ranked[0])
        else:
            chosen = None
            for candidate in ranked[: budget.lm_top_candidates]:
                trial = tokens.copy()
                trial[position] = candidate
                if admit(trial, amounts):
                    chosen = int(candidate)
                    break
            if chosen is None:
                continue
        tokens[position] = chosen
        conf_after, pred = _substitute_view(ctx, tokens, amounts, label)
        if pred != pred_before:
            break
    if conf_after >= conf_before or np.array_equal(tokens, seq.tokens):
        return _identity_result(seq, conf_before)
    return _replacement_result(seq, ctx, tokens, conf_before, conf_after, pred_before)


def attack_fgsm(seq, ctx, budget) -> AttackResult:
    return _fgsm_replace(seq, ctx, budget, admit=None)


def attack_lm_fgsm(seq, ctx, budget) -> AttackResult:
    """FGSM restricted to replacements the causal LM finds plausible.

    A candidate is admissible only if the full edited sequence scores a
    perplexity strictly below ``tau``. Iterations with no admissible
    candidate leave the sequence unchanged. ``tau=inf`` reduces to FGSM on
    the same random stream.
    """
    if ctx.causal_lm is None:
        raise ValidationError("LM FGSM needs a causal language model in the context")
    if budget.tau is None or budget.tau <= 0.0:
        raise ValidationError("LM FGSM needs a positive perplexity threshold tau")

    def admit(tokens, amounts):
        return ctx.causal_lm.perplexity(tokens, amounts) < budget.tau

    return _fgsm_replace(seq, ctx, budget, admit=admit)


def _concat_fgsm(seq, ctx, budget, mode) -> AttackResult:
    """Append k placeholders and choose their tokens by iterated FGSM.

    Both variants run up to ``steps`` FGSM iterations starting from mask
    placeholders and keep the iterate with the lowest substitute confidence.
    [seq] optimizes one appended position at a time, recomputing gradients
    after each commitment; [sim] perturbs all k appended embeddings
    simultaneously from a single gradient pass per iteration. With k=1 the
    two coincide. Exactly k transactions are appended no matter what.
    """
    budget.validate()
    if ctx.vocab.size == 0:
        raise ValidationError("attackable vocabulary is empty")
    rng = ctx.rng()
    k = budget.k
    label = seq.label
    new_amounts = assign_amounts(k, ctx, budget.amount_limit, rng)
    conf_before, pred_before = _substitute_view(ctx, seq.tokens, seq.amounts, label)
    n = len(seq)
    if mode == "sim":
        ext = _appended_sequence(seq, [MASK_TOKEN] * k, new_amounts)
        tokens = ext.tokens.copy()
        best_tokens = tokens[n:].copy()
        best_conf = np.inf
        seen = {tuple(tokens[n:])}
        for _ in range(budget.steps):
            grads = ctx.substitute.loss_grad_wrt_embeddings(tokens, ext.amounts, label)
            for i in range(k):
                ranked = _fgsm_step_token(
                    ctx, grads, n + i, int(tokens[n + i]), budget.eps
                )
                tokens[n + i] = int(ranked[0])
            conf, pred = _substitute_view(ctx, tokens, ext.amounts, label)
            if conf < best_conf:
                best_conf = conf
                best_tokens = tokens[n:].copy()
            state = tuple(tokens[n:])
            if pred != pred_before or state in seen:
                break
            seen.add(state)
        chosen = list(best_tokens)
        conf_after = float(best_conf)
    elif mode == "seq":
        chosen = []
        conf_after = conf_before
        for i in range(k):
            ext = _appended_sequence(seq, chosen + [MASK_TOKEN], new_amounts[: i + 1])
            tokens = ext.tokens.copy()
            best_token = MASK_TOKEN
            best_conf = np.inf
            seen = {int(tokens[n + i])}
            for _ in range(budget.steps):
                grads = ctx.substitute.loss_grad_wrt_embeddings(tokens, ext.amounts, label)
                ranked = _fgsm_step_token(ctx, grads, n + i, int(tokens[n + i]), budget.eps)
                tokens[n + i] = int(ranked[0])
                conf, pred = _substitute_view(ctx, tokens, ext.amounts, label)
                if conf < best_conf:
                    best_conf = conf
                    best_token = int(tokens[n + i])
                if pred != pred_before or int(tokens[n + i]) in seen:
                    break
                seen.add(int(tokens[n + i]))
            tokens[n + i] = best_token
            chosen.append(best_token)
            conf_after = float(best_conf)
    else:
        raise ValidationError(f"unknown concat FGSM mode {mode!r}")
    return _append_result(
        seq, ctx, chosen, new_amounts, conf_before, conf_after, pred_before
    )


def attack_concat_fgsm_seq(seq, ctx, budget) -> AttackResult:
    return _concat_fgsm(seq, ctx, budget, "seq")


def attack_concat_fgsm_sim(seq, ctx, budget) -> AttackResult:
    return _concat_fgsm(seq, ctx, budget, "sim")


# ---------------------------------------------------------------------------
# exhaustive baseline


def attack_greedy(seq, ctx, budget, mode: str = "append") -> AttackResult:
    """Brute-force baseline: k rounds, each committing the single best edit.

    Append mode tries every attackable token at the end of the sequence;
    replace mode tries every token at every position. Stops early when no
    edit lowers the substitute's true-class confidence.
    """
    budget.validate()
    if mode not in ("append", "replace"):
        raise ValidationError(f"unknown greedy mode {mode!r}")
    if ctx.vocab.size == 0:
        raise ValidationError("attackable vocabulary is empty")
    rng = ctx.rng()
    label = seq.label
    conf_before, pred_before = _substitute_view(ctx, seq.tokens, seq.amounts, label)
    conf_current = conf_before
    if mode == "append":
        new_amounts = assign_amounts(budget.k, ctx, budget.amount_limit, rng)
        committed: list[int] = []
        for i in range(budget.k):
            prefix = _appended_sequence(seq, committed + [0], new_amounts[: i + 1])
            base = prefix.tokens
            items = []
            for tok in ctx.vocab:
                cand = base.copy()
                cand[-1] = tok
                items.append((cand, prefix.amounts))
            _, conf = _true_class_probs(ctx, items, label)
            best = int(np.argmin(conf))
            if conf[best] >= conf_current:
                break
            committed.append(int(ctx.vocab[best]))
            conf_current = float(conf[best])
        if not committed:
            return _identity_result(seq, conf_before)
        return _append_result(
            seq, ctx, committed, new_amounts[: len(committed)],
            conf_before, conf_current, pred_before,
        )
    tokens = seq.tokens.copy()
    amounts = seq.amounts
    for _ in range(budget.k):
        items = []
        moves = []
        for p in range(len(tokens)):
            for tok in ctx.vocab:
                if tok == tokens[p]:
                    continue
                cand = tokens.copy()
                cand[p] = tok
                items.append((cand, amounts))
                moves.append((p, int(tok)))
        _, conf = _true_class_probs(ctx, items, label)
        best = int(np.argmin(conf))
        if conf[best] >= conf_current:
            break
        p, tok = moves[best]
        tokens[p] = tok
        conf_current = float(conf[best])
    if np.array_equal(tokens, seq.tokens):
        return _identity_result(seq, conf_before)
    return _replacement_result(seq, ctx, tokens, conf_before, conf_current, pred_before)


def attack_greedy_replace(seq, ctx, budget) -> AttackResult:
    return attack_greedy(seq, ctx, budget, mode="replace")


ATTACKS = {
    "sf": attack_sampling_fool,
    "concat_sf": attack_concat_sf,
    "seq_concat_sf": attack_seq_concat_sf,
    "fgsm": attack_fgsm,
    "concat_fgsm_seq": attack_concat_fgsm_seq,
    "concat_fgsm_sim": attack_concat_fgsm_sim,
    "lm_fgsm": attack_lm_fgsm,
    "greedy": attack_greedy,
}
