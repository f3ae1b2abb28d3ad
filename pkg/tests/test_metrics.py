import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from txadv.attacks import AttackResult, Edit
from txadv.data import TransactionSequence
from txadv.metrics import (
    EvalPair,
    MetricsReport,
    adversarial_accuracy,
    diversity_rate,
    mean_perplexity,
    nad,
    probability_difference,
    repetition_rate,
    wer,
    write_csv,
    write_metrics_csv,
)
from txadv.validation import ValidationError


def dp_oracle(a, b):
    """Full-matrix dynamic programming Levenshtein, kept deliberately naive."""
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(
                table[i - 1][j] + 1, table[i][j - 1] + 1, table[i - 1][j - 1] + cost
            )
    return table[n][m]


def _pair(x, x_adv, pred_x=0, pred_adv=0, conf_x=None, conf_adv=None, label=0):
    return EvalPair(
        original_tokens=tuple(x),
        adversarial_tokens=tuple(x_adv),
        label=label,
        pred_original=pred_x,
        pred_adversarial=pred_adv,
        conf_original=conf_x,
        conf_adversarial=conf_adv,
    )


def _result(original_tokens, new_tokens, kind="append"):
    n = len(original_tokens)
    original = TransactionSequence.from_arrays(
        "c", 0, original_tokens, np.ones(n), np.arange(n)
    )
    if kind == "append":
        adv_tokens = list(original_tokens) + list(new_tokens)
        edits = [Edit(n + i, None, int(t), "append") for i, t in enumerate(new_tokens)]
    else:
        adv_tokens = list(original_tokens)
        edits = []
        for i, t in enumerate(new_tokens):
            edits.append(Edit(i, int(adv_tokens[i]), int(t), "replace"))
            adv_tokens[i] = t
    adv = TransactionSequence.from_arrays(
        "c", 0, adv_tokens, np.ones(len(adv_tokens)), np.arange(len(adv_tokens))
    )
    return AttackResult(
        original=original, adversarial=adv, edits=edits, wer=len(edits),
        conf_before=1.0, conf_after=0.5, flipped=False,
    )


class TestWer:
    def test_identity(self):
        assert wer([1, 2, 3], [1, 2, 3]) == 0

    def test_append_two(self):
        assert wer([1, 2, 3], [1, 2, 3, 9, 9]) == 2

    def test_classic_strings(self):
        assert wer("kitten", "sitting") == 3
        assert wer("sunday", "saturday") == 3

    def test_matches_dp_oracle_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            a = rng.integers(0, 6, size=rng.integers(0, 12)).tolist()
            b = rng.integers(0, 6, size=rng.integers(0, 12)).tolist()
            assert wer(a, b) == dp_oracle(a, b)

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.integers(0, 4), max_size=8),
        st.lists(st.integers(0, 4), max_size=8),
        st.lists(st.integers(0, 4), max_size=8),
    )
    def test_metric_axioms(self, a, b, c):
        assert wer(a, a) == 0
        assert wer(a, b) == wer(b, a)
        assert wer(a, c) <= wer(a, b) + wer(b, c)


class TestAA:
    def test_identity_attack(self):
        pairs = [_pair([1], [1], pred_x=0, pred_adv=0) for _ in range(5)]
        assert adversarial_accuracy(pairs) == 1.0

    def test_everything_flipped(self):
        pairs = [_pair([1], [2], pred_x=0, pred_adv=1) for _ in range(5)]
        assert adversarial_accuracy(pairs) == 0.0

    def test_three_of_four(self):
        pairs = [_pair([1], [1], 0, 0)] * 3 + [_pair([1], [2], 0, 1)]
        assert adversarial_accuracy(pairs) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            adversarial_accuracy([])


class TestPD:
    def test_identity_is_zero(self):
        pairs = [_pair([1], [1], conf_x=0.8, conf_adv=0.8)]
        assert probability_difference(pairs) == 0.0

    def test_single_drop(self):
        pairs = [_pair([1], [2], conf_x=0.9, conf_adv=0.4)]
        assert np.isclose(probability_difference(pairs), 0.5)

    def test_can_be_negative(self):
        pairs = [_pair([1], [2], conf_x=0.3, conf_adv=0.9)]
        assert probability_difference(pairs) < 0

    def test_requires_confidences(self):
        with pytest.raises(ValidationError):
            probability_difference([_pair([1], [1])])


class TestNAD:
    def test_flip_with_one_edit(self):
        assert nad([_pair([1, 2], [1, 3], 0, 1)]) == 1.0

    def test_flip_with_four_edits(self):
        assert nad([_pair([1, 2, 3, 4], [5, 6, 7, 8], 0, 1)]) == 0.25

    def test_identity_is_zero(self):
        assert nad([_pair([1, 2], [1, 2], 0, 0)]) == 0.0


class TestRealismMetrics:
    def test_diversity_single_token(self):
        results = [_result([4, 5], [9]) for _ in range(20)]
        assert diversity_rate(results, 100) == 0.01

    def test_diversity_full_coverage(self):
        results = [_result([4, 5], [t]) for t in range(100)]
        assert diversity_rate(results, 100) == 1.0

    def test_uniform_insertion_approaches_full_coverage(self):
        # coupon collector: with many draws the unique fraction tends to 1
        rng = np.random.default_rng(0)
        vocab = 50
        results = [
            _result([1], rng.integers(0, vocab, size=2).tolist()) for _ in range(600)
        ]
        assert diversity_rate(results, vocab) > 0.95

    def test_repetition_all_present(self):
        assert repetition_rate([_result([7, 8], [7, 8])]) == 1.0

    def test_repetition_none_present(self):
        assert repetition_rate([_result([7, 8], [9, 10])]) == 0.0

    def test_repetition_three_of_four(self):
        results = [_result([7, 8], [7, 8]), _result([7, 8], [7, 9])]
        assert repetition_rate(results) == 0.75

    def test_repetition_requires_added_tokens(self):
        with pytest.raises(ValidationError):
            repetition_rate([_result([1, 2], [])])

    def test_mean_perplexity_uniform_lm(self, tiny_data, tiny_causal):
        import copy

        uniform = copy.deepcopy(tiny_causal)
        uniform.params_["head_W"].values[:] = 0.0
        uniform.params_["head_b"].values[:] = 0.0
        results = [_result(s.tokens.tolist(), [4], "append") for s in tiny_data[:5]]
        assert np.isclose(mean_perplexity(results, uniform), 20.0)

    def test_identity_corpus_equals_original_perplexity(self, tiny_data, tiny_causal):
        results = [_result(s.tokens.tolist(), [], "replace") for s in tiny_data[:5]]
        expected = np.mean(
            [tiny_causal.perplexity(s.tokens, np.ones(len(s))) for s in tiny_data[:5]]
        )
        assert np.isclose(mean_perplexity(results, tiny_causal), expected)


class TestCsv:
    def test_versioned_header_and_rows(self, tmp_path):
        path = tmp_path / "m.csv"
        report = MetricsReport(
            attack="fgsm", dataset="synthetic", nad=0.5, wer=2.0, aa=0.4,
            pd=0.1, diversity=0.2, repetition=None, perplexity=33.0,
        )
        write_metrics_csv(path, [report])
        lines = path.read_text().splitlines()
        assert lines[0] == "# schema: txadv.metrics.v1"
        assert lines[1].startswith("attack,dataset,NAD,WER,AA,PD")
        assert ",," in lines[2]  # the None cell is empty

    def test_row_width_validated_before_write(self, tmp_path):
        path = tmp_path / "bad.csv"
        with pytest.raises(ValidationError):
            write_csv(path, "s.v1", ("a", "b"), [(1, 2, 3)])
        assert not path.exists()
