import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.naive_bayes import MultinomialNB

from txadv.data import (
    AmountDiscretizer,
    DatasetFormatError,
    SyntheticSpec,
    generate_synthetic,
    read_dataset,
    split_target_substitute,
    write_dataset,
)
from txadv.validation import ValidationError

from conftest import tiny_spec


def quantile_oracle(values, q):
    """Sort-and-index quantile with linear interpolation."""
    ordered = sorted(values)
    pos = q * (len(ordered) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] + (ordered[hi] - ordered[lo]) * frac


class TestDiscretizer:
    def test_quartile_edges_match_oracle(self):
        amounts = np.arange(1.0, 101.0)
        disc = AmountDiscretizer(n_bins=4).fit(amounts)
        expected = [quantile_oracle(amounts, q) for q in (0.25, 0.5, 0.75)]
        assert np.allclose(disc.edges_, expected)
        assert np.allclose(disc.edges_, [25.75, 50.5, 75.25])

    def test_constant_amounts_single_bin(self):
        disc = AmountDiscretizer(n_bins=10).fit(np.full(50, 7.0))
        assert disc.n_bins_ == 1
        assert np.all(disc.transform([0.1, 7.0, 1e6]) == 0)

    def test_single_bin_request(self):
        disc = AmountDiscretizer(n_bins=1).fit(np.array([1.0, 5.0, 9.0]))
        assert np.all(disc.transform([0.5, 5.0, 100.0]) == 0)

    def test_extremes_map_to_first_and_last_bin(self):
        disc = AmountDiscretizer(n_bins=4).fit(np.arange(1.0, 101.0))
        assert disc.bin_index(0.0001) == 0
        assert disc.bin_index(1e9) == disc.n_bins_ - 1

    def test_median_lands_mid_bin(self):
        amounts = np.random.default_rng(0).lognormal(3.0, 0.8, size=5000)
        disc = AmountDiscretizer(n_bins=10).fit(amounts)
        median_bin = disc.bin_index(quantile_oracle(amounts, 0.5))
        assert abs(median_bin - 5) <= 1

    def test_rejects_nan(self):
        disc = AmountDiscretizer(n_bins=4).fit(np.arange(1.0, 11.0))
        with pytest.raises(ValidationError):
            disc.transform([np.nan])

    def test_rejects_empty_fit(self):
        with pytest.raises(ValidationError):
            AmountDiscretizer(n_bins=4).fit(np.array([]))

    def test_rejects_bad_bin_count(self):
        with pytest.raises(ValidationError):
            AmountDiscretizer(n_bins=101).fit(np.arange(5.0))

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.floats(0.01, 1e5), min_size=2, max_size=60),
        st.floats(0.01, 1e5),
        st.floats(0.01, 1e5),
    )
    def test_monotone(self, amounts, a, b):
        disc = AmountDiscretizer(n_bins=8).fit(np.array(amounts))
        lo, hi = sorted((a, b))
        assert disc.bin_index(lo) <= disc.bin_index(hi)

    def test_balanced_bins_on_distinct_amounts(self):
        rng = np.random.default_rng(1)
        amounts = rng.permutation(np.linspace(1.0, 500.0, 200))
        disc = AmountDiscretizer(n_bins=10).fit(amounts)
        bins = disc.transform(amounts)
        counts = np.bincount(bins, minlength=disc.n_bins_)
        assert np.all(np.abs(counts - 20) <= 2)

    def test_representatives_are_in_bin_and_usable(self):
        amounts = np.random.default_rng(2).lognormal(3.0, 0.6, size=800)
        disc = AmountDiscretizer(n_bins=20).fit(amounts)
        for b, rep in enumerate(disc.representatives_):
            assert disc.bin_index(rep) == b


class TestSyntheticGeneration:
    def test_deterministic(self):
        spec = tiny_spec()
        first = generate_synthetic(spec)
        second = generate_synthetic(spec)
        assert len(first) == len(second)
        for a, b in zip(first, second):
            assert a.client_id == b.client_id
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.amounts, b.amounts)
            assert np.array_equal(a.timestamps, b.timestamps)

    def _nb_accuracy(self, spec):
        data = generate_synthetic(spec)
        split = split_target_substitute(data, 0.75, seed=1)
        vocab = spec.vocab_size

        def counts(seqs):
            X = np.zeros((len(seqs), vocab))
            for i, s in enumerate(seqs):
                np.add.at(X[i], s.tokens, 1.0)
            return X

        nb = MultinomialNB().fit(counts(split.target), [s.label for s in split.target])
        predictions = nb.predict(counts(split.substitute))
        return float(np.mean(predictions == [s.label for s in split.substitute]))

    def test_default_spec_learnable_by_naive_bayes(self):
        # independent oracle: multinomial naive Bayes on token counts
        assert self._nb_accuracy(SyntheticSpec(seed=5)) >= 0.85

    def test_zero_signal_is_chance_level(self):
        spec = SyntheticSpec(
            n_sequences=400, signal_strength=0.0, length_range=(10, 30), seed=6
        )
        acc = self._nb_accuracy(spec)
        assert abs(acc - 1.0 / spec.num_classes) < 0.1

    def test_invariants_of_generated_sequences(self):
        for seq in generate_synthetic(tiny_spec()):
            assert len(seq) >= 1
            assert np.all(seq.amounts > 0)
            assert np.all(np.diff(seq.timestamps) >= 0)
            assert seq.tokens.min() >= 3 and seq.tokens.max() < 20

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            generate_synthetic(tiny_spec(length_range=(0, 5)))
        with pytest.raises(ValidationError):
            generate_synthetic(tiny_spec(length_range=(10, 900)))
        with pytest.raises(ValidationError):
            generate_synthetic(tiny_spec(signal_strength=1.5))


class TestSplit:
    def test_65_35(self):
        data = generate_synthetic(tiny_spec(n_sequences=100))
        split = split_target_substitute(data, 0.65, seed=0)
        assert len(split.target) == 65 and len(split.substitute) == 35

    def test_disjoint_and_exhaustive(self):
        data = generate_synthetic(tiny_spec(n_sequences=73))
        split = split_target_substitute(data, 0.6, seed=2)
        target_ids = {s.client_id for s in split.target}
        substitute_ids = {s.client_id for s in split.substitute}
        assert not target_ids & substitute_ids
        assert target_ids | substitute_ids == {s.client_id for s in data}

    def test_full_fraction_rejected(self):
        data = generate_synthetic(tiny_spec(n_sequences=10))
        with pytest.raises(ValidationError):
            split_target_substitute(data, 1.0, seed=0)

    def test_same_seed_same_partition(self):
        data = generate_synthetic(tiny_spec(n_sequences=40))
        a = split_target_substitute(data, 0.65, seed=9)
        b = split_target_substitute(data, 0.65, seed=9)
        assert [s.client_id for s in a.target] == [s.client_id for s in b.target]


class TestPersistence:
    def test_round_trip(self, tmp_path, tiny_data):
        path = tmp_path / "data.jsonl"
        write_dataset(path, tiny_data)
        loaded = read_dataset(path, vocab_size=20)
        assert len(loaded) == len(tiny_data)
        for a, b in zip(tiny_data, loaded):
            assert a.client_id == b.client_id and a.label == b.label
            assert np.array_equal(a.tokens, b.tokens)
            assert np.array_equal(a.amounts, b.amounts)
            assert np.array_equal(a.timestamps, b.timestamps)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_dataset(path) == []

    def test_negative_amount_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = {"client_id": "a", "label": 0, "mcc": [3], "amount": [1.0], "ts": [1]}
        bad = {"client_id": "b", "label": 0, "mcc": [3], "amount": [-1.0], "ts": [1]}
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_dataset(path)

    def test_malformed_json_reports_line(self, tmp_path):
        path = tmp_path / "broken.jsonl"
        path.write_text('{"client_id": "a"\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            read_dataset(path)

    def test_unequal_arrays_rejected(self, tmp_path):
        path = tmp_path / "short.jsonl"
        rec = {"client_id": "a", "label": 0, "mcc": [3, 4], "amount": [1.0], "ts": [1, 2]}
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_out_of_vocab_token_rejected(self, tmp_path):
        path = tmp_path / "oov.jsonl"
        rec = {"client_id": "a", "label": 0, "mcc": [25], "amount": [1.0], "ts": [1]}
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ValidationError):
            read_dataset(path, vocab_size=20)

    def test_decreasing_timestamps_rejected(self, tmp_path):
        path = tmp_path / "ts.jsonl"
        rec = {"client_id": "a", "label": 0, "mcc": [3, 4], "amount": [1.0, 2.0], "ts": [5, 1]}
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(ValidationError):
            read_dataset(path)
