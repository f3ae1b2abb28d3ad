"""End-to-end experiment pipeline: generate, train, attack, sweep, defend,
report, and threshold calibration.

Every stage reads its inputs from the output directory written by earlier
stages, works from explicit seeds in the config, and writes versioned CSV
files. Reruns with the same config produce byte-identical outputs.

Black-box boundary: when an attack run is given a remote scorer address,
the target checkpoint is never opened in this process; every target score
arrives over the wire.
"""
from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import metrics as M
from .attacks import (
    ATTACKS,
    AttackBudget,
    AttackContext,
    AttackResult,
    Edit,
    attackable_vocab,
)
from .attacks import _appended_sequence
from .data import (
    SyntheticSpec,
    TransactionSequence,
    generate_synthetic,
    read_dataset,
    split_target_substitute,
    write_dataset,
)
from .defenses import AdvTrainConfig, adversarial_train, build_detection_corpus, train_detector
from .models import CausalLM, MaskedLM, SequenceClassifier, load_model, save_model
from .service import ScoringClient
from .validation import ValidationError

TRAIN_FILE = "train.jsonl"
VAL_FILE = "val.jsonl"
TEST_FILE = "test.jsonl"
TARGET_FILE = "target.json"
SUBSTITUTE_FILE = "substitute.json"
MLM_FILE = "mlm.json"
CAUSAL_FILE = "causal_lm.json"


def _path(out_dir, name):
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------------------
# generate


def run_generate(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    d = cfg["dataset"]
    spec = SyntheticSpec(
        n_sequences=d["n_sequences"],
        num_classes=d["num_classes"],
        vocab_size=d["vocab_size"],
        signal_strength=d["signal_strength"],
        signature_size=d["signature_size"],
        common_tilt=d["common_tilt"],
        length_range=tuple(d["length_range"]),
        zipf_exponent=d["zipf_exponent"],
        amount_median=d["amount_median"],
        amount_sigma=d["amount_sigma"],
        amount_token_spread=d["amount_token_spread"],
        seed=cfg["seeds"]["data"],
    )
    data = generate_synthetic(spec)
    held = split_target_substitute(
        data, 1.0 - d["test_fraction"], seed=cfg["seeds"]["test_split"]
    )
    pool, test = held.target, held.substitute
    held2 = split_target_substitute(
        pool,
        1.0 - d["val_fraction"] / (1.0 - d["test_fraction"]),
        seed=cfg["seeds"]["test_split"] + 1,
    )
    train, val = held2.target, held2.substitute
    write_dataset(_path(out_dir, TRAIN_FILE), train)
    write_dataset(_path(out_dir, VAL_FILE), val)
    write_dataset(_path(out_dir, TEST_FILE), test)
    return {"train": len(train), "val": len(val), "test": len(test)}


# ---------------------------------------------------------------------------
# train


def _classifier_from_cfg(model_cfg, train_cfg, vocab_size, seed):
    return SequenceClassifier(
        architecture=model_cfg["architecture"],
        hidden_size=model_cfg["hidden_size"],
        token_dim=model_cfg["token_dim"],
        amount_dim=model_cfg["amount_dim"],
        cnn_filters=model_cfg["cnn_filters"],
        kernel_width=model_cfg["kernel_width"],
        pooling=model_cfg["pooling"],
        dropout=model_cfg["dropout"],
        n_bins=model_cfg["n_bins"],
        vocab_size=vocab_size,
        batch_size=train_cfg["batch_size"],
        max_epochs=train_cfg["max_epochs"],
        patience=train_cfg["patience"],
        learning_rate=train_cfg["learning_rate"],
        validation_fraction=train_cfg["validation_fraction"],
        seed=seed,
    )


def run_train(cfg, out_dir, with_lms=True):
    vocab = cfg["dataset"]["vocab_size"]
    train = read_dataset(_path(out_dir, TRAIN_FILE), vocab)
    test = read_dataset(_path(out_dir, TEST_FILE), vocab)
    split = split_target_substitute(train, cfg["split_fraction"], seed=cfg["seeds"]["split"])

    target = _classifier_from_cfg(cfg["target"], cfg["train"], vocab, cfg["seeds"]["target"])
    target.fit(split.target)
    substitute = _classifier_from_cfg(
        cfg["substitute"], cfg["train"], vocab, cfg["seeds"]["substitute"]
    )
    substitute.fit(split.substitute)
    save_model(target, _path(out_dir, TARGET_FILE))
    save_model(substitute, _path(out_dir, SUBSTITUTE_FILE))

    y_test = np.array([s.label for s in test])
    rows = [
        ("target", cfg["target"]["architecture"],
         float(np.mean(target.predict(test) == y_test)), len(split.target)),
        ("substitute", cfg["substitute"]["architecture"],
         float(np.mean(substitute.predict(test) == y_test)), len(split.substitute)),
    ]
    if with_lms:
        lm_cfg = cfg["lm"]
        mlm = MaskedLM(
            hidden_size=lm_cfg["hidden_size"], token_dim=lm_cfg["token_dim"],
            amount_dim=lm_cfg["amount_dim"], mask_rate=lm_cfg["mask_rate"],
            n_bins=lm_cfg["n_bins"], vocab_size=vocab,
            batch_size=lm_cfg["batch_size"], max_epochs=lm_cfg["max_epochs"],
            patience=lm_cfg["patience"], learning_rate=lm_cfg["learning_rate"],
            seed=cfg["seeds"]["mlm"],
        )
        mlm.fit(split.substitute)
        save_model(mlm, _path(out_dir, MLM_FILE))
        causal = CausalLM(
            hidden_size=lm_cfg["hidden_size"], token_dim=lm_cfg["token_dim"],
            amount_dim=lm_cfg["amount_dim"], n_bins=lm_cfg["n_bins"],
            vocab_size=vocab, batch_size=lm_cfg["batch_size"],
            max_epochs=lm_cfg["max_epochs"], patience=lm_cfg["patience"],
            learning_rate=lm_cfg["learning_rate"], seed=cfg["seeds"]["causal_lm"],
        )
        causal.fit(split.substitute)
        save_model(causal, _path(out_dir, CAUSAL_FILE))
    M.write_csv(
        _path(out_dir, "train_report.csv"),
        "txadv.train_report.v1",
        ("model", "architecture", "clean_accuracy", "n_train"),
        rows,
    )
    return {row[0]: row[2] for row in rows}


# ---------------------------------------------------------------------------
# scoring helpers


class LocalScorer:
    """Scores sequences with an in-process model; counts queries."""

    def __init__(self, model):
        self.model = model
        self.query_count = 0

    def score(self, seq):
        self.query_count += 1
        probs = self.model.predict_proba([seq])[0]
        label = int(self.model.classes_[int(np.argmax(probs))])
        return label, probs


class RemoteScorer:
    """Scores sequences through the wire protocol; the attacker process
    holds no target parameters."""

    def __init__(self, address):
        host, _, port = address.rpartition(":")
        if not host:
            raise ValidationError("remote address must look like host:port")
        self.client = ScoringClient(host, int(port))

    @property
    def query_count(self):
        return self.client.query_count

    def score(self, seq):
        response = self.client.query_sequence(seq)
        proba = np.asarray(response.proba) if response.proba is not None else None
        return response.label, proba


def _budget_from_entry(entry, tau_value=None):
    fields = {k: v for k, v in entry.items() if k != "name"}
    if fields.get("tau") == "auto":
        fields["tau"] = tau_value
    return AttackBudget(**fields)


def calibrate_tau(causal_lm, sequences, quantile=0.95) -> float:
    """Perplexity threshold at the given quantile of clean sequences."""
    if not sequences:
        raise ValidationError("tau calibration needs clean sequences")
    pps = [causal_lm.perplexity(s.tokens, s.amounts) for s in sequences]
    return float(np.quantile(pps, quantile))


def _needs_mlm(entries):
    return any(e["name"] in ("sf", "concat_sf", "seq_concat_sf") for e in entries)


def _needs_causal(entries):
    return any(e["name"] == "lm_fgsm" for e in entries)


# ---------------------------------------------------------------------------
# attack


def run_attack(cfg, out_dir, remote=None):
    vocab = cfg["dataset"]["vocab_size"]
    test = read_dataset(_path(out_dir, TEST_FILE), vocab)
    examples = test[: cfg["eval"]["n_examples"]]
    if not examples:
        raise ValidationError("no test examples to attack")

    white_box = cfg["eval"]["white_box"]
    if remote is not None and white_box:
        raise ValidationError("white-box mode requires local target access")
    substitute = load_model(
        _path(out_dir, TARGET_FILE if white_box else SUBSTITUTE_FILE)
    )
    entries = cfg["attacks"]
    mlm = load_model(_path(out_dir, MLM_FILE)) if _needs_mlm(entries) else None
    causal = None
    if _needs_causal(entries) or os.path.exists(_path(out_dir, CAUSAL_FILE)):
        causal = load_model(_path(out_dir, CAUSAL_FILE))
    tau_value = None
    if any(e.get("tau") == "auto" for e in entries):
        val = read_dataset(_path(out_dir, VAL_FILE), vocab)
        tau_value = calibrate_tau(causal, val, cfg["tau_quantile"])

    scorer = RemoteScorer(remote) if remote else LocalScorer(load_model(_path(out_dir, TARGET_FILE)))

    ctx = AttackContext(
        substitute=substitute,
        discretizer=substitute.discretizer_,
        vocab=attackable_vocab(vocab),
        mlm=mlm,
        causal_lm=causal,
        seed=cfg["seeds"]["attack"],
    )

    reports = []
    log_lines = []
    for a_idx, entry in enumerate(entries):
        attack_fn = ATTACKS[entry["name"]]
        budget = _budget_from_entry(entry, tau_value)
        pairs = []
        results = []
        for i, seq in enumerate(examples):
            run_ctx = ctx.with_seed(cfg["seeds"]["attack"] + 10_000 * a_idx + i)
            result = attack_fn(seq, run_ctx, budget)
            before = scorer.query_count
            pred_orig, proba_orig = scorer.score(seq)
            pred_adv, proba_adv = scorer.score(result.adversarial)
            result.target_queries = scorer.query_count - before
            conf_orig = conf_adv = None
            if cfg["eval"]["mode"] == "proba" and proba_orig is not None and proba_adv is not None:
                # confidence in the class predicted for the original input
                idx = int(np.argmax(proba_orig))
                conf_orig = float(proba_orig[idx])
                conf_adv = float(proba_adv[idx])
            pairs.append(
                M.EvalPair(
                    original_tokens=tuple(int(t) for t in seq.tokens),
                    adversarial_tokens=tuple(int(t) for t in result.adversarial.tokens),
                    label=seq.label,
                    pred_original=pred_orig,
                    pred_adversarial=pred_adv,
                    conf_original=conf_orig,
                    conf_adversarial=conf_adv,
                )
            )
            results.append(result)
            log_lines.append(
                {
                    "attack": entry["name"],
                    "client_id": seq.client_id,
                    "label": seq.label,
                    "original_mcc": [int(t) for t in seq.tokens],
                    "adversarial_mcc": [int(t) for t in result.adversarial.tokens],
                    "adversarial_amount": [float(a) for a in result.adversarial.amounts],
                    "edits": [
                        {"position": e.position, "old": e.old, "new": e.new, "kind": e.kind}
                        for e in result.edits
                    ],
                    "sub_conf_before": result.conf_before,
                    "sub_conf_after": result.conf_after,
                    "target_pred_before": pred_orig,
                    "target_pred_after": pred_adv,
                    "target_queries": result.target_queries,
                }
            )
        added = sum(len(r.edits) for r in results)
        have_conf = all(
            p.conf_original is not None and p.conf_adversarial is not None for p in pairs
        )
        reports.append(
            M.MetricsReport(
                attack=entry["name"],
                dataset=cfg["dataset_name"],
                nad=M.nad(pairs),
                wer=M.mean_wer(pairs),
                aa=M.adversarial_accuracy(pairs),
                pd=M.probability_difference(pairs) if have_conf else None,
                diversity=M.diversity_rate(results, attackable_vocab(vocab).size),
                repetition=M.repetition_rate(results) if added else None,
                perplexity=M.mean_perplexity(results, causal) if causal else None,
            )
        )
    M.write_metrics_csv(_path(out_dir, "metrics.csv"), reports)
    with open(_path(out_dir, "results.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for line in log_lines:
            fh.write(json.dumps(line) + "\n")
    return reports


# ---------------------------------------------------------------------------
# sweeps


def _attack_entry_by_name(cfg, name):
    for entry in cfg["attacks"]:
        if entry["name"] == name:
            return entry
    return {"name": name}


def _evaluate_attack(cfg, attack_name, budget, examples, target, ctx, seed_base):
    attack_fn = ATTACKS[attack_name]
    pairs = []
    for i, seq in enumerate(examples):
        result = attack_fn(seq, ctx.with_seed(seed_base + i), budget)
        pred_orig = int(target.predict([seq])[0])
        pred_adv = int(target.predict([result.adversarial])[0])
        probs_orig = target.predict_proba([seq])[0]
        probs_adv = target.predict_proba([result.adversarial])[0]
        idx = int(np.searchsorted(target.classes_, pred_orig))
        pairs.append(
            M.EvalPair(
                original_tokens=tuple(int(t) for t in seq.tokens),
                adversarial_tokens=tuple(int(t) for t in result.adversarial.tokens),
                label=seq.label,
                pred_original=pred_orig,
                pred_adversarial=pred_adv,
                conf_original=float(probs_orig[idx]),
                conf_adversarial=float(probs_adv[idx]),
            )
        )
    return pairs


def run_sweep(cfg, out_dir, axis):
    vocab = cfg["dataset"]["vocab_size"]
    test = read_dataset(_path(out_dir, TEST_FILE), vocab)
    examples = test[: cfg["sweep"]["n_examples"]]
    target = load_model(_path(out_dir, TARGET_FILE))
    substitute = load_model(_path(out_dir, SUBSTITUTE_FILE))
    if axis not in ("amount_limit", "k_wer", "num_samples", "seq_length"):
        raise ValidationError(f"unknown sweep axis {axis!r}")
    axis_cfg = cfg["sweep"][axis]
    attack_name = axis_cfg["attack"]
    entry = _attack_entry_by_name(cfg, attack_name)
    mlm = None
    if attack_name in ("sf", "concat_sf", "seq_concat_sf"):
        mlm = load_model(_path(out_dir, MLM_FILE))
    ctx = AttackContext(
        substitute=substitute,
        discretizer=substitute.discretizer_,
        vocab=attackable_vocab(vocab),
        mlm=mlm,
        causal_lm=None,
        seed=cfg["seeds"]["attack"],
    )
    rows = []
    if axis == "seq_length":
        budget = _budget_from_entry(entry)
        pairs = _evaluate_attack(
            cfg, attack_name, budget, examples, target, ctx, cfg["seeds"]["attack"]
        )
        lengths = np.array([len(p.original_tokens) for p in pairs])
        groups = axis_cfg["groups"]
        edges = np.quantile(lengths, np.linspace(0, 1, groups + 1))
        for gi in range(groups):
            lo, hi = edges[gi], edges[gi + 1]
            mask = (
                (lengths >= lo) & (lengths <= hi)
                if gi == groups - 1
                else (lengths >= lo) & (lengths < hi)
            )
            group = [p for p, m in zip(pairs, mask) if m]
            if not group:
                continue
            flipped = [
                M.wer(p.original_tokens, p.adversarial_tokens)
                for p in group
                if p.pred_original != p.pred_adversarial
            ]
            rows.append(
                (
                    gi,
                    float(lo),
                    float(hi),
                    len(group),
                    M.adversarial_accuracy(group),
                    float(np.mean(flipped)) if flipped else None,
                )
            )
        M.write_csv(
            _path(out_dir, "sweep_seq_length.csv"),
            "txadv.sweep_seq_length.v1",
            ("group", "length_lo", "length_hi", "n", "AA", "mean_wer_flipped"),
            rows,
        )
        return rows
    grid = axis_cfg["grid"]
    budget_field = {"amount_limit": "amount_limit", "k_wer": "k", "num_samples": "num_samples"}[axis]
    for value in grid:
        budget = _budget_from_entry(entry)
        budget = dataclasses.replace(budget, **{budget_field: value})
        pairs = _evaluate_attack(
            cfg, attack_name, budget, examples, target, ctx,
            cfg["seeds"]["attack"] + 100_000 * grid.index(value),
        )
        rows.append(
            (
                axis,
                value,
                attack_name,
                len(pairs),
                M.adversarial_accuracy(pairs),
                M.probability_difference(pairs),
                M.mean_wer(pairs),
                M.nad(pairs),
            )
        )
    M.write_csv(
        _path(out_dir, f"sweep_{axis}.csv"),
        f"txadv.sweep_{axis}.v1",
        ("axis", "value", "attack", "n", "AA", "PD", "WER", "NAD"),
        rows,
    )
    return rows


# ---------------------------------------------------------------------------
# defend


def run_defend(cfg, out_dir):
    vocab = cfg["dataset"]["vocab_size"]
    train = read_dataset(_path(out_dir, TRAIN_FILE), vocab)
    val = read_dataset(_path(out_dir, VAL_FILE), vocab)
    test = read_dataset(_path(out_dir, TEST_FILE), vocab)
    split = split_target_substitute(train, cfg["split_fraction"], seed=cfg["seeds"]["split"])
    target = load_model(_path(out_dir, TARGET_FILE))
    substitute = load_model(_path(out_dir, SUBSTITUTE_FILE))
    d = cfg["defense"]
    entries = {e["name"]: e for e in cfg["attacks"]}
    needs_mlm = _needs_mlm(
        [{"name": d["attack"]}] + [{"name": n} for n in d["detector_attacks"]]
    )
    mlm = load_model(_path(out_dir, MLM_FILE)) if needs_mlm else None
    ctx = AttackContext(
        substitute=substitute,
        discretizer=substitute.discretizer_,
        vocab=attackable_vocab(vocab),
        mlm=mlm,
        causal_lm=None,
        seed=cfg["seeds"]["defense"],
    )

    # adversarial training sweep (mean and spread of AA over repeated runs)
    attack_fn = ATTACKS[d["attack"]]
    budget = _budget_from_entry(_attack_entry_by_name(cfg, d["attack"]))
    eval_examples = test[: d["n_eval"]]
    adv_rows = []
    for count in d["counts"]:
        aa_values = []
        clean_values = []
        for s in range(d["n_seeds"]):
            seed = cfg["seeds"]["defense"] + 31 * s
            adv_cfg = AdvTrainConfig(
                count=count, fine_tune_epochs=d["fine_tune_epochs"], seed=seed
            )
            hardened = adversarial_train(
                target, attack_fn, ctx.with_seed(seed), budget, split.target, adv_cfg
            )
            flips = 0
            for i, seq in enumerate(eval_examples):
                result = attack_fn(seq, ctx.with_seed(seed + 1000 + i), budget)
                po = int(hardened.predict([seq])[0])
                pa = int(hardened.predict([result.adversarial])[0])
                flips += po != pa
            aa_values.append(1.0 - flips / len(eval_examples))
            y = np.array([s_.label for s_ in test])
            clean_values.append(float(np.mean(hardened.predict(test) == y)))
        adv_rows.append(
            (
                count,
                float(np.mean(aa_values)),
                float(np.std(aa_values)),
                float(np.mean(clean_values)),
                d["n_seeds"],
            )
        )
    M.write_csv(
        _path(out_dir, "defense_advtrain.csv"),
        "txadv.defense_advtrain.v1",
        ("examples_added", "mean_AA", "std_AA", "mean_clean_accuracy", "n_seeds"),
        adv_rows,
    )

    # detection accuracy per attack, plus the no-signal control
    det_rows = []
    for name in d["detector_attacks"]:
        fn = ATTACKS[name]
        det_budget = _budget_from_entry(_attack_entry_by_name(cfg, name))
        sequences, labels = build_detection_corpus(
            fn, ctx, det_budget, val, d["detector_examples"], seed=cfg["seeds"]["defense"]
        )
        detector = train_detector(
            sequences, labels, epochs=d["detector_epochs"],
            seed=cfg["seeds"]["defense"], vocab_size=vocab,
            hidden_size=48, token_dim=24, batch_size=32, learning_rate=0.0025,
        )
        det_rows.append((name, cfg["dataset_name"], detector.accuracy_))
    rng = np.random.default_rng(cfg["seeds"]["defense"])
    n = min(d["detector_examples"], len(val) // 2)
    order = rng.permutation(len(val))
    control_seqs = [val[i] for i in order[: 2 * n]]
    control_labels = np.array([0] * n + [1] * n)
    control = train_detector(
        control_seqs, control_labels, epochs=d["detector_epochs"],
        seed=cfg["seeds"]["defense"], vocab_size=vocab,
    )
    det_rows.append(("control_real_vs_real", cfg["dataset_name"], control.accuracy_))
    M.write_csv(
        _path(out_dir, "defense_detection.csv"),
        "txadv.defense_detection.v1",
        ("attack", "dataset", "accuracy"),
        det_rows,
    )
    return adv_rows, det_rows


# ---------------------------------------------------------------------------
# realism report


def _baseline_results(kind, examples, k, vocab, token_freq, seed):
    """Random-insertion baselines shaped like attack results.

    ``unif_rand`` draws appended tokens uniformly over the attackable
    vocabulary; ``distr_rand`` draws them by their training-set frequency.
    """
    rng = np.random.default_rng(seed)
    ids = attackable_vocab(vocab)
    weights = token_freq[ids]
    weights = weights / weights.sum()
    out = []
    for seq in examples:
        if kind == "unif_rand":
            new = rng.choice(ids, size=k)
        else:
            new = rng.choice(ids, size=k, p=weights)
        amounts = np.full(k, float(np.median(seq.amounts)))
        adv = _appended_sequence(seq, new, amounts)
        edits = [Edit(len(seq) + i, None, int(t), "append") for i, t in enumerate(new)]
        out.append(
            AttackResult(
                original=seq, adversarial=adv, edits=edits, wer=len(edits),
                conf_before=0.0, conf_after=0.0, flipped=False,
            )
        )
    return out


def run_report(cfg, out_dir):
    vocab = cfg["dataset"]["vocab_size"]
    train = read_dataset(_path(out_dir, TRAIN_FILE), vocab)
    test = read_dataset(_path(out_dir, TEST_FILE), vocab)
    causal = load_model(_path(out_dir, CAUSAL_FILE))
    results_path = _path(out_dir, "results.jsonl")
    if not os.path.exists(results_path):
        raise ValidationError("run the attack command first: results.jsonl is missing")

    by_attack = {}
    with open(results_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            adv = TransactionSequence.from_arrays(
                rec["client_id"], rec["label"], rec["adversarial_mcc"],
                rec["adversarial_amount"],
                np.arange(1, len(rec["adversarial_mcc"]) + 1) * 60 + 1_600_000_000,
            )
            orig = next(s for s in test if s.client_id == rec["client_id"])
            edits = [
                Edit(e["position"], e["old"], e["new"], e["kind"]) for e in rec["edits"]
            ]
            result = AttackResult(
                original=orig, adversarial=adv, edits=edits, wer=len(edits),
                conf_before=rec["sub_conf_before"], conf_after=rec["sub_conf_after"],
                flipped=False,
            )
            by_attack.setdefault(rec["attack"], []).append(result)

    token_freq = np.zeros(vocab)
    for seq in train:
        np.add.at(token_freq, seq.tokens, 1.0)

    r = cfg["report"]
    examples = test[: r["baseline_samples"]]
    vocab_n = attackable_vocab(vocab).size
    rows = []
    for kind in ("unif_rand", "distr_rand"):
        results = _baseline_results(
            kind, examples, r["baseline_k"], vocab, token_freq, cfg["seeds"]["attack"]
        )
        rows.append(
            (
                kind,
                M.diversity_rate(results, vocab_n),
                M.repetition_rate(results),
                M.mean_perplexity(results, causal),
            )
        )
    for name, results in sorted(by_attack.items()):
        added = sum(len(x.edits) for x in results)
        rows.append(
            (
                name,
                M.diversity_rate(results, vocab_n),
                M.repetition_rate(results) if added else None,
                M.mean_perplexity(results, causal),
            )
        )
    M.write_csv(
        _path(out_dir, "report_realism.csv"),
        "txadv.report_realism.v1",
        ("attack", "diversity_rate", "repetition_rate", "perplexity"),
        rows,
    )

    # token histograms: original corpus vs inserted tokens per attack
    hist_rows = []
    original_counts = np.zeros(vocab, dtype=np.int64)
    for seq in test:
        np.add.at(original_counts, seq.tokens, 1)
    for token in np.flatnonzero(original_counts):
        hist_rows.append(("original", int(token), int(original_counts[token])))
    for name, results in sorted(by_attack.items()):
        counts = np.zeros(vocab, dtype=np.int64)
        for result in results:
            for e in result.edits:
                counts[e.new] += 1
        for token in np.flatnonzero(counts):
            hist_rows.append((name, int(token), int(counts[token])))
    M.write_csv(
        _path(out_dir, "report_token_hist.csv"),
        "txadv.report_token_hist.v1",
        ("series", "token", "count"),
        hist_rows,
    )

    # amount histograms: original amounts vs amounts of appended transactions
    all_amounts = np.concatenate([s.amounts for s in test])
    inserted = []
    for name, results in sorted(by_attack.items()):
        for result in results:
            for e in result.edits:
                if e.kind == "append":
                    inserted.append((name, result.adversarial.amounts[e.position]))
    upper = float(np.quantile(all_amounts, 0.99))
    edges = np.linspace(0.0, upper, r["histogram_bins"] + 1)
    amount_rows = []
    counts, _ = np.histogram(all_amounts, bins=edges)
    for b in range(r["histogram_bins"]):
        amount_rows.append(("original", float(edges[b]), float(edges[b + 1]), int(counts[b])))
    for name in sorted({n for n, _ in inserted}):
        values = [a for n2, a in inserted if n2 == name]
        counts, _ = np.histogram(values, bins=edges)
        for b in range(r["histogram_bins"]):
            amount_rows.append((name, float(edges[b]), float(edges[b + 1]), int(counts[b])))
    M.write_csv(
        _path(out_dir, "report_amount_hist.csv"),
        "txadv.report_amount_hist.v1",
        ("series", "amount_lo", "amount_hi", "count"),
        amount_rows,
    )
    return rows


def run_calibrate_tau(cfg, out_dir, quantile=None):
    vocab = cfg["dataset"]["vocab_size"]
    causal = load_model(_path(out_dir, CAUSAL_FILE))
    val = read_dataset(_path(out_dir, VAL_FILE), vocab)
    q = cfg["tau_quantile"] if quantile is None else quantile
    tau = calibrate_tau(causal, val, q)
    payload = {"tau": tau, "quantile": q, "n_sequences": len(val)}
    with open(_path(out_dir, "tau.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    return payload
