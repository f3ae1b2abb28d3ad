"""Command-line interface around the experiment pipeline.

Every command takes --config (JSON experiment file), an optional --out
override for the output directory, and an optional --seed that re-derives
all named seeds from one master value. Failures print one machine-readable
JSON line to stderr and exit nonzero.
"""
from __future__ import annotations

import functools
import json
import sys

import click

from . import harness
from .config import ConfigError, apply_master_seed, load_config
from .data import DatasetFormatError
from .models import load_model
from .service import serve
from .validation import ValidationError


def _fail(exc):
    line = json.dumps({"error": {"type": type(exc).__name__, "message": str(exc)}})
    click.echo(line, err=True)
    sys.exit(1)


def _load(config_path, out, seed):
    cfg = load_config(config_path)
    if seed is not None:
        cfg = apply_master_seed(cfg, seed)
    out_dir = out if out else cfg["out_dir"]
    return cfg, out_dir


def pipeline_command(fn):
    @click.option("--config", "config_path", required=True,
                  type=click.Path(exists=True, dir_okay=False))
    @click.option("--out", default=None, type=click.Path(file_okay=False),
                  help="Output directory (defaults to the config's out_dir).")
    @click.option("--seed", default=None, type=int,
                  help="Master seed overriding the config's seeds block.")
    @functools.wraps(fn)
    def wrapper(config_path, out, seed, **kwargs):
        try:
            cfg, out_dir = _load(config_path, out, seed)
            fn(cfg, out_dir, **kwargs)
        except (ConfigError, ValidationError, DatasetFormatError,
                ConnectionError, OSError) as exc:
            _fail(exc)

    return wrapper


@click.group()
def main():
    """Adversarial attacks and defenses for transaction-sequence models."""


@main.command()
@pipeline_command
def generate(cfg, out_dir):
    """Generate the synthetic dataset files (train/val/test)."""
    counts = harness.run_generate(cfg, out_dir)
    click.echo(json.dumps({"written": counts, "out_dir": out_dir}))


@main.command()
@click.option("--skip-lms", is_flag=True, help="Train only the classifiers.")
@pipeline_command
def train(cfg, out_dir, skip_lms):
    """Train target and substitute classifiers plus the attacker's LMs."""
    report = harness.run_train(cfg, out_dir, with_lms=not skip_lms)
    click.echo(json.dumps({"clean_accuracy": report}))


@main.command()
@click.option("--remote", default=None,
              help="host:port of a scoring service; the target checkpoint is never loaded.")
@pipeline_command
def attack(cfg, out_dir, remote):
    """Run the configured attacks and emit metrics.csv / results.jsonl."""
    reports = harness.run_attack(cfg, out_dir, remote=remote)
    click.echo(json.dumps({r.attack: {"AA": r.aa, "WER": r.wer} for r in reports}))


@main.command()
@click.option("--axis", required=True,
              type=click.Choice(["amount_limit", "k_wer", "num_samples", "seq_length"]))
@pipeline_command
def sweep(cfg, out_dir, axis):
    """Grid evaluation along one budget or data axis."""
    rows = harness.run_sweep(cfg, out_dir, axis)
    click.echo(json.dumps({"axis": axis, "rows": len(rows)}))


@main.command()
@pipeline_command
def defend(cfg, out_dir):
    """Adversarial-training sweep and detector training."""
    adv_rows, det_rows = harness.run_defend(cfg, out_dir)
    click.echo(json.dumps({"advtrain_points": len(adv_rows),
                           "detector_rows": len(det_rows)}))


@main.command()
@pipeline_command
def report(cfg, out_dir):
    """Realism metrics (diversity, repetition, perplexity) and histograms."""
    rows = harness.run_report(cfg, out_dir)
    click.echo(json.dumps({"realism_rows": len(rows)}))


@main.command("calibrate-tau")
@click.option("--quantile", default=None, type=float)
@pipeline_command
def calibrate_tau(cfg, out_dir, quantile):
    """Pick the LM FGSM perplexity threshold from clean validation data."""
    payload = harness.run_calibrate_tau(cfg, out_dir, quantile)
    click.echo(json.dumps(payload))


@main.command("serve")
@click.option("--model", "which", default="target",
              type=click.Choice(["target", "substitute"]))
@click.option("--mode", default="label", type=click.Choice(["label", "proba"]))
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=0, type=int)
@pipeline_command
def serve_cmd(cfg, out_dir, which, mode, host, port):
    """Serve a trained checkpoint behind the line-oriented JSON protocol."""
    checkpoint = harness.TARGET_FILE if which == "target" else harness.SUBSTITUTE_FILE
    model = load_model(harness._path(out_dir, checkpoint))
    server = serve(model, host=host, port=port, mode=mode, background=False)
    bound = server.server_address
    click.echo(json.dumps({"serving": which, "mode": mode,
                           "address": f"{bound[0]}:{bound[1]}"}))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


if __name__ == "__main__":
    main()
