"""Command-line interface.

Subcommands: train, eval, sweep, serve, client, bitmap, export, pareto.
All flags are long-form. A key-value config file (one "key value" or
"key=value" per line, '#' comments) may be given with --config; values from
the file override flags of the same name. Exit codes: 0 success, 1 config
error, 2 numeric failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys

import click
import numpy as np

from . import bench as B
from . import nets as N
from . import runtime as R
from . import training as TR
from .coder import CoderError
from .layers import ConfigError
from .nets import NumericError
from .tensor import ShapeError


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, val = line.partition("=")
            else:
                key, _, val = line.partition(" ")
            key, val = key.strip().replace("-", "_"), val.strip()
            if not key or not val:
                raise ConfigError(f"{path}:{ln}: expected 'key value' or 'key=value'")
            out[key] = val
    return out


def _merge(ctx_params: dict, config: str | None) -> dict:
    """Config-file values override same-named flags, coerced to the flag's type."""
    params = dict(ctx_params)
    if config:
        for key, val in parse_config_file(config).items():
            if key not in params:
                raise ConfigError(f"unknown config key {key!r}")
            ref = params[key]
            if isinstance(ref, bool):
                params[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(ref, int):
                params[key] = int(val)
            elif isinstance(ref, float):
                params[key] = float(val)
            else:
                params[key] = val
    return params


def _ints(csv: str) -> list[int]:
    return [int(v) for v in csv.split(",") if v]


def _floats(csv: str) -> list[float]:
    return [float(v) for v in csv.split(",") if v]


def _strs(csv: str) -> list[str]:
    return [v for v in csv.split(",") if v]


@click.group()
def cli() -> None:
    """Split-computing entropy-bottleneck toolkit."""


@cli.command()
@click.option("--config", default=None, help="key-value config file; overrides flags")
@click.option("--regime", default="two-stage",
              type=click.Choice(["reference", "ghnd", "two-stage", "end-to-end", "crbq"]))
@click.option("--dataset", default="synthetic:seed=0,n=512,classes=4", help="dataset spec")
@click.option("--blocks", default="1,1", help="residual blocks per stage")
@click.option("--widths", default="8,16", help="channels per stage")
@click.option("--placement", default="layer2", type=click.Choice(N.PLACEMENTS))
@click.option("--channels", default=4, type=int, help="bottleneck channels")
@click.option("--prior", default="factorized", type=click.Choice(["factorized", "hyperprior"]))
@click.option("--teacher", default=None, help="teacher bundle path (required unless end-to-end/reference)")
@click.option("--beta", default=0.01, type=float)
@click.option("--alpha", default=0.5, type=float)
@click.option("--tau", default=1.0, type=float)
@click.option("--epochs", default=10, type=int)
@click.option("--epochs-stage2", default=5, type=int)
@click.option("--lr", default=1e-3, type=float)
@click.option("--lr-stage2", default=1e-2, type=float)
@click.option("--batch-size", default=32, type=int)
@click.option("--schedule", default="poly", type=click.Choice(["poly", "constant"]))
@click.option("--seed", default=0, type=int)
@click.option("--metrics", default=None, help="metrics CSV path")
@click.option("--out", required=True, help="output bundle path (written as .json + .sctw)")
def train(config, **kw):
    """Train a reference classifier or a split model."""
    p = _merge(dict(kw, config=None), config)
    ds = B.parse_dataset_spec(p["dataset"])
    ref_cfg = N.ReferenceConfig(blocks=_ints(p["blocks"]), widths=_ints(p["widths"]),
                                classes=ds.classes)
    tc = TR.TrainConfig(
        regime=p["regime"] if p["regime"] != "reference" else "two-stage",
        beta=p["beta"], alpha=p["alpha"], tau=p["tau"], epochs=p["epochs"],
        epochs_stage2=p["epochs_stage2"], lr=p["lr"], lr_stage2=p["lr_stage2"],
        batch_size=p["batch_size"], schedule=p["schedule"], seed=p["seed"],
        log_path=p["metrics"])
    if p["regime"] == "reference":
        model = N.build_reference(ref_cfg, p["seed"])
        TR.train_reference(model, ds.images, ds.labels, tc)
        B.save_reference_bundle(model, p["out"])
        click.echo(f"teacher accuracy {B.evaluate_reference(model, ds):.4f} -> {p['out']}")
        return
    if p["regime"] == "end-to-end":
        ref, teacher = N.build_reference(ref_cfg, p["seed"]), None
    else:
        if not p["teacher"]:
            raise ConfigError(f"regime {p['regime']!r} requires --teacher")
        ref = B.load_bundle(p["teacher"])
        if not isinstance(ref, N.ReferenceModel):
            raise ConfigError("--teacher must point to a reference bundle")
        teacher = TR.TeacherHandle(ref, p["placement"])
    model = N.inject_bottleneck(ref, p["placement"], p["channels"], p["prior"],
                                seed=p["seed"])
    model = TR.train(model, teacher, ds.images, ds.labels, tc)
    B.save_split_bundle(model, p["out"], ref.seed, p["seed"])
    acc, rate = B.evaluate(model, ds)
    click.echo(f"train accuracy {acc:.4f}  rate {rate:.1f} B  -> {p['out']}")


@cli.command("eval")
@click.option("--config", default=None)
@click.option("--model", required=True, help="split-model bundle path")
@click.option("--dataset", required=True, help="dataset spec")
def eval_cmd(config, **kw):
    """Evaluate accuracy and rate of a split model."""
    p = _merge(dict(kw, config=None), config)
    model = B.load_bundle(p["model"])
    if isinstance(model, N.ReferenceModel):
        raise ConfigError("eval expects a split-model bundle")
    ds = B.parse_dataset_spec(p["dataset"])
    acc, rate = B.evaluate(model, ds)
    exrd = model.encoder_size() * rate
    click.echo(json.dumps({
        "accuracy": acc, "rate_bytes": rate, "encoder_bits": model.encoder_size(),
        "encoder_macs": model.encoder_macs(), "exrd": exrd}))


@cli.command("sweep")
@click.option("--config", default=None)
@click.option("--teacher", required=True, help="teacher bundle path")
@click.option("--train-dataset", required=True, help="training dataset spec")
@click.option("--eval-dataset", required=True, help="evaluation dataset spec")
@click.option("--betas", default="0.01")
@click.option("--placements", default="layer2")
@click.option("--channels", default="4")
@click.option("--priors", default="factorized")
@click.option("--regimes", default="two-stage")
@click.option("--seeds", default="0")
@click.option("--epochs", default=5, type=int)
@click.option("--epochs-stage2", default=3, type=int)
@click.option("--lr", default=1e-3, type=float)
@click.option("--lr-stage2", default=1e-2, type=float)
@click.option("--batch-size", default=32, type=int)
@click.option("--cache-dir", default=None)
@click.option("--out", required=True, help="records JSON output path")
def sweep_cmd(config, **kw):
    """Cross-product sweep over betas/placements/channels/priors/regimes."""
    p = _merge(dict(kw, config=None), config)
    teacher = B.load_bundle(p["teacher"])
    if not isinstance(teacher, N.ReferenceModel):
        raise ConfigError("--teacher must point to a reference bundle")
    tc = TR.TrainConfig(epochs=p["epochs"], epochs_stage2=p["epochs_stage2"],
                        lr=p["lr"], lr_stage2=p["lr_stage2"],
                        batch_size=p["batch_size"])
    spec = B.SweepSpec(teacher.cfg, teacher, tc,
                       B.parse_dataset_spec(p["train_dataset"]),
                       B.parse_dataset_spec(p["eval_dataset"]),
                       betas=_floats(p["betas"]), placements=_strs(p["placements"]),
                       channels=_ints(p["channels"]), prior_kinds=_strs(p["priors"]),
                       regimes=_strs(p["regimes"]), seeds=_ints(p["seeds"]),
                       cache_dir=p["cache_dir"])
    records = B.sweep(spec)
    B.export_records(records, p["out"], "json")
    click.echo(f"{len(records)} records ({len(spec.last_trained)} trained) -> {p['out']}")


@cli.command("serve")
@click.option("--config", default=None)
@click.option("--model", required=True, help="split-model bundle path")
@click.option("--endpoint", default=None, help="host:port; default $SC2_PORT")
def serve_cmd(config, **kw):
    """Run the edge-side decoder+tail server (blocks until interrupted)."""
    p = _merge(dict(kw, config=None), config)
    model = B.load_bundle(p["model"])
    server = R.serve(model, p["endpoint"])
    click.echo(f"serving on {server.address[0]}:{server.address[1]}")
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()


@cli.command("client")
@click.option("--config", default=None)
@click.option("--model", required=True, help="split-model bundle path")
@click.option("--endpoint", default=None, help="host:port; default $SC2_PORT")
@click.option("--dataset", required=True, help="dataset spec")
@click.option("--samples", default=16, type=int)
@click.option("--bandwidth", default=37500.0, type=float, help="channel bits/second")
def client_cmd(config, **kw):
    """Run device-side inference against a server and report accounting."""
    p = _merge(dict(kw, config=None), config)
    model = B.load_bundle(p["model"])
    ds = B.parse_dataset_spec(p["dataset"])
    n = min(p["samples"], len(ds))
    endpoint = p["endpoint"] or f"127.0.0.1:{R.default_port()}"
    channel = R.ChannelModel(p["bandwidth"])
    hits, total_bytes, total_s = 0, 0, 0.0
    with R.SplitClient(model, endpoint, channel) as cli_:
        for i in range(n):
            probs, sent, latency = cli_.infer(ds.images[i])
            hits += int(np.argmax(probs) == ds.labels[i])
            total_bytes += sent
            total_s += latency
    click.echo(json.dumps({"samples": n, "accuracy": hits / n,
                           "mean_sent_bytes": total_bytes / n,
                           "mean_latency_s": total_s / n}))


@cli.command("bitmap")
@click.option("--config", default=None)
@click.option("--model", required=True, help="split-model bundle path")
@click.option("--dataset", required=True, help="dataset spec")
@click.option("--index", default=0, type=int, help="sample index")
@click.option("--out-text", default=None, help="plain-text matrix path")
@click.option("--out-pgm", default=None, help="grayscale PGM path")
def bitmap_cmd(config, **kw):
    """Export the per-cell bit-allocation map of one sample."""
    p = _merge(dict(kw, config=None), config)
    model = B.load_bundle(p["model"])
    ds = B.parse_dataset_spec(p["dataset"])
    grid, total = B.bit_allocation_map(model, ds.images[p["index"]])
    if p["out_text"]:
        B.write_text_matrix(grid, p["out_text"])
    if p["out_pgm"]:
        B.write_pgm(grid, p["out_pgm"])
    click.echo(f"grid {grid.shape[0]}x{grid.shape[1]}, total {total:.2f} bits")


@cli.command("export")
@click.option("--config", default=None)
@click.option("--records", "records_path", required=True, help="records JSON path")
@click.option("--out", required=True)
@click.option("--format", "fmt", default="csv", type=click.Choice(["csv", "json"]))
def export_cmd(config, records_path, **kw):
    """Re-export sweep records as CSV or JSON."""
    p = _merge(dict(kw, config=None, records_path=records_path), config)
    records = B.load_records_json(p["records_path"])
    B.export_records(records, p["out"], p["fmt"])
    click.echo(f"{len(records)} records -> {p['out']}")


@cli.command("pareto")
@click.option("--config", default=None)
@click.option("--records", "records_path", required=True, help="records JSON path")
@click.option("--axes", default="rate,distortion,encoder")
@click.option("--out", default=None, help="optional JSON output path")
def pareto_cmd(config, records_path, **kw):
    """Print (and optionally save) the non-dominated records."""
    p = _merge(dict(kw, config=None, records_path=records_path), config)
    records = B.load_records_json(p["records_path"])
    front = B.pareto_front(records, tuple(_strs(p["axes"])))
    if p["out"]:
        B.export_records(front, p["out"], "json")
    for r in front:
        click.echo(f"{r.label}: rate {r.rate_bytes:.1f} B, acc {r.distortion:.4f}, "
                   f"enc {r.encoder_bits} bits, exrd {r.exrd:.3g}")


def main() -> int:
    try:
        cli.main(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        return 1
    except (ConfigError, B.IngestionError, CoderError, ShapeError, R.ProtocolError,
            FileNotFoundError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except (NumericError, ArithmeticError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
