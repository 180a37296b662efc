"""``cacc`` command line: data generation, PCS training, pretraining, adaptation, evaluation, rendering.

Every command reads one experiment config (JSON, defaults via
``--print-default-config``), writes its artifacts under the output directory
through write-temp-then-rename, and leaves a ``run.json`` provenance record.
Exit status: 0 on success, 1 for invalid input or missing prerequisites,
2 for numerical failure.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import _backend
from .adapt import ABLATIONS, CounterNet, ablation_config, adapt_train, evaluate, normalize_seg, harden_seg
from .adapt import predict_density, pretrain_source, segmentation_maps
from .checkpoint import CheckpointError, atomic_write_bytes, load_arrays, save_arrays
from .config import ExperimentConfig, load_config
from .dataset import load_dataset, save_dataset, synth_generate
from .pcs import WeakLearner, bag_accuracy, coverage, train_weak_learner
from .pgm import render, write_pgm
from .tensor import NonFiniteError

log = logging.getLogger("cacc")

PCS_CKPT = Path("pcs") / "weak_learner.ckpt"
PRETRAIN_CKPT = Path("pretrain") / "counter.ckpt"


class MissingPrerequisite(click.ClickException):
    pass


# -- helpers ---------------------------------------------------------------------------

def _versions():
    try:
        own = metadata.version("cacc")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"cacc": own, "numpy": np.__version__, "python": platform.python_version(),
            "backend": _backend.active()}


def _write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _write_jsonl(path, records):
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    atomic_write_bytes(path, text.encode("utf-8"))


def _provenance(stage_dir, command, cfg: ExperimentConfig, **extra):
    _write_json(Path(stage_dir) / "run.json", {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "ablation": cfg.ablation,
        "versions": _versions(),
        **extra,
    })


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing prerequisite checkpoint {path} (run `cacc {producer}` first)")
    return path


def _load_domain(cfg, domain):
    d = cfg.data_dir(domain)
    if not (d / "manifest.json").exists():
        raise MissingPrerequisite(f"missing {domain} dataset at {d} (run `cacc gen-data` first)")
    return load_dataset(d)


def _load_learner(cfg) -> WeakLearner:
    path = _require(cfg.out_dir() / PCS_CKPT, "train-pcs")
    model = WeakLearner(cfg.source.channels, cfg.pcs.width)
    model.load_state_dict(load_arrays(path))
    model.trained = True
    return model


def _new_counter(cfg) -> CounterNet:
    return CounterNet(cfg.source.channels, cfg.train.widths, seed=cfg.seed)


def _load_counter(cfg, path) -> CounterNet:
    net = _new_counter(cfg)
    net.load_state_dict(load_arrays(path))
    return net


def _adapt_dir(cfg) -> Path:
    return cfg.out_dir() / "adapt" / cfg.ablation


# -- commands --------------------------------------------------------------------------

def run_gen_data(cfg: ExperimentConfig):
    for domain, synth in (("source", cfg.source), ("target", cfg.target)):
        ds = synth_generate(synth)
        save_dataset(ds, cfg.data_dir(domain))
        click.echo(f"{domain}: {len(ds.train)} train / {len(ds.test)} test scenes -> {cfg.data_dir(domain)}")
    _provenance(cfg.out_dir() / "data", "gen-data", cfg)


def run_train_pcs(cfg: ExperimentConfig):
    src = _load_domain(cfg, "source")
    records = []
    model = train_weak_learner(src, cfg.anchors, cfg.pcs, seed=cfg.seed,
                               callback=lambda it, loss: records.append({"iter": it, "l_bag": loss}))
    stage = cfg.out_dir() / "pcs"
    save_arrays(stage / "weak_learner.ckpt", model.state_dict())
    _write_jsonl(stage / "metrics.jsonl", records)
    report = {}
    if src.test:
        acc, balanced = bag_accuracy(model, src.test, cfg.anchors)
        report = {"bag_accuracy": acc, "balanced_bag_accuracy": balanced}
        click.echo(f"held-out bag accuracy {acc:.4f} (balanced {balanced:.4f})")
    _write_json(stage / "report.json", report)
    _provenance(stage, "train-pcs", cfg)


def _coverage_of(model, scenes):
    hits = total = 0
    for sc, raw in zip(scenes, segmentation_maps(model, scenes)):
        hard = harden_seg(normalize_seg(raw))
        hits += coverage(hard, sc.points) / 100.0 * sc.count
        total += sc.count
    return 100.0 if total == 0 else 100.0 * hits / total


def run_seg(cfg: ExperimentConfig):
    model = _load_learner(cfg)
    stage = cfg.out_dir() / "seg"
    report = {}
    for domain in ("source", "target"):
        ds = _load_domain(cfg, domain)
        scenes = ds.test or ds.train
        arrays = {}
        for sc, raw in zip(scenes, segmentation_maps(model, scenes)):
            soft = normalize_seg(raw)
            hard = harden_seg(soft)
            arrays[f"{sc.name}.soft"] = soft
            arrays[f"{sc.name}.hard"] = hard
            write_pgm(stage / domain / f"{sc.name}.soft.pgm", render(soft))
            write_pgm(stage / domain / f"{sc.name}.hard.pgm", render(hard))
        save_arrays(stage / f"{domain}.ckpt", arrays)
        report[f"{domain}_coverage"] = _coverage_of(model, scenes)
        click.echo(f"{domain}: {len(scenes)} maps, coverage {report[f'{domain}_coverage']:.1f}%")
    _write_json(stage / "report.json", report)
    _provenance(stage, "seg", cfg)


def run_pretrain(cfg: ExperimentConfig):
    src = _load_domain(cfg, "source")
    counter = _new_counter(cfg)
    records = []
    pretrain_source(counter, src, cfg.train, seed=cfg.seed, density_config=cfg.density, on_record=records.append)
    stage = cfg.out_dir() / "pretrain"
    save_arrays(stage / "counter.ckpt", counter.state_dict())
    _write_jsonl(stage / "metrics.jsonl", records)
    _provenance(stage, "pretrain", cfg)
    click.echo(f"pretrained {len(records)} iterations, final loss {records[-1]['l_den']:.6g}" if records
               else "pretrained 0 iterations")


def run_adapt(cfg: ExperimentConfig):
    pre_path = _require(cfg.out_dir() / PRETRAIN_CKPT, "pretrain")
    stage = _adapt_dir(cfg)
    counter = _load_counter(cfg, pre_path)
    records = []
    if cfg.ablation != "source-only":
        train_cfg = ablation_config(cfg.train, cfg.ablation)
        needs_pcs = train_cfg.gate == "pcs" or train_cfg.lambda_cda > 0
        learner = _load_learner(cfg) if needs_pcs else None
        src = _load_domain(cfg, "source")
        tgt = _load_domain(cfg, "target")
        records, _ = adapt_train(counter, learner, src, tgt, train_cfg, seed=cfg.seed,
                                     density_config=cfg.density)
    save_arrays(stage / "counter.ckpt", counter.state_dict())
    _write_jsonl(stage / "metrics.jsonl", records)
    _provenance(stage, "adapt", cfg)
    click.echo(f"{cfg.ablation}: {len(records)} adaptation iterations -> {stage / 'counter.ckpt'}")


def run_eval(cfg: ExperimentConfig, checkpoint=None, oracle=False):
    tgt = _load_domain(cfg, "target")
    if not tgt.test:
        raise ValueError("target test split is empty; nothing to evaluate")
    gt = np.array([sc.count for sc in tgt.test], dtype=np.float64)
    scale = cfg.train.density_scale
    stage = cfg.out_dir() / "eval" / ("oracle" if oracle else cfg.ablation)
    if oracle:
        from .density import mae, rmse

        report = {"mae": mae(gt, gt), "rmse": rmse(gt, gt)}
        est = gt.copy()
    else:
        path = Path(checkpoint) if checkpoint else _require(_adapt_dir(cfg) / "counter.ckpt", "adapt")
        if not path.exists():
            raise MissingPrerequisite(f"missing checkpoint {path}")
        counter = _load_counter(cfg, path)
        result = evaluate(counter, tgt.test, scale)
        est = np.array(result["counts"])
        report = {"mae": result["mae"], "rmse": result["rmse"]}
        maps = {sc.name: predict_density(counter, sc.chw(), scale) for sc in tgt.test}
        save_arrays(stage / "density.ckpt", maps)
    pcs_path = cfg.out_dir() / PCS_CKPT
    report["coverage"] = _coverage_of(_load_learner(cfg), tgt.test) if pcs_path.exists() else None
    report["n_images"] = len(tgt.test)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "predicted", "ground_truth"])
    for sc, e in zip(tgt.test, est):
        writer.writerow([sc.name, repr(float(e)), sc.count])
    atomic_write_bytes(stage / "counts.csv", buf.getvalue().encode("utf-8"))
    _write_json(stage / "report.json", report)
    _provenance(stage, "eval", cfg, checkpoint=None if oracle else str(checkpoint or _adapt_dir(cfg) / "counter.ckpt"))
    cov = "n/a" if report["coverage"] is None else f"{report['coverage']:.1f}%"
    click.echo(f"MAE {report['mae']:.4f}  RMSE {report['rmse']:.4f}  coverage {cov}")
    return report


def run_render(artifact, name=None, out=None):
    arrays = load_arrays(artifact)
    if name is not None:
        if name not in arrays:
            raise ValueError(f"{artifact} has no array named {name!r}")
        arrays = {name: arrays[name]}
    if not arrays:
        raise ValueError(f"{artifact} holds no arrays")
    out = Path(out) if out else Path(artifact).with_suffix("")
    single = len(arrays) == 1 and out.suffix == ".pgm"
    written = []
    for key, arr in arrays.items():
        arr = np.squeeze(arr)
        if arr.ndim != 2:
            raise ValueError(f"array {key!r} has shape {arr.shape}; only 2-D maps can be rendered")
        target = out if single else out / f"{key}.pgm"
        write_pgm(target, render(arr))
        written.append(target)
    click.echo(f"wrote {len(written)} image(s)" + (f" to {written[0]}" if single else f" under {out}"))
    return written


# -- click wiring ---------------------------------------------------------------------------

def _resolve(config_path, seed, ablation, out) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if ablation is not None:
        changes["ablation"] = ablation
    if out is not None:
        changes["paths"] = dataclasses.replace(cfg.paths, out=str(out))
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _common(fn):
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(fn)
    fn = click.option("--ablation", type=click.Choice(ABLATIONS), default=None, help="Ablation mode.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="Experiment config JSON.")(fn)
    return fn


def _print_default(ctx, _param, value):
    if value and not ctx.resilient_parsing:
        click.echo(json.dumps(ExperimentConfig().to_dict(), indent=2))
        ctx.exit(0)


@click.group()
@click.option("--print-default-config", is_flag=True, expose_value=False, is_eager=True, callback=_print_default,
              help="Print the default experiment config and exit.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Crowd-aware domain adaptation for crowd counting."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")


@cli.command("gen-data")
@_common
def gen_data_cmd(config_path, seed, ablation, out):
    """Generate the synthetic source and target datasets."""
    run_gen_data(_resolve(config_path, seed, ablation, out))


@cli.command("train-pcs")
@_common
def train_pcs_cmd(config_path, seed, ablation, out):
    """Train the point-supervised crowd segmentation learner on the source domain."""
    run_train_pcs(_resolve(config_path, seed, ablation, out))


@cli.command("seg")
@_common
def seg_cmd(config_path, seed, ablation, out):
    """Export soft and hard crowd segmentations for both domains."""
    run_seg(_resolve(config_path, seed, ablation, out))


@cli.command("pretrain")
@_common
def pretrain_cmd(config_path, seed, ablation, out):
    """Supervised counter training on the source domain."""
    run_pretrain(_resolve(config_path, seed, ablation, out))


@cli.command("adapt")
@_common
def adapt_cmd(config_path, seed, ablation, out):
    """Adapt the pretrained counter to the target domain."""
    run_adapt(_resolve(config_path, seed, ablation, out))


@cli.command("eval")
@_common
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Counter checkpoint (default: the adapt output for the ablation).")
@click.option("--oracle", is_flag=True, help="Score the ground truth against itself.")
def eval_cmd(config_path, seed, ablation, out, checkpoint, oracle):
    """Evaluate on the target test split; writes report.json and counts.csv."""
    run_eval(_resolve(config_path, seed, ablation, out), checkpoint, oracle)


@cli.command("render")
@click.argument("artifact", type=click.Path(exists=True, dir_okay=False))
@click.option("--name", default=None, help="Array to render (default: all).")
@click.option("--out", type=click.Path(), default=None, help="Output .pgm file or directory.")
def render_cmd(artifact, name, out):
    """Render stored density or segmentation maps as 8-bit PGM images."""
    run_render(artifact, name, out)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="cacc", standalone_mode=False)
    except NonFiniteError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 2
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (ValueError, FileNotFoundError, CheckpointError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
