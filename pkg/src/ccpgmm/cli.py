"""Command-line entry point: ``ccpgmm simulate | fit | classify | evaluate``.

Every command accepts ``--config FILE`` whose keys mirror the flag names
(with underscores).  Values from the file take precedence over flags
unless ``--force-flags`` is given, in which case flags typed on the
command line win.  The resolved configuration is written to
``config.json`` in the output directory.
"""

from __future__ import annotations

import json
import logging
import math
import os
import sys
import time
import warnings
from pathlib import Path

import click
import numpy as np
from click.core import ParameterSource

from . import aecm, classify as classify_mod, consensus, hsi, metrics, simgen
from .errors import CcpgmmError, UnreadableFileError, ValidationError

log = logging.getLogger("ccpgmm")

# outputs that legitimately differ between otherwise identical runs
NONDETERMINISTIC_FILES = ("timings.json",)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_config(ctx: click.Context, params: dict) -> dict:
    """Merge ``--config`` values with flags according to ``--force-flags``."""
    cfg_path = params.pop("config", None)
    force = params.pop("force_flags", False)
    if cfg_path is None:
        return params
    try:
        with open(cfg_path) as fh:
            file_cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFileError(f"cannot read config {cfg_path}: {exc}") from exc
    unknown = sorted(set(file_cfg) - set(params))
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(unknown)}")
    merged = dict(params)
    for key, value in file_cfg.items():
        typed = ctx.get_parameter_source(key) == ParameterSource.COMMANDLINE
        if not (force and typed):
            merged[key] = value
    return merged


def _common(f):
    f = click.option("--force-flags", is_flag=True, help="Let command-line flags override the config file.")(f)
    f = click.option("--config", type=click.Path(dir_okay=False), default=None, help="JSON file of parameters.")(f)
    return f


class _Timer:
    def __init__(self):
        self.marks = {}
        self._t = time.perf_counter()

    def mark(self, name):
        now = time.perf_counter()
        self.marks[name] = round(now - self._t, 6)
        self._t = now


def _load_table(images_dir) -> hsi.PixelTable:
    return hsi.flatten_images(hsi.load_image_dir(images_dir))


def _positive(name, value, minimum=1):
    if value is None or value < minimum:
        raise ValidationError(f"{name} must be >= {minimum} (got {value})")


# ---------------------------------------------------------------- commands


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def cli(verbose):
    """Consensus-constrained PGMM clustering of hyperspectral pixels."""
    logging.basicConfig(level=logging.WARNING - 10 * verbose, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--scenario", type=click.Choice(["low", "mild", "high", "synthetic-cereal"]), default="low")
@click.option("--seed", type=int, default=0)
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk")
@click.option("--preset", type=click.Choice(["large", "small"]), default="large", help="Cereal constraint preset.")
@click.option("--heldout/--no-heldout", default=False, help="Also write a multi-grain test image (cereal only).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_common
@click.pass_context
def simulate(ctx, **params):
    """Generate a simulated dataset with truth rasters and constraints."""
    cfg = resolve_config(ctx, params)
    timer = _Timer()
    out = Path(cfg["out"])
    if cfg["scenario"] == "synthetic-cereal":
        ds = simgen.gen_synthetic_cereal(scale=cfg["scale"], preset=cfg["preset"], seed=cfg["seed"])
    else:
        ds = simgen.gen_scenario(simgen.scenario_spec(cfg["scenario"], cfg["seed"], cfg["scale"]))
    simgen.write_dataset(ds, out)
    summary = {
        "n_pixels": ds.n_pixels,
        "p": ds.table.n_vars,
        "images": ds.table.image_ids,
        "class_counts": np.bincount(ds.labels, minlength=5)[1:],
        "constrained_pixels": int(sum(len(b) for b in ds.constraints.blocks)),
        "constraint_groups": {n: len(b) for n, b in zip(ds.constraints.names, ds.constraints.blocks)},
    }
    if cfg["heldout"]:
        if cfg["scenario"] != "synthetic-cereal":
            raise ValidationError("--heldout is only available for the synthetic-cereal scenario")
        held = simgen.gen_heldout(ds.params, cfg["scale"], seed=np.random.SeedSequence([cfg["seed"], 1]))
        simgen.write_dataset(held, out / "heldout")
        summary["heldout_pixels"] = held.n_pixels
    timer.mark("simulate")
    write_json(out / "config.json", cfg)
    write_json(out / "summary.json", summary)
    write_json(out / "timings.json", timer.marks)
    click.echo(f"wrote {summary['n_pixels']} pixels over {len(summary['images'])} images to {out}")


@cli.command()
@click.option("--images", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--constraints", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--no-constraints", is_flag=True, default=False)
@click.option("--G", "G", type=int, default=4)
@click.option("--q", type=int, default=1)
@click.option("--M", "M", type=int, default=25)
@click.option("--d", type=int, default=20)
@click.option("--seed", type=int, default=0)
@click.option("--rel-tol", type=float, default=1e-6)
@click.option("--max-iterations", type=int, default=1000)
@click.option("--psi-floor", type=float, default=1e-6)
@click.option("--negative-mode", type=click.Choice(["exact", "pairwise"]), default="exact")
@click.option("--parallelism", type=int, default=os.cpu_count() or 1)
@click.option("--standardize/--no-standardize", default=False)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_common
@click.pass_context
def fit(ctx, **params):
    """Fit the consensus model and write label/uncertainty rasters."""
    cfg = resolve_config(ctx, params)
    if (cfg["constraints"] is None) == (not cfg["no_constraints"]):
        raise click.UsageError("give exactly one of --constraints FILE or --no-constraints")
    if cfg["constraints"] is not None and not Path(cfg["constraints"]).is_file():
        raise click.UsageError(f"constraints file {cfg['constraints']!r} does not exist")
    for key in ("G", "q", "M", "d", "max_iterations", "parallelism"):
        _positive(key, cfg[key])
    opts = aecm.FitOptions(cfg["max_iterations"], cfg["rel_tol"], cfg["seed"], cfg["psi_floor"], cfg["negative_mode"])
    timer = _Timer()
    table = _load_table(cfg["images"])
    cons = None if cfg["no_constraints"] else hsi.build_constraints(cfg["constraints"], table)
    if not 1 <= cfg["d"] < table.n_vars:
        raise ValidationError(f"d must satisfy 1 <= d < p (d={cfg['d']}, p={table.n_vars})")
    if not cfg["q"] < cfg["d"]:
        raise ValidationError(f"q must be smaller than d (q={cfg['q']}, d={cfg['d']})")
    if cfg["G"] > table.n_pixels:
        raise ValidationError("G exceeds the number of pixels")
    timer.mark("load")
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        result = consensus.run_ccpgmm(
            table, cons, cfg["G"], cfg["q"], cfg["M"], cfg["d"], opts,
            parallelism=cfg["parallelism"], standardize=cfg["standardize"],
        )
    timer.mark("fit")
    out = Path(cfg["out"])
    consensus.export_result(result, table, out / "rasters")
    consensus.save_ensemble(result.ensemble, out / "ensemble")
    write_json(out / "summary.json", result.summary())
    write_json(
        out / "similarity_summary.json",
        {"cluster_mean_similarity": consensus.cluster_similarity(result.ensemble.posteriors, result.labels, cfg["G"])},
    )
    timer.mark("write")
    write_json(out / "config.json", cfg)
    write_json(out / "timings.json", timer.marks)
    click.echo(f"clustered {table.n_pixels} pixels into {result.achieved_clusters} clusters -> {out}")


@cli.command("classify")
@click.option("--ensemble", type=click.Path(exists=True, file_okay=False), required=True,
              help="A fit output directory or its ensemble/ subdirectory.")
@click.option("--images", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_common
@click.pass_context
def classify_cmd(ctx, **params):
    """Label new images with a fitted ensemble."""
    cfg = resolve_config(ctx, params)
    timer = _Timer()
    ens_dir = Path(cfg["ensemble"])
    if (ens_dir / "ensemble").is_dir():
        ens_dir = ens_dir / "ensemble"
    ensemble = consensus.load_ensemble(ens_dir)
    table = _load_table(cfg["images"])
    timer.mark("load")
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        res = classify_mod.classify_pixels(table, ensemble)
    timer.mark("classify")
    out = Path(cfg["out"])
    classify_mod.export_classification(res, table, out / "rasters")
    write_json(
        out / "summary.json",
        {
            "M": res.M,
            "G": ensemble.G,
            "n_pixels": table.n_pixels,
            "label_counts": np.bincount(res.labels, minlength=ensemble.G + 1)[1:],
            "mean_uncertainty": float(res.uncertainty.mean()),
            "flagged_alignments": [m for m, a in enumerate(res.alignments) if a.flagged],
        },
    )
    write_json(out / "config.json", cfg)
    write_json(out / "timings.json", timer.marks)
    click.echo(f"classified {table.n_pixels} pixels with {res.M} subset models -> {out}")


def _load_label_dir(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    if (directory / "rasters").is_dir():
        directory = directory / "rasters"
    if (directory / "truth").is_dir():
        directory = directory / "truth"
    out = {}
    for path in sorted(directory.glob("*.labels.json")):
        image_id, raster = hsi.load_raster(path)
        out[image_id] = raster.astype(np.int64)
    if not out:
        raise UnreadableFileError(f"no label rasters in {directory}")
    return out


@cli.command()
@click.option("--pred", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--truth", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@_common
@click.pass_context
def evaluate(ctx, **params):
    """Compare predicted label rasters with truth rasters."""
    cfg = resolve_config(ctx, params)
    timer = _Timer()
    pred, truth = _load_label_dir(cfg["pred"]), _load_label_dir(cfg["truth"])
    if set(pred) != set(truth):
        raise ValidationError(f"image sets differ: predicted {sorted(pred)}, truth {sorted(truth)}")
    ids = sorted(truth)
    for i in ids:
        if pred[i].shape != truth[i].shape:
            raise ValidationError(f"raster shapes differ for image {i!r}")
    t = np.concatenate([truth[i].ravel() for i in ids])
    p = np.concatenate([pred[i].ravel() for i in ids])
    G = int(max(t.max(), p.max()))
    report = {
        "n_pixels": int(t.size),
        "images": ids,
        "ari": metrics.adjusted_rand_index(t, p),
        "matched_accuracy": metrics.matched_accuracy(t, p),
        "confusion": metrics.confusion(t, p, G),
        "per_image_ari": {i: metrics.adjusted_rand_index(truth[i].ravel(), pred[i].ravel()) if truth[i].size > 1 else None for i in ids},
    }
    timer.mark("evaluate")
    out = Path(cfg["out"])
    write_json(out / "report.json", report)
    write_json(out / "config.json", cfg)
    write_json(out / "timings.json", timer.marks)
    click.echo(f"ARI = {report['ari']:.6f}  matched accuracy = {report['matched_accuracy']:.6f}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ccpgmm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except CcpgmmError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except OSError as exc:
        click.echo(f"I/O error: {exc}", err=True)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
