"""Command-line front end: ``sdabn generate | train | eval | report``.

Run layout under the config's ``output_dir``::

    checkpoints/<stage>-<key>.ckpt     shared by every run of that output dir
    <run id>/config.yaml               resolved config snapshot
    <run id>/metrics.csv               test-split metrics written by ``train``
    <run id>/eval-<noise>.csv          written by ``eval``
    <run id>/dumps/<split>-<noise>/    optional PNG dumps

Unit 0 rows in a CSV describe the noisy input itself. Exit codes: 0 success,
2 configuration error, 3 data error, 4 checkpoint mismatch, 1 anything else.
"""

from __future__ import annotations

import csv
import io
import logging
import re
import shutil
from collections import defaultdict
from pathlib import Path

import click
import numpy as np
import yaml

from . import metrics as M
from .config import ExperimentConfig, resolve_output
from .errors import SdabnError, UsageError
from .noise import NoiseSpec
from .pipeline import (
    evaluate_config,
    load_split,
    load_trained_cascade,
    noisy_inputs,
    prepare_dataset,
    run_id,
    train_progressive,
)

log = logging.getLogger("sdabn")


class _Group(click.Group):
    """Maps package errors to their exit codes instead of tracebacks."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except SdabnError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


def _load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig.from_dict({})
    return cfg.with_overrides(overrides) if overrides else cfg


def _noise_override(kind, sigma, peak, base: dict) -> dict | None:
    if kind is None and sigma is None and peak is None:
        return None
    kind = kind or ("poisson" if peak is not None else "gaussian")
    out = {"kind": kind, "seed": base.get("seed", 0)}
    if kind == "gaussian":
        out["sigma"] = sigma if sigma is not None else base.get("sigma", 50)
    else:
        out["peak"] = peak if peak is not None else base.get("peak", 255)
    return out


def _run_overrides(seed, variant, blocks, tail_seg, noise_kind, sigma, peak, base: ExperimentConfig) -> dict:
    out: dict = {}
    if seed is not None:
        out["seed"] = seed
    model = {}
    if variant is not None:
        model["variant"] = variant
    if blocks is not None:
        model["blocks"] = blocks
    if tail_seg is not None:
        model["tail_segmentation"] = tail_seg
    if model:
        out["model"] = model
    noise = _noise_override(noise_kind, sigma, peak, base.raw["noise"])
    if noise is not None:
        out["noise"] = noise
    return out


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


def _input_record(images: np.ndarray, indices: np.ndarray, noise: NoiseSpec) -> M.MetricsRecord:
    y = noisy_inputs(images, indices, noise, np.float64)
    ps = [M.psnr(x.transpose(1, 2, 0), v.transpose(1, 2, 0)) for x, v in zip(images, y)]
    ss = [M.ssim(x.transpose(1, 2, 0), v.transpose(1, 2, 0)) for x, v in zip(images, y)]
    return M.MetricsRecord(0, len(images), psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))


def _split_rows(cfg: ExperimentConfig, cascade, split: str, noise: NoiseSpec, dump_dir: Path | None):
    images, _, indices = load_split(cfg, split)
    records = [_input_record(images, indices, noise)] + evaluate_config(cfg, cascade, split, noise, dump_dir)
    return M.metrics_rows(run_id(cfg), split, records)


def _write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


_common = [
    click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML experiment config."),
    click.option("--seed", type=int, help="Override the global seed."),
    click.option("--variant", type=click.Choice(["conditioned", "plain", "img-condition", "gt-condition", "joint"])),
    click.option("--blocks", type=click.IntRange(min=1), help="Number of blocks n."),
    click.option("--tail-seg/--no-tail-seg", default=None, help="Append a segmenter after the last block."),
    click.option("--noise-kind", type=click.Choice(["gaussian", "poisson"])),
    click.option("--sigma", type=float, help="Gaussian sigma on the 0-255 scale."),
    click.option("--peak", type=float, help="Poisson peak intensity."),
    click.option("--force", is_flag=True, help="Overwrite existing outputs."),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log training progress.")
def main(verbose: bool):
    """Segmentation-aware cascaded denoising experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, help="Dataset seed.")
@click.option("--force", is_flag=True)
def generate(config_path, seed, force):
    """Render the synthetic dataset and its train/test manifests."""
    cfg = _load_config(config_path, {"dataset": {"seed": seed}} if seed is not None else {})
    root = cfg.dataset_root
    _refuse_existing(root / "manifest.txt", force)
    for sub in ("clean", "labels"):
        shutil.rmtree(root / sub, ignore_errors=True)
    train, test = prepare_dataset(cfg)
    click.echo(str(root / "manifest.txt"))
    click.echo(f"train {len(train)}  test {len(test)}")


@main.command()
@_with_common
@click.option("--retrain", is_flag=True, help="Ignore cached stage checkpoints.")
def train(config_path, seed, variant, blocks, tail_seg, noise_kind, sigma, peak, force, retrain):
    """Train a cascade stage by stage and write test-split metrics."""
    base = _load_config(config_path, {})
    cfg = base.with_overrides(_run_overrides(seed, variant, blocks, tail_seg, noise_kind, sigma, peak, base))
    run_dir = cfg.output_dir / run_id(cfg)
    out = run_dir / "metrics.csv"
    _refuse_existing(out, force)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    cascade, _ = train_progressive(cfg, retrain=retrain)
    _write(out, M.format_csv(_split_rows(cfg, cascade, "test", cfg.noise, None)))
    click.echo(str(out))


@main.command(name="eval")
@_with_common
@click.option("--split", "splits", multiple=True, type=click.Choice(["train", "test"]), help="Repeatable.")
@click.option("--dump-images", is_flag=True, help="Write denoised and colour-coded segmentation PNGs.")
def eval_cmd(config_path, seed, variant, blocks, tail_seg, noise_kind, sigma, peak, force, splits, dump_images):
    """Evaluate trained checkpoints, optionally under a different noise model."""
    base = _load_config(config_path, {})
    cfg = base.with_overrides(_run_overrides(seed, variant, blocks, tail_seg, None, None, None, base))
    noise_dict = _noise_override(noise_kind, sigma, peak, cfg.raw["noise"])
    noise = NoiseSpec.from_dict(noise_dict) if noise_dict else cfg.noise
    run_dir = cfg.output_dir / run_id(cfg)
    out = run_dir / f"eval-{noise.label}.csv"
    _refuse_existing(out, force)
    cascade = load_trained_cascade(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in splits or ("test",):
        dump = run_dir / "dumps" / f"{split}-{noise.label}" if dump_images else None
        if dump is not None and dump.exists():
            shutil.rmtree(dump)
        rows += _split_rows(cfg, cascade, split, noise, dump)
    _write(out, M.format_csv(rows))
    click.echo(str(out))


# --------------------------------------------------------------------------
# report

_LABEL = re.compile(r"^(gaussian)-s([0-9.eE+-]+)$|^(poisson)-p([0-9.eE+-]+)$")


def _noise_of_label(label: str) -> tuple[str, float]:
    m = _LABEL.match(label)
    if not m:
        raise UsageError(f"cannot parse noise label {label!r}")
    return ("gaussian", float(m.group(2))) if m.group(1) else ("poisson", float(m.group(4)))


def collect_runs(run_dirs: list[Path]) -> list[dict]:
    """All metric rows of the given run directories, tagged with their noise."""
    missing = [str(d) for d in run_dirs if not (d / "metrics.csv").exists() and not list(d.glob("eval-*.csv"))]
    if missing:
        raise UsageError("no metrics found for run(s): " + ", ".join(missing))
    rows = []
    for d in run_dirs:
        files = []
        if (d / "metrics.csv").exists():
            snap = yaml.safe_load((d / "config.yaml").read_text()) if (d / "config.yaml").exists() else {}
            noise = NoiseSpec.from_dict(snap["noise"]).label if snap.get("noise") else "unknown"
            files.append((d / "metrics.csv", noise))
        files += [(p, p.stem[len("eval-"):]) for p in sorted(d.glob("eval-*.csv"))]
        for path, label in files:
            for r in M.read_csv(path.read_text(encoding="utf-8")):
                r["noise"] = label
                r["source"] = path.name
                rows.append(r)
    return rows


def summarize(rows: list[dict]) -> tuple[list[str], list[list[str]]]:
    """Pivot: one row per (split, metric, unit), one column per run and noise level."""
    series = sorted({(r["experiment"], r["noise"]) for r in rows})
    cols = [f"{e}@{n}" for e, n in series]
    table: dict[tuple, dict] = defaultdict(dict)
    for r in rows:
        table[(r["split"], r["metric"], int(r["unit"]))][f"{r['experiment']}@{r['noise']}"] = r["value"]
    order = {m: i for i, m in enumerate(M.METRIC_NAMES)}
    keys = sorted(table, key=lambda k: (k[0], order.get(k[1], 99), k[2]))
    header = ["split", "metric", "unit"] + cols
    body = [[s, m, str(u)] + [table[(s, m, u)].get(c, "") for c in cols] for s, m, u in keys]
    return header, body


def _text_table(header: list[str], body: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) or 1 for r in body)) for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*["-" * w for w in widths])]
    lines += [fmt.format(*[c or "-" for c in r]) for r in body]
    return "\n".join(lines) + "\n"


def _plots(rows: list[dict], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    by_metric: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for r in rows:
        if int(r["unit"]) > 0:
            by_metric[(r["split"], r["metric"])].append(r)
    for (split, metric), rs in sorted(by_metric.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        lines: dict[str, list] = defaultdict(list)
        for r in rs:
            lines[f"{r['experiment']}@{r['noise']}"].append((int(r["unit"]), float(r["value"])))
        for name, pts in sorted(lines.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xlabel("unit")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} vs unit ({split})")
        ax.legend(fontsize=6)
        path = out / f"{split}_{metric}_vs_unit.png"
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

        # metric of each run's final unit against the gaussian noise level
        sweep: dict[str, dict[float, tuple[int, float]]] = defaultdict(dict)
        for r in rs:
            kind, level = _noise_of_label(r["noise"]) if r["noise"] != "unknown" else (None, None)
            if kind != "gaussian":
                continue
            unit, prev = int(r["unit"]), sweep[r["experiment"]].get(level)
            if prev is None or unit > prev[0]:
                sweep[r["experiment"]][level] = (unit, float(r["value"]))
        if sweep:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for name, pts in sorted(sweep.items()):
                xs = sorted(pts)
                ax.plot(xs, [pts[x][1] for x in xs], marker="o", label=name)
            ax.set_xlabel("sigma")
            ax.set_ylabel(metric)
            ax.set_title(f"{metric} vs sigma ({split})")
            ax.legend(fontsize=6)
            path = out / f"{split}_{metric}_vs_sigma.png"
            fig.tight_layout()
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    return written


@main.command()
@click.argument("runs", nargs=-1, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", default="report", show_default=True, help="Report directory.")
@click.option("--force", is_flag=True)
def report(runs, out_dir, force):
    """Merge run directories into a summary table and line plots."""
    if not runs:
        raise UsageError("report needs at least one run directory")
    rows = collect_runs([resolve_output(r) for r in runs])
    if not rows:
        raise UsageError("the given runs contain no metric rows")
    out = resolve_output(out_dir)
    _refuse_existing(out / "summary.csv", force)
    out.mkdir(parents=True, exist_ok=True)
    header, body = summarize(rows)
    _write(out / "summary.txt", _text_table(header, body))
    _write(out / "summary.csv", _csv_lines(header, body))
    plots = _plots(rows, out)
    click.echo(str(out / "summary.txt"))
    click.echo(f"{len(plots)} plot(s)")


def _csv_lines(header, body) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    return buf.getvalue()


if __name__ == "__main__":
    main()
