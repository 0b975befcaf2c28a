"""Config-driven runs and prompt-depth / prompt-length sweeps, with their on-disk outputs.

Run directory layout::

    summary.csv               seed,method,avg_acc,forgetting,prompt_length,prompt_depth
    per_task.csv              task_trained,task_evaluated,accuracy,selected_task_mode
    selection_histogram.csv   true_task,selected_task,count   (incprompt only)
    split_manifest.csv        path,label,task_id
    checkpoint.pt             (incprompt only)
    manifest.json             config, seed, code hash, completion flag
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch

from .backbone import PromptSchedule
from .config import ExperimentConfig, from_dict
from .data import load_image_folder, split_classes, synthetic_gaussian_tasks, write_manifest
from .errors import ConfigError
from .trainer import (ContinualReport, run_baseline, run_incprompt, save_checkpoint, write_histogram_csv,
                      write_summary_csv, write_task_csv)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SWEEP_AXES = ("prompt_depth", "prompt_length")
SWEEP_CSV_HEADER = ("axis_value", "avg_acc", "forgetting", "seed")


def code_hash() -> str:
    """sha256 over the package's source files, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def build_stream(cfg: ExperimentConfig):
    split = cfg.split
    if split.source == "synthetic":
        s = cfg.synthetic
        b = cfg.backbone
        return synthetic_gaussian_tasks(
            split.num_tasks, split.classes_per_task, s.dim, s.samples_per_class, s.separation,
            split.shuffle_seed, test_samples_per_class=s.test_samples_per_class,
            image_size=b.image_size, channels=b.channels, noise=s.noise,
        )
    dataset = load_image_folder(cfg.data_root, cfg.backbone.image_size, cfg.backbone.channels)
    return split_classes(dataset, split)


def _write_manifest(out: Path, cfg: ExperimentConfig, complete: bool, files: list[str], error: str | None = None):
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "complete": complete,
        "seed": cfg.seed,
        "code_hash": code_hash(),
        "torch_version": torch.__version__,
        "config": cfg.to_dict(),
        "files": sorted(files),
    }
    if error is not None:
        manifest["error"] = error
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> list[ContinualReport]:
    """Run every configured method and write the run directory.

    On failure the manifest is still written, with ``complete: false``, and
    the exception propagates.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)
    files: list[str] = []
    _write_manifest(out, cfg, False, files)
    reports: list[ContinualReport] = []
    try:
        stream = build_stream(cfg)
        write_manifest(stream, out / "split_manifest.csv")
        files.append("split_manifest.csv")
        for method in cfg.methods:
            log.info("running %s (seed %d)", method, cfg.seed)
            if method == "incprompt":
                state, report = run_incprompt(stream, cfg.backbone, cfg.schedule, cfg.key, cfg.train, cfg.seed)
                save_checkpoint(out / "checkpoint.pt", state, cfg.to_dict(), cfg.seed)
                write_histogram_csv(out / "selection_histogram.csv", report.selection_histogram)
                files += ["checkpoint.pt", "selection_histogram.csv"]
            else:
                report = run_baseline(stream, method, cfg.backbone, cfg.train, cfg.seed)
                report.prompt_length = 0
            reports.append(report)
        write_summary_csv(out / "summary.csv", reports)
        write_task_csv(out / "per_task.csv", reports)
        files += ["summary.csv", "per_task.csv"]
    except Exception as exc:
        _write_manifest(out, cfg, False, files, error=f"{type(exc).__name__}: {exc}")
        raise
    _write_manifest(out, cfg, True, files)
    return reports


def sweep_config(cfg: ExperimentConfig, axis: str, value: int) -> ExperimentConfig:
    """Config for one sweep point: INCPrompt only, schedule changed along ``axis``."""
    if axis == "prompt_length":
        if value < 0:
            raise ConfigError(f"prompt_length values must be >= 0, got {value}")
        schedule = PromptSchedule(cfg.schedule.layers, value)
    elif axis == "prompt_depth":
        if not 0 <= value <= cfg.backbone.num_layers:
            raise ConfigError(f"prompt_depth {value} outside [0, {cfg.backbone.num_layers}]")
        schedule = PromptSchedule.from_depth(value, cfg.schedule.prompt_length)
    else:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    return replace(cfg, methods=("incprompt",), schedule=schedule)


def _sweep_point(args):
    raw, out = args
    report, = run_experiment(from_dict(raw), out)
    return report.avg_acc, report.forgetting


def run_sweep(cfg: ExperimentConfig, axis: str, values: list[int], workers: int = 1) -> list[tuple]:
    """One INCPrompt run per value (shared seed), then ``sweep.csv`` and a line plot.

    Points may run in ``workers`` parallel processes; each writes its own
    subdirectory and the aggregate is written once all have finished.
    """
    points = [sweep_config(cfg, axis, v) for v in values]
    root = Path(cfg.output_dir) / f"sweep_{axis}"
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(p.to_dict(), str(root / f"{axis}={v}")) for p, v in zip(points, values)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(j) for j in jobs]
    rows = [(v, acc, forg, cfg.seed) for v, (acc, forg) in zip(values, results)]
    with open(root / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_CSV_HEADER)
        for v, acc, forg, seed in rows:
            w.writerow([v, f"{acc:.6f}", f"{forg:.6f}", seed])
    plot_sweep(rows, axis, root / f"sweep_{axis}.png")
    return rows


def plot_sweep(rows, axis: str, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(xs, [100 * r[1] for r in rows], marker="o")
    ax.set_xlabel(axis.replace("_", " "))
    ax.set_ylabel("avg. accuracy (%)")
    ax.set_xticks(xs)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def read_histogram(run_dir) -> "torch.Tensor":
    path = Path(run_dir) / "selection_histogram.csv"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; is {run_dir} a completed incprompt run?")
    with open(path) as fh:
        rows = [(int(r["true_task"]), int(r["selected_task"]), int(r["count"])) for r in csv.DictReader(fh)]
    n = max(max(r[0], r[1]) for r in rows) + 1
    hist = torch.zeros(n, n, dtype=torch.long)
    for i, j, c in rows:
        hist[i, j] = c
    return hist


def report_selection_histogram(run_dir) -> Path:
    """Per-task bar charts of which prompter each task's test images selected.

    Writes ``selection_histogram.png`` and ``selection_matrix.csv`` (an N x N
    count table, one row per true task) into ``run_dir``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    hist = read_histogram(run_dir).numpy()
    n = hist.shape[0]
    with open(run_dir / "selection_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true_task", *[f"selected_{j}" for j in range(n)]])
        for i in range(n):
            w.writerow([i, *hist[i].tolist()])
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), sharey=True, squeeze=False)
    for i, ax in enumerate(axes[0]):
        total = max(hist[i].sum(), 1)
        ax.bar(range(n), hist[i] / total, color=["C1" if j == i else "C0" for j in range(n)])
        ax.set_title(f"task {i}")
        ax.set_xticks(range(n))
        ax.set_xlabel("prompter")
    axes[0][0].set_ylabel("fraction selected")
    fig.tight_layout()
    path = run_dir / "selection_histogram.png"
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
