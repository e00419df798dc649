"""Render training/evaluation artifacts as figures plus delimited tables.

Every figure written here is paired with a CSV holding the same numbers, so
results stay greppable and diffable alongside the plots.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .fsio import atomic_write_text

LOSS_KEYS = ("total", "rl", "il", "contrastive_free", "contrastive_perturbed")


def read_loss_log(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def write_csv(path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata={"Software": "pertnav"})
    plt.close(fig)


def loss_curves(records: list[dict], out_dir: Path) -> list[Path]:
    iters = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key in LOSS_KEYS:
        ax.plot(iters, [r[key] for r in records], label=key, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.set_title("training loss terms")
    fig.tight_layout()
    png = out_dir / "loss_curves.png"
    _save(fig, png)
    csv = out_dir / "losses.csv"
    write_csv(
        csv,
        ["iteration", *LOSS_KEYS, "pool_size", "pool_proportion"],
        [
            [r["iteration"], *[r[k] for k in LOSS_KEYS], r["pool_size"], r["pool_proportion"]]
            for r in records
        ],
    )
    return [png, csv]


def pool_growth(records: list[dict], out_dir: Path) -> list[Path]:
    iters = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(iters, [100.0 * r["pool_proportion"] for r in records], color="tab:purple")
    ax.set_xlabel("iteration")
    ax.set_ylabel("perturbed episodes pooled (%)")
    ax.set_ylim(0, 105)
    ax.set_title("progressive perturbed-trajectory pool growth")
    fig.tight_layout()
    png = out_dir / "pool_proportion.png"
    _save(fig, png)
    return [png]


def eval_bars(reports: list[tuple[str, dict]], out_dir: Path) -> list[Path]:
    labels = [label for label, _ in reports]
    srs = [100.0 * rep["metrics"]["sr"] for _, rep in reports]
    spls = [100.0 * rep["metrics"]["spl"] for _, rep in reports]
    x = range(len(labels))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar([i - 0.18 for i in x], srs, width=0.36, label="SR (%)")
    ax.bar([i + 0.18 for i in x], spls, width=0.36, label="SPL (%)")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("percent")
    ax.legend()
    ax.set_title("evaluation")
    fig.tight_layout()
    png = out_dir / "eval_metrics.png"
    _save(fig, png)
    csv = out_dir / "eval_metrics.csv"
    write_csv(
        csv,
        ["run", "mode", "tl", "ne", "sr", "spl", "n_episodes"],
        [
            [
                label,
                rep["protocol"]["mode"],
                rep["metrics"]["tl"],
                rep["metrics"]["ne"],
                rep["metrics"]["sr"],
                rep["metrics"]["spl"],
                rep["metrics"]["n_episodes"],
            ]
            for label, rep in reports
        ],
    )
    return [png, csv]


def stats_figure(stats: dict, out_dir: Path) -> list[Path]:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    bins = list(stats["histogram"])
    ax1.bar(bins, [100.0 * stats["histogram"][b] for b in bins], color="tab:blue")
    ax1.set_title("deletable edges per trajectory")
    ax1.set_ylabel("trajectories (%)")
    parts = list(stats["positions"])
    ax2.bar(parts, [100.0 * stats["positions"][p] for p in parts], color="tab:orange")
    ax2.set_title("perturbable trajectory parts")
    fig.tight_layout()
    png = out_dir / f"stats_{stats['split']}.png"
    _save(fig, png)
    csv = out_dir / f"stats_{stats['split']}.csv"
    rows = [["metric", "value"]]
    flat = dict(stats)
    hist = flat.pop("histogram")
    pos = flat.pop("positions")
    body = [[k, v] for k, v in flat.items()]
    body += [[f"bin {b}", hist[b]] for b in hist]
    body += [[f"position {p}", pos[p]] for p in pos]
    write_csv(csv, ["metric", "value"], body)
    return [png, csv]
