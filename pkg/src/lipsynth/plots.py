"""Loss-curve and metric figures rendered to image files.

Uses the Agg backend unconditionally: plotting always targets files, never
a display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError

LOSS_COLUMNS = ("l_rec", "l_adv_g", "l_adv_d", "l_sync", "total_g")


def _read_tsv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    rows = []
    header: list[str] | None = None
    for line in path.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
        else:
            rows.append(cells)
    if header is None:
        raise DataError(f"{path}: no table header found")
    return header, rows


def plot_loss_curves(loss_tsv: str | Path, out_path: str | Path) -> Path:
    """Render a training loss stream to one figure with all components."""
    header, rows = _read_tsv(loss_tsv)
    if "step" not in header:
        raise DataError(f"{loss_tsv}: missing 'step' column")
    if not rows:
        raise DataError(f"{loss_tsv}: no data rows")
    table = {name: np.array([float(r[i]) for r in rows])
             for i, name in enumerate(header)}

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for name in LOSS_COLUMNS:
        if name in table:
            ax.plot(table["step"], table[name], label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return out_path


def plot_metrics_report(report_tsv: str | Path, out_dir: str | Path
                        ) -> list[Path]:
    """One bar chart per metric column; returns the written paths."""
    header, rows = _read_tsv(report_tsv)
    if not rows or header[0] != "clip":
        raise DataError(f"{report_tsv}: not a metrics report")
    clip_rows = [r for r in rows if r[0] not in ("mean", "std")]
    if not clip_rows:
        raise DataError(f"{report_tsv}: no per-clip rows")
    names = [r[0] for r in clip_rows]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for column, metric in enumerate(header[1:], start=1):
        values = np.array([float(r[column]) for r in clip_rows])
        fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * len(values)), 3.5))
        ax.bar(np.arange(len(values)), values, color="#4878cf")
        finite = values[np.isfinite(values)]
        if len(finite):
            ax.axhline(finite.mean(), color="#d65f5f", linewidth=1.2,
                       label=f"mean {finite.mean():.4f}")
            ax.legend(fontsize=8)
        ax.set_xticks(np.arange(len(values)))
        ax.set_xticklabels(names, rotation=90, fontsize=6)
        ax.set_ylabel(metric)
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"metric_{metric}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
