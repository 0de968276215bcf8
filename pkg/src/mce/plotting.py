"""Figures written next to the report CSVs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _figure(width=8, height=None):
    golden_ratio = (5 ** 0.5 - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden_ratio), facecolor="w")
    return fig, ax


def _save(fig, path):
    # Fixed metadata keeps repeated renders byte-identical.
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_capability(runs: dict[str, list[dict]], path):
    """Probe accuracy per epoch for each modality; dashed lines mark the ceilings."""
    fig, ax = _figure()
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    styles = ["-", "-.", ":"]
    drawn = set()
    for r_i, (label, rows) in enumerate(runs.items()):
        for m in sorted({r["modality"] for r in rows}):
            pts = [r for r in rows if r["modality"] == m]
            c = colors[m % len(colors)]
            ax.plot([p["epoch"] for p in pts], [p["capability"] for p in pts], styles[r_i % len(styles)],
                    color=c, marker="o", label=f"{label} m{m + 1}")
            if m not in drawn:
                ax.axhline(pts[0]["upperbound"], color=c, linestyle="--", linewidth=0.8)
                drawn.add(m)
    ax.set_xlabel("epoch")
    ax.set_ylabel("probe accuracy")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_factor_traces(rows: list[dict], path):
    """Batch factor B per modality against training step."""
    fig, ax = _figure()
    for m in sorted({r["modality"] for r in rows}):
        pts = [r for r in rows if r["modality"] == m]
        ax.plot([p["step"] for p in pts], [p["B"] for p in pts], linewidth=0.8, label=f"B m{m + 1}")
    ax.set_xlabel("step")
    ax.set_ylabel("B")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_losses(rows: list[dict], path):
    fig, ax = _figure()
    for key in ("task", "single", "sub", "aux", "total"):
        ax.plot([r["step"] for r in rows], [r[key] for r in rows], linewidth=0.8, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    _save(fig, path)
