"""
Plot-ready CSV export and matplotlib figures for finished runs.

``export_plots(run_dir)`` writes, next to the run artifacts:

    plot_aprime.csv       r, aprime_hat, aprime_true on a fine grid
    plot_potential.csv    r, a_hat, a_true on the same grid
    plot_histogram.csv    bin centre, weight density
    plot_replay_<seed>.csv  long format: t, node, x, xhat
    aprime.png, replay_<seed>.png   (unless ``figures=False``)
"""

from __future__ import annotations

import glob
import os

import numpy as np

from .pipeline import load_run, read_csv, write_csv
from .recon import integrate_aprime

SNAPSHOT_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
N_CURVE = 1001

# muted qualitative palette (matplotlib tab10 order)
COLORS = {
    "true": "#1f77b4",
    "hat": "#d62728",
    "hist": "#7f7f7f",
}
SNAPSHOT_COLORS = ["#d62728", "#2ca02c", "#bcbd22", "#e377c2", "#17becf"]


def setup_style():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rc("font", size=9)
    matplotlib.rc("axes", linewidth=0.8)
    rc = matplotlib.rcParams
    rc["axes.spines.top"] = False
    rc["axes.spines.right"] = False
    rc["lines.linewidth"] = 1.4
    rc["legend.fontsize"] = 8
    rc["legend.frameon"] = False
    rc["savefig.dpi"] = 150
    rc["savefig.bbox"] = "tight"


def curve_tables(run_dir):
    """Fine-grid samples of the learned and true ``a'`` and ``a``."""
    cfg, model, fn = load_run(run_dir)
    p = fn.grid.nodes
    r = np.linspace(p[0], p[-1], N_CURVE)
    pot = model.potential
    aq = integrate_aprime(fn)
    return {
        "r": r,
        "aprime_hat": fn(r),
        "aprime_true": pot.d1(r),
        "a_hat": aq(r),
        "a_true": pot.value(r) - float(pot.value(0.0)),
        "nodes": p,
    }


def histogram_density(run_dir):
    _, h = read_csv(os.path.join(run_dir, "histogram.csv"))
    left, right, w = h[:, 0], h[:, 1], h[:, 2]
    return 0.5 * (left + right), w / (right - left)


def replay_snapshots(path, fractions=SNAPSHOT_FRACTIONS):
    """Rows ``(t, node, x, xhat)`` at the sampled times nearest to ``fractions * T``."""
    header, data = read_csv(path)
    d = (len(header) - 1) // 2
    t = data[:, 0]
    rows = []
    for f in fractions:
        k = int(np.argmin(np.abs(t - f * t[-1])))
        for j in range(d):
            rows.append((t[k], j + 1, data[k, 1 + j], data[k, 1 + d + j]))
    return np.array(rows)


def export_plots(run_dir, figures: bool = True):
    """Write plot-ready CSVs (and PNG figures) for one run; returns written paths."""
    written = []
    cur = curve_tables(run_dir)
    path = os.path.join(run_dir, "plot_aprime.csv")
    write_csv(path, ["r", "aprime_hat", "aprime_true"], [cur["r"], cur["aprime_hat"], cur["aprime_true"]])
    written.append(path)
    path = os.path.join(run_dir, "plot_potential.csv")
    write_csv(path, ["r", "a_hat", "a_true"], [cur["r"], cur["a_hat"], cur["a_true"]])
    written.append(path)
    centres, dens = histogram_density(run_dir)
    path = os.path.join(run_dir, "plot_histogram.csv")
    write_csv(path, ["centre", "density"], [centres, dens])
    written.append(path)

    replays = sorted(glob.glob(os.path.join(run_dir, "replay_*.csv")))
    snaps = {}
    for rp in replays:
        tag = os.path.basename(rp)[len("replay_") : -len(".csv")]
        snap = replay_snapshots(rp)
        snaps[tag] = snap
        path = os.path.join(run_dir, f"plot_replay_{tag}.csv")
        write_csv(path, ["t", "node", "x", "xhat"], list(snap.T))
        written.append(path)

    if figures:
        setup_style()
        path = os.path.join(run_dir, "aprime.png")
        plot_reconstruction(cur, centres, dens, path)
        written.append(path)
        for tag, snap in snaps.items():
            path = os.path.join(run_dir, f"replay_{tag}.png")
            plot_replay(snap, path)
            written.append(path)
    return written


def plot_reconstruction(cur, centres, dens, path, title=None):
    """Learned vs true ``a'`` with grid nodes, strain density underneath."""
    import matplotlib.pyplot as plt

    fig, (ax, axh) = plt.subplots(
        2, 1, figsize=(4.5, 4.0), sharex=True, gridspec_kw={"height_ratios": [3, 1], "hspace": 0.08}
    )
    ax.plot(cur["r"], cur["aprime_true"], color=COLORS["true"], label=r"$a'$")
    ax.plot(cur["r"], cur["aprime_hat"], color=COLORS["hat"], ls="--", label=r"$\hat a'$")
    lo = min(np.min(cur["aprime_true"]), np.min(cur["aprime_hat"]))
    ax.plot(cur["nodes"], np.full(cur["nodes"].size, lo), "o", ms=3, mfc="none", color=COLORS["hat"])
    ax.set_ylabel(r"$a'(r)$")
    ax.legend(loc="upper left")
    if title:
        ax.set_title(title)
    width = centres[1] - centres[0] if centres.size > 1 else 1.0
    axh.bar(centres, dens, width=width, color=COLORS["hist"], linewidth=0)
    axh.set_xlabel("strain $r$")
    axh.set_ylabel("density")
    fig.savefig(path)
    plt.close(fig)


def plot_replay(snap, path):
    """Node positions at a few times: true (solid) vs learned (dashed)."""
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    times = np.unique(snap[:, 0])
    for k, t in enumerate(times):
        sel = snap[:, 0] == t
        c = SNAPSHOT_COLORS[k % len(SNAPSHOT_COLORS)]
        ax.plot(snap[sel, 1], snap[sel, 2], color=c, alpha=0.6, label=f"t={t:.2g}")
        ax.plot(snap[sel, 1], snap[sel, 3], color="k", ls="--", lw=0.9)
    ax.set_xlabel("node $j$")
    ax.set_ylabel("$x_j$")
    ax.legend(loc="best")
    fig.savefig(path)
    plt.close(fig)


def plot_sweep(run_dirs, labels, path):
    """Side-by-side reconstructions of sweep members."""
    import matplotlib.pyplot as plt

    n = len(run_dirs)
    cols = 2 if n > 1 else 1
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.5 * cols, 2.6 * rows), squeeze=False)
    for ax, rd, lab in zip(axes.flat, run_dirs, labels):
        cur = curve_tables(rd)
        ax.plot(cur["r"], cur["aprime_true"], color=COLORS["true"])
        ax.plot(cur["r"], cur["aprime_hat"], color=COLORS["hat"], ls="--")
        ax.set_title(lab)
    for ax in list(axes.flat)[n:]:
        ax.set_visible(False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def find_runs(root):
    """Run directories (containing ``result.csv``) at or directly below ``root``."""
    if os.path.exists(os.path.join(root, "result.csv")):
        return [root]
    return sorted(os.path.dirname(p) for p in glob.glob(os.path.join(root, "*", "result.csv")))
