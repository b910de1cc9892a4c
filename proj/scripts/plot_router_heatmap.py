#!/usr/bin/env python3
"""Render router_report.csv as per-site heatmaps (tasks x experts).

Usage: plot_router_heatmap.py <router_report.csv> [out.png]

Requires matplotlib; the CSV itself is the primary artifact and needs
nothing beyond a spreadsheet.
"""

import csv
import sys
from collections import defaultdict


def main() -> int:
    if len(sys.argv) < 2:
        print(__doc__)
        return 1
    path = sys.argv[1]
    out = sys.argv[2] if len(sys.argv) > 2 else "router_heatmap.png"

    cells = defaultdict(dict)  # (layer, site) -> {(task, expert): weight}
    tasks, experts = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (int(row["layer"]), row["site"])
            cells[key][(row["task"], row["expert"])] = float(row["mean_weight"])
            if row["task"] not in tasks:
                tasks.append(row["task"])
            if row["expert"] not in experts:
                experts.append(row["expert"])

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not available; the CSV grid is already plot-ready")
        return 1

    sites = sorted(cells)
    fig, axes = plt.subplots(1, len(sites), figsize=(3.2 * len(sites), 3.2), squeeze=False)
    for ax, site in zip(axes[0], sites):
        grid = [[cells[site].get((t, e), 0.0) for e in experts] for t in tasks]
        im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_title(f"L{site[0]} {site[1]}", fontsize=9)
        ax.set_xticks(range(len(experts)), experts, rotation=45, fontsize=7)
        ax.set_yticks(range(len(tasks)), tasks, fontsize=7)
        for i in range(len(tasks)):
            for j in range(len(experts)):
                ax.text(j, i, f"{grid[i][j]:.2f}", ha="center", va="center", fontsize=6,
                        color="white" if grid[i][j] < 0.6 else "black")
    fig.colorbar(im, ax=axes[0], shrink=0.8, label="mean routing weight")
    fig.suptitle("router distributions per task and site")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
