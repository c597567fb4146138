"""Plot target error and the Jeffrey estimate per epoch from a run directory.

    python3 scripts/plot_dynamics.py runs/train dynamics.png

Needs matplotlib (``pip install -e .[plot]``).  Reads only ``plot_data.csv``.
"""
import csv
import sys
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load(path):
    series = defaultdict(lambda: ([], [], []))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            epochs, err, jeff = series[(row["method"], row["seed"])]
            epochs.append(int(row["epoch"]))
            err.append(float(row["target_error"]))
            jeff.append(float(row["jeffrey"]))
    return series


def main(run_dir, out_png):
    series = load(f"{run_dir}/plot_data.csv")
    fig, ax_err = plt.subplots(figsize=(6, 4))
    ax_j = ax_err.twinx()
    for (method, seed), (epochs, err, jeff) in sorted(series.items()):
        line, = ax_err.plot(epochs, err, label=f"{method} seed {seed} error")
        ax_j.plot(epochs, jeff, linestyle="--", color=line.get_color(), label=f"{method} seed {seed} Jeffrey")
    ax_err.set_xlabel("epoch")
    ax_err.set_ylabel("target error (solid)")
    ax_j.set_ylabel("Jeffrey estimate (dashed)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit("usage: plot_dynamics.py RUN_DIR OUT.png")
    main(sys.argv[1], sys.argv[2])
