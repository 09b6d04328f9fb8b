"""Plot one or more ``sweep.csv`` files written by ``camforge sweep`` on shared axes.

    python scripts/plot_sweep.py runs/k1/sweep.csv runs/off/sweep.csv -o sweep.png
"""
import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_sweep(path: Path) -> tuple[list[float], list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["ht"]) for r in rows], [float(r["miou"]) for r in rows]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv", nargs="+", type=Path)
    parser.add_argument("-o", "--output", type=Path, default=Path("sweep.png"))
    args = parser.parse_args()

    fig, ax = plt.subplots(figsize=(6, 4))
    for path in args.csv:
        ht, miou = read_sweep(path)
        ax.plot(ht, miou, marker="o", ms=3, label=path.parent.name or str(path))
    ax.set_xlabel("hard threshold ht")
    ax.set_ylabel("seed mIoU")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
