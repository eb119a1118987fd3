"""Plot per-coordinate funnel bands, actual and baseline trajectories from a run's plotdata/."""

import argparse
import sys
from pathlib import Path

from ddfunnel import io


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", type=Path, help="run output directory")
    p.add_argument("--dest", type=Path, default=None, help="image directory (default: <out>/figures)")
    return p.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; install the 'plot' extra", file=sys.stderr)
        return 1
    files = sorted((args.out / "plotdata").glob("state_x*.csv"))
    if not files:
        print(f"no plotdata under {args.out}", file=sys.stderr)
        return 2
    dest = args.dest or args.out / "figures"
    dest.mkdir(parents=True, exist_ok=True)
    for f in files:
        header, rows = io.read_csv(f)
        col = {name: io.csv_column(header, rows, name) for name in header if name != "baseline"}
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.fill_between(col["t"], col["band_lo"], col["band_hi"], color="tab:blue", alpha=0.2, label="funnel")
        ax.plot(col["t"], col["nominal"], "k--", lw=1, label="nominal")
        ax.plot(col["t"], col["actual"], "tab:blue", label="funnel controller")
        if "baseline" in header and any(r[header.index("baseline")] != "" for r in rows):
            ax.plot(col["t"], io.csv_column(header, rows, "baseline"), "tab:red", lw=1, label="baseline")
        ax.set_xlabel("t [s]")
        ax.set_ylabel(f.stem.replace("state_", ""))
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(dest / f"{f.stem}.png", dpi=120)
        plt.close(fig)
    print(f"wrote {len(files)} figures to {dest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
