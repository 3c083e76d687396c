"""Depth, scale and child-ordering ablations on the matched-CFG task."""
import argparse
from pathlib import Path

from classfield.evaluation import MatchedConfig, atomic_write_text, run_ablations


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("which", nargs="*", default=["depth", "scale", "ordering"])
    ap.add_argument("--trials", type=int, default=9)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", type=Path, default=Path("results/ablations"))
    args = ap.parse_args()

    base = MatchedConfig(trials=args.trials, methods=("cfp", "avg"), dpt=False, jobs=args.jobs)
    for name in args.which:
        table = run_ablations(name, base)
        atomic_write_text(args.out / f"{name}.csv", table.csv())
        print(f"[{name}]")
        for setting in dict.fromkeys(r[0] for r in table.rows):
            cfp, avg = table.level_mean(setting, "cfp"), table.level_mean(setting, "avg")
            print(f"  {setting:16s} cfp {cfp:.2e}  avg {avg:.2e}")


if __name__ == "__main__":
    main()
