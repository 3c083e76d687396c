"""Check truncation, diameter and domination bounds on sampled neural CFGs."""
import argparse
import json
import sys
import tempfile

from classfield.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=5)
    ap.add_argument("--L", type=int, default=4)
    args = ap.parse_args()

    failed = 0
    for t in range(args.trials):
        with tempfile.TemporaryDirectory() as tmp:
            code = cli(["verify", "--trial", str(t), "--L", str(args.L), "--out", tmp])
            with open(f"{tmp}/verify.json") as fh:
                rep = json.load(fh)
        checks = {k: v["pass"] for k, v in rep["checks"].items()}
        gap = rep["checks"]["truncation"]
        print(f"trial {t}: gap {gap['gap']:.4f} <= {gap['bound']:.4f} + {gap['slack']:.4f}  {checks}")
        failed += code != 0 or not rep["pass"]
    sys.exit(1 if failed else 0)


if __name__ == "__main__":
    main()
