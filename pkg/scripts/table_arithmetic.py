"""Feed published mean scores through the report generator and print the tables.

Usage: python scripts/table_arithmetic.py [--out DIR]
"""

import argparse
import sys

from tfs_lab.harness import emit_report

PUBLISHED = {
    ("QNLI/base", None): {"FT": 79.1, "TAPT": 82.0, "ST": 80.2, "TFS": 83.1},
    ("MNLI/base", None): {"FT": 57.3, "TAPT": 58.8, "ST": 59.2, "TFS": 60.9},
    ("SST-2", 0.001): {"FT": 72.0, "TAPT": 84.5, "ST": 74.1, "STTI": 75.4, "TFS": 85.7},
    ("SST-2", 0.01): {"FT": 87.3, "TAPT": 88.5, "ST": 88.4, "STTI": 88.8, "TFS": 89.4},
}


def records():
    return [{"dataset": d, "ratio": r, "regime": k, "metric": "accuracy", "test": v / 100}
            for (d, r), means in PUBLISHED.items() for k, v in means.items()]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=None, help="directory for report.tsv and report.txt")
    args = parser.parse_args(argv)
    print(emit_report(records(), args.out).to_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
