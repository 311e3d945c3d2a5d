"""Run the desk-scale additivity experiment and check the ordering of regimes.

Usage: python scripts/additivity_experiment.py [--config configs/additivity.json] [--output-dir DIR]
"""

import argparse
import sys
import time

from tfs_lab import harness as H


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default="configs/additivity.json")
    parser.add_argument("--output-dir", default=None)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args(argv)

    overrides = {"workers": args.workers}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    config = H.parse_config(args.config, overrides)
    start = time.perf_counter()
    H.execute_experiment(config)
    elapsed = time.perf_counter() - start

    table = H.build_report(H.load_results(config.output_dir))
    print(table.to_text())
    for dataset, ratio in table.groups():
        mean = {r.regime: r.mean for r in table.group_rows(dataset, ratio)}
        if not {"FT", "TAPT", "ST", "TFS"} <= mean.keys():
            continue
        ft, tapt, st, tfs = mean["FT"], mean["TAPT"], mean["ST"], mean["TFS"]
        print(f"{dataset} @ {ratio}: TFS>=TAPT {tfs >= tapt}, TFS>=ST {tfs >= st}, TFS>=FT {tfs >= ft}")
        if tapt > ft and st > ft:
            print(f"  TFS gain {tfs - ft:.2f} vs half the summed gains {0.5 * (tapt + st - 2 * ft):.2f}")
        else:
            print("  additivity clause not applicable: a single-technique gain is not positive")
    print(f"elapsed {elapsed:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
