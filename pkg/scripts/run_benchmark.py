"""Run the pinned synthetic benchmark and print the trend checks.

    python scripts/run_benchmark.py --out runs/bench [--config configs/benchmark.json] [--seed N]
"""

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from crowdkiln.benchmark import BenchmarkConfig, run_all

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=ROOT / "configs" / "benchmark.json")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the init/shuffle seed")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    cfg = BenchmarkConfig.from_json(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    result = run_all(cfg, args.out)

    for t, m in enumerate(result["val_mae"]):
        print(f"distill t={t}  val MAE {m:.4f}")
    print(f"scratch on t={cfg.stages} targets  {result['scratch_val_mae']:.4f}")
    print(f"single loss {result['single_loss_val_mae']:.4f}  dual loss {result['dual_loss_val_mae']:.4f}")
    print(f"distillation wall time {result['distill_seconds']:.0f}s")
    for name, ok in result["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(json.dumps(result["checks"]))


if __name__ == "__main__":
    main()
