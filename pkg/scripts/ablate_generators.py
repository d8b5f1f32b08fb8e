"""Train one model per ground-truth generator on the benchmark data and compare val MAE.

    python scripts/ablate_generators.py --out runs/gen_ablation [--sigma 4]
"""

import argparse
import json
from pathlib import Path

from crowdkiln.benchmark import BenchmarkConfig, make_data
from crowdkiln.density_gen import (
    density_stats_from_annotations,
    gen_adaptive,
    gen_fixed,
    gen_nonuniform,
    gen_perspective,
    perspective_profile_for,
    write_dmap,
)
from crowdkiln.distillation import load_samples, pooled_targets, train_stage

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=ROOT / "configs" / "benchmark.json")
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=4.0, help="fixed-kernel sigma")
    p.add_argument("--sigma-min", type=float, default=2.5)
    p.add_argument("--sigma-max", type=float, default=25.0)
    args = p.parse_args()

    cfg = BenchmarkConfig.from_json(args.config)
    out = Path(args.out)
    train_m, val_m = make_data(cfg, out / "data")
    train, val = load_samples(train_m), load_samples(val_m)
    dstats = density_stats_from_annotations((a for _, a in train), cfg.eps, cfg.sigma_prior)
    generators = {
        "fixed": lambda a: gen_fixed(a, args.sigma),
        "adaptive": gen_adaptive,
        "nonuniform": gen_nonuniform,
        "perspective": lambda a: gen_perspective(a, perspective_profile_for(a, dstats, args.sigma_min, args.sigma_max)),
    }
    results = {}
    for name, gen in generators.items():
        tdir = out / name / "targets"
        tdir.mkdir(parents=True, exist_ok=True)
        for image_id, ann in train:
            hr, lr = pooled_targets(gen(ann))
            write_dmap(hr, tdir / f"{image_id}.hr.dmap")
            write_dmap(lr, tdir / f"{image_id}.lr.dmap")
        _, report = train_stage(train, tdir, None, cfg.train_config(), val_samples=val, out_dir=out / name)
        results[name] = report.val_mae
        print(f"{name:12s} val MAE {report.val_mae:.4f}")
    (out / "results.json").write_text(json.dumps(results, indent=1), encoding="utf-8")


if __name__ == "__main__":
    main()
