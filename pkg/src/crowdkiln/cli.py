"""``crowdkiln`` command-line entry point.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.  ``CROWDKILN_THREADS`` caps the per-image worker pool
used by ``gen``, ``stats``, ``export`` and target building.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import metrics
from .annotations import SynthSceneConfig, center_crop16, load_annotations, load_image, read_manifest, synth_dataset
from .density_gen import (
    DEFAULT_EPS,
    DEFAULT_SIGMA_PRIOR,
    AdaptiveParams,
    DatasetDensityStats,
    dataset_density_stats,
    density_stats_from_annotations,
    gen_adaptive,
    gen_fixed,
    gen_nonuniform,
    gen_perspective,
    perspective_profile_for,
    read_dmap,
    sum_pool,
    write_dmap,
)
from .distillation import DistillSchedule, TrainConfig, build_stage_targets, load_samples, run_distillation, train_stage
from .errors import CrowdkilnError
from .regressor import PRECISIONS, load_checkpoint

log = logging.getLogger("crowdkiln")

GENERATORS = ("fixed", "adaptive", "nonuniform", "perspective")


class ConfigError(Exception):
    """Invalid command-line or config-file input (exit code 2)."""


# --------------------------------------------------------------------------- configuration


@dataclass
class RunConfig:
    manifest: str | None = None
    val_manifest: str | None = None
    out: str | None = None
    stats: str | None = None
    # density targets
    generator: str = "perspective"
    eps: float = DEFAULT_EPS
    sigma_prior: float = DEFAULT_SIGMA_PRIOR
    sigma_min: float = 2.5
    sigma_max_sequence: list[float] = field(default_factory=lambda: [25.0, 20.0, 10.0, 5.0])
    sigma: float = 4.0
    k: int = 3
    beta_geo: float = 0.3
    m: int = 5
    # distillation
    w: float = 0.5
    lam: float = 1.0
    stages: int = 3
    align: str = "both"
    # training
    learning_rate: float = 5e-6
    momentum: float = 0.95
    epochs: int = 100
    milestones: list[int] | None = None
    batch_size: int = 1
    use_lr_loss: bool = True
    precompute_teacher: bool = False
    precision: str = "double"
    seed: int = 0

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise ConfigError(f"generator must be one of {GENERATORS}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {tuple(PRECISIONS)}")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported")
        if self.eps < 0 or self.sigma_prior <= 0 or self.sigma <= 0:
            raise ConfigError("eps must be >= 0, sigma_prior and sigma > 0")
        try:
            self.schedule()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def schedule(self) -> DistillSchedule:
        return DistillSchedule(
            sigma_min=self.sigma_min,
            sigma_max_sequence=tuple(self.sigma_max_sequence),
            w=self.w,
            lam=self.lam,
            stages=self.stages,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            epochs=self.epochs,
            milestones=None if self.milestones is None else tuple(self.milestones),
            seed=self.seed,
            precision=self.precision,
            use_lr_loss=self.use_lr_loss,
            align=self.align,
            precompute_teacher=self.precompute_teacher,
        )

    def adaptive_params(self) -> AdaptiveParams:
        return AdaptiveParams(k=self.k, beta_geo=self.beta_geo, m=self.m)


# flag dest -> RunConfig field, for options shared by train and distill
OVERRIDES = {
    "manifest": "manifest",
    "val_manifest": "val_manifest",
    "out": "out",
    "stats": "stats",
    "generator": "generator",
    "eps": "eps",
    "sigma_prior": "sigma_prior",
    "sigma_min": "sigma_min",
    "schedule": "sigma_max_sequence",
    "w": "w",
    "lam": "lam",
    "stages": "stages",
    "align": "align",
    "lr": "learning_rate",
    "momentum": "momentum",
    "epochs": "epochs",
    "milestones": "milestones",
    "precision": "precision",
    "seed": "seed",
    "single_loss": "use_lr_loss",
    "precompute_teacher": "precompute_teacher",
}


def resolve_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    for dest, key in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest == "single_loss":
            value = not value
        raw[key] = value
    cfg = RunConfig.from_dict(raw)
    if not cfg.manifest or not cfg.out:
        raise ConfigError("a manifest and an output directory are required (flags or config)")
    return cfg


def write_effective_config(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "effective_config.json"
    path.write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True), encoding="utf-8")
    return path


# --------------------------------------------------------------------------- helpers


def worker_count() -> int:
    raw = os.environ.get("CROWDKILN_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"CROWDKILN_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("CROWDKILN_THREADS must be >= 1")
    return n


@contextmanager
def worker_map():
    """Order-preserving ``map`` over a thread pool capped by ``CROWDKILN_THREADS``."""
    n = worker_count()
    if n == 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        yield pool.map


def load_stats(path) -> DatasetDensityStats:
    try:
        return DatasetDensityStats.from_json(Path(path).read_text(encoding="utf-8"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CrowdkilnError(f"{path}: not a stats file ({exc})") from exc


def make_map(ann, method: str, cfg: RunConfig, sigma_max: float, dstats: DatasetDensityStats | None):
    if method == "fixed":
        return gen_fixed(ann, cfg.sigma)
    if method == "adaptive":
        return gen_adaptive(ann, cfg.adaptive_params())
    if method == "nonuniform":
        return gen_nonuniform(ann, cfg.adaptive_params())
    return gen_perspective(ann, perspective_profile_for(ann, dstats, cfg.sigma_min, sigma_max))


def dataset_stats_for(cfg: RunConfig, samples, map_fn) -> DatasetDensityStats:
    if cfg.stats:
        return load_stats(cfg.stats)
    return density_stats_from_annotations((a for _, a in samples), cfg.eps, cfg.sigma_prior, map_fn=map_fn)


def build_targets(cfg: RunConfig, samples, sigma_max: float, targets_dir: Path, map_fn) -> Path:
    if cfg.generator == "perspective":
        dstats = dataset_stats_for(cfg, samples, map_fn)
        return build_stage_targets(samples, cfg.sigma_min, sigma_max, dstats, targets_dir, map_fn=map_fn)
    targets_dir.mkdir(parents=True, exist_ok=True)

    def one(item):
        image_id, ann = item
        dmap = make_map(ann, cfg.generator, cfg, sigma_max, None)
        write_dmap(sum_pool(dmap, 4), targets_dir / f"{image_id}.hr.dmap")
        write_dmap(sum_pool(dmap, 16), targets_dir / f"{image_id}.lr.dmap")

    for _ in map_fn(one, samples):
        pass
    return targets_dir


def to_pgm(values: np.ndarray, scale: str) -> bytes:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, None)
    if scale == "max":
        peak = v.max() if v.size else 0.0
        v = v / peak if peak > 0 else np.zeros_like(v)
    pixels = np.rint(np.clip(v, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        cfg = SynthSceneConfig(
            width=args.width,
            height=args.height,
            cluster_count=args.clusters,
            person_count_range=(args.min_people, args.max_people),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    print(synth_dataset(cfg, args.seed, args.count, args.out))
    return 0


def cmd_stats(args) -> int:
    with worker_map() as map_fn:
        stats = dataset_density_stats(args.manifest, args.eps, args.sigma_prior, map_fn=map_fn)
    Path(args.out).write_text(stats.to_json(), encoding="utf-8")
    print(f"d_min={stats.d_min:.6g} d_max={stats.d_max:.6g} -> {args.out}")
    return 0


def cmd_gen(args) -> int:
    if args.method == "perspective":
        if not args.stats:
            raise ConfigError("--method perspective needs --stats (run `crowdkiln stats` first)")
        if args.sigma_min is None or args.sigma_max is None:
            raise ConfigError("--method perspective needs --sigma-min and --sigma-max")
        if not 0 < args.sigma_min <= args.sigma_max:
            raise ConfigError("need 0 < --sigma-min <= --sigma-max")
    elif args.sigma <= 0:
        raise ConfigError("--sigma must be positive")
    cfg = RunConfig(sigma=args.sigma, k=args.k, beta_geo=args.beta_geo, m=args.m)
    if args.sigma_min is not None:
        cfg.sigma_min = args.sigma_min
    dstats = load_stats(args.stats) if args.method == "perspective" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = read_manifest(args.manifest)

    def one(entry):
        ann = load_annotations(entry.annotation)
        if args.pool:
            cropped = center_crop16(ann)
            if cropped is not ann:
                warnings.warn(f"{entry.image_id}: cropped to {cropped.width}x{cropped.height} for pooling")
            ann = cropped
        dmap = make_map(ann, args.method, cfg, args.sigma_max, dstats)
        if args.pool:
            dmap = sum_pool(dmap, args.pool)
        write_dmap(dmap, out / f"{entry.image_id}.dmap")

    with worker_map() as map_fn:
        for _ in map_fn(one, entries):
            pass
    print(f"{len(entries)} maps -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    write_effective_config(cfg, out)
    samples = load_samples(cfg.manifest)
    val = load_samples(cfg.val_manifest) if cfg.val_manifest else None
    sigma_max = args.sigma_max if args.sigma_max is not None else cfg.sigma_max_sequence[0]
    teacher = load_checkpoint(args.teacher)[0] if args.teacher else None
    with worker_map() as map_fn:
        targets = build_targets(cfg, samples, sigma_max, out / "targets", map_fn)
    _, report = train_stage(
        samples,
        targets,
        teacher,
        cfg.train_config(),
        cfg.lam,
        val_samples=val,
        out_dir=out,
        sigma_max=sigma_max,
    )
    print(f"final_loss={report.final_loss:.6g} val_mae={report.val_mae:.4f} -> {out / 'model.ckpt'}")
    return 0


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    if cfg.generator != "perspective":
        raise ConfigError("distill regenerates perspective targets per stage; generator must be 'perspective'")
    out = Path(cfg.out)
    write_effective_config(cfg, out)
    samples = load_samples(cfg.manifest)
    val = load_samples(cfg.val_manifest) if cfg.val_manifest else None
    with worker_map() as map_fn:
        dstats = dataset_stats_for(cfg, samples, map_fn)
        reports = run_distillation(
            samples,
            cfg.schedule(),
            cfg.train_config(),
            out,
            val_samples=val,
            dstats=dstats,
            map_fn=map_fn,
        )
    for r in reports:
        print(f"stage {r.stage} sigma_max={r.sigma_max:g} loss={r.final_loss:.6g} val_mae={r.val_mae:.4f}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    samples = load_samples(args.manifest)
    records, summary = metrics.evaluate(model, samples, clamp_nonneg=args.clamp_nonneg)
    text = json.dumps(metrics.report_dict(records, summary), indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        s = summary["summary_hr"]
        print(f"mae={s['mae']:.4f} rmse={s['rmse']:.4f} mse_paper={s['mse_paper']:.4f} n={s['n']} -> {args.out}")
    else:
        print(text)
    return 0


def cmd_export(args) -> int:
    if bool(args.dmap) == bool(args.ckpt):
        raise ConfigError("give exactly one of --dmap or --ckpt")
    if args.dmap:
        values = read_dmap(args.dmap)
    else:
        if not args.image:
            raise ConfigError("--ckpt needs --image")
        model, _ = load_checkpoint(args.ckpt)
        hr, lr = model.predict(load_image(args.image))
        values = hr if args.head == "hr" else lr
    Path(args.out).write_bytes(to_pgm(values, args.scale))
    print(args.out)
    return 0


# --------------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_run_options(p):
    p.add_argument("--config", help="RunConfig JSON; flags override its values")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--out")
    p.add_argument("--stats", help="precomputed dataset stats (default: computed from --manifest)")
    p.add_argument("--generator", choices=GENERATORS)
    p.add_argument("--eps", type=float)
    p.add_argument("--sigma-prior", type=float)
    p.add_argument("--sigma-min", type=float)
    p.add_argument("--schedule", type=_floats, help="sigma_max sequence, e.g. 25,20,10,5")
    p.add_argument("--w", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--stages", type=int)
    p.add_argument("--align", choices=("both", "hr"))
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--milestones", type=_ints)
    p.add_argument("--precision", choices=tuple(PRECISIONS))
    p.add_argument("--seed", type=int)
    p.add_argument("--single-loss", action="store_true", default=None, help="drop the LR head's loss term")
    p.add_argument("--precompute-teacher", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdkiln", description="Perspective-aware density maps and iterative distillation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic perspective dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--clusters", type=int, default=0)
    p.add_argument("--min-people", type=int, default=20)
    p.add_argument("--max-people", type=int, default=150)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="dataset-wide effective-density extremes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--sigma-prior", type=float, default=DEFAULT_SIGMA_PRIOR)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen", help="generate density maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=GENERATORS, required=True)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--sigma-min", type=float)
    p.add_argument("--sigma-max", type=float)
    p.add_argument("--stats")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--beta-geo", type=float, default=0.3)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--pool", type=int, choices=(4, 16))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one model (optionally against a teacher)")
    _add_run_options(p)
    p.add_argument("--sigma-max", type=float, help="target sigma_max (default: first schedule entry)")
    p.add_argument("--teacher", help="checkpoint of a frozen teacher")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="iterative density-aware distillation")
    _add_run_options(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="count metrics of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--clamp-nonneg", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="render a density map or model output as PGM")
    p.add_argument("--dmap")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--head", choices=("hr", "lr"), default="hr")
    p.add_argument("--scale", choices=("max", "unit"), default="max")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except ConfigError as exc:
        print(f"crowdkiln: error: {exc}", file=sys.stderr)
        return 2
    except (CrowdkilnError, OSError, ValueError, FloatingPointError) as exc:
        print(f"crowdkiln: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
