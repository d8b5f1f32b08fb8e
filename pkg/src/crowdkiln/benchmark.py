"""Desk-scale synthetic benchmark: distillation trend, scratch and single-loss baselines.

Everything is pinned by ``BenchmarkConfig`` (``configs/benchmark.json`` holds
the checked-in values), so two runs into fresh directories produce identical
bytes.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .annotations import SynthSceneConfig, synth_dataset
from .distillation import DistillSchedule, StageReport, TrainConfig, load_samples, run_distillation, stage_dir, train_stage


@dataclass(frozen=True)
class BenchmarkConfig:
    n_train: int = 60
    n_val: int = 20
    train_seed: int = 1000
    val_seed: int = 101000
    width: int = 96
    height: int = 64
    person_count_range: tuple[int, int] = (20, 150)
    eps: float = 1e-4
    sigma_prior: float = 25.0
    stages: int = 2
    lam: float = 1.0
    learning_rate: float = 1e-5
    epochs: int = 60
    precision: str = "single"
    seed: int = 0

    @classmethod
    def from_json(cls, path) -> "BenchmarkConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
        if "person_count_range" in raw:
            raw["person_count_range"] = tuple(raw["person_count_range"])
        return cls(**raw)

    def scene_config(self) -> SynthSceneConfig:
        return SynthSceneConfig(width=self.width, height=self.height, person_count_range=self.person_count_range)

    def train_config(self, **kw) -> TrainConfig:
        base = TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, precision=self.precision, seed=self.seed
        )
        return dataclasses.replace(base, **kw)

    def schedule(self) -> DistillSchedule:
        return DistillSchedule(lam=self.lam, stages=self.stages)


def make_data(cfg: BenchmarkConfig, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    scene = cfg.scene_config()
    train = synth_dataset(scene, cfg.train_seed, cfg.n_train, out_dir / "train")
    val = synth_dataset(scene, cfg.val_seed, cfg.n_val, out_dir / "val")
    return train, val


def run_distill(cfg: BenchmarkConfig, out_dir) -> tuple[list[StageReport], float]:
    out_dir = Path(out_dir)
    train_m, val_m = make_data(cfg, out_dir / "data")
    train, val = load_samples(train_m), load_samples(val_m)
    t0 = time.perf_counter()
    reports = run_distillation(
        train,
        cfg.schedule(),
        cfg.train_config(),
        out_dir / "distill",
        val_samples=val,
        eps=cfg.eps,
        sigma_prior=cfg.sigma_prior,
    )
    return reports, time.perf_counter() - t0


def run_scratch(cfg: BenchmarkConfig, out_dir, stage: int) -> StageReport:
    """Fresh model trained without a teacher on the distillation run's stage-``stage`` targets."""
    out_dir = Path(out_dir)
    train = load_samples(out_dir / "data" / "train" / "manifest.json")
    val = load_samples(out_dir / "data" / "val" / "manifest.json")
    targets = stage_dir(out_dir / "distill", stage) / "targets"
    _, report = train_stage(
        train, targets, None, cfg.train_config(), val_samples=val, init_seed=cfg.seed, out_dir=out_dir / "scratch"
    )
    return report


def run_single_loss(cfg: BenchmarkConfig, out_dir) -> StageReport:
    """Stage-0 training with the LR head's loss term switched off."""
    out_dir = Path(out_dir)
    train = load_samples(out_dir / "data" / "train" / "manifest.json")
    val = load_samples(out_dir / "data" / "val" / "manifest.json")
    targets = stage_dir(out_dir / "distill", 0) / "targets"
    _, report = train_stage(
        train,
        targets,
        None,
        cfg.train_config(use_lr_loss=False),
        val_samples=val,
        init_seed=cfg.seed,
        out_dir=out_dir / "single_loss",
    )
    return report


def trend_checks(reports: list[StageReport], scratch: StageReport | None = None) -> dict[str, bool]:
    m = [r.val_mae for r in reports]
    checks = {"t1 <= t0": m[1] <= m[0]}
    if len(m) > 2:
        checks["t2 <= t1 + 2% of t0"] = m[2] <= m[1] + 0.02 * m[0]
    if scratch is not None:
        checks[f"scratch on t{len(m) - 1} targets >= distilled"] = scratch.val_mae >= m[-1]
    return checks


def run_all(cfg: BenchmarkConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    reports, seconds = run_distill(cfg, out_dir)
    scratch = run_scratch(cfg, out_dir, cfg.stages)
    single = run_single_loss(cfg, out_dir)
    result = {
        "config": asdict(cfg),
        "distill_seconds": seconds,
        "val_mae": [r.val_mae for r in reports],
        "scratch_val_mae": scratch.val_mae,
        "single_loss_val_mae": single.val_mae,
        "dual_loss_val_mae": reports[0].val_mae,
        "checks": {
            **trend_checks(reports, scratch),
            "single loss >= dual loss": single.val_mae >= reports[0].val_mae,
        },
    }
    (out_dir / "results.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
    return result
