"""Dual-resolution L2 loss, teacher-aligned distillation loss and the iterative driver.

Stage 0 trains a fresh model on the smooth targets ``G(sigma_max[0])``.  Each
later stage regenerates the targets with the next, smaller ``sigma_max``,
trains another fresh model against them plus the frozen model of the previous
stage, and hands that student on as the next teacher.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .annotations import AnnotatedImage, center_crop16, load_entry, read_manifest
from .density_gen import (
    DatasetDensityStats,
    density_stats_from_annotations,
    gen_perspective,
    perspective_profile_for,
    read_dmap,
    sum_pool,
    write_dmap,
)
from .errors import MissingTargets, ShapeError
from .regressor import (
    OptimizerState,
    RegressorModel,
    backward,
    forward,
    init_model,
    save_checkpoint,
    sgd_step,
)

log = logging.getLogger(__name__)

HR_FACTOR = 4
LR_FACTOR = 16


@dataclass(frozen=True)
class DistillSchedule:
    sigma_min: float = 2.5
    sigma_max_sequence: tuple[float, ...] = (25.0, 20.0, 10.0, 5.0)
    w: float = 0.5
    lam: float = 1.0
    stages: int = 3

    def __post_init__(self):
        seq = tuple(float(s) for s in self.sigma_max_sequence)
        object.__setattr__(self, "sigma_max_sequence", seq)
        if not 0 <= self.w < 1:
            raise ValueError(f"shrink factor w must lie in [0, 1), got {self.w}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.stages < 0 or len(seq) < self.stages + 1:
            raise ValueError(f"{self.stages} distillation stages need {self.stages + 1} sigma_max values")
        if any(b >= a for a, b in zip(seq, seq[1:])):
            raise ValueError(f"sigma_max sequence must be strictly decreasing: {seq}")
        for t in range(2, len(seq)):
            if abs(seq[t] - self.w * seq[t - 1]) > 1e-9:
                raise ValueError(f"sigma_max[{t}] = {seq[t]} != w * sigma_max[{t - 1}]")

    @classmethod
    def geometric(cls, initial: float, first: float, w: float, stages: int, **kw) -> "DistillSchedule":
        """``[initial, first, first*w, first*w^2, ...]`` with ``stages + 1`` entries."""
        seq = [initial] + [first * w**i for i in range(stages)]
        return cls(sigma_max_sequence=tuple(seq[: stages + 1]), w=w, stages=stages, **kw)

    def sigma_max(self, t: int) -> float:
        return self.sigma_max_sequence[t]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-6
    momentum: float = 0.95
    epochs: int = 100
    milestones: tuple[int, ...] | None = None
    seed: int = 0
    precision: str = "double"
    use_lr_loss: bool = True
    align: str = "both"
    precompute_teacher: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.align not in ("both", "hr"):
            raise ValueError("align must be 'both' or 'hr'")
        ms = self.resolved_milestones()
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m < 0 for m in ms):
            raise ValueError(f"milestones {ms} must be strictly increasing and < epochs={self.epochs}")

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return tuple(int(m) for m in self.milestones)
        picked = []
        for frac in (0.6, 0.8, 0.9):
            m = int(round(frac * self.epochs))
            if 0 < m < self.epochs and (not picked or m > picked[-1]):
                picked.append(m)
        return tuple(picked)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * 0.1 ** sum(1 for m in self.resolved_milestones() if epoch >= m)


@dataclass
class StageReport:
    stage: int
    sigma_max: float
    final_loss: float
    val_mae: float
    val_mse_paper: float
    val_rmse: float
    checkpoint: str
    val_mae_lr: float = float("nan")
    epoch_losses: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StageReport":
        return cls(**json.loads(text))


# --------------------------------------------------------------------------- losses


def _check_pair(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def multitask_loss(hr, lr, g_hr, g_lr, use_lr: bool = True):
    """``|hr - g_hr|^2 + |lr - g_lr|^2`` and its gradients w.r.t. ``hr`` and ``lr``."""
    _check_pair(hr, g_hr, "hr")
    _check_pair(lr, g_lr, "lr")
    r_hr = hr - g_hr
    r_lr = lr - g_lr
    loss = float(np.sum(r_hr * r_hr))
    if use_lr:
        loss += float(np.sum(r_lr * r_lr))
        return loss, 2 * r_hr, 2 * r_lr
    return loss, 2 * r_hr, np.zeros_like(r_lr)


def distill_loss(s_hr, s_lr, t_hr, t_lr, g_hr, g_lr, lam: float, align: str = "both", use_lr: bool = True):
    """Ground-truth term plus ``lam`` times the student-teacher alignment term.

    Teacher outputs are constants.  ``align='hr'`` restricts alignment to the
    high-resolution head.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    _check_pair(s_hr, t_hr, "teacher hr")
    _check_pair(s_lr, t_lr, "teacher lr")
    loss, d_hr, d_lr = multitask_loss(s_hr, s_lr, g_hr, g_lr, use_lr)
    a_hr = s_hr - t_hr
    loss += lam * float(np.sum(a_hr * a_hr))
    d_hr = d_hr + 2 * lam * a_hr
    if align == "both":
        a_lr = s_lr - t_lr
        loss += lam * float(np.sum(a_lr * a_lr))
        d_lr = d_lr + 2 * lam * a_lr
    return loss, d_hr, d_lr


# --------------------------------------------------------------------------- data


def load_samples(manifest) -> list[tuple[str, AnnotatedImage]]:
    """Load every manifest entry, centre-cropping to multiples of 16 where needed."""
    out = []
    for entry in read_manifest(manifest):
        ann = load_entry(entry)
        cropped = center_crop16(ann)
        if cropped is not ann:
            warnings.warn(
                f"{entry.image_id}: {ann.width}x{ann.height} cropped to {cropped.width}x{cropped.height}; "
                f"{ann.count - cropped.count} points dropped",
                stacklevel=2,
            )
        out.append((entry.image_id, cropped))
    return out


def stage_dir(out_dir, t: int) -> Path:
    return Path(out_dir) / f"stage_{t}"


def pooled_targets(dmap: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return sum_pool(dmap, HR_FACTOR), sum_pool(dmap, LR_FACTOR)


def build_stage_targets(
    samples, sigma_min: float, sigma_max: float, dstats: DatasetDensityStats, targets_dir, *, map_fn=map
) -> Path:
    """Write ``{id}.hr.dmap`` / ``{id}.lr.dmap`` for every sample into ``targets_dir``."""
    targets_dir = Path(targets_dir)
    targets_dir.mkdir(parents=True, exist_ok=True)

    def one(item):
        image_id, ann = item
        profile = perspective_profile_for(ann, dstats, sigma_min, sigma_max)
        g_hr, g_lr = pooled_targets(gen_perspective(ann, profile))
        write_dmap(g_hr, targets_dir / f"{image_id}.hr.dmap")
        write_dmap(g_lr, targets_dir / f"{image_id}.lr.dmap")

    for _ in map_fn(one, samples):
        pass
    return targets_dir


def load_targets(samples, targets_dir) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    targets_dir = Path(targets_dir)
    out = {}
    for image_id, _ in samples:
        hr_path = targets_dir / f"{image_id}.hr.dmap"
        lr_path = targets_dir / f"{image_id}.lr.dmap"
        if not (hr_path.exists() and lr_path.exists()):
            raise MissingTargets(f"no targets for {image_id} under {targets_dir}")
        out[image_id] = (read_dmap(hr_path), read_dmap(lr_path))
    return out


# --------------------------------------------------------------------------- training


def train_stage(
    samples,
    targets_dir,
    teacher: RegressorModel | None,
    cfg: TrainConfig,
    lam: float = 1.0,
    *,
    init_seed: int | None = None,
    shuffle_key: int = 0,
    val_samples=None,
    out_dir=None,
    stage: int = 0,
    sigma_max: float = float("nan"),
):
    """Train one freshly initialised student for ``cfg.epochs`` epochs at batch size 1.

    Without a teacher the objective is the plain dual-resolution loss; with one
    it is ``distill_loss``.  Returns ``(student, StageReport)``; when
    ``out_dir`` is given the checkpoint and ``report.json`` are written there.
    """
    targets = load_targets(samples, targets_dir)
    seed = cfg.seed if init_seed is None else init_seed
    model = init_model(seed, cfg.precision)
    opt = OptimizerState.zeros_like(model, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, shuffle_key])
    dt = model.dtype
    teacher_cache = {}

    def teacher_out(image_id, image):
        if not cfg.precompute_teacher:
            return teacher.predict(image)
        if image_id not in teacher_cache:
            teacher_cache[image_id] = teacher.predict(image)
        return teacher_cache[image_id]

    epoch_losses = []
    for epoch in range(cfg.epochs):
        opt.learning_rate = cfg.lr_at(epoch)
        losses = []
        for i in rng.permutation(len(samples)):
            image_id, ann = samples[i]
            g_hr, g_lr = (g.astype(dt) for g in targets[image_id])
            hr, lr, cache = forward(model, ann.image)
            if teacher is None:
                loss, d_hr, d_lr = multitask_loss(hr, lr, g_hr, g_lr, cfg.use_lr_loss)
            else:
                t_hr, t_lr = teacher_out(image_id, ann.image)
                loss, d_hr, d_lr = distill_loss(
                    hr, lr, t_hr.astype(dt), t_lr.astype(dt), g_hr, g_lr, lam, cfg.align, cfg.use_lr_loss
                )
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at stage {stage}, epoch {epoch}, image {image_id}")
            sgd_step(model, backward(model, cache, d_hr, d_lr), opt)
            losses.append(loss)
        epoch_losses.append(math.fsum(losses) / len(losses))
        log.debug("stage %d epoch %d loss %.6g", stage, epoch, epoch_losses[-1])

    ckpt_rel = ""
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "model.ckpt", opt)
        ckpt_rel = f"{out_dir.name}/model.ckpt"

    nan = float("nan")
    summary_hr = summary_lr = {"mae": nan, "mse_paper": nan, "rmse": nan}
    if val_samples:
        _, summaries = metrics.evaluate(model, val_samples)
        summary_hr, summary_lr = summaries["summary_hr"], summaries["summary_lr"]
    report = StageReport(
        stage=stage,
        sigma_max=sigma_max,
        final_loss=epoch_losses[-1],
        val_mae=summary_hr["mae"],
        val_mse_paper=summary_hr["mse_paper"],
        val_rmse=summary_hr["rmse"],
        checkpoint=ckpt_rel,
        val_mae_lr=summary_lr["mae"],
        epoch_losses=epoch_losses,
    )
    if out_dir is not None:
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    return model, report


def run_distillation(
    samples,
    schedule: DistillSchedule,
    cfg: TrainConfig,
    out_dir,
    *,
    val_samples=None,
    eps: float = 1e-4,
    sigma_prior: float = 25.0,
    dstats: DatasetDensityStats | None = None,
    map_fn=map,
) -> list[StageReport]:
    """Iterative density-aware distillation over ``schedule.stages + 1`` stages."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dstats is None:
        dstats = density_stats_from_annotations((ann for _, ann in samples), eps, sigma_prior, map_fn=map_fn)
    (out_dir / "stats.json").write_text(dstats.to_json(), encoding="utf-8")

    reports = []
    teacher = None
    for t in range(schedule.stages + 1):
        sigma_max = schedule.sigma_max(t)
        sdir = stage_dir(out_dir, t)
        targets = build_stage_targets(
            samples, schedule.sigma_min, sigma_max, dstats, sdir / "targets", map_fn=map_fn
        )
        before = teacher.digest() if teacher is not None else None
        student, report = train_stage(
            samples,
            targets,
            teacher,
            cfg,
            schedule.lam,
            init_seed=cfg.seed + t,
            shuffle_key=t,
            val_samples=val_samples,
            out_dir=sdir,
            stage=t,
            sigma_max=sigma_max,
        )
        if teacher is not None and teacher.digest() != before:
            raise RuntimeError("teacher parameters changed during a student stage")
        log.info("stage %d sigma_max=%g loss=%.5g val_mae=%.4f", t, sigma_max, report.final_loss, report.val_mae)
        reports.append(report)
        teacher = student
    return reports
