import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdkiln.annotations import SynthSceneConfig, synth_dataset
from crowdkiln.density_gen import density_stats_from_annotations, gen_fixed, read_dmap
from crowdkiln.distillation import (
    DistillSchedule,
    StageReport,
    TrainConfig,
    build_stage_targets,
    distill_loss,
    load_samples,
    multitask_loss,
    pooled_targets,
    run_distillation,
    train_stage,
)
from crowdkiln.errors import MissingTargets, ShapeError
from crowdkiln.regressor import init_model, load_checkpoint

TINY = SynthSceneConfig(width=32, height=32, focal=28.0, horizon=-4.0, person_count_range=(5, 25))


@pytest.fixture(scope="module")
def tiny_samples(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny")
    return load_samples(synth_dataset(TINY, 3, 6, d))


# --------------------------------------------------------------------------- losses


def test_multitask_loss_exact():
    z = np.zeros((2, 2))
    loss, g_hr, g_lr = multitask_loss(z, z, z, z)
    assert loss == 0 and not g_hr.any() and not g_lr.any()


def test_multitask_loss_example():
    hr, g_hr = np.ones((2, 2)), np.zeros((2, 2))
    lr = g_lr = np.full((1, 1), 3.0)
    loss, d_hr, d_lr = multitask_loss(hr, lr, g_hr, g_lr)
    assert loss == 4.0
    assert np.all(d_hr == 2.0) and not d_lr.any()


def test_multitask_loss_symmetric_in_heads():
    rng = np.random.default_rng(0)
    a, b, c, d = (rng.random((3, 3)) for _ in range(4))
    assert multitask_loss(a, c, b, d)[0] == pytest.approx(multitask_loss(c, a, d, b)[0], rel=1e-15)


def test_multitask_single_loss_drops_lr():
    hr, lr = np.ones((2, 2)), np.ones((1, 1))
    loss, _, d_lr = multitask_loss(hr, lr, np.zeros((2, 2)), np.zeros((1, 1)), use_lr=False)
    assert loss == 4.0 and not d_lr.any()


def test_multitask_shape_error():
    with pytest.raises(ShapeError):
        multitask_loss(np.zeros((2, 2)), np.zeros((1, 1)), np.zeros((2, 3)), np.zeros((1, 1)))


def test_distill_loss_example():
    s_hr = np.ones((2, 2))
    z = np.zeros((2, 2))
    lr = np.zeros((1, 1))
    loss, d_hr, d_lr = distill_loss(s_hr, lr, z, lr, z, lr, lam=1.0)
    assert loss == 8.0
    assert np.all(d_hr == 4.0) and not d_lr.any()


def test_distill_loss_all_equal():
    rng = np.random.default_rng(1)
    hr, lr = rng.random((4, 4)), rng.random((1, 1))
    assert distill_loss(hr, lr, hr, lr, hr, lr, 1.0)[0] == 0.0


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_lambda_zero_matches_multitask(seed):
    rng = np.random.default_rng(seed)
    s_hr, t_hr, g_hr = (rng.standard_normal((4, 6)) for _ in range(3))
    s_lr, t_lr, g_lr = (rng.standard_normal((1, 2)) for _ in range(3))
    a = distill_loss(s_hr, s_lr, t_hr, t_lr, g_hr, g_lr, 0.0)
    b = multitask_loss(s_hr, s_lr, g_hr, g_lr)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_distill_hr_only_alignment():
    z = np.zeros((2, 2))
    s_lr, t_lr = np.ones((1, 1)), np.zeros((1, 1))
    loss, _, d_lr = distill_loss(z, s_lr, z, t_lr, z, s_lr, 1.0, align="hr")
    assert loss == 0.0 and not d_lr.any()


def test_distill_rejects_negative_lambda():
    z = np.zeros((2, 2))
    with pytest.raises(ValueError):
        distill_loss(z, z, z, z, z, z, -1.0)


def test_distill_shape_error():
    z, o = np.zeros((2, 2)), np.zeros((1, 1))
    with pytest.raises(ShapeError):
        distill_loss(z, o, np.zeros((3, 3)), o, z, o, 1.0)


@given(st.integers(0, 2**31), st.floats(0, 3), st.sampled_from(["both", "hr"]))
@settings(max_examples=25, deadline=None)
def test_distill_grad_matches_finite_differences(seed, lam, align):
    rng = np.random.default_rng(seed)
    s_hr, t_hr, g_hr = (rng.standard_normal((3, 4)) for _ in range(3))
    s_lr, t_lr, g_lr = (rng.standard_normal((1, 2)) for _ in range(3))
    _, d_hr, d_lr = distill_loss(s_hr, s_lr, t_hr, t_lr, g_hr, g_lr, lam, align)
    h = 1e-6
    for arr, grad in ((s_hr, d_hr), (s_lr, d_lr)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            plus = distill_loss(s_hr, s_lr, t_hr, t_lr, g_hr, g_lr, lam, align)[0]
            arr[idx] = old - h
            minus = distill_loss(s_hr, s_lr, t_hr, t_lr, g_hr, g_lr, lam, align)[0]
            arr[idx] = old
            num = (plus - minus) / (2 * h)
            assert abs(num - grad[idx]) <= 1e-7 * max(abs(num), abs(grad[idx]), 1.0) + 1e-8


# --------------------------------------------------------------------------- configuration


def test_default_schedule():
    s = DistillSchedule()
    assert s.sigma_max_sequence == (25.0, 20.0, 10.0, 5.0)
    assert (s.sigma_min, s.w, s.lam, s.stages) == (2.5, 0.5, 1.0, 3)


def test_geometric_schedule():
    s = DistillSchedule.geometric(25.0, 20.0, 0.5, 3)
    assert s.sigma_max_sequence == (25.0, 20.0, 10.0, 5.0)
    assert DistillSchedule.geometric(25.0, 20.0, 0.5, 0).sigma_max_sequence == (25.0,)


@pytest.mark.parametrize(
    "kw",
    [
        {"sigma_max_sequence": (25, 20, 12, 5)},
        {"sigma_max_sequence": (25, 25, 12.5, 6.25)},
        {"w": 1.0},
        {"lam": -0.1},
        {"stages": 4},
    ],
)
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        DistillSchedule(**kw)


def test_train_config_milestones():
    cfg = TrainConfig(epochs=100)
    assert cfg.resolved_milestones() == (60, 80, 90)
    assert cfg.lr_at(0) == cfg.learning_rate
    assert cfg.lr_at(85) == pytest.approx(cfg.learning_rate * 0.01)
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, milestones=(5, 5))
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, milestones=(3, 10))


def test_stage_report_json_round_trip():
    r = StageReport(1, 20.0, 0.5, 2.0, 0.3, 2.1, "stage_1/model.ckpt", 1.9, [1.0, 0.5])
    assert StageReport.from_json(r.to_json()) == r
    keys = set(json.loads(r.to_json()))
    assert {"stage", "sigma_max", "final_loss", "val_mae", "val_mse_paper", "val_rmse", "checkpoint"} <= keys


# --------------------------------------------------------------------------- targets and training


def test_targets_conserve_mass(tiny_samples, tmp_path):
    dstats = density_stats_from_annotations((a for _, a in tiny_samples), 1e-4, 25.0)
    build_stage_targets(tiny_samples, 2.5, 25.0, dstats, tmp_path)
    for image_id, ann in tiny_samples:
        hr, lr = read_dmap(tmp_path / f"{image_id}.hr.dmap"), read_dmap(tmp_path / f"{image_id}.lr.dmap")
        assert hr.shape == (8, 8) and lr.shape == (2, 2)
        assert hr.sum() == pytest.approx(ann.count, abs=1e-6 * max(ann.count, 1))
        assert lr.sum() == pytest.approx(ann.count, abs=1e-6 * max(ann.count, 1))


def test_degenerate_targets_match_fixed(tiny_samples, tmp_path):
    dstats = density_stats_from_annotations((a for _, a in tiny_samples), 1e-4, 25.0)
    build_stage_targets(tiny_samples, 5.0, 5.0, dstats, tmp_path)
    for image_id, ann in tiny_samples:
        hr, lr = pooled_targets(gen_fixed(ann, 5.0))
        assert np.abs(read_dmap(tmp_path / f"{image_id}.hr.dmap") - hr).max() <= 1e-6
        assert np.abs(read_dmap(tmp_path / f"{image_id}.lr.dmap") - lr).max() <= 1e-6


def test_missing_targets(tiny_samples, tmp_path):
    with pytest.raises(MissingTargets):
        train_stage(tiny_samples, tmp_path, None, TrainConfig(epochs=1))


def test_teacher_absent_ignores_lambda(tiny_samples, tmp_path):
    dstats = density_stats_from_annotations((a for _, a in tiny_samples), 1e-4, 25.0)
    build_stage_targets(tiny_samples, 2.5, 25.0, dstats, tmp_path)
    cfg = TrainConfig(epochs=2, learning_rate=1e-5)
    a, _ = train_stage(tiny_samples, tmp_path, None, cfg, lam=0.0)
    b, _ = train_stage(tiny_samples, tmp_path, None, cfg, lam=5.0)
    assert a.digest() == b.digest()


def test_teacher_is_frozen(tiny_samples, tmp_path):
    dstats = density_stats_from_annotations((a for _, a in tiny_samples), 1e-4, 25.0)
    build_stage_targets(tiny_samples, 2.5, 10.0, dstats, tmp_path)
    teacher = init_model(99)
    before = teacher.digest()
    for pre in (False, True):
        cfg = TrainConfig(epochs=2, learning_rate=1e-5, precompute_teacher=pre)
        train_stage(tiny_samples, tmp_path, teacher, cfg)
    assert teacher.digest() == before


def test_precompute_teacher_is_equivalent(tiny_samples, tmp_path):
    dstats = density_stats_from_annotations((a for _, a in tiny_samples), 1e-4, 25.0)
    build_stage_targets(tiny_samples, 2.5, 10.0, dstats, tmp_path)
    teacher = init_model(5)
    a, _ = train_stage(tiny_samples, tmp_path, teacher, TrainConfig(epochs=2, learning_rate=1e-5))
    b, _ = train_stage(
        tiny_samples, tmp_path, teacher, TrainConfig(epochs=2, learning_rate=1e-5, precompute_teacher=True)
    )
    assert a.digest() == b.digest()


def test_training_descends(tmp_path):
    cfg_scene = SynthSceneConfig(width=32, height=32, focal=28.0, horizon=-4.0, person_count_range=(5, 40))
    samples = load_samples(synth_dataset(cfg_scene, 50, 30, tmp_path / "data"))
    dstats = density_stats_from_annotations((a for _, a in samples), 1e-4, 25.0)
    build_stage_targets(samples, 2.5, 25.0, dstats, tmp_path / "t")
    cfg = TrainConfig(epochs=20, learning_rate=3e-5, precision="single", seed=1)
    _, report = train_stage(samples, tmp_path / "t", None, cfg)
    assert len(report.epoch_losses) == 20
    assert report.final_loss < report.epoch_losses[0]


def test_run_distillation_t0(tiny_samples, tmp_path):
    sched = DistillSchedule(sigma_max_sequence=(25.0,), stages=0)
    reports = run_distillation(tiny_samples, sched, TrainConfig(epochs=1, learning_rate=1e-5), tmp_path)
    assert len(reports) == 1
    assert reports[0].sigma_max == 25.0
    assert (tmp_path / "stage_0" / "model.ckpt").exists()
    assert not (tmp_path / "stage_1").exists()


def test_run_distillation_layout(tiny_samples, tmp_path):
    sched = DistillSchedule()
    cfg = TrainConfig(epochs=1, learning_rate=1e-5, precision="single")
    reports = run_distillation(tiny_samples, sched, cfg, tmp_path, val_samples=tiny_samples[:2])
    assert [r.sigma_max for r in reports] == [25.0, 20.0, 10.0, 5.0]
    assert [r.stage for r in reports] == [0, 1, 2, 3]
    for t, r in enumerate(reports):
        sdir = tmp_path / f"stage_{t}"
        assert r.checkpoint == f"stage_{t}/model.ckpt"
        assert StageReport.from_json((sdir / "report.json").read_text()) == r
        assert len(list((sdir / "targets").glob("*.hr.dmap"))) == len(tiny_samples)
        assert np.isfinite(r.val_mae)
        model, opt = load_checkpoint(sdir / "model.ckpt")
        assert model.precision == "single" and opt is not None
    # sharper kernels concentrate mass
    for image_id, _ in tiny_samples:
        peaks = [read_dmap(tmp_path / f"stage_{t}" / "targets" / f"{image_id}.hr.dmap").max() for t in range(4)]
        assert all(a <= b + 1e-12 for a, b in zip(peaks, peaks[1:]))


def test_run_distillation_reproducible(tiny_samples, tmp_path):
    sched = DistillSchedule(sigma_max_sequence=(25.0, 20.0), stages=1)
    cfg = TrainConfig(epochs=2, learning_rate=1e-5, precision="single", seed=3)
    run_distillation(tiny_samples, sched, cfg, tmp_path / "a")
    run_distillation(tiny_samples, sched, cfg, tmp_path / "b")
    for t in range(2):
        for name in ("model.ckpt", "report.json"):
            a = (tmp_path / "a" / f"stage_{t}" / name).read_bytes()
            assert a == (tmp_path / "b" / f"stage_{t}" / name).read_bytes()


def test_stage_students_are_fresh(tiny_samples, tmp_path):
    # stage t initialises from seed + t, not from the teacher
    sched = DistillSchedule(sigma_max_sequence=(25.0, 20.0), stages=1)
    cfg = TrainConfig(epochs=1, learning_rate=1e-30, momentum=0.0, seed=10)
    run_distillation(tiny_samples, sched, cfg, tmp_path)
    m1, _ = load_checkpoint(tmp_path / "stage_1" / "model.ckpt")
    fresh = init_model(11)
    for name in fresh.params:
        np.testing.assert_allclose(m1.params[name], fresh.params[name], rtol=1e-12, atol=1e-20)
