import numpy as np
import pytest

from frustumseg.geometry import FrustumConfig, ProjectionReferencePoint
from frustumseg.model import ModelConfig, ModelParams
from frustumseg.raster import LabelMap, RasterImage
from frustumseg.synth import SceneSpec, generate_dataset, generate_scene
from frustumseg.train import (
    OptimizerState,
    TrainConfig,
    apply_flips,
    augment,
    build_sample,
    lr_schedule,
    optimizer_step,
    sample_prp,
    train_loop,
)

ADAM_EPS = 1e-8


def test_sample_prp_reproducible_and_in_bounds():
    a = [sample_prp(np.random.default_rng(5), (100, 60)) for _ in range(4)]
    b = [sample_prp(np.random.default_rng(5), (100, 60)) for _ in range(4)]
    assert a == b
    for prp in a:
        assert 0 <= prp.w <= 100 and 0 <= prp.h <= 60


def test_sample_prp_mean_is_image_center():
    rng = np.random.default_rng(7)
    n = 100_000
    draws = np.array([[p.w, p.h] for p in (sample_prp(rng, (200, 100)) for _ in range(n))])
    # mean of uniform(0, L) has std L/sqrt(12 n)
    for axis, extent in ((0, 200.0), (1, 100.0)):
        sigma = extent / np.sqrt(12 * n)
        assert abs(draws[:, axis].mean() - extent / 2) < 3 * sigma


def test_build_sample_single_scale_is_whole_image():
    rng = np.random.default_rng(8)
    image = RasterImage(data=rng.uniform(0, 1, (16, 16, 3)))
    labels = LabelMap(data=rng.integers(0, 5, (16, 16)).astype(np.uint8), class_count=5)
    frustum = FrustumConfig(distances=(1,), unified_size=(16, 16))
    patches, label_patch = build_sample(image, labels, ProjectionReferencePoint(3, 9), frustum)
    assert len(patches) == 1
    assert np.array_equal(patches[0], image.data)
    assert np.array_equal(label_patch.data, labels.data)


def test_build_sample_nested_windows_agree_with_geometry():
    image, labels = generate_scene(SceneSpec(width=256, height=256, seed=2, ponds=2, buildings=4))
    frustum = FrustumConfig(distances=(1, 3, 14), unified_size=(16, 16))
    prp = ProjectionReferencePoint(100.0, 220.0)
    patches, label_patch = build_sample(image, labels, prp, frustum)
    assert len(patches) == 3
    assert all(p.shape == (16, 16, 3) for p in patches)
    assert label_patch.data.shape == (16, 16)
    # corner reference point still yields in-bounds windows
    corner = ProjectionReferencePoint(0.0, 256.0)
    patches, _ = build_sample(image, labels, corner, frustum)
    assert all(np.isfinite(p).all() for p in patches)


def test_apply_flips_synchronized_and_involutive():
    rng = np.random.default_rng(9)
    patches = [rng.uniform(0, 1, (4, 4, 3)) for _ in range(3)]
    labels = LabelMap(data=rng.integers(0, 5, (4, 4)).astype(np.uint8), class_count=5)
    same_p, same_l = apply_flips(patches, labels, False, False)
    assert all(np.array_equal(a, b) for a, b in zip(same_p, patches))
    assert np.array_equal(same_l.data, labels.data)

    for fh, fv in ((True, False), (False, True), (True, True)):
        once_p, once_l = apply_flips(patches, labels, fh, fv)
        for orig, flipped in zip(patches, once_p):
            axes = [ax for ax, on in ((0, fv), (1, fh)) if on]
            assert np.array_equal(flipped, np.flip(orig, axis=axes))
        axes = [ax for ax, on in ((0, fv), (1, fh)) if on]
        assert np.array_equal(once_l.data, np.flip(labels.data, axis=axes))
        twice_p, twice_l = apply_flips(once_p, once_l, fh, fv)
        assert all(np.array_equal(a, b) for a, b in zip(twice_p, patches))
        assert np.array_equal(twice_l.data, labels.data)


def test_flip_of_asymmetric_fixture():
    fixture = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
    labels = LabelMap(data=np.array([[0, 1], [2, 3]], np.uint8), class_count=4)
    (h_patch,), h_labels = apply_flips([fixture], labels, True, False)
    assert np.array_equal(h_patch[:, :, 0], [[2, 1], [4, 3]])
    assert np.array_equal(h_labels.data, [[1, 0], [3, 2]])
    (v_patch,), v_labels = apply_flips([fixture], labels, False, True)
    assert np.array_equal(v_patch[:, :, 0], [[3, 4], [1, 2]])
    assert np.array_equal(v_labels.data, [[2, 3], [0, 1]])


def test_augment_draw_distribution_is_same_stream():
    rng1 = np.random.default_rng(11)
    rng2 = np.random.default_rng(11)
    patches = [np.arange(4.0).reshape(2, 2, 1)]
    labels = LabelMap(data=np.zeros((2, 2), np.uint8), class_count=2)
    p1, l1 = augment(patches, labels, rng1)
    flip_h = rng2.random() < 0.5
    flip_v = rng2.random() < 0.5
    p2, l2 = apply_flips(patches, labels, flip_h, flip_v)
    assert np.array_equal(p1[0], p2[0]) and np.array_equal(l1.data, l2.data)


def test_lr_schedule_ramp():
    base = 6e-5
    assert lr_schedule(1500, base, 1500) == base
    assert lr_schedule(750, base, 1500) == pytest.approx(base / 2)
    assert lr_schedule(2000, base, 1500) == base
    trace = [lr_schedule(s, 1.0, 4) for s in (1, 2, 3, 4, 5)]
    assert trace == [0.25, 0.5, 0.75, 1.0, 1.0]
    assert lr_schedule(1, 1.0, 0) == 1.0
    with pytest.raises(ValueError):
        lr_schedule(0, base, 10)


def _scalar_params():
    config = ModelConfig(n_scales=1, n_classes=2, in_channels=1, base_width=4,
                         main_depth=2, sub_depth=1, attn_dim=4)
    return ModelParams.initialize(config, 0)


def test_optimizer_zero_gradient_no_decay_is_identity():
    params = _scalar_params()
    state = OptimizerState(params)
    before = {k: v.copy() for k, v in params.values.items()}
    params.zero_grads()
    optimizer_step(params, state, lr=0.1, weight_decay=0.0)
    for name in before:
        assert np.array_equal(params.values[name], before[name])


def test_optimizer_first_step_is_normalized():
    params = _scalar_params()
    state = OptimizerState(params)
    params.zero_grads()
    params.values["dec.b2"][...] = 0.0
    params.grads["dec.b2"][...] = [0.37, -42.0]
    optimizer_step(params, state, lr=0.01, weight_decay=0.0)
    # bias-corrected first step is lr * g/(|g| + eps'), magnitude ~= lr
    step = params.values["dec.b2"]
    assert step[0] == pytest.approx(-0.01, rel=1e-6)
    assert step[1] == pytest.approx(0.01, rel=1e-6)


def test_optimizer_three_step_scalar_trace():
    params = _scalar_params()
    state = OptimizerState(params)
    grads = [0.5, -0.2, 0.1]
    lr, wd = 0.05, 0.01
    beta1, beta2 = 0.9, 0.999

    theta_ref = float(params.values["dec.b2"][0])
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta_ref -= lr * (mhat / (np.sqrt(vhat) + ADAM_EPS) + wd * theta_ref)

    for g in grads:
        params.zero_grads()
        params.grads["dec.b2"][0] = g
        optimizer_step(params, state, lr=lr, weight_decay=wd)
    assert params.values["dec.b2"][0] == pytest.approx(theta_ref, rel=1e-12)


def _small_train_config(tmp_path, iterations=25, seed=3, workers=1):
    manifest = generate_dataset(
        SceneSpec(width=128, height=128, seed=1, ponds=1, buildings=3),
        2, str(tmp_path / "ds"), val_scenes=0,
    )
    return TrainConfig(
        manifest=manifest,
        out_dir=str(tmp_path / f"run_w{workers}_{seed}"),
        iterations=iterations,
        frustum=FrustumConfig(distances=(1, 3, 14), unified_size=(16, 16)),
        model=ModelConfig(n_scales=3, n_classes=5, base_width=6, attn_dim=8),
        learning_rate=1e-3,
        warmup_iterations=min(5, iterations),
        seed=seed,
        checkpoint_every=0,
        workers=workers,
    )


def test_train_smoke_single_iteration(tmp_path):
    config = _small_train_config(tmp_path, iterations=1)
    result = train_loop(config)
    assert len(result.rows) == 1
    row = result.rows[0]
    assert row[0] == 1 and np.isfinite(row[4])


def test_train_same_seed_bitwise_identical(tmp_path):
    rows_a = train_loop(_small_train_config(tmp_path, seed=9)).rows
    rows_b = train_loop(_small_train_config(tmp_path, seed=9)).rows
    assert rows_a == rows_b


def test_train_prefetch_workers_match_serial(tmp_path):
    serial = train_loop(_small_train_config(tmp_path, seed=4, workers=1)).rows
    pooled = train_loop(_small_train_config(tmp_path, seed=4, workers=3)).rows
    assert serial == pooled


def test_train_loss_log_format(tmp_path):
    config = _small_train_config(tmp_path, iterations=3)
    result = train_loop(config)
    with open(result.log_path) as f:
        header = f.readline().strip()
    assert header == "iter,dice,ce_main,ce_aux,total,lr"


def test_train_config_validation(tmp_path):
    with pytest.raises(ValueError):
        _small_train_config(tmp_path, iterations=0)
    config = _small_train_config(tmp_path, iterations=10)
    config.warmup_iterations = 20
    with pytest.raises(ValueError):
        TrainConfig(**{**config.__dict__})
