import numpy as np
import pytest

from frustumseg.geometry import FrustumConfig, ProjectionReferencePoint
from frustumseg.infer import (
    LogitCanvas,
    colorize,
    infer_image,
    plan_prps,
    predict_window,
)
from frustumseg.model import ForwardResult, ModelConfig, ModelParams
from frustumseg.raster import IGNORE_LABEL, RasterImage


def test_plan_exact_tiling_four_windows():
    plan = plan_prps((1024, 1024), 0.5, 512)
    assert len(plan.prps) == 4
    assert plan.native_size == (512, 512)
    assert {r[:2] for r in plan.rects} == {(0, 0), (512, 0), (0, 512), (512, 512)}


def test_plan_quarter_stride_gives_25_windows():
    plan = plan_prps((1024, 1024), 0.5, 128)
    origins = sorted({r[0] for r in plan.rects})
    assert origins == [0, 128, 256, 384, 512]
    assert len(plan.prps) == 25


def test_plan_degenerate_full_image():
    plan = plan_prps((640, 480), 1.0, 123)
    assert len(plan.prps) == 1
    assert plan.rects[0] == (0, 0, 640, 480)


def test_plan_rejects_oversized_stride():
    with pytest.raises(ValueError):
        plan_prps((1024, 1024), 0.5, 513)
    with pytest.raises(ValueError):
        plan_prps((1024, 1024), 0.5, 0)


def test_plan_prps_feasible_for_awkward_ratios():
    """Rounded native sizes must still give in-bounds reference points."""
    for w_img, h_img, t0 in ((1000, 700, 1 / 3), (999, 777, 1 / 7), (1024, 1024, 1 / 14)):
        stride = max(1, int(round(t0 * min(w_img, h_img))) // 2)
        plan = plan_prps((w_img, h_img), t0, stride)
        nh, nw = plan.native_size
        for prp, rect in zip(plan.prps, plan.rects):
            assert 0 <= prp.w <= w_img and 0 <= prp.h <= h_img
            assert 0 <= rect[0] and rect[2] <= w_img
            assert 0 <= rect[1] and rect[3] <= h_img
        # union of rects covers the image
        cover = np.zeros((h_img, w_img), dtype=bool)
        for x0, y0, x1, y1 in plan.rects:
            cover[y0:y1, x0:x1] = True
        assert cover.all()


def test_canvas_single_window_equals_logits():
    canvas = LogitCanvas(3, 8, 8)
    logits = np.random.default_rng(0).normal(size=(3, 8, 8))
    canvas.accumulate((0, 0, 8, 8), logits)
    assert np.array_equal(canvas.sums, logits)
    assert (canvas.coverage == 1).all()
    assert np.array_equal(canvas.finalize().data, np.argmax(logits, axis=0))


def test_canvas_double_accumulation_keeps_argmax():
    canvas = LogitCanvas(3, 4, 4)
    logits = np.random.default_rng(1).normal(size=(3, 4, 4))
    canvas.accumulate((0, 0, 4, 4), logits)
    canvas.accumulate((0, 0, 4, 4), logits)
    assert np.allclose(canvas.sums, 2 * logits)
    assert (canvas.coverage == 2).all()
    assert np.array_equal(canvas.finalize().data, np.argmax(logits, axis=0))


def test_canvas_matches_per_pixel_brute_force():
    rng = np.random.default_rng(2)
    h = w = 48
    windows = []
    for _ in range(7):
        x0, y0 = int(rng.integers(0, 30)), int(rng.integers(0, 30))
        x1, y1 = x0 + int(rng.integers(4, 18)), y0 + int(rng.integers(4, 18))
        x1, y1 = min(x1, w), min(y1, h)
        windows.append(((x0, y0, x1, y1), rng.normal(size=(2, y1 - y0, x1 - x0))))
    canvas = LogitCanvas(2, h, w)
    for rect, logits in windows:
        canvas.accumulate(rect, logits)
    for py in range(h):
        for px in range(w):
            total = np.zeros(2)
            hits = 0
            for (x0, y0, x1, y1), logits in windows:
                if x0 <= px < x1 and y0 <= py < y1:
                    total += logits[:, py - y0, px - x0]
                    hits += 1
            assert canvas.coverage[py, px] == hits
            assert np.array_equal(canvas.sums[:, py, px], total) or np.allclose(
                canvas.sums[:, py, px], total, atol=0
            )


def test_canvas_rejects_out_of_bounds_and_uncovered():
    canvas = LogitCanvas(2, 4, 4)
    with pytest.raises(ValueError):
        canvas.accumulate((2, 2, 5, 4), np.zeros((2, 2, 3)))
    canvas.accumulate((0, 0, 4, 2), np.ones((2, 2, 4)))
    with pytest.raises(ValueError, match=r"x=0, y=2"):
        canvas.finalize()


def test_permuted_plan_order_changes_little():
    """Summation is order-independent up to float reassociation; argmax may
    flip only where the top two summed logits are within the same slack."""
    plan = plan_prps((96, 96), 0.25, 8)
    rng = np.random.default_rng(10)
    logits = [rng.normal(size=(3, 24, 24)) for _ in plan.rects]
    forward_order = LogitCanvas(3, 96, 96)
    for rect, lg in zip(plan.rects, logits):
        forward_order.accumulate(rect, lg)
    permuted = LogitCanvas(3, 96, 96)
    order = rng.permutation(len(plan.rects))
    for k in order:
        permuted.accumulate(plan.rects[k], logits[k])
    rel = np.abs(permuted.sums - forward_order.sums) / np.maximum(np.abs(forward_order.sums), 1e-12)
    assert rel.max() < 1e-6
    a = forward_order.finalize().data
    b = permuted.finalize().data
    disagree = a != b
    if disagree.any():
        top2 = np.sort(forward_order.sums, axis=0)[-2:]
        gap = top2[1] - top2[0]
        assert (gap[disagree] < 1e-6).all()


def test_finalize_ties_pick_lowest_class():
    canvas = LogitCanvas(4, 2, 2)
    canvas.accumulate((0, 0, 2, 2), np.ones((4, 2, 2)))
    assert (canvas.finalize().data == 0).all()


def test_finalize_hand_set_sums():
    canvas = LogitCanvas(3, 2, 2)
    sums = np.array(
        [[[1.0, 5.0], [0.0, 2.0]], [[2.0, 5.0], [-1.0, 7.0]], [[0.5, 4.0], [3.0, 7.0]]]
    )
    canvas.accumulate((0, 0, 2, 2), sums)
    assert np.array_equal(canvas.finalize().data, [[1, 0], [2, 1]])


def _constant_stub(values):
    values = np.asarray(values, dtype=np.float64)

    def forward_fn(patches):
        h, w = patches[0].shape[:2]
        logits = np.tile(values[:, None, None], (1, h, w))
        return ForwardResult(main_logits=logits, aux_logits=logits)

    return forward_fn


def test_predict_window_constant_stub():
    rng = np.random.default_rng(3)
    image = RasterImage(data=rng.uniform(0, 1, (64, 64, 3)))
    frustum = FrustumConfig(distances=(1, 4), unified_size=(8, 8))
    prp = ProjectionReferencePoint(32.0, 32.0)
    logits, rect = predict_window(None, image, prp, frustum, forward_fn=_constant_stub([0.1, 0.9, 0.4]))
    assert rect == (24, 24, 40, 40)
    assert np.allclose(logits, np.array([0.1, 0.9, 0.4])[:, None, None])


def test_predict_window_native_equals_unified_is_identity():
    calls = {}

    def forward_fn(patches):
        logits = np.random.default_rng(4).normal(size=(3, 16, 16))
        calls["logits"] = logits
        return ForwardResult(main_logits=logits, aux_logits=logits)

    image = RasterImage(data=np.zeros((64, 64, 3)))
    frustum = FrustumConfig(distances=(1, 4), unified_size=(16, 16))
    prp = ProjectionReferencePoint(0.0, 0.0)  # window (0, 0, 16, 16), native = unified
    logits, rect = predict_window(None, image, prp, frustum, forward_fn=forward_fn)
    assert rect == (0, 0, 16, 16)
    assert np.array_equal(logits, calls["logits"])


def test_predict_window_regression_fixture():
    config = ModelConfig(n_scales=3, n_classes=3, base_width=6, main_depth=2, sub_depth=1, attn_dim=4)
    params = ModelParams.initialize(config, 77)
    for i in (1, 2):
        params.values[f"alpha{i}"][...] = 0.25 * i
    rng = np.random.default_rng(55)
    image = RasterImage(data=rng.uniform(0, 1, (64, 64, 3)))
    frustum = FrustumConfig(distances=(1, 3, 14), unified_size=(8, 8))
    logits, rect = predict_window(params, image, ProjectionReferencePoint(20.0, 30.0), frustum)
    assert rect == (19, 28, 24, 33)
    assert logits.shape == (3, 5, 5)
    assert logits.sum() == pytest.approx(0.6998608644668294, abs=1e-10)
    assert logits[0, 0, 0] == pytest.approx(0.026126944585272035, abs=1e-12)
    assert logits[2, 3, 1] == pytest.approx(-0.00790329500116948, abs=1e-12)


def test_infer_image_constant_stub_uniform_map():
    image = RasterImage(data=np.zeros((96, 96, 3)))
    frustum = FrustumConfig(distances=(1, 6), unified_size=(8, 8))
    pred = infer_image(None, image, frustum, stride=8, forward_fn=_constant_stub([0.2, 1.5, 0.3]))
    assert (pred.data == 1).all()
    assert pred.data.shape == (96, 96)


def test_infer_image_single_tile_matches_window_argmax():
    config = ModelConfig(n_scales=1, n_classes=4, base_width=4, main_depth=2, sub_depth=1, attn_dim=4)
    params = ModelParams.initialize(config, 6)
    rng = np.random.default_rng(7)
    image = RasterImage(data=rng.uniform(0, 1, (32, 32, 3)))
    frustum = FrustumConfig(distances=(2,), unified_size=(16, 16))
    pred = infer_image(params, image, frustum, stride=16)
    logits, rect = predict_window(params, image, ProjectionReferencePoint(16, 16), frustum)
    assert rect == (0, 0, 32, 32)
    assert np.array_equal(pred.data, np.argmax(logits, axis=0))


def test_infer_image_workers_match_serial():
    config = ModelConfig(n_scales=2, n_classes=3, base_width=4, main_depth=2, sub_depth=1, attn_dim=4)
    params = ModelParams.initialize(config, 8)
    params.values["alpha1"][...] = 0.5
    rng = np.random.default_rng(9)
    image = RasterImage(data=rng.uniform(0, 1, (64, 64, 3)))
    frustum = FrustumConfig(distances=(1, 4), unified_size=(8, 8))
    serial = infer_image(params, image, frustum, stride=8, workers=1)
    pooled = infer_image(params, image, frustum, stride=8, workers=3)
    assert np.array_equal(serial.data, pooled.data)


def test_colorize_palette_and_ignore():
    from frustumseg.raster import LabelMap

    data = np.array([[0, 1], [4, IGNORE_LABEL]], dtype=np.uint8)
    rgb = colorize(LabelMap(data=data, class_count=5))
    assert rgb.data.shape == (2, 2, 3)
    assert np.array_equal(rgb.data[1, 1], [0.0, 0.0, 0.0])
    assert not np.array_equal(rgb.data[0, 0], rgb.data[0, 1])
