"""Confusion-matrix evaluation and the overlap-gain report.

Metrics follow the standard forms: IoU = TP / (TP + FP + FN) per class,
overall accuracy = trace / total, F1 = 2 TP / (2 TP + FP + FN).  Classes
that never occur in either prediction or truth are left out of the means;
IGNORE pixels are skipped entirely.
"""

from dataclasses import dataclass

import numpy as np

from . import infer, raster


class ConfusionMatrix:
    """C x C counts, entry (truth, prediction)."""

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, prediction, truth) -> None:
        pred = prediction.data if isinstance(prediction, raster.LabelMap) else np.asarray(prediction)
        true = truth.data if isinstance(truth, raster.LabelMap) else np.asarray(truth)
        if pred.shape != true.shape:
            raise ValueError(f"shapes differ: prediction {pred.shape}, truth {true.shape}")
        valid = true != raster.IGNORE_LABEL
        p = pred[valid].astype(np.int64)
        t = true[valid].astype(np.int64)
        if p.size and (p.max() >= self.n_classes or t.max() >= self.n_classes):
            raise ValueError(f"class index out of range for {self.n_classes} classes")
        self.counts += np.bincount(
            t * self.n_classes + p, minlength=self.n_classes**2
        ).reshape(self.n_classes, self.n_classes)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _tp_fp_fn(self):
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn

    def present_classes(self) -> np.ndarray:
        tp, fp, fn = self._tp_fp_fn()
        return (tp + fp + fn) > 0

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; nan where the class is absent everywhere."""
        tp, fp, fn = self._tp_fp_fn()
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)

    def per_class_f1(self) -> np.ndarray:
        tp, fp, fn = self._tp_fp_fn()
        denom = 2 * tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), np.nan)

    def miou(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.nanmean(self.per_class_iou()))

    def oa(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.diag(self.counts).sum() / self.total)

    def mf1(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.nanmean(self.per_class_f1()))


def evaluate_pairs(pairs, n_classes: int) -> ConfusionMatrix:
    """Accumulate one matrix over (prediction, truth) pairs."""
    cm = ConfusionMatrix(n_classes)
    for pred, true in pairs:
        cm.update(pred, true)
    return cm


@dataclass(frozen=True)
class OverlapDeltaReport:
    stride_no_overlap: int
    stride_overlap: int
    miou_no_overlap: float
    miou_overlap: float

    @property
    def delta(self) -> float:
        return self.miou_overlap - self.miou_no_overlap

    def rows(self) -> list[tuple[str, float]]:
        return [
            ("miou_no_overlap", self.miou_no_overlap),
            ("miou_overlap", self.miou_overlap),
            ("delta", self.delta),
        ]

    def to_text(self) -> str:
        header = f"{'mIoU w/o overlap':>18} {'mIoU w/ overlap':>17} {'delta':>8}"
        values = f"{self.miou_no_overlap:>18.4f} {self.miou_overlap:>17.4f} {self.delta:>8.4f}"
        return header + "\n" + values


def overlap_delta(
    params,
    entries,
    config,
    stride_a: int,
    stride_b: int,
    *,
    n_classes: int | None = None,
    workers: int = 1,
    forward_fn=None,
) -> OverlapDeltaReport:
    """mIoU without overlap (stride_a) vs with overlap (stride_b < stride_a)."""
    if stride_a <= stride_b:
        raise ValueError("stride_a must exceed stride_b (less overlap first)")
    classes = n_classes or params.config.n_classes
    cm_a = ConfusionMatrix(classes)
    cm_b = ConfusionMatrix(classes)
    for entry in entries:
        image = raster.load_raster(entry.image_path)
        truth = raster.load_labels(entry.label_path, classes)
        for stride, cm in ((stride_a, cm_a), (stride_b, cm_b)):
            pred = infer.infer_image(
                params, image, config, stride, workers=workers, forward_fn=forward_fn
            )
            cm.update(pred, truth)
    return OverlapDeltaReport(stride_a, stride_b, cm_a.miou(), cm_b.miou())


def format_report(rows: list[tuple[str, float]]) -> str:
    """Aligned metric/value text block."""
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value:.6f}" for name, value in rows)


def write_report_csv(rows: list[tuple[str, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric,value\n")
        for name, value in rows:
            f.write(f"{name},{value:.10g}\n")


def summary_rows(cm: ConfusionMatrix, per_class: bool = False, class_names=None) -> list:
    rows = [("miou", cm.miou()), ("oa", cm.oa()), ("mf1", cm.mf1())]
    if per_class:
        iou = cm.per_class_iou()
        for k in range(cm.n_classes):
            name = class_names[k] if class_names else f"class_{k}"
            if not np.isnan(iou[k]):
                rows.append((f"iou_{name}", float(iou[k])))
    return rows
