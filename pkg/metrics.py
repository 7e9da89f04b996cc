"""Evaluation metrics: DSC, HD/HD95, AUC, F1, MCC, accuracy, IoU and MRE.

All functions are pure and operate on numpy arrays (or things convertible to them).
"""

import math
from collections.abc import Sequence
from typing import Any, NamedTuple

import numpy as np
from loguru import logger
from scipy import ndimage
from scipy.spatial.distance import cdist
from sklearn.metrics import accuracy_score, f1_score, matthews_corrcoef, roc_auc_score

from constant import CLS, DET, REG, SEG, primary_metric
from exceptions import ShapeError, UndefinedMetricError, ValidationError
from models import BoundingBox, MetricReport

_FOUR_CONNECTIVITY = ndimage.generate_binary_structure(2, 1)


class HausdorffResult(NamedTuple):
    value: float
    convention: bool  # scored by an empty-mask convention


def _same_shape(action: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(action, f'形状不一致: {a.shape} vs {b.shape}')


def dsc(pred_mask: Any, gt_mask: Any) -> float:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    _same_shape('计算 DSC', pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """4-connectivity boundary: foreground pixels with a background (or off-image) neighbour."""
    mask = mask.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=_FOUR_CONNECTIVITY, border_value=0)
    return mask & ~eroded


def hausdorff(pred_mask: Any, gt_mask: Any, percentile: float | None = None) -> HausdorffResult:
    """Symmetric Hausdorff distance between boundary pixel sets, in pixels.

    With ``percentile`` (e.g. 95) the directed distances are replaced by that percentile,
    giving HD95. Both masks empty → 0; exactly one empty → image diagonal. Both cases
    are reported as conventions.
    """
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    _same_shape('计算 Hausdorff 距离', pred, gt)
    pred_empty, gt_empty = not pred.any(), not gt.any()
    if pred_empty and gt_empty:
        return HausdorffResult(0.0, True)
    if pred_empty or gt_empty:
        h, w = pred.shape
        return HausdorffResult(math.hypot(h - 1, w - 1), True)

    a = np.argwhere(boundary(pred)).astype(np.float64)
    b = np.argwhere(boundary(gt)).astype(np.float64)
    distances = cdist(a, b)
    forward = distances.min(axis=1)
    backward = distances.min(axis=0)
    if percentile is None:
        value = max(forward.max(), backward.max())
    else:
        value = max(np.percentile(forward, percentile), np.percentile(backward, percentile))
    return HausdorffResult(float(value), False)


def roc_auc(scores: Any, gt_classes: Any) -> float:
    """Binary Mann-Whitney AUC (ties count half) or macro one-vs-rest over present classes."""
    scores = np.asarray(scores, dtype=np.float64)
    gt = np.asarray(gt_classes).astype(np.int64).reshape(-1)
    if scores.shape[0] != gt.shape[0]:
        raise ShapeError('计算 AUC', f'分数 {scores.shape[0]} 与标签 {gt.shape[0]} 数量不符')
    present = np.unique(gt)
    if present.size < 2:
        raise UndefinedMetricError('计算 AUC', f'标签中只有 {present.size} 个类别，AUC 无定义')

    if scores.ndim == 1 or (scores.ndim == 2 and scores.shape[1] == 2):
        positive = scores if scores.ndim == 1 else scores[:, 1]
        if present.size > 2:
            raise UndefinedMetricError('计算 AUC', '一维分数只支持二分类标签')
        return float(roc_auc_score(gt == present[1], positive))

    per_class = [roc_auc_score(gt == c, scores[:, c]) for c in present]
    return float(np.mean(per_class))


def f1_and_mcc(pred_classes: Any, gt_classes: Any) -> tuple[float, float]:
    pred = np.asarray(pred_classes).reshape(-1)
    gt = np.asarray(gt_classes).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError('计算 F1/MCC', f'预测 {pred.shape[0]} 与标签 {gt.shape[0]} 数量不符')
    if pred.size == 0:
        raise ValidationError('计算 F1/MCC', '样本为空')
    f1 = f1_score(gt, pred, average='macro', zero_division=0)
    mcc = matthews_corrcoef(gt, pred)
    return float(f1), float(mcc)


def accuracy(pred_classes: Any, gt_classes: Any) -> float:
    pred = np.asarray(pred_classes).reshape(-1)
    gt = np.asarray(gt_classes).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeError('计算准确率', f'预测 {pred.shape[0]} 与标签 {gt.shape[0]} 数量不符')
    return float(accuracy_score(gt, pred))


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    inter_w = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    inter_h = max(0.0, min(ay2, by2) - max(ay1, by1))
    intersection = inter_w * inter_h
    union = a.bw * a.bh + b.bw * b.bh - intersection
    if union <= 0:
        return 0.0
    return intersection / union


def mre(preds: Any, gts: Any, scales: Any) -> float:
    """Mean |pred·scale − gt| in original-resolution pixels."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), preds.shape)
    if preds.shape != gts.shape:
        raise ShapeError('计算 MRE', f'预测 {preds.shape[0]} 与标签 {gts.shape[0]} 数量不符')
    if preds.size == 0:
        raise ValidationError('计算 MRE', '样本为空')
    if np.any(scales <= 0):
        raise ValidationError('计算 MRE', '缩放比例必须为正', 'scale')
    return float(np.mean(np.abs(preds * scales - gts)))


class MetricAccumulator:
    """Collects per-sample predictions of one task and scores them into a MetricReport."""

    def __init__(self, task_type: str, num_classes: int | None = None) -> None:
        self.task_type = task_type
        self.num_classes = num_classes
        self._pred: list[Any] = []
        self._gt: list[Any] = []
        self._scale: list[float] = []
        self._scores: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._gt)

    def add_masks(self, pred_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> None:
        self._pred.extend(np.asarray(m) for m in pred_masks)
        self._gt.extend(np.asarray(m) for m in gt_masks)

    def add_classes(self, probabilities: np.ndarray, gt_classes: Sequence[int]) -> None:
        probabilities = np.asarray(probabilities, dtype=np.float64)
        self._scores.extend(probabilities)
        self._pred.extend(int(i) for i in probabilities.argmax(axis=1))
        self._gt.extend(int(c) for c in gt_classes)

    def add_values(
        self, preds: Sequence[float], gts: Sequence[float], scales: Sequence[float]
    ) -> None:
        self._pred.extend(float(p) for p in preds)
        self._gt.extend(float(g) for g in gts)
        self._scale.extend(float(s) for s in scales)

    def add_boxes(self, preds: Sequence[BoundingBox], gts: Sequence[BoundingBox]) -> None:
        self._pred.extend(preds)
        self._gt.extend(gts)

    def _segmentation(self) -> dict[str, tuple[float, int]]:
        classes = range(1, max(self.num_classes or 2, 2))
        dscs, hds, hd95s = [], [], []
        flagged = 0
        for pred, gt in zip(self._pred, self._gt, strict=True):
            dscs.append(float(np.mean([dsc(pred == c, gt == c) for c in classes])))
            full = hausdorff(pred > 0, gt > 0)
            hds.append(full.value)
            hd95s.append(hausdorff(pred > 0, gt > 0, percentile=95).value)
            flagged += int(full.convention)
        return {
            'dsc': (float(np.mean(dscs)), 0),
            'hd': (float(np.mean(hds)), flagged),
            'hd95': (float(np.mean(hd95s)), flagged),
        }

    def _classification(self, task_id: str) -> dict[str, tuple[float, int]]:
        values: dict[str, tuple[float, int]] = {}
        try:
            values['auc'] = (roc_auc(np.stack(self._scores), self._gt), 0)
        except UndefinedMetricError as exc:
            logger.warning("任务 '{}' 跳过 AUC: {}", task_id, exc.message)
        f1, mcc = f1_and_mcc(self._pred, self._gt)
        values['f1'] = (f1, 0)
        values['mcc'] = (mcc, 0)
        values['accuracy'] = (accuracy(self._pred, self._gt), 0)
        return values

    def compute(self, task_id: str = '') -> dict[str, tuple[float, int]]:
        """Metric name → (value, flagged count)."""
        if not self._gt:
            raise ValidationError('计算指标', f"任务 '{task_id}' 没有可评估的样本")
        if self.task_type == SEG:
            return self._segmentation()
        if self.task_type == CLS:
            return self._classification(task_id)
        if self.task_type == REG:
            return {'mre': (mre(self._pred, self._gt, self._scale), 0)}
        if self.task_type == DET:
            ious = [box_iou(p, g) for p, g in zip(self._pred, self._gt, strict=True)]
            return {'iou': (float(np.mean(ious)), 0)}
        raise ValidationError('计算指标', f'未知任务类型: {self.task_type}')

    def write(self, report: MetricReport, task_id: str, primary_only: bool = False) -> None:
        values = self.compute(task_id)
        primary = primary_metric(self.task_type)
        for metric, (value, flagged) in values.items():
            if primary_only and metric != primary:
                continue
            report.add(task_id, metric, value, len(self), flagged=flagged)
