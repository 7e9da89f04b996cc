from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any

import torch
import torch.nn.functional as F

from config import DICE_EPS, FOCAL_ALPHA, FOCAL_BETA, FOCAL_CLAMP, SMOOTH_L1_BETA
from constant import CLS, DET, REG, SEG
from exceptions import ConfigurationError, ShapeError, ValidationError
from heads import DetectionGrid
from models import TaskSpec


@dataclass(frozen=True)
class LossWeights:
    """λ_t per task; tasks without an entry weigh 1."""

    weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        negative = sorted(t for t, w in self.weights.items() if w < 0)
        if negative:
            raise ConfigurationError('损失权重', f'权重不能为负: {negative}', 'loss_weight')

    def of(self, task_id: str) -> float:
        return float(self.weights.get(task_id, 1.0))

    @classmethod
    def from_tasks(cls, tasks: Iterable[TaskSpec]) -> 'LossWeights':
        return cls({task.task_id: task.loss_weight for task in tasks})


def _batched(tensor: torch.Tensor, dims: int) -> torch.Tensor:
    return tensor.unsqueeze(0) if tensor.dim() == dims - 1 else tensor


def dice_loss(
    probabilities: torch.Tensor, gt_mask: torch.Tensor, eps: float = DICE_EPS
) -> torch.Tensor:
    """Soft Dice over foreground classes, averaged over the batch.

    ``probabilities`` is (B, C, H, W) or (C, H, W); ``gt_mask`` holds class ids (B, H, W)
    or (H, W). With C = 1 the single channel is the foreground and ``gt_mask`` is binary.
    """
    probs = _batched(probabilities, 4)
    gt = _batched(gt_mask, 3).long()
    if probs.dim() != 4 or gt.shape != (probs.shape[0], *probs.shape[2:]):
        raise ShapeError(
            '计算 Dice 损失', f'概率 {tuple(probs.shape)} 与掩码 {tuple(gt.shape)} 形状不符'
        )
    num_classes = probs.shape[1]
    upper = max(num_classes, 2)
    if gt.numel() and (int(gt.min()) < 0 or int(gt.max()) >= upper):
        raise ValidationError('计算 Dice 损失', f'掩码类别超出 [0, {upper})')

    if num_classes == 1:
        fg_probs = probs
        fg_target = gt.unsqueeze(1).to(probs.dtype)
    else:
        target = F.one_hot(gt, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
        fg_probs = probs[:, 1:]
        fg_target = target[:, 1:]

    intersection = (fg_probs * fg_target).sum(dim=(-2, -1))
    denominator = fg_probs.sum(dim=(-2, -1)) + fg_target.sum(dim=(-2, -1))
    dice = (2.0 * intersection + eps) / (denominator + eps)
    return (1.0 - dice.mean(dim=1)).mean()


def cross_entropy_loss(logits: torch.Tensor, gt_class: torch.Tensor | int) -> torch.Tensor:
    logits = _batched(logits, 2)
    target = torch.as_tensor(gt_class, device=logits.device).long().reshape(-1)
    num_classes = logits.shape[-1]
    if num_classes < 2:
        raise ValidationError('计算交叉熵损失', f'类别数 {num_classes} < 2')
    if target.shape[0] != logits.shape[0]:
        raise ShapeError('计算交叉熵损失', f'标签数 {target.shape[0]} != 批大小 {logits.shape[0]}')
    if int(target.min()) < 0 or int(target.max()) >= num_classes:
        raise ValidationError('计算交叉熵损失', f'类别标签超出 [0, {num_classes})')
    return F.cross_entropy(logits, target)


def l1_loss(pred: torch.Tensor | float, gt: torch.Tensor | float) -> torch.Tensor:
    pred = torch.as_tensor(pred)
    if not pred.is_floating_point():
        pred = pred.to(torch.get_default_dtype())
    gt = torch.as_tensor(gt, dtype=pred.dtype, device=pred.device)
    return (pred - gt).abs().mean()


def focal_heatmap_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    alpha: float = FOCAL_ALPHA,
    beta: float = FOCAL_BETA,
    clamp: float = FOCAL_CLAMP,
) -> torch.Tensor:
    """Penalty-reduced focal loss on a Gaussian heatmap target, normalised by peak count."""
    pred = _batched(pred, 3)
    target = _batched(target, 3).to(pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError('计算焦点损失', f'预测 {tuple(pred.shape)} 与目标 {tuple(target.shape)} 不符')
    p = pred.clamp(clamp, 1.0 - clamp)
    positive = target.eq(1.0)
    pos_term = -((1.0 - p) ** alpha) * torch.log(p)
    neg_term = -((1.0 - target) ** beta) * (p**alpha) * torch.log(1.0 - p)
    per_cell = torch.where(positive, pos_term, neg_term)
    num_pos = positive.flatten(1).sum(dim=1).clamp(min=1).to(pred.dtype)
    return (per_cell.flatten(1).sum(dim=1) / num_pos).mean()


def box_regression_loss(
    box_params: torch.Tensor,
    cells: torch.Tensor,
    regression: torch.Tensor,
    beta: float = SMOOTH_L1_BETA,
) -> torch.Tensor:
    """Smooth-L1 on (dx, dy, bw, bh), summed over channels, at each sample's center cell."""
    box_params = _batched(box_params, 4)
    cells = _batched(torch.as_tensor(cells, device=box_params.device), 2).long()
    regression = _batched(regression, 2).to(box_params.dtype)
    batch = box_params.shape[0]
    if cells.shape != (batch, 2) or regression.shape != (batch, 4):
        raise ValidationError('计算边框回归损失', '缺少中心格目标或目标数量与批大小不符', 'cells')
    index = torch.arange(batch, device=box_params.device)
    at_center = box_params[index, :, cells[:, 0], cells[:, 1]]
    per_channel = F.smooth_l1_loss(at_center, regression, reduction='none', beta=beta)
    return per_channel.sum(dim=1).mean()


def detection_loss(
    pred: DetectionGrid,
    heatmap: torch.Tensor,
    cells: torch.Tensor | None,
    regression: torch.Tensor,
) -> torch.Tensor:
    if cells is None:
        raise ValidationError('计算检测损失', '缺少中心格目标', 'cells')
    if pred.heatmap.shape[-2:] != heatmap.shape[-2:]:
        raise ShapeError(
            '计算检测损失',
            f'热图网格 {tuple(pred.heatmap.shape[-2:])} != 目标 {tuple(heatmap.shape[-2:])}',
        )
    return focal_heatmap_loss(pred.heatmap, heatmap) + box_regression_loss(
        pred.box_params, cells, regression
    )


def multi_task_loss(
    per_task_losses: Mapping[str, Any], weights: LossWeights | None = None
) -> Any:
    """L = Σ_t λ_t L_t over the tasks present."""
    if not per_task_losses:
        raise ValidationError('计算多任务损失', '任务集合为空，目标函数无定义')
    weights = weights or LossWeights()
    total: Any = 0.0
    for task_id, loss in per_task_losses.items():
        total = total + weights.of(task_id) * loss
    return total


def task_loss(task_type: str, output: Any, target: Any) -> torch.Tensor:
    """Dispatch to the loss of ``task_type`` on a collated batch target."""
    if task_type == SEG:
        if output.shape[-3] == 1:
            probabilities = torch.sigmoid(output)
        else:
            probabilities = torch.softmax(output, dim=-3)
        return dice_loss(probabilities, target)
    if task_type == CLS:
        return cross_entropy_loss(output, target)
    if task_type == REG:
        return l1_loss(output, target)
    if task_type == DET:
        return detection_loss(output, target.heatmap, target.cells, target.regression)
    raise ValidationError('计算任务损失', f'未知任务类型: {task_type}')
