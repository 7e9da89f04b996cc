import math
import threading
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from typing import Any, NamedTuple

import numpy as np
import torch
from loguru import logger

from backbone import EncoderConfig
from config import (
    BACKBONE_LEARNING_RATE,
    BACKBONE_LR_GRID,
    BASE_LEARNING_RATE,
    DECODER_LEARNING_RATE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    GRAD_CLIP_NORM,
    HEAD_LEARNING_RATE,
    MOE_LEARNING_RATE,
    NORMALIZE_MEAN,
    NORMALIZE_STD,
    WEIGHT_DECAY,
)
from constant import AU, CG, CLS, DET, REG, SEG, TS, normalize_paradigm, primary_metric
from data import (
    Augmenter,
    TaskDataset,
    TaskRegistry,
    evaluation_loader,
    set_loader_epoch,
    training_loader,
)
from exceptions import ConfigurationError, DataError, NumericError, ValidationError
from heads import SegmentationHeadConfig, detect_decode_batch
from metrics import MetricAccumulator
from models import Checkpoint, MetricReport, ParadigmPlan, TaskSpec, TrainingUnit
from network import M2DINO
from objectives import LossWeights, multi_task_loss, task_loss
from storage import canonical_state, restore_state
from utils import config_hash, resolve_device, seed_everything

# model construction draws from torch's global RNG
_INIT_LOCK = threading.Lock()


def to_device(target: Any, device: torch.device) -> Any:
    if isinstance(target, torch.Tensor):
        return target.to(device)
    if isinstance(target, tuple):
        return type(target)(*(to_device(item, device) for item in target))
    return target


@dataclass(frozen=True)
class OptimizerConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    base_lr: float = BASE_LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    backbone_lr: float = BACKBONE_LEARNING_RATE
    decoder_lr: float = DECODER_LEARNING_RATE
    moe_lr: float = MOE_LEARNING_RATE
    head_lr: float = HEAD_LEARNING_RATE
    grad_clip: float | None = GRAD_CLIP_NORM
    lr_grid: tuple[float, ...] = BACKBONE_LR_GRID
    batches_per_epoch: int | None = None

    def __post_init__(self) -> None:
        action = '优化器配置'
        if self.epochs < 1:
            raise ConfigurationError(action, 'epochs 必须 >= 1', 'epochs')
        if self.batch_size < 1:
            raise ConfigurationError(action, 'batch_size 必须 >= 1', 'batch_size')
        for name in ('base_lr', 'backbone_lr', 'decoder_lr', 'moe_lr', 'head_lr'):
            if not getattr(self, name) > 0:
                raise ConfigurationError(action, f'{name} 必须 > 0', name)
        if self.weight_decay < 0:
            raise ConfigurationError(action, 'weight_decay 不能为负', 'weight_decay')
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigurationError(action, 'grad_clip 必须为正或 null', 'grad_clip')
        grid = tuple(float(g) for g in self.lr_grid)
        if not grid or any(g <= 0 for g in grid):
            raise ConfigurationError(action, '学习率网格必须非空且为正', 'lr_grid')
        if not any(math.isclose(g, self.backbone_lr) for g in grid):
            raise ConfigurationError(action, f'学习率网格 {grid} 不包含 backbone_lr', 'lr_grid')
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigurationError(action, 'batches_per_epoch 必须 >= 1', 'batches_per_epoch')
        object.__setattr__(self, 'lr_grid', grid)

    def scaled(self, backbone_lr: float) -> 'OptimizerConfig':
        """Same config with every component lr scaled by ``backbone_lr / self.backbone_lr``."""
        factor = backbone_lr / self.backbone_lr
        payload = self.to_dict()
        for name in ('base_lr', 'backbone_lr', 'decoder_lr', 'moe_lr', 'head_lr'):
            payload[name] = payload[name] * factor
        payload['backbone_lr'] = backbone_lr
        return OptimizerConfig.from_dict(payload)

    def search_grid(self) -> list['OptimizerConfig']:
        return [self.scaled(lr) for lr in self.lr_grid]

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload['lr_grid'] = list(self.lr_grid)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> 'OptimizerConfig':
        unknown = sorted(set(payload) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError('优化器配置', f'未知字段: {unknown}', unknown[0])
        values = dict(payload)
        if 'lr_grid' in values:
            values['lr_grid'] = tuple(values['lr_grid'])
        return cls(**values)


class TrainResult(NamedTuple):
    checkpoint: Checkpoint
    log_rows: list[dict[str, Any]]
    report: MetricReport


def build_plan(paradigm: str, registry: TaskRegistry) -> ParadigmPlan:
    """TS: one MoE-free unit per task; CG: one MoE unit per group; AU: one MoE unit."""
    try:
        paradigm = normalize_paradigm(paradigm)
    except ValueError as exc:
        raise ConfigurationError('构建训练计划', str(exc), 'paradigm') from exc
    enrolled = registry.enrolled(paradigm)
    if len(enrolled) == 0:
        raise ConfigurationError('构建训练计划', f'没有参与 {paradigm} 范式的任务', 'paradigm')

    if paradigm == TS:
        units = [
            TrainingUnit(f'ts_{task_id}', (task_id,), False, index)
            for index, task_id in enumerate(sorted(enrolled.task_ids()))
        ]
    elif paradigm == CG:
        ungrouped = sorted(t.task_id for t in enrolled if not t.clinical_group)
        if ungrouped:
            raise ConfigurationError('构建训练计划', f'任务缺少临床分组: {ungrouped}', 'group')
        units = [
            TrainingUnit(f'cg_{group}', tuple(task_ids), True, index)
            for index, (group, task_ids) in enumerate(enrolled.groups().items())
        ]
    else:
        units = [TrainingUnit(f'{AU}_all', tuple(sorted(enrolled.task_ids())), True, 0)]

    plan = ParadigmPlan(paradigm, tuple(units))
    logger.info('训练计划 {}: {} 个单元', paradigm, len(plan.units))
    return plan


def select_best(scores: Sequence[float]) -> int:
    """1-based epoch of the highest score; ties keep the earliest."""
    if not scores:
        raise ValidationError('选择最佳轮次', '没有验证分数')
    best_index = 0
    for index, score in enumerate(scores):
        if score > scores[best_index]:
            best_index = index
    return best_index + 1


@torch.no_grad()
def predict_task(
    model: M2DINO, task: TaskSpec, dataset: TaskDataset, batch_size: int, workers: int = 0
) -> MetricAccumulator:
    model.eval()
    accumulator = MetricAccumulator(task.task_type, task.num_classes)
    grid = model.encoder_config.grid_size
    device = next(model.parameters()).device
    for batch in evaluation_loader(dataset, grid, batch_size, workers):
        out = model(batch.images.to(device), task.task_id)
        if task.task_type == SEG:
            if out.shape[1] == 1:
                pred = (torch.sigmoid(out[:, 0]) > 0.5).long()
            else:
                pred = out.argmax(dim=1)
            accumulator.add_masks(pred.cpu().numpy(), [m.cpu().numpy() for m in batch.labels])
        elif task.task_type == CLS:
            probabilities = torch.softmax(out, dim=-1).double().cpu().numpy()
            accumulator.add_classes(probabilities, batch.labels)
        elif task.task_type == REG:
            accumulator.add_values(
                out.double().cpu().tolist(),
                [label.value for label in batch.labels],
                [label.scale for label in batch.labels],
            )
        elif task.task_type == DET:
            accumulator.add_boxes(detect_decode_batch(out), batch.labels)
    return accumulator


def validate(
    model: M2DINO,
    val_sets: Mapping[str, TaskDataset],
    *,
    batch_size: int = DEFAULT_BATCH_SIZE,
    mre_reference: Mapping[str, float] | None = None,
    paradigm: str = '',
    seed: int = 0,
    checkpoint: str = '',
    workers: int = 0,
) -> tuple[MetricReport, float]:
    """Primary metric per task and the mean direction-normalised selection score.

    MRE enters as ``-(mre / reference)``, the reference being the epoch-0 value. A
    classification task whose validation labels hold one class falls back to accuracy.
    """
    if not val_sets or any(len(ds) == 0 for ds in val_sets.values()):
        raise ValidationError('验证模型', '验证集为空')
    report = MetricReport(paradigm=paradigm, seed=seed, checkpoint=checkpoint)
    report.selection = 'mean(dsc, auc|accuracy, iou, -mre/mre_epoch0)'
    terms: list[float] = []
    for task_id in sorted(val_sets):
        task = model.task(task_id)
        dataset = val_sets[task_id]
        values = predict_task(model, task, dataset, batch_size, workers).compute(task_id)
        metric = primary_metric(task.task_type)
        if metric not in values:
            logger.warning("任务 '{}' 的 {} 无定义，模型选择改用 accuracy", task_id, metric)
            metric = 'accuracy'
        value, flagged = values[metric]
        report.add(task_id, metric, value, len(dataset), flagged=flagged)
        if metric == 'mre':
            reference = (mre_reference or {}).get(task_id) or 1.0
            terms.append(-value / reference)
        else:
            terms.append(value)
        report.tasks[task_id] = {
            'group': task.clinical_group,
            'type': task.task_type,
            'n_images': task.n_images,
        }
    return report, float(np.mean(terms))


def evaluate_model(
    model: M2DINO,
    datasets: Mapping[str, TaskDataset],
    *,
    paradigm: str,
    seed: int,
    checkpoint: str,
    batch_size: int = DEFAULT_BATCH_SIZE,
    workers: int = 0,
) -> MetricReport:
    """Every metric of every task on ``datasets`` (validation or test split)."""
    report = MetricReport(paradigm=paradigm, seed=seed, checkpoint=checkpoint)
    for task_id in sorted(datasets):
        task = model.task(task_id)
        predict_task(model, task, datasets[task_id], batch_size, workers).write(report, task_id)
        report.tasks[task_id] = {
            'group': task.clinical_group,
            'type': task.task_type,
            'n_images': task.n_images,
        }
    return report


def tasks_from_snapshot(snapshot: Mapping[str, Mapping[str, Any]]) -> list[TaskSpec]:
    return [
        TaskSpec(
            task_id=task_id,
            task_type=entry['type'],
            clinical_group=entry['group'],
            num_classes=entry.get('num_classes'),
        )
        for task_id, entry in snapshot.items()
    ]


def model_from_checkpoint(checkpoint: Checkpoint, device: str | None = None) -> M2DINO:
    meta = checkpoint.meta
    try:
        encoder = EncoderConfig.from_dict(meta['encoder'])
        seg_config = SegmentationHeadConfig.from_dict(meta['segmentation'])
    except KeyError as exc:
        raise ConfigurationError('重建模型', f'检查点缺少配置 {exc}') from exc
    model = M2DINO(encoder, tasks_from_snapshot(checkpoint.registry), seg_config)
    model.to(resolve_device(device))
    restore_state(model, checkpoint.parameters)
    model.eval()
    return model


class Trainer:
    """Optimises one TrainingUnit and keeps the best-on-validation parameters."""

    def __init__(
        self,
        unit: TrainingUnit,
        registry: TaskRegistry,
        encoder: EncoderConfig,
        optimizer: OptimizerConfig,
        *,
        seg_config: SegmentationHeadConfig | None = None,
        seed: int = 0,
        paradigm: str = '',
        deterministic: bool = False,
        augment: bool = False,
        pretrained: Mapping[str, Any] | None = None,
        device: str | None = None,
        workers: int = 0,
    ) -> None:
        self.unit = unit
        self.device = resolve_device(device)
        self.registry = registry.subset(unit.task_ids)
        self.encoder = encoder.with_moe(unit.moe_enabled)
        self.optimizer_config = optimizer
        self.seg_config = seg_config or SegmentationHeadConfig()
        self.seed = seed
        self.paradigm = paradigm
        self.deterministic = deterministic
        self.augmenter = Augmenter() if augment else None
        self.pretrained = pretrained
        self.workers = workers
        self.loss_weights = LossWeights.from_tasks(self.registry)

    def describe(self) -> dict[str, Any]:
        return {
            'encoder': self.encoder.to_dict(),
            'segmentation': self.seg_config.to_dict(),
            'optimizer': self.optimizer_config.to_dict(),
            'unit': self.unit.to_dict(),
            'paradigm': self.paradigm,
            'seed': self.seed,
            'registry': self.registry.snapshot(),
            'augment': self.augmenter is not None,
            'normalization': {'mean': list(NORMALIZE_MEAN), 'std': list(NORMALIZE_STD)},
        }

    def build_model(self) -> M2DINO:
        with _INIT_LOCK:
            seed_everything(self.seed, self.deterministic)
            model = M2DINO(self.encoder, self.registry, self.seg_config)
        if self.pretrained is not None:
            model.backbone.load_pretrained(self.pretrained)
        return model.to(self.device)

    def build_optimizer(self, model: M2DINO) -> torch.optim.Optimizer:
        cfg = self.optimizer_config
        rates = {
            'backbone': cfg.backbone_lr,
            'moe': cfg.moe_lr,
            'decoder': cfg.decoder_lr,
            'heads': cfg.head_lr,
        }
        groups = [
            {'params': params, 'lr': rates[name], 'name': name}
            for name, params in model.parameter_groups().items()
            if params
        ]
        return torch.optim.AdamW(groups, lr=cfg.base_lr, weight_decay=cfg.weight_decay)

    def _warm_start(self, model: M2DINO, train_sets: Mapping[str, TaskDataset]) -> None:
        for task_id, dataset in train_sets.items():
            if model.task(task_id).task_type != REG or len(dataset) == 0:
                continue
            mean_target = float(np.mean([s.label.resized_value for s in dataset.samples]))
            model.head[task_id].warm_start(mean_target)
            logger.debug("任务 '{}' 回归头偏置初始化为 {:.4g}", task_id, mean_target)

    def train(
        self, datasets: Mapping[str, tuple[TaskDataset, TaskDataset]]
    ) -> TrainResult:
        cfg = self.optimizer_config
        missing = sorted(set(self.unit.task_ids) - set(datasets))
        if missing:
            raise DataError('训练', f'缺少任务数据: {missing}')
        train_sets = {t: datasets[t][0] for t in self.unit.task_ids}
        val_sets = {t: datasets[t][1] for t in self.unit.task_ids}
        sizes = {t: len(ds) for t, ds in train_sets.items()}

        model = self.build_model()
        self._warm_start(model, train_sets)
        optimizer = self.build_optimizer(model)
        grid = self.encoder.grid_size
        description = self.describe()
        digest = config_hash(description)
        report_kwargs = {
            'batch_size': cfg.batch_size,
            'paradigm': self.paradigm,
            'seed': self.seed,
            'checkpoint': self.unit.unit_id,
            'workers': self.workers,
        }

        mre_reference: dict[str, float] = {}
        initial, _ = validate(model, val_sets, **report_kwargs)
        for entry in initial.entries:
            if entry.metric == 'mre':
                mre_reference[entry.task_id] = entry.value
        logger.info("单元 '{}' 开始训练: {} 个任务, {} 轮", self.unit.unit_id, len(sizes), cfg.epochs)

        scores: list[float] = []
        best_state: dict[str, np.ndarray] | None = None
        best_report: MetricReport | None = None
        log_rows: list[dict[str, Any]] = []
        loader = training_loader(
            train_sets,
            grid,
            batch_size=cfg.batch_size,
            seed=self.seed,
            num_batches=cfg.batches_per_epoch,
            augmenter=self.augmenter,
            workers=self.workers,
        )
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            set_loader_epoch(loader, epoch)
            losses: dict[str, list[float]] = {t: [] for t in sorted(sizes)}
            for batch_index, batch in enumerate(loader):
                task_id = batch.task_id
                task = model.task(task_id)
                output = model(batch.images.to(self.device), task_id)
                target = to_device(batch.target, self.device)
                loss = multi_task_loss(
                    {task_id: task_loss(task.task_type, output, target)}, self.loss_weights
                )
                if not torch.isfinite(loss):
                    raise NumericError(
                        '训练', '损失出现非有限值', epoch=epoch, task_id=task_id, batch=batch_index
                    )
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                value = float(loss.detach())
                losses[task_id].append(value)
                logger.debug('epoch {} batch {} {} loss {:.6f}', epoch, batch_index, task_id, value)

            report, score = validate(
                model, val_sets, mre_reference=mre_reference, **report_kwargs
            )
            scores.append(score)
            row: dict[str, Any] = {'epoch': epoch}
            for task_id, values in losses.items():
                row[f'loss/{task_id}'] = float(np.mean(values)) if values else float('nan')
            for entry in report.entries:
                row[f'val/{entry.task_id}/{entry.metric}'] = entry.value
            row['score'] = score
            log_rows.append(row)
            if select_best(scores) == epoch:
                best_state = canonical_state(model)
                best_report = report
            logger.info(
                "单元 '{}' epoch {}/{}: score={:.6g} (best epoch {})",
                self.unit.unit_id, epoch, cfg.epochs, score, select_best(scores),
            )

        best_epoch = select_best(scores)
        restore_state(model, best_state)
        meta = dict(description)
        meta['mre_reference'] = mre_reference
        meta.pop('registry')
        meta.pop('seed')
        checkpoint = Checkpoint(
            parameters=best_state,
            config_hash=digest,
            registry=self.registry.snapshot(),
            best_score=scores[best_epoch - 1],
            epoch=best_epoch,
            seed=self.seed,
            meta=meta,
        )
        self.model = model
        return TrainResult(checkpoint, log_rows, best_report)
