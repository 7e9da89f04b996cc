import re
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from loguru import logger

from constant import CLS, PARADIGMS, SEG, TASK_TYPES, metric_direction
from exceptions import ManifestError, ValidationError

_TASK_ID_PATTERN = re.compile(r'^[A-Za-z0-9_-]+$')


@dataclass(frozen=True)
class SampleRecord:
    """Manifest entry for one image: relative path plus its label variant."""

    image: str
    label: dict[str, Any]
    original_resolution: tuple[int, int] | None = None

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {'image': self.image, 'label': dict(self.label)}
        if self.original_resolution is not None:
            payload['original_resolution'] = list(self.original_resolution)
        return payload


@dataclass(frozen=True)
class TaskSpec:
    """One task: identity, type, clinical group, label schema and loss weight λ_t."""

    task_id: str
    task_type: str
    clinical_group: str
    num_classes: int | None = None
    original_resolution: tuple[int, int] | None = None
    loss_weight: float = 1.0
    paradigms: tuple[str, ...] = PARADIGMS
    train: tuple[SampleRecord, ...] = field(default=(), repr=False)
    test: tuple[SampleRecord, ...] = field(default=(), repr=False)

    def __post_init__(self) -> None:
        if not self.task_id or not _TASK_ID_PATTERN.match(self.task_id):
            raise ManifestError('任务定义', f'非法 task_id: {self.task_id!r}', 'task_id')
        if self.task_type not in TASK_TYPES:
            raise ManifestError('任务定义', f'未知任务类型: {self.task_type!r}', 'type')
        if self.task_type == CLS and (self.num_classes is None or self.num_classes < 2):
            raise ManifestError('任务定义', '分类任务需要 num_classes >= 2', 'num_classes')
        if self.task_type == SEG:
            if self.num_classes is None:
                object.__setattr__(self, 'num_classes', 2)
            elif self.num_classes < 1:
                raise ManifestError('任务定义', '分割任务需要 num_classes >= 1', 'num_classes')
        if self.loss_weight < 0:
            raise ManifestError('任务定义', 'loss_weight 不能为负', 'loss_weight')
        unknown = [p for p in self.paradigms if p not in PARADIGMS]
        if unknown:
            raise ManifestError('任务定义', f'未知训练范式: {unknown}', 'paradigms')

    def __repr__(self) -> str:
        return (
            f"TaskSpec(task_id='{self.task_id}', type='{self.task_type}', "
            f"group='{self.clinical_group}', train={len(self.train)}, test={len(self.test)})"
        )

    @property
    def n_images(self) -> int:
        return len(self.train)

    def enrolled(self, paradigm: str) -> bool:
        return paradigm in self.paradigms

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            'task_id': self.task_id,
            'type': self.task_type,
            'group': self.clinical_group,
        }
        if self.num_classes is not None:
            payload['num_classes'] = self.num_classes
        if self.original_resolution is not None:
            payload['original_resolution'] = list(self.original_resolution)
        payload['loss_weight'] = self.loss_weight
        payload['paradigms'] = list(self.paradigms)
        payload['train'] = [record.to_dict() for record in self.train]
        payload['test'] = [record.to_dict() for record in self.test]
        return payload


class BoundingBox(NamedTuple):
    """Image-normalised box: center (cx, cy), extents (bw, bh), confidence score."""

    cx: float
    cy: float
    bw: float
    bh: float
    score: float = 1.0

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.bw / 2.0,
            self.cy - self.bh / 2.0,
            self.cx + self.bw / 2.0,
            self.cy + self.bh / 2.0,
        )

    def clamped(self) -> 'BoundingBox':
        def _unit(value: float) -> float:
            return min(max(float(value), 0.0), 1.0)

        return BoundingBox(
            _unit(self.cx), _unit(self.cy), _unit(self.bw), _unit(self.bh), _unit(self.score)
        )


class RegressionLabel(NamedTuple):
    """Measurement in original pixels plus the original/resized scale factor."""

    value: float
    scale: float

    @property
    def resized_value(self) -> float:
        return self.value / self.scale


@dataclass
class LabeledSample:
    """A preprocessed image (3×S×S) with its label in training space."""

    image: Any
    label: Any
    index: int = 0


@dataclass(frozen=True)
class TrainingUnit:
    """One model instance of a paradigm plan and the tasks it trains on."""

    unit_id: str
    task_ids: tuple[str, ...]
    moe_enabled: bool
    encoder_id: int

    def to_dict(self) -> dict[str, Any]:
        return {
            'unit_id': self.unit_id,
            'task_ids': list(self.task_ids),
            'moe_enabled': self.moe_enabled,
            'encoder_id': self.encoder_id,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> 'TrainingUnit':
        return cls(
            unit_id=str(payload['unit_id']),
            task_ids=tuple(payload['task_ids']),
            moe_enabled=bool(payload['moe_enabled']),
            encoder_id=int(payload['encoder_id']),
        )


@dataclass(frozen=True)
class ParadigmPlan:
    paradigm: str
    units: tuple[TrainingUnit, ...]

    def __repr__(self) -> str:
        return f"ParadigmPlan(paradigm='{self.paradigm}', units={len(self.units)})"


@dataclass(frozen=True)
class MetricEntry:
    task_id: str
    metric: str
    value: float
    direction: str
    n: int
    flagged: int = 0

    def to_dict(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            'task_id': self.task_id,
            'metric': self.metric,
            'value': self.value,
            'direction': self.direction,
            'n': self.n,
        }
        if self.flagged:
            payload['flagged'] = self.flagged
        return payload


@dataclass
class MetricReport:
    """Per-task metric values of one paradigm run, with direction metadata."""

    paradigm: str
    seed: int
    checkpoint: str
    entries: list[MetricEntry] = field(default_factory=list)
    tasks: dict[str, dict[str, Any]] = field(default_factory=dict)
    selection: str | None = None

    def add(
        self, task_id: str, metric: str, value: float, n: int, *, flagged: int = 0
    ) -> MetricEntry:
        if self.get(task_id, metric) is not None:
            raise ValidationError('记录指标', f'重复的指标条目: {task_id}/{metric}')
        entry = MetricEntry(
            task_id=task_id,
            metric=metric,
            value=float(value),
            direction=metric_direction(metric),
            n=int(n),
            flagged=int(flagged),
        )
        if flagged:
            logger.warning(
                "任务 '{}' 的 {} 有 {} 个样本按空掩码约定计分。", task_id, metric, flagged
            )
        self.entries.append(entry)
        return entry

    def get(self, task_id: str, metric: str) -> MetricEntry | None:
        for entry in self.entries:
            if entry.task_id == task_id and entry.metric == metric:
                return entry
        return None

    def task_ids(self) -> list[str]:
        return sorted({entry.task_id for entry in self.entries})

    def merge(self, other: 'MetricReport') -> None:
        for entry in other.entries:
            self.add(entry.task_id, entry.metric, entry.value, entry.n, flagged=entry.flagged)
        self.tasks.update(other.tasks)

    def to_dict(self) -> dict[str, Any]:
        meta: dict[str, Any] = {
            'paradigm': self.paradigm,
            'seed': self.seed,
            'checkpoint': self.checkpoint,
            'tasks': self.tasks,
        }
        if self.selection is not None:
            meta['selection'] = self.selection
        return {'meta': meta, 'results': [entry.to_dict() for entry in self.entries]}

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> 'MetricReport':
        try:
            meta = payload['meta']
            report = cls(
                paradigm=str(meta['paradigm']),
                seed=int(meta['seed']),
                checkpoint=str(meta['checkpoint']),
                tasks={str(k): dict(v) for k, v in meta.get('tasks', {}).items()},
                selection=meta.get('selection'),
            )
            for index, item in enumerate(payload['results']):
                entry = report.add(
                    str(item['task_id']),
                    str(item['metric']),
                    float(item['value']),
                    int(item['n']),
                    flagged=int(item.get('flagged', 0)),
                )
                if item.get('direction', entry.direction) != entry.direction:
                    raise ManifestError(
                        '读取指标报告', '指标方向与定义不符', f'results[{index}].direction'
                    )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError('读取指标报告', f'报告结构无效: {exc}') from exc
        return report


@dataclass(frozen=True)
class DeltaEntry:
    task_id: str
    metric: str
    ts_value: float
    other_value: float
    delta_percent: float | None
    delta_absolute: float
    direction: str
    group: str = ''


@dataclass(frozen=True)
class GroupDelta:
    group: str
    mean: float
    n_tasks: int
    n_images: int = 0
    cross_metric: bool = False


@dataclass
class DeltaReport:
    """Relative change of one paradigm against the task-specific baseline."""

    paradigm: str
    mode: str
    per_task: list[DeltaEntry] = field(default_factory=list)
    per_group: list[GroupDelta] = field(default_factory=list)
    baseline: str = 'ts'

    def entry(self, task_id: str, metric: str) -> DeltaEntry | None:
        for item in self.per_task:
            if item.task_id == task_id and item.metric == metric:
                return item
        return None


@dataclass
class Checkpoint:
    """Best-on-validation parameters of one training unit plus provenance."""

    parameters: dict[str, Any]
    config_hash: str
    registry: dict[str, Any]
    best_score: float
    epoch: int
    seed: int
    meta: dict[str, Any] = field(default_factory=dict)

    def __repr__(self) -> str:
        return (
            f'Checkpoint(epoch={self.epoch}, best_score={self.best_score:.6g}, '
            f'params={len(self.parameters)}, seed={self.seed})'
        )
