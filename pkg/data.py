import bisect
import json
import math
import os
import zlib
from collections.abc import Iterable, Iterator, Mapping, Sequence
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from PIL import Image, UnidentifiedImageError
from torch.utils.data import ConcatDataset, DataLoader, Dataset, Sampler

from config import (
    AUGMENT_BRIGHTNESS,
    AUGMENT_CONTRAST,
    AUGMENT_FLIP_PROB,
    NORMALIZE_MEAN,
    NORMALIZE_STD,
    VALIDATION_FRACTION,
)
from constant import CLS, PARADIGMS, REG, SEG
from exceptions import ConfigurationError, DataError, ManifestError, RegistrationError
from heads import detect_encode
from models import BoundingBox, LabeledSample, RegressionLabel, SampleRecord, TaskSpec
from utils import task_seed


class TaskRegistry:
    """Ordered task table loaded from a manifest. Equality ignores the root directory."""

    def __init__(self, tasks: Iterable[TaskSpec], root: str = '.') -> None:
        self.root = root
        self._tasks: dict[str, TaskSpec] = {}
        for task in tasks:
            if task.task_id in self._tasks:
                raise ManifestError('构建任务表', f"重复的 task_id: '{task.task_id}'", 'task_id')
            self._tasks[task.task_id] = task

    def __len__(self) -> int:
        return len(self._tasks)

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(self._tasks.values())

    def __contains__(self, task_id: object) -> bool:
        return task_id in self._tasks

    def __getitem__(self, task_id: str) -> TaskSpec:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise RegistrationError('查询任务', f'未注册的任务: {task_id!r}') from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaskRegistry):
            return NotImplemented
        return self._tasks == other._tasks

    def __repr__(self) -> str:
        return f'TaskRegistry(tasks={len(self)}, root={self.root!r})'

    def task_ids(self) -> list[str]:
        return list(self._tasks)

    def groups(self) -> dict[str, list[str]]:
        grouped: dict[str, list[str]] = {}
        for task in self:
            grouped.setdefault(task.clinical_group, []).append(task.task_id)
        return {group: sorted(ids) for group, ids in sorted(grouped.items())}

    def subset(self, task_ids: Iterable[str]) -> 'TaskRegistry':
        wanted = set(task_ids)
        missing = sorted(wanted - set(self._tasks))
        if missing:
            raise RegistrationError('选择任务子集', f'未注册的任务: {missing}')
        return TaskRegistry((t for t in self if t.task_id in wanted), self.root)

    def enrolled(self, paradigm: str) -> 'TaskRegistry':
        return TaskRegistry((t for t in self if t.enrolled(paradigm)), self.root)

    def snapshot(self) -> dict[str, dict[str, Any]]:
        """Compact description stored in checkpoints and report metadata."""
        return {
            task.task_id: {
                'type': task.task_type,
                'group': task.clinical_group,
                'num_classes': task.num_classes,
                'n_images': task.n_images,
            }
            for task in self
        }


def _require(payload: dict[str, Any], key: str, path: str) -> Any:
    if key not in payload:
        raise ManifestError('解析清单', f'缺少字段 {key}', f'{path}.{key}')
    return payload[key]


def _resolution(value: Any, path: str) -> tuple[int, int] | None:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)) or len(value) != 2 or min(value) <= 0:
        raise ManifestError('解析清单', '分辨率必须是两个正整数 [H, W]', path)
    return int(value[0]), int(value[1])


def _parse_label(task_type: str, num_classes: int | None, label: Any, path: str) -> dict:
    if not isinstance(label, dict):
        raise ManifestError('解析清单', '标签必须是对象', path)
    if task_type == SEG:
        if not isinstance(label.get('mask'), str):
            raise ManifestError('解析清单', '分割标签需要 mask 路径', f'{path}.mask')
        return {'mask': label['mask']}
    if task_type == CLS:
        value = label.get('class')
        if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value < num_classes:
            raise ManifestError('解析清单', f'分类标签需要 [0, {num_classes}) 内的整数', f'{path}.class')
        return {'class': value}
    if task_type == REG:
        value = label.get('value')
        numeric = isinstance(value, (int, float)) and not isinstance(value, bool)
        if not numeric or not math.isfinite(value):
            raise ManifestError('解析清单', '回归标签需要有限数值', f'{path}.value')
        return {'value': float(value)}
    box = label.get('box')
    if not isinstance(box, (list, tuple)) or len(box) != 4:
        raise ManifestError('解析清单', '检测标签需要 [cx, cy, bw, bh]', f'{path}.box')
    if any(not 0.0 <= float(v) <= 1.0 for v in box) or float(box[2]) <= 0 or float(box[3]) <= 0:
        raise ManifestError('解析清单', '检测框必须归一化且宽高为正', f'{path}.box')
    return {'box': [float(v) for v in box]}


def _parse_records(task_type: str, num_classes: int | None, items: Any, path: str):
    if not isinstance(items, list):
        raise ManifestError('解析清单', '样本列表必须是数组', path)
    records = []
    for index, item in enumerate(items):
        item_path = f'{path}[{index}]'
        if not isinstance(item, dict):
            raise ManifestError('解析清单', '样本记录必须是对象', item_path)
        image = _require(item, 'image', item_path)
        if not isinstance(image, str) or not image:
            raise ManifestError('解析清单', 'image 必须是非空路径', f'{item_path}.image')
        raw_label = _require(item, 'label', item_path)
        label = _parse_label(task_type, num_classes, raw_label, f'{item_path}.label')
        resolution = _resolution(
            item.get('original_resolution'), f'{item_path}.original_resolution'
        )
        records.append(SampleRecord(image=image, label=label, original_resolution=resolution))
    return tuple(records)


def registry_from_dict(payload: Any, root: str = '.') -> TaskRegistry:
    if not isinstance(payload, dict) or not isinstance(payload.get('tasks'), list):
        raise ManifestError('解析清单', '清单顶层需要 tasks 数组', 'tasks')
    if not payload['tasks']:
        raise ManifestError('解析清单', '任务列表为空', 'tasks')

    tasks: list[TaskSpec] = []
    seen: set[str] = set()
    for index, entry in enumerate(payload['tasks']):
        path = f'tasks[{index}]'
        if not isinstance(entry, dict):
            raise ManifestError('解析清单', '任务条目必须是对象', path)
        task_id = _require(entry, 'task_id', path)
        if task_id in seen:
            raise ManifestError('解析清单', f"重复的 task_id: '{task_id}'", f'{path}.task_id')
        seen.add(task_id)
        task_type = _require(entry, 'type', path)
        num_classes = entry.get('num_classes')
        paradigms = entry.get('paradigms', list(PARADIGMS))
        try:
            spec = TaskSpec(
                task_id=task_id,
                task_type=task_type,
                clinical_group=str(_require(entry, 'group', path)),
                num_classes=num_classes,
                original_resolution=_resolution(
                    entry.get('original_resolution'), f'{path}.original_resolution'
                ),
                loss_weight=float(entry.get('loss_weight', 1.0)),
                paradigms=tuple(paradigms),
            )
        except ManifestError as exc:
            raise ManifestError('解析清单', exc.message, f'{path}.{exc.field}') from exc
        except (TypeError, ValueError) as exc:
            raise ManifestError('解析清单', str(exc), path) from exc
        train = _parse_records(task_type, spec.num_classes, entry.get('train', []), f'{path}.train')
        test = _parse_records(task_type, spec.num_classes, entry.get('test', []), f'{path}.test')
        tasks.append(
            TaskSpec(
                task_id=spec.task_id,
                task_type=spec.task_type,
                clinical_group=spec.clinical_group,
                num_classes=spec.num_classes,
                original_resolution=spec.original_resolution,
                loss_weight=spec.loss_weight,
                paradigms=spec.paradigms,
                train=train,
                test=test,
            )
        )
    return TaskRegistry(tasks, root)


def load_manifest(path: str) -> TaskRegistry:
    logger.info("尝试从文件 '{}' 加载任务清单...", path)
    try:
        with open(path, encoding='utf-8') as fp:
            payload = json.load(fp)
    except FileNotFoundError as exc:
        raise ManifestError('加载清单', f"清单文件 '{path}' 不存在") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError('加载清单', f'JSON 格式错误: {exc}') from exc
    registry = registry_from_dict(payload, root=os.path.dirname(os.path.abspath(path)))
    logger.info("已从 '{}' 加载 {} 个任务。", path, len(registry))
    return registry


def serialize_manifest(registry: TaskRegistry, path: str | None = None) -> dict[str, Any]:
    payload = {'tasks': [task.to_dict() for task in registry]}
    if path is not None:
        with open(path, 'w', encoding='utf-8') as fp:
            json.dump(payload, fp, ensure_ascii=False, indent=2)
        logger.info("已写入任务清单 '{}' ({} 个任务)。", path, len(registry))
    return payload


def preprocess(image: Any, size: int) -> torch.Tensor:
    """Raw grayscale/RGB image → normalised 3×S×S float tensor."""
    array = np.asarray(image)
    if array.size == 0:
        raise DataError('预处理图像', '图像为空')
    if array.ndim == 3 and array.shape[-1] == 1:
        array = array[..., 0]
    if array.ndim == 2:
        array = np.repeat(array[..., None], 3, axis=-1)
    elif array.ndim != 3 or array.shape[-1] not in (3, 4):
        raise DataError('预处理图像', f'不支持的图像形状 {array.shape}')
    array = array[..., :3]
    if array.dtype == np.uint8:
        tensor = torch.from_numpy(array.astype(np.float32) / 255.0)
    else:
        tensor = torch.from_numpy(array.astype(np.float32))
    tensor = tensor.permute(2, 0, 1).contiguous()
    if tuple(tensor.shape[-2:]) != (size, size):
        tensor = F.interpolate(
            tensor.unsqueeze(0), size=(size, size), mode='bilinear', align_corners=False
        )[0]
    mean = torch.tensor(NORMALIZE_MEAN).view(3, 1, 1)
    std = torch.tensor(NORMALIZE_STD).view(3, 1, 1)
    return (tensor - mean) / std


def resize_mask(mask: Any, size: int) -> torch.Tensor:
    tensor = torch.as_tensor(np.asarray(mask).astype(np.int64))
    if tuple(tensor.shape) == (size, size):
        return tensor
    resized = F.interpolate(tensor[None, None].float(), size=(size, size), mode='nearest')
    return resized[0, 0].long()


def regression_scale(original_width: int, size: int) -> float:
    if original_width <= 0 or size <= 0:
        raise DataError('计算回归缩放', '原始宽度与目标尺寸必须为正', 'original_resolution')
    return original_width / size


def split_train_val(
    samples: Sequence[Any], fraction: float = VALIDATION_FRACTION, seed: int = 0
) -> tuple[list[Any], list[Any]]:
    """Seeded shuffle; floor(n·fraction) validation samples, at least one."""
    n = len(samples)
    if n < 2:
        raise DataError('划分验证集', f'至少需要 2 个样本，得到 {n}')
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError('划分验证集', f'验证比例 {fraction} 不在 (0, 1) 内', 'fraction')
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(math.floor(n * fraction)))
    val_index = sorted(int(i) for i in order[:n_val])
    train_index = sorted(int(i) for i in order[n_val:])
    return [samples[i] for i in train_index], [samples[i] for i in val_index]


class Augmenter:
    """Horizontal flip plus brightness/contrast jitter, drawn from a caller-supplied rng."""

    def __init__(
        self,
        flip_prob: float = AUGMENT_FLIP_PROB,
        brightness: float = AUGMENT_BRIGHTNESS,
        contrast: float = AUGMENT_CONTRAST,
    ) -> None:
        self.flip_prob = flip_prob
        self.brightness = brightness
        self.contrast = contrast

    def __call__(
        self, sample: LabeledSample, rng: np.random.Generator
    ) -> LabeledSample:
        image, label = sample.image, sample.label
        if rng.random() < self.flip_prob:
            image = torch.flip(image, dims=(-1,))
            if isinstance(label, BoundingBox):
                label = label._replace(cx=1.0 - label.cx)
            elif isinstance(label, torch.Tensor):
                label = torch.flip(label, dims=(-1,))
        gain = 1.0 + rng.uniform(-self.contrast, self.contrast)
        shift = rng.uniform(-self.brightness, self.brightness)
        return LabeledSample(image * gain + shift, label, sample.index)


class Batch(NamedTuple):
    """One single-task batch: images, loss target, raw labels for metric computation."""

    task_id: str
    images: torch.Tensor
    target: Any
    labels: list[Any]


class DetectionBatch(NamedTuple):
    heatmap: torch.Tensor
    cells: torch.Tensor
    regression: torch.Tensor


class _RecordDataset(Dataset):
    """Decodes one record per item; unreadable records come back as ``None``."""

    def __init__(
        self, task: TaskSpec, records: Sequence[SampleRecord], root: str, image_size: int
    ) -> None:
        self.task = task
        self.records = list(records)
        self.root = root
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> LabeledSample | None:
        record = self.records[index]
        try:
            return _load_sample(self.task, record, self.root, self.image_size, index)
        except (OSError, UnidentifiedImageError, DataError) as exc:
            logger.warning(
                "任务 '{}' 跳过损坏样本 '{}': {}", self.task.task_id, record.image, exc
            )
            return None


def _keep(item: Any) -> Any:
    return item


class TaskDataset(Dataset):
    """In-memory preprocessed samples of one task split."""

    def __init__(self, task: TaskSpec, samples: Sequence[LabeledSample], image_size: int) -> None:
        self.task = task
        self.samples = list(samples)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> LabeledSample:
        return self.samples[index]

    def __repr__(self) -> str:
        return f"TaskDataset(task='{self.task.task_id}', samples={len(self)})"

    @classmethod
    def from_records(
        cls,
        task: TaskSpec,
        records: Sequence[SampleRecord],
        root: str,
        image_size: int,
        workers: int = 0,
    ) -> 'TaskDataset':
        """Decode ``records`` through a DataLoader; the sample order follows the records."""
        loader = DataLoader(
            _RecordDataset(task, records, root, image_size),
            batch_size=None,
            num_workers=workers,
            collate_fn=_keep,
        )
        samples = [s for s in loader if s is not None]
        if records and not samples:
            raise DataError('加载数据集', f"任务 '{task.task_id}' 没有可用样本")
        return cls(task, samples, image_size)

    def subset(self, indices: Sequence[int]) -> 'TaskDataset':
        return TaskDataset(self.task, [self.samples[i] for i in indices], self.image_size)


class UnitDataset(ConcatDataset):
    """The task datasets of one training unit, concatenated in task-id order.

    Items are ``(task_id, sample)`` pairs.
    """

    def __init__(self, datasets: Mapping[str, TaskDataset]) -> None:
        if not datasets:
            raise DataError('组装训练数据', '训练单元没有任务')
        self.task_ids = sorted(datasets)
        super().__init__([datasets[t] for t in self.task_ids])
        starts = [0, *self.cumulative_sizes[:-1]]
        self.offsets = dict(zip(self.task_ids, starts))
        self.sizes = {t: len(datasets[t]) for t in self.task_ids}

    def __getitem__(self, index: int) -> tuple[str, LabeledSample]:
        position = bisect.bisect_right(self.cumulative_sizes, index)
        return self.task_ids[position], super().__getitem__(index)


def sample_batches(
    sizes: Mapping[str, int],
    epoch: int,
    seed: int,
    batch_size: int,
    num_batches: int | None = None,
) -> list[tuple[str, list[int]]]:
    """Single-task batches; the task of each batch is drawn ∝ its training-set size.

    Within a task, indices come from a seeded permutation that is reshuffled when
    exhausted. The stream is a pure function of (sizes, epoch, seed, batch_size).
    """
    if not sizes:
        raise DataError('采样批次', '训练单元没有任务')
    task_ids = sorted(sizes)
    empty = [t for t in task_ids if sizes[t] <= 0]
    if empty:
        raise DataError('采样批次', f'任务训练集为空: {empty}')
    counts = np.array([sizes[t] for t in task_ids], dtype=np.float64)
    if num_batches is None:
        num_batches = max(1, math.ceil(counts.sum() / batch_size))

    draw = np.random.default_rng([seed, epoch])
    choices = draw.choice(len(task_ids), size=num_batches, p=counts / counts.sum())

    streams: dict[str, tuple[np.random.Generator, list[int]]] = {}
    batches: list[tuple[str, list[int]]] = []
    for choice in choices:
        task_id = task_ids[int(choice)]
        if task_id not in streams:
            child = np.random.default_rng([seed, epoch, zlib.crc32(task_id.encode('utf-8'))])
            streams[task_id] = (child, [])
        rng, pending = streams[task_id]
        take = min(batch_size, sizes[task_id])
        while len(pending) < take:
            pending.extend(int(i) for i in rng.permutation(sizes[task_id]))
        batches.append((task_id, pending[:take]))
        del pending[:take]
    return batches


class TaskBatchSampler(Sampler):
    """Batch sampler over a UnitDataset yielding the ``sample_batches`` stream of an epoch."""

    def __init__(
        self,
        dataset: UnitDataset,
        batch_size: int,
        seed: int,
        num_batches: int | None = None,
    ) -> None:
        self.offsets = dataset.offsets
        self.sizes = dataset.sizes
        self.batch_size = batch_size
        self.seed = seed
        self.num_batches = num_batches
        self.epoch = 1

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __iter__(self) -> Iterator[list[int]]:
        stream = sample_batches(
            self.sizes, self.epoch, self.seed, self.batch_size, self.num_batches
        )
        for task_id, indices in stream:
            offset = self.offsets[task_id]
            yield [offset + i for i in indices]

    def __len__(self) -> int:
        if self.num_batches is not None:
            return self.num_batches
        return max(1, math.ceil(sum(self.sizes.values()) / self.batch_size))


class BatchCollator:
    """``collate_fn`` for UnitDataset items; augmentation randomness is keyed by the batch."""

    def __init__(
        self,
        tasks: Mapping[str, TaskSpec],
        grid_size: int,
        augmenter: Augmenter | None = None,
        seed: int = 0,
    ) -> None:
        self.tasks = dict(tasks)
        self.grid_size = grid_size
        self.augmenter = augmenter
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __call__(self, items: Sequence[tuple[str, LabeledSample]]) -> Batch:
        if not items:
            raise DataError('组装批次', '批次为空')
        task_ids = {task_id for task_id, _ in items}
        if len(task_ids) != 1:
            raise DataError('组装批次', f'批次混合了多个任务: {sorted(task_ids)}')
        task = self.tasks[task_ids.pop()]
        samples = [sample for _, sample in items]
        if self.augmenter is not None:
            key = [self.seed, self.epoch, zlib.crc32(task.task_id.encode('utf-8'))]
            rng = np.random.default_rng(key + [s.index for s in samples])
            samples = [self.augmenter(sample, rng) for sample in samples]
        return collate(task, samples, self.grid_size)


def training_loader(
    datasets: Mapping[str, TaskDataset],
    grid_size: int,
    *,
    batch_size: int,
    seed: int,
    num_batches: int | None = None,
    augmenter: Augmenter | None = None,
    workers: int = 0,
) -> DataLoader:
    """Epoch loader of a training unit; call ``set_loader_epoch`` before iterating."""
    dataset = UnitDataset(datasets)
    return DataLoader(
        dataset,
        batch_sampler=TaskBatchSampler(dataset, batch_size, seed, num_batches),
        collate_fn=BatchCollator(
            {t: ds.task for t, ds in datasets.items()}, grid_size, augmenter, seed
        ),
        num_workers=workers,
        generator=torch.Generator().manual_seed(seed),
    )


def set_loader_epoch(loader: DataLoader, epoch: int) -> None:
    loader.batch_sampler.set_epoch(epoch)
    loader.collate_fn.set_epoch(epoch)


def evaluation_loader(
    dataset: TaskDataset, grid_size: int, batch_size: int, workers: int = 0
) -> DataLoader:
    """Sequential, unaugmented batches over one task split."""
    return DataLoader(
        UnitDataset({dataset.task.task_id: dataset}),
        batch_size=batch_size,
        shuffle=False,
        collate_fn=BatchCollator({dataset.task.task_id: dataset.task}, grid_size),
        num_workers=workers,
        generator=torch.Generator().manual_seed(0),
    )


def _load_sample(
    task: TaskSpec, record: SampleRecord, root: str, size: int, index: int
) -> LabeledSample:
    with Image.open(os.path.join(root, record.image)) as raw:
        mode = 'L' if raw.mode in ('L', 'I', 'I;16', 'P') else 'RGB'
        array = np.asarray(raw.convert(mode))
    image = preprocess(array, size)
    if task.task_type == SEG:
        with Image.open(os.path.join(root, record.label['mask'])) as raw_mask:
            mask = np.asarray(raw_mask)
        if mask.shape[:2] != array.shape[:2]:
            raise DataError('加载样本', f'掩码尺寸 {mask.shape} 与图像 {array.shape} 不符', 'mask')
        return LabeledSample(image, resize_mask(mask, size), index)
    if task.task_type == CLS:
        return LabeledSample(image, int(record.label['class']), index)
    if task.task_type == REG:
        resolution = record.original_resolution or task.original_resolution or array.shape[:2]
        scale = regression_scale(int(resolution[1]), size)
        return LabeledSample(image, RegressionLabel(float(record.label['value']), scale), index)
    return LabeledSample(image, BoundingBox(*record.label['box']), index)


def collate(task: TaskSpec, items: Sequence[LabeledSample], grid_size: int) -> Batch:
    if not items:
        raise DataError('组装批次', f"任务 '{task.task_id}' 的批次为空")
    images = torch.stack([item.image for item in items])
    labels = [item.label for item in items]
    if task.task_type == SEG:
        target: Any = torch.stack(labels)
    elif task.task_type == CLS:
        target = torch.tensor(labels, dtype=torch.long)
    elif task.task_type == REG:
        target = torch.tensor([label.resized_value for label in labels], dtype=images.dtype)
    else:
        encoded = [detect_encode(box, grid_size, grid_size, images.dtype) for box in labels]
        target = DetectionBatch(
            heatmap=torch.stack([e.heatmap for e in encoded]),
            cells=torch.tensor([e.cell for e in encoded], dtype=torch.long),
            regression=torch.stack([e.regression for e in encoded]),
        )
    return Batch(task.task_id, images, target, labels)


def build_datasets(
    registry: TaskRegistry,
    image_size: int,
    seed: int,
    fraction: float = VALIDATION_FRACTION,
    workers: int = 0,
) -> dict[str, tuple[TaskDataset, TaskDataset]]:
    """Load every task's training split and carve a per-task validation split."""
    datasets: dict[str, tuple[TaskDataset, TaskDataset]] = {}
    for task in registry:
        full = TaskDataset.from_records(task, task.train, registry.root, image_size, workers)
        split_seed = int(task_seed(seed, task.task_id).generate_state(1)[0])
        train_idx, val_idx = split_train_val(list(range(len(full))), fraction, split_seed)
        datasets[task.task_id] = (full.subset(train_idx), full.subset(val_idx))
        logger.info(
            "任务 '{}': 训练 {} / 验证 {}", task.task_id, len(train_idx), len(val_idx)
        )
    return datasets


def load_split(
    registry: TaskRegistry, split: str, image_size: int, workers: int = 0
) -> dict[str, TaskDataset]:
    """Load the full ``train`` or ``test`` records of every task without splitting."""
    if split not in ('train', 'test'):
        raise ConfigurationError('加载数据划分', f'未知划分: {split}', 'split')
    return {
        task.task_id: TaskDataset.from_records(
            task, getattr(task, split), registry.root, image_size, workers
        )
        for task in registry
    }
