"""Synthetic multi-task ultrasound-like data.

Each sample is one axis-aligned ellipse or rectangle "anatomy" on a Rayleigh speckle
background. Labels are exact by construction: the segmentation mask is the rasterised
shape, the class is the shape type, the regression target is the major axis in original
pixels and the detection box is the shape's extent.
"""

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from loguru import logger
from PIL import Image

from constant import CLS, PARADIGMS, REG, SEG, TASK_TYPES
from data import TaskRegistry, serialize_manifest
from exceptions import ManifestError
from models import SampleRecord, TaskSpec
from utils import task_seed

ELLIPSE = 0
RECTANGLE = 1

DEFAULT_RESOLUTION: tuple[int, int] = (224, 224)
_SHAPE_FRACTION = (0.2, 0.5)
_TISSUE_LEVEL = 0.3
_ANATOMY_LEVEL = 0.75

_ROW_FIELDS = {'group', 'seg', 'cls', 'reg', 'det', 'train', 'test', 'paradigms', 'resolution'}


@dataclass(frozen=True)
class PlanRow:
    group: str
    counts: dict[str, int]
    train: int
    test: int
    paradigms: tuple[str, ...] = PARADIGMS
    resolution: tuple[int, int] | None = None


@dataclass(frozen=True)
class SynthPlan:
    rows: tuple[PlanRow, ...]
    resolution: tuple[int, int] = DEFAULT_RESOLUTION
    name: str = 'synthetic'
    extra: dict[str, Any] = field(default_factory=dict)


@dataclass
class SynthSample:
    image: np.ndarray
    label: dict[str, Any]
    mask: np.ndarray | None = None


@dataclass
class SynthTask:
    spec: TaskSpec
    train: list[SynthSample]
    test: list[SynthSample]


def _positive_pair(value: Any, path: str) -> tuple[int, int]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 2
        or not all(isinstance(v, int) and v >= 16 for v in value)
    ):
        raise ManifestError('解析合成计划', 'resolution 必须是两个 >= 16 的整数 [H, W]', path)
    return int(value[0]), int(value[1])


def _count(row: Mapping[str, Any], key: str, path: str) -> int:
    value = row.get(key, 0)
    if not isinstance(value, int) or isinstance(value, bool) or value < 0:
        raise ManifestError('解析合成计划', f'{key} 必须是非负整数', f'{path}.{key}')
    return value


def parse_plan(payload: Any) -> SynthPlan:
    if not isinstance(payload, dict) or not isinstance(payload.get('rows'), list):
        raise ManifestError('解析合成计划', '计划顶层需要 rows 数组', 'rows')
    if not payload['rows']:
        raise ManifestError('解析合成计划', 'rows 为空', 'rows')
    resolution = _positive_pair(payload.get('resolution', list(DEFAULT_RESOLUTION)), 'resolution')

    rows = []
    for index, row in enumerate(payload['rows']):
        path = f'rows[{index}]'
        if not isinstance(row, dict):
            raise ManifestError('解析合成计划', '行必须是对象', path)
        unknown = sorted(set(row) - _ROW_FIELDS)
        if unknown:
            raise ManifestError('解析合成计划', f'未知字段 {unknown[0]}', f'{path}.{unknown[0]}')
        group = row.get('group')
        if not isinstance(group, str) or not group:
            raise ManifestError('解析合成计划', 'group 必须是非空字符串', f'{path}.group')
        counts = {task_type: _count(row, task_type, path) for task_type in TASK_TYPES}
        if not any(counts.values()):
            raise ManifestError('解析合成计划', '至少需要一个任务', f'{path}.{SEG}')
        train = _count(row, 'train', path)
        if train == 0:
            raise ManifestError('解析合成计划', '训练样本数必须 > 0', f'{path}.train')
        paradigms = row.get('paradigms', list(PARADIGMS))
        if not isinstance(paradigms, list) or any(p not in PARADIGMS for p in paradigms):
            raise ManifestError('解析合成计划', f'paradigms 只能取 {PARADIGMS}', f'{path}.paradigms')
        row_resolution = None
        if 'resolution' in row:
            row_resolution = _positive_pair(row['resolution'], f'{path}.resolution')
        rows.append(
            PlanRow(
                group=group,
                counts=counts,
                train=train,
                test=_count(row, 'test', path),
                paradigms=tuple(paradigms),
                resolution=row_resolution,
            )
        )
    name = str(payload.get('name', 'synthetic'))
    return SynthPlan(rows=tuple(rows), resolution=resolution, name=name)


def load_plan(path: str) -> SynthPlan:
    try:
        with open(path, encoding='utf-8') as fp:
            payload = json.load(fp)
    except FileNotFoundError as exc:
        raise ManifestError('加载合成计划', f"计划文件 '{path}' 不存在") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError('加载合成计划', f'JSON 格式错误: {exc}') from exc
    return parse_plan(payload)


def clinical_plan(train: int = 16, test: int = 8) -> SynthPlan:
    """13 tasks in OB/Lung/Breast; 11 of them take part in single-task training."""
    return parse_plan(
        {
            'name': 'clinical13',
            'rows': [
                {'group': 'OB', 'reg': 3, 'seg': 2, 'cls': 2, 'train': train, 'test': test},
                {'group': 'Lung', 'seg': 1, 'cls': 1, 'train': train, 'test': test},
                {
                    'group': 'Lung', 'cls': 1, 'train': train, 'test': test,
                    'paradigms': ['cg', 'au'],
                },
                {'group': 'Breast', 'seg': 1, 'cls': 1, 'train': train, 'test': test},
                {
                    'group': 'Breast', 'cls': 1, 'train': train, 'test': test,
                    'paradigms': ['cg', 'au'],
                },
            ],
        }
    )


def _place(rng: np.random.Generator, extent: int) -> tuple[int, int]:
    low, high = (max(4, int(extent * f)) for f in _SHAPE_FRACTION)
    size = int(rng.integers(low, high + 1))
    start = int(rng.integers(1, extent - size))
    return start, size


def render_shape(
    height: int, width: int, kind: int, x0: int, y0: int, w: int, h: int
) -> np.ndarray:
    """Rasterise an axis-aligned ellipse or rectangle occupying pixels [x0, x0+w)×[y0, y0+h)."""
    if kind == RECTANGLE:
        mask = np.zeros((height, width), dtype=bool)
        mask[y0 : y0 + h, x0 : x0 + w] = True
        return mask
    ys, xs = np.mgrid[:height, :width]
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    inside = ((xs + 0.5 - cx) / (w / 2.0)) ** 2 + ((ys + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0
    return inside


def speckle(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    level = np.where(mask, _ANATOMY_LEVEL, _TISSUE_LEVEL)
    noise = rng.rayleigh(scale=1.0, size=mask.shape) / np.sqrt(np.pi / 2.0)
    return np.clip(level * noise * 255.0, 0, 255).astype(np.uint8)


def render_sample(
    task_type: str, resolution: tuple[int, int], rng: np.random.Generator
) -> SynthSample:
    height, width = resolution
    kind = ELLIPSE if task_type == REG else int(rng.integers(0, 2))
    x0, w = _place(rng, width)
    y0, h = _place(rng, height)
    mask = render_shape(height, width, kind, x0, y0, w, h)
    image = speckle(mask, rng)
    if task_type == SEG:
        return SynthSample(image, {}, mask.astype(np.uint8))
    if task_type == CLS:
        return SynthSample(image, {'class': kind})
    if task_type == REG:
        return SynthSample(image, {'value': float(max(w, h))})
    box = [(x0 + w / 2.0) / width, (y0 + h / 2.0) / height, w / width, h / height]
    return SynthSample(image, {'box': box})


def synth_generate(plan: SynthPlan, seed: int) -> dict[str, SynthTask]:
    """Render every planned task; each task draws from its own seed stream."""
    tasks: dict[str, SynthTask] = {}
    counters: dict[tuple[str, str], int] = {}
    for row in plan.rows:
        resolution = row.resolution or plan.resolution
        for task_type in TASK_TYPES:
            for _ in range(row.counts[task_type]):
                key = (row.group, task_type)
                counters[key] = counters.get(key, 0) + 1
                task_id = f'{row.group}_{task_type}{counters[key]}'
                rng = np.random.default_rng(task_seed(seed, task_id))
                spec = TaskSpec(
                    task_id=task_id,
                    task_type=task_type,
                    clinical_group=row.group,
                    num_classes=2 if task_type in (SEG, CLS) else None,
                    original_resolution=resolution,
                    paradigms=row.paradigms,
                )
                train = [render_sample(task_type, resolution, rng) for _ in range(row.train)]
                test = [render_sample(task_type, resolution, rng) for _ in range(row.test)]
                tasks[task_id] = SynthTask(spec, train, test)
                logger.debug("合成任务 '{}': 训练 {} / 测试 {}", task_id, row.train, row.test)
    return tasks


def _write_split(task_id: str, split: str, samples: list[SynthSample], out: str) -> tuple:
    folder = os.path.join(out, task_id, split)
    os.makedirs(folder, exist_ok=True)
    records = []
    for index, sample in enumerate(samples):
        image_rel = f'{task_id}/{split}/{index:05d}.png'
        Image.fromarray(sample.image).save(os.path.join(out, image_rel))
        label = dict(sample.label)
        if sample.mask is not None:
            mask_rel = f'{task_id}/{split}/{index:05d}_mask.png'
            Image.fromarray(sample.mask).save(os.path.join(out, mask_rel))
            label = {'mask': mask_rel}
        records.append(SampleRecord(image=image_rel, label=label))
    return tuple(records)


def write_synth(plan: SynthPlan, seed: int, out: str) -> TaskRegistry:
    """Render the plan to PNG files under ``out`` and write ``out/manifest.json``."""
    generated = synth_generate(plan, seed)
    specs = []
    for task_id, task in generated.items():
        base = task.spec
        specs.append(
            TaskSpec(
                task_id=base.task_id,
                task_type=base.task_type,
                clinical_group=base.clinical_group,
                num_classes=base.num_classes,
                original_resolution=base.original_resolution,
                paradigms=base.paradigms,
                train=_write_split(task_id, 'train', task.train, out),
                test=_write_split(task_id, 'test', task.test, out),
            )
        )
    registry = TaskRegistry(specs, root=out)
    serialize_manifest(registry, os.path.join(out, 'manifest.json'))
    logger.info("合成数据已写入 '{}': {} 个任务", out, len(registry))
    return registry
