import dataclasses
import json
import os
import shutil
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from loguru import logger

from analysis import (
    build_delta_report,
    delta_from_dict,
    delta_matrix,
    render_all,
    render_group_table,
    render_heatmap,
    render_paradigm_bars,
)
from backbone import EncoderConfig
from config import DELTA_BASENAME, META_FILE, VALIDATION_FRACTION
from constant import ABSOLUTE, PARADIGMS, normalize_paradigm
from data import TaskRegistry, build_datasets, load_manifest, load_split
from exceptions import ConfigurationError, ValidationError
from heads import SegmentationHeadConfig
from models import Checkpoint, DeltaReport, MetricReport, TrainingUnit
from storage import (
    load_checkpoint,
    load_json,
    load_report,
    read_weights,
    save_checkpoint,
    save_json,
    save_report,
)
from synth import SynthPlan, load_plan, write_synth
from trainer import (
    OptimizerConfig,
    TrainResult,
    Trainer,
    build_plan,
    evaluate_model,
    model_from_checkpoint,
)

_RUN_FILE = 'run.json'
_PLAN_FILE = 'plan.json'


@dataclass(frozen=True)
class RunConfig:
    """Everything one ``train`` invocation needs; loaded from the ``--config`` JSON."""

    manifest: str
    paradigm: str = 'au'
    seed: int = 0
    out: str = 'runs'
    deterministic: bool = False
    workers: int = 1
    data_workers: int = 0
    validation_fraction: float = VALIDATION_FRACTION
    lr_search: bool = False
    augment: bool = False
    pretrained: str | None = None
    device: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    segmentation: SegmentationHeadConfig = field(default_factory=SegmentationHeadConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, 'paradigm', normalize_paradigm(self.paradigm))
        except ValueError as exc:
            raise ConfigurationError('运行配置', f'paradigm 只能取 {PARADIGMS}', 'paradigm') from exc
        if not self.manifest:
            raise ConfigurationError('运行配置', '缺少 manifest 路径', 'manifest')
        if self.seed < 0:
            raise ConfigurationError('运行配置', 'seed 必须为非负整数', 'seed')
        if self.workers < 1:
            raise ConfigurationError('运行配置', 'workers 必须 >= 1', 'workers')
        if self.data_workers < 0:
            raise ConfigurationError('运行配置', 'data_workers 不能为负', 'data_workers')
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigurationError(
                '运行配置', '验证比例必须在 (0, 1) 内', 'validation_fraction'
            )
        self.segmentation.validate(self.encoder.depth)

    def to_dict(self) -> dict[str, Any]:
        payload = {
            f.name: getattr(self, f.name)
            for f in dataclasses.fields(self)
            if f.name not in ('encoder', 'segmentation', 'optimizer')
        }
        payload['encoder'] = self.encoder.to_dict()
        payload['segmentation'] = self.segmentation.to_dict()
        payload['optimizer'] = self.optimizer.to_dict()
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any], base_dir: str = '.') -> 'RunConfig':
        if not isinstance(payload, Mapping):
            raise ConfigurationError('运行配置', '配置顶层必须是对象')
        unknown = sorted(set(payload) - {f.name for f in dataclasses.fields(cls)})
        if unknown:
            raise ConfigurationError('运行配置', f'未知字段: {unknown}', unknown[0])
        values = dict(payload)
        values['encoder'] = EncoderConfig.from_dict(values.get('encoder', {}))
        values['segmentation'] = SegmentationHeadConfig.from_dict(values.get('segmentation', {}))
        values['optimizer'] = OptimizerConfig.from_dict(values.get('optimizer', {}))
        for key in ('manifest', 'pretrained'):
            if values.get(key) and not os.path.isabs(values[key]):
                values[key] = os.path.join(base_dir, values[key])
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigurationError('运行配置', str(exc)) from exc

    def override(self, **changes: Any) -> 'RunConfig':
        """Copy with the non-None CLI overrides applied."""
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def load_run_config(path: str) -> RunConfig:
    payload = load_json(path, '读取运行配置')
    return RunConfig.from_dict(payload, base_dir=os.path.dirname(os.path.abspath(path)))


class UnitOutcome(NamedTuple):
    unit: TrainingUnit
    directory: str
    checkpoint: Checkpoint


def prepare_output(path: str, force: bool = False) -> None:
    """Refuse a non-empty output directory unless ``force``; ``force`` empties it."""
    if os.path.isdir(path) and os.listdir(path):
        if not force:
            raise ConfigurationError('准备输出目录', f"'{path}' 非空，使用 --force 覆盖", 'out')
        logger.warning("输出目录 '{}' 非空，--force 已清空", path)
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise ConfigurationError('准备输出目录', f"'{path}' 不可写", 'out')


def checkpoint_dirs(path: str) -> list[str]:
    """``path`` itself when it is a checkpoint, otherwise its checkpoint children, sorted."""
    if os.path.isfile(os.path.join(path, META_FILE)):
        return [path]
    if not os.path.isdir(path):
        raise ValidationError('查找检查点', f"'{path}' 不存在", 'checkpoint')
    found = [
        os.path.join(path, name)
        for name in sorted(os.listdir(path))
        if os.path.isfile(os.path.join(path, name, META_FILE))
    ]
    if not found:
        raise ValidationError('查找检查点', f"'{path}' 下没有检查点", 'checkpoint')
    return found


class ExperimentService:
    """Composes data, trainer, metrics and analysis into the batch workflows."""

    def synth(
        self, plan: SynthPlan | str, seed: int, out: str, force: bool = False
    ) -> TaskRegistry:
        if isinstance(plan, str):
            plan = load_plan(plan)
        prepare_output(out, force)
        registry = write_synth(plan, seed, out)
        logger.info("合成数据集 '{}' 已生成: {} 个任务", plan.name, len(registry))
        return registry

    def _train_unit(
        self,
        run: RunConfig,
        registry: TaskRegistry,
        unit: TrainingUnit,
        datasets: Mapping[str, Any],
        pretrained: Mapping[str, Any] | None,
    ) -> TrainResult:
        candidates = run.optimizer.search_grid() if run.lr_search else [run.optimizer]
        best: TrainResult | None = None
        for optimizer in candidates:
            trainer = Trainer(
                unit,
                registry,
                run.encoder,
                optimizer,
                seg_config=run.segmentation,
                seed=run.seed,
                paradigm=run.paradigm,
                deterministic=run.deterministic,
                augment=run.augment,
                pretrained=pretrained,
                device=run.device,
                workers=run.data_workers,
            )
            result = trainer.train({t: datasets[t] for t in unit.task_ids})
            logger.info(
                "单元 '{}' backbone_lr={:g}: best score {:.6g} (epoch {})",
                unit.unit_id, optimizer.backbone_lr,
                result.checkpoint.best_score, result.checkpoint.epoch,
            )
            if best is None or result.checkpoint.best_score > best.checkpoint.best_score:
                best = result
        return best

    def train(self, run: RunConfig, force: bool = False) -> list[UnitOutcome]:
        """Train every unit of the run's paradigm plan; one checkpoint directory per unit."""
        registry = load_manifest(run.manifest)
        plan = build_plan(run.paradigm, registry)
        prepare_output(run.out, force)
        save_json(os.path.join(run.out, _RUN_FILE), run.to_dict())
        save_json(
            os.path.join(run.out, _PLAN_FILE),
            {'paradigm': plan.paradigm, 'units': [u.to_dict() for u in plan.units]},
        )

        enrolled = registry.enrolled(plan.paradigm)
        datasets = build_datasets(
            enrolled, run.encoder.image_size, run.seed, run.validation_fraction, run.data_workers
        )
        pretrained = read_weights(run.pretrained) if run.pretrained else None

        def _run(unit: TrainingUnit) -> UnitOutcome:
            result = self._train_unit(run, enrolled, unit, datasets, pretrained)
            directory = os.path.join(run.out, unit.unit_id)
            save_checkpoint(directory, result.checkpoint, result.log_rows)
            save_report(os.path.join(directory, 'val_report.json'), result.report)
            return UnitOutcome(unit, directory, result.checkpoint)

        workers = min(run.workers, len(plan.units))
        if workers > 1:
            logger.info('并行训练 {} 个单元 (workers={})', len(plan.units), workers)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_run, plan.units))
        else:
            outcomes = [_run(unit) for unit in plan.units]
        logger.info("{} 训练完成: {} 个检查点写入 '{}'", plan.paradigm, len(outcomes), run.out)
        return outcomes

    def evaluate(
        self,
        path: str,
        split: str,
        run: RunConfig,
        out: str | None = None,
    ) -> MetricReport:
        """Score one checkpoint, or every checkpoint of a run directory, on ``split``."""
        if split not in ('val', 'test'):
            raise ValidationError('评估', f"未知划分 '{split}'，可选 val/test", 'split')
        registry = load_manifest(run.manifest)
        merged: MetricReport | None = None
        for directory in checkpoint_dirs(path):
            checkpoint = load_checkpoint(directory)
            model = model_from_checkpoint(checkpoint, run.device)
            unit = TrainingUnit.from_dict(checkpoint.meta['unit'])
            subset = registry.subset(unit.task_ids)
            image_size = model.encoder_config.image_size
            if split == 'val':
                fraction = run.validation_fraction
                loaded = build_datasets(
                    subset, image_size, checkpoint.seed, fraction, run.data_workers
                )
                datasets = {t: pair[1] for t, pair in loaded.items()}
            else:
                datasets = load_split(subset, 'test', image_size, run.data_workers)
            report = evaluate_model(
                model,
                datasets,
                paradigm=checkpoint.meta.get('paradigm', run.paradigm),
                seed=checkpoint.seed,
                checkpoint=unit.unit_id,
                workers=run.data_workers,
            )
            if merged is None:
                merged = report
            else:
                merged.merge(report)
        merged.checkpoint = os.path.basename(os.path.normpath(path))
        if out:
            save_report(out, merged)
        return merged

    def analyze(
        self,
        ts_report: str | MetricReport,
        other_report: str | MetricReport,
        mode: str = ABSOLUTE,
        out: str | None = None,
        tasks: Sequence[str] | None = None,
    ) -> DeltaReport:
        if isinstance(ts_report, str):
            ts_report = load_report(ts_report)
        if isinstance(other_report, str):
            other_report = load_report(other_report)
        report = build_delta_report(ts_report, other_report, mode, tasks)
        if out:
            paths = render_all(report, out, f'{DELTA_BASENAME}_{report.paradigm}')
            logger.info("变化报告已写入: {}", ', '.join(paths))
        return report

    def report(
        self,
        delta_paths: Sequence[str],
        out: str,
        metric_paths: Sequence[str] = (),
        tasks: Sequence[str] | None = None,
    ) -> list[str]:
        """Cross-paradigm figures: Δ% heatmap, group table and, with metric reports, bars."""
        if not delta_paths:
            raise ValidationError('生成汇总报告', '至少需要一个变化报告', 'delta')
        deltas: dict[str, DeltaReport] = {}
        for path in delta_paths:
            delta = delta_from_dict(load_json(path, '读取变化报告'))
            deltas[delta.paradigm] = delta
        os.makedirs(out, exist_ok=True)
        written = [
            render_heatmap(delta_matrix(deltas, tasks), os.path.join(out, 'delta_heatmap.png')),
            render_group_table(deltas, os.path.join(out, 'group_table.md')),
        ]
        if metric_paths:
            reports = {}
            for path in metric_paths:
                report = load_report(path)
                reports[report.paradigm] = report
            written.append(
                render_paradigm_bars(reports, os.path.join(out, 'paradigm_bars.png'), tasks)
            )
        with open(os.path.join(out, 'report_index.json'), 'w', encoding='utf-8') as fp:
            json.dump({'files': [os.path.basename(p) for p in written]}, fp, indent=2)
        return written
