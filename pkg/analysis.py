"""Relative change of a joint paradigm against the task-specific (TS) baseline."""

import json
import math
import os
from collections.abc import Iterable, Mapping, Sequence
from typing import Any

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from loguru import logger
from tabulate import tabulate

from config import DELTA_BASENAME
from constant import (
    ABSOLUTE,
    AU,
    CG,
    DELTA_MODES,
    HIGHER_BETTER,
    LOWER_BETTER,
    PERCENT,
    REPORT_FORMATS,
    TS,
    primary_metric,
)
from exceptions import (
    RegistryMismatchError,
    UndefinedDeltaError,
    ValidationError,
)
from models import DeltaEntry, DeltaReport, GroupDelta, MetricEntry, MetricReport
from utils import format_sig, round_sig

plt.switch_backend('Agg')

_PRIMARY_METRICS = ('dsc', 'auc', 'mre', 'iou')
_PNG_DPI = 100


def _check_mode(mode: str) -> str:
    if mode not in DELTA_MODES:
        raise ValidationError('计算性能变化', f'未知模式 {mode!r}，可选 {DELTA_MODES}', 'mode')
    return mode


def relative_delta(
    ts_value: float, other_value: float, direction: str, mode: str = PERCENT
) -> tuple[float | None, float]:
    """(Δ%, Δabs) of ``other`` against ``ts``; positive always means improvement.

    Δ% is ``None`` when ``ts_value`` is 0 in absolute mode; in percent mode that raises.
    """
    _check_mode(mode)
    if not math.isfinite(ts_value) or not math.isfinite(other_value):
        raise ValidationError('计算性能变化', f'指标值必须有限: ts={ts_value}, other={other_value}')
    if direction == HIGHER_BETTER:
        delta_absolute = other_value - ts_value
    elif direction == LOWER_BETTER:
        delta_absolute = ts_value - other_value
    else:
        raise ValidationError('计算性能变化', f'未知指标方向: {direction}', 'direction')
    if ts_value == 0:
        if mode == PERCENT:
            raise UndefinedDeltaError('计算性能变化', 'TS 基线值为 0，百分比变化无定义')
        return None, delta_absolute
    return delta_absolute / ts_value * 100.0, delta_absolute


def _primary_entry(report: MetricReport, task_id: str) -> MetricEntry | None:
    task_type = report.tasks.get(task_id, {}).get('type')
    candidates = [primary_metric(task_type)] if task_type else list(_PRIMARY_METRICS)
    if task_type and candidates[0] == 'auc':
        candidates.append('accuracy')
    for metric in candidates:
        entry = report.get(task_id, metric)
        if entry is not None:
            return entry
    return None


def build_delta_report(
    ts_report: MetricReport,
    other_report: MetricReport,
    mode: str = ABSOLUTE,
    tasks: Sequence[str] | None = None,
) -> DeltaReport:
    """Per-task primary-metric deltas of ``other_report`` against ``ts_report``.

    Without an explicit ``tasks`` list both reports must cover the same task ids.
    """
    _check_mode(mode)
    ts_ids, other_ids = set(ts_report.task_ids()), set(other_report.task_ids())
    if tasks is None:
        differing = sorted(ts_ids ^ other_ids)
        selected = sorted(ts_ids)
    else:
        selected = list(tasks)
        differing = sorted({t for t in selected if t not in ts_ids or t not in other_ids})
    if differing:
        raise RegistryMismatchError('比较指标报告', differing)

    delta = DeltaReport(paradigm=other_report.paradigm, mode=mode, baseline=ts_report.paradigm)
    for task_id in selected:
        ts_entry = _primary_entry(ts_report, task_id)
        if ts_entry is None:
            raise ValidationError('比较指标报告', f"任务 '{task_id}' 缺少主指标", task_id)
        other_entry = other_report.get(task_id, ts_entry.metric)
        if other_entry is None:
            raise RegistryMismatchError('比较指标报告', [task_id])
        percent, absolute = relative_delta(
            ts_entry.value, other_entry.value, ts_entry.direction, mode
        )
        group = (
            ts_report.tasks.get(task_id, {}).get('group')
            or other_report.tasks.get(task_id, {}).get('group')
            or ''
        )
        delta.per_task.append(
            DeltaEntry(
                task_id=task_id,
                metric=ts_entry.metric,
                ts_value=ts_entry.value,
                other_value=other_entry.value,
                delta_percent=percent,
                delta_absolute=absolute,
                direction=ts_entry.direction,
                group=group,
            )
        )

    grouping: dict[str, list[str]] = {}
    for entry in delta.per_task:
        if entry.group:
            grouping.setdefault(entry.group, []).append(entry.task_id)
    if grouping:
        n_images = {
            t: int(ts_report.tasks.get(t, {}).get('n_images', 0)) for t in selected
        }
        delta.per_group = group_average(delta.per_task, grouping, mode, n_images)
    logger.info(
        '{} 相对 {} 的性能变化: {} 个任务, {} 个分组 (mode={})',
        delta.paradigm, delta.baseline, len(delta.per_task), len(delta.per_group), mode,
    )
    return delta


def _delta_value(entry: DeltaEntry, mode: str) -> float:
    if mode == ABSOLUTE:
        return entry.delta_absolute
    if entry.delta_percent is None:
        raise UndefinedDeltaError('分组平均', f"任务 '{entry.task_id}' 的百分比变化无定义")
    return entry.delta_percent


def group_average(
    entries: Iterable[DeltaEntry],
    grouping: Mapping[str, Sequence[str]],
    mode: str = ABSOLUTE,
    n_images: Mapping[str, int] | None = None,
) -> list[GroupDelta]:
    """Mean sign-adjusted delta per group, groups in lexicographic order."""
    _check_mode(mode)
    by_task = {entry.task_id: entry for entry in entries}
    result = []
    for group in sorted(grouping):
        task_ids = list(grouping[group])
        if not task_ids:
            raise ValidationError('分组平均', f"分组 '{group}' 没有任务", group)
        missing = sorted(t for t in task_ids if t not in by_task)
        if missing:
            raise ValidationError('分组平均', f"分组 '{group}' 的任务缺少变化值: {missing}", group)
        members = [by_task[t] for t in task_ids]
        result.append(
            GroupDelta(
                group=group,
                mean=float(np.mean([_delta_value(e, mode) for e in members])),
                n_tasks=len(members),
                n_images=sum((n_images or {}).get(t, 0) for t in task_ids),
                cross_metric=len({e.metric for e in members}) > 1,
            )
        )
    return result


def delta_to_dict(report: DeltaReport) -> dict[str, Any]:
    return {
        'paradigm': report.paradigm,
        'baseline': report.baseline,
        'mode': report.mode,
        'per_task': [
            {
                'task_id': e.task_id,
                'group': e.group,
                'metric': e.metric,
                'direction': e.direction,
                'ts_value': round_sig(e.ts_value),
                'other_value': round_sig(e.other_value),
                'delta_percent': round_sig(e.delta_percent),
                'delta_absolute': round_sig(e.delta_absolute),
            }
            for e in report.per_task
        ],
        'per_group': [
            {
                'group': g.group,
                'mean': round_sig(g.mean),
                'n_tasks': g.n_tasks,
                'n_images': g.n_images,
                'cross_metric': g.cross_metric,
            }
            for g in report.per_group
        ],
    }


def delta_from_dict(payload: Mapping[str, Any]) -> DeltaReport:
    try:
        return DeltaReport(
            paradigm=str(payload['paradigm']),
            mode=str(payload['mode']),
            baseline=str(payload.get('baseline', TS)),
            per_task=[DeltaEntry(**item) for item in payload['per_task']],
            per_group=[GroupDelta(**item) for item in payload.get('per_group', [])],
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError('读取变化报告', f'结构无效: {exc}') from exc


def delta_frame(report: DeltaReport) -> pd.DataFrame:
    rows = delta_to_dict(report)['per_task']
    columns = [
        'task_id', 'group', 'metric', 'direction',
        'ts_value', 'other_value', 'delta_percent', 'delta_absolute',
    ]
    return pd.DataFrame(rows, columns=columns)


def metric_frame(report: MetricReport) -> pd.DataFrame:
    rows = [
        {
            'task_id': e.task_id,
            'metric': e.metric,
            'value': round_sig(e.value),
            'direction': e.direction,
            'n': e.n,
            'flagged': e.flagged,
        }
        for e in report.entries
    ]
    return pd.DataFrame(rows, columns=['task_id', 'metric', 'value', 'direction', 'n', 'flagged'])


def _markdown(report: DeltaReport | MetricReport) -> str:
    if isinstance(report, MetricReport):
        table = [
            [e.task_id, e.metric, format_sig(e.value), e.direction, e.n]
            for e in report.entries
        ]
        header = f'paradigm: {report.paradigm}  seed: {report.seed}\n\n'
        return header + tabulate(
            table, headers=['Task', 'Metric', 'Value', 'Direction', 'N'], tablefmt='github'
        ) + '\n'

    lines = [f'{report.paradigm} vs {report.baseline}  mode: {report.mode}', '']
    table = [
        [
            e.task_id, e.group, e.metric, format_sig(e.ts_value), format_sig(e.other_value),
            format_sig(e.delta_percent), format_sig(e.delta_absolute),
        ]
        for e in report.per_task
    ]
    lines.append(
        tabulate(
            table,
            headers=['Task', 'Group', 'Metric', 'TS', report.paradigm.upper(), 'Δ%', 'Δabs'],
            tablefmt='github',
        )
    )
    if report.per_group:
        groups = [
            [g.group, g.n_tasks, g.n_images, format_sig(g.mean), 'yes' if g.cross_metric else '']
            for g in report.per_group
        ]
        lines += [
            '',
            tabulate(
                groups,
                headers=['Group', '#Tasks', '#Images', f'Δ ({report.mode})', 'Cross-metric'],
                tablefmt='github',
            ),
        ]
    return '\n'.join(lines) + '\n'


def _save_figure(fig: Any, path: str) -> None:
    fig.savefig(path, dpi=_PNG_DPI, bbox_inches='tight', metadata={'Software': None})
    plt.close(fig)


def _bar_png(report: DeltaReport | MetricReport, path: str) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    if isinstance(report, MetricReport):
        labels = [f'{e.task_id}\n{e.metric}' for e in report.entries]
        values = [e.value for e in report.entries]
        ax.set_ylabel('value')
        ax.set_title(f'{report.paradigm} metrics')
    else:
        labels = [e.task_id for e in report.per_task]
        values = [
            e.delta_absolute if report.mode == ABSOLUTE else (e.delta_percent or 0.0)
            for e in report.per_task
        ]
        ax.axhline(0.0, color='black', linewidth=0.8)
        ax.set_ylabel(f'Δ ({report.mode})')
        ax.set_title(f'{report.paradigm} vs {report.baseline}')
    colors = ['tab:green' if v >= 0 else 'tab:red' for v in values]
    ax.bar(range(len(values)), values, color=colors)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha='right', fontsize=7)
    _save_figure(fig, path)


def render(
    report: DeltaReport | MetricReport, fmt: str, out: str
) -> str:
    """Write ``report`` as ``json``/``csv``/``md``/``png`` to ``out`` (extension appended)."""
    if fmt not in REPORT_FORMATS:
        raise ValidationError('渲染报告', f'未知格式 {fmt!r}，可选 {REPORT_FORMATS}', 'format')
    path = out if out.endswith(f'.{fmt}') else f'{out}.{fmt}'
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    if fmt == 'json':
        payload = delta_to_dict(report) if isinstance(report, DeltaReport) else report.to_dict()
        with open(path, 'w', encoding='utf-8') as fp:
            json.dump(payload, fp, ensure_ascii=False, indent=2, sort_keys=True)
    elif fmt == 'csv':
        frame = delta_frame(report) if isinstance(report, DeltaReport) else metric_frame(report)
        frame.to_csv(path, index=False)
    elif fmt == 'md':
        with open(path, 'w', encoding='utf-8') as fp:
            fp.write(_markdown(report))
    else:
        _bar_png(report, path)
    logger.debug("报告已渲染为 '{}'", path)
    return path


def render_all(report: DeltaReport, out_dir: str, basename: str = DELTA_BASENAME) -> list[str]:
    return [render(report, fmt, os.path.join(out_dir, basename)) for fmt in REPORT_FORMATS]


def delta_matrix(
    reports: Mapping[str, DeltaReport], tasks: Sequence[str] | None = None
) -> pd.DataFrame:
    """Tasks × paradigms table of Δ% (NaN where undefined), explicit task order if given."""
    if not reports:
        raise ValidationError('构建变化矩阵', '没有变化报告')
    if tasks is None:
        tasks = sorted({e.task_id for r in reports.values() for e in r.per_task})
    columns = {}
    for paradigm, report in reports.items():
        column = []
        for task_id in tasks:
            entry = next((e for e in report.per_task if e.task_id == task_id), None)
            if entry is None:
                raise RegistryMismatchError('构建变化矩阵', [task_id])
            value = entry.delta_percent
            column.append(np.nan if value is None else value)
        columns[paradigm.upper()] = column
    return pd.DataFrame(columns, index=list(tasks))


def render_heatmap(matrix: pd.DataFrame, path: str) -> str:
    """Δ% heatmap with one annotated cell per (task, paradigm)."""
    values = matrix.to_numpy(dtype=np.float64)
    limit = float(np.nanmax(np.abs(values))) if np.isfinite(values).any() else 1.0
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * values.shape[1], 1.0 + 0.4 * values.shape[0]))
    image = ax.imshow(values, cmap='RdYlGn', vmin=-limit, vmax=limit, aspect='auto')
    ax.set_xticks(range(values.shape[1]))
    ax.set_xticklabels(matrix.columns)
    ax.set_yticks(range(values.shape[0]))
    ax.set_yticklabels(matrix.index)
    for (row, col), value in np.ndenumerate(values):
        ax.text(col, row, format_sig(None if np.isnan(value) else value, 3),
                ha='center', va='center', fontsize=7)
    fig.colorbar(image, ax=ax, label='Δ% (mode: percent)')
    _save_figure(fig, path)
    return path


def render_paradigm_bars(
    reports: Mapping[str, MetricReport], path: str, tasks: Sequence[str] | None = None
) -> str:
    """Grouped bars of each task's primary metric under every paradigm."""
    paradigms = list(reports)
    if tasks is None:
        tasks = sorted({t for r in reports.values() for t in r.task_ids()})
    width = 0.8 / max(1, len(paradigms))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(tasks) * len(paradigms)), 4))
    for offset, paradigm in enumerate(paradigms):
        values = []
        for task_id in tasks:
            entry = _primary_entry(reports[paradigm], task_id)
            values.append(np.nan if entry is None else entry.value)
        positions = np.arange(len(tasks)) + offset * width
        ax.bar(positions, values, width=width, label=paradigm.upper())
    ax.set_xticks(np.arange(len(tasks)) + width * (len(paradigms) - 1) / 2)
    ax.set_xticklabels(tasks, rotation=45, ha='right', fontsize=7)
    ax.legend()
    _save_figure(fig, path)
    return path


def group_table(reports: Mapping[str, DeltaReport]) -> pd.DataFrame:
    """Group, #Images, Δ(CG), Δ(AU): one row per clinical group."""
    groups: dict[str, dict[str, Any]] = {}
    for paradigm in (CG, AU):
        report = reports.get(paradigm)
        if report is None:
            continue
        for item in report.per_group:
            row = groups.setdefault(item.group, {'Group': item.group, '#Images': item.n_images})
            row[f'Δ({paradigm.upper()})'] = round_sig(item.mean)
    columns = ['Group', '#Images', f'Δ({CG.upper()})', f'Δ({AU.upper()})']
    return pd.DataFrame([groups[g] for g in sorted(groups)], columns=columns)


def render_group_table(reports: Mapping[str, DeltaReport], path: str) -> str:
    modes = sorted({r.mode for r in reports.values()})
    frame = group_table(reports)
    rows = [
        [format_sig(v) if isinstance(v, float) else v for v in row]
        for row in frame.itertuples(index=False)
    ]
    with open(path, 'w', encoding='utf-8') as fp:
        fp.write(f"mode: {', '.join(modes)}\n\n")
        fp.write(tabulate(rows, headers=list(frame.columns), tablefmt='github'))
        fp.write('\n')
    return path
