#!/usr/bin/env python3

import argparse
import json
import os
import sys
from typing import Any

from loguru import logger
from tabulate import tabulate

from config import LOG_LEVEL
from constant import DELTA_MODES, PARADIGMS, task_type_name
from exceptions import NumericError, ValidationError
from models import DeltaReport, MetricReport
from service import ExperimentService, RunConfig, load_run_config
from synth import load_plan
from utils import format_sig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='多任务超声模型训练与负迁移分析工具')
    subparsers = parser.add_subparsers(dest='command')
    subparsers.required = True

    synth_parser = subparsers.add_parser('synth', help='按计划生成合成数据集')
    synth_parser.add_argument('--config', required=True, help='合成计划 JSON')
    synth_parser.add_argument('--seed', type=int, default=0, help='随机种子')
    synth_parser.add_argument('--out', required=True, help='输出目录')
    synth_parser.add_argument('--force', action='store_true', help='清空非空的输出目录')

    train_parser = subparsers.add_parser('train', help='按训练范式训练所有单元')
    train_parser.add_argument('--config', required=True, help='运行配置 JSON')
    train_parser.add_argument('--paradigm', choices=PARADIGMS, help='覆盖配置中的训练范式')
    train_parser.add_argument('--seed', type=int, help='覆盖配置中的随机种子')
    train_parser.add_argument('--out', help='覆盖配置中的输出目录')
    train_parser.add_argument(
        '--deterministic', action='store_true', default=None, help='启用确定性计算'
    )
    train_parser.add_argument('--force', action='store_true', help='清空非空的输出目录')

    evaluate_parser = subparsers.add_parser('evaluate', help='评估检查点或整个运行目录')
    evaluate_parser.add_argument('checkpoint', help='检查点目录或训练输出目录')
    evaluate_parser.add_argument(
        'split', nargs='?', default='test', choices=('val', 'test'), help='评估划分 (默认 test)'
    )
    evaluate_parser.add_argument('--config', required=True, help='运行配置 JSON (提供清单路径)')
    evaluate_parser.add_argument('--out', help='指标报告输出路径 (JSON)')

    analyze_parser = subparsers.add_parser('analyze', help='计算相对 TS 基线的性能变化')
    analyze_parser.add_argument('ts_report', help='TS 范式指标报告')
    analyze_parser.add_argument('other_report', help='CG/AU 范式指标报告')
    analyze_parser.add_argument('--mode', choices=DELTA_MODES, default='absolute', help='变化模式')
    analyze_parser.add_argument('--out', help='输出目录 (json/csv/md/png)')
    analyze_parser.add_argument('--tasks', help='仅比较这些任务，逗号分隔')

    report_parser = subparsers.add_parser('report', help='汇总多个范式的变化报告')
    report_parser.add_argument('delta', nargs='+', help='analyze 生成的 delta JSON 文件')
    report_parser.add_argument(
        '--config', nargs='*', default=[], help='各范式的指标报告，用于绘制柱状图'
    )
    report_parser.add_argument('--out', required=True, help='输出目录')
    report_parser.add_argument('--tasks', help='热图任务顺序，逗号分隔')

    return parser


def _task_list(raw: str | None) -> list[str] | None:
    if not raw:
        return None
    return [item.strip() for item in raw.split(',') if item.strip()]


def print_metric_report(report: MetricReport) -> None:
    rows = [
        [
            e.task_id,
            task_type_name(report.tasks.get(e.task_id, {}).get('type', '')),
            e.metric,
            format_sig(e.value),
            e.direction,
            e.n,
        ]
        for e in report.entries
    ]
    headers = ['任务', '类型', '指标', '数值', '方向', '样本数']
    print(f'范式 {report.paradigm} (seed={report.seed}) 共 {len(report.task_ids())} 个任务:')
    print(tabulate(rows, headers=headers, tablefmt='github'))


def print_delta_report(report: DeltaReport) -> None:
    rows = [
        [e.task_id, e.metric, format_sig(e.delta_percent), format_sig(e.delta_absolute)]
        for e in report.per_task
    ]
    print(f'{report.paradigm} 相对 {report.baseline} 的变化 (mode: {report.mode}):')
    print(tabulate(rows, headers=['任务', '指标', 'Δ%', 'Δabs'], tablefmt='github'))
    if report.per_group:
        groups = [[g.group, g.n_tasks, g.n_images, format_sig(g.mean)] for g in report.per_group]
        print(tabulate(groups, headers=['分组', '任务数', '图像数', 'Δ'], tablefmt='github'))


def execute(args: argparse.Namespace, service: ExperimentService | None = None) -> Any:
    service = service or ExperimentService()
    if args.command == 'synth':
        registry = service.synth(load_plan(args.config), args.seed, args.out, args.force)
        print(f"已生成 {len(registry)} 个任务，清单: {os.path.join(args.out, 'manifest.json')}")
        return registry
    if args.command == 'train':
        run: RunConfig = load_run_config(args.config).override(
            paradigm=args.paradigm, seed=args.seed, out=args.out, deterministic=args.deterministic
        )
        outcomes = service.train(run, force=args.force)
        rows = [
            [o.unit.unit_id, len(o.unit.task_ids), o.checkpoint.epoch,
             format_sig(o.checkpoint.best_score)]
            for o in outcomes
        ]
        print(tabulate(rows, headers=['单元', '任务数', '最佳轮次', '验证分数'], tablefmt='github'))
        return outcomes
    if args.command == 'evaluate':
        report = service.evaluate(
            args.checkpoint, args.split, load_run_config(args.config), args.out
        )
        print_metric_report(report)
        return report
    if args.command == 'analyze':
        report = service.analyze(
            args.ts_report, args.other_report, args.mode, args.out, _task_list(args.tasks)
        )
        print_delta_report(report)
        return report
    if args.command == 'report':
        written = service.report(args.delta, args.out, args.config, _task_list(args.tasks))
        print(f'已生成 {len(written)} 个文件:')
        for path in written:
            print(f'  {path}')
        return written
    raise ValidationError('命令', f'未知的命令 {args.command}')


def error_payload(exc: Exception) -> dict[str, Any]:
    payload: dict[str, Any] = {
        'error': type(exc).__name__,
        'action': getattr(exc, 'action_name', None),
        'message': getattr(exc, 'message', str(exc)),
    }
    for key in ('field', 'differing_ids', 'epoch', 'task_id', 'batch'):
        value = getattr(exc, key, None)
        if value is not None:
            payload[key] = value
    return payload


def check_args(args: argparse.Namespace) -> None:
    seed = getattr(args, 'seed', None)
    if seed is not None and seed < 0:
        raise ValidationError('解析参数', f'--seed 必须为非负整数，得到 {seed}', 'seed')


def configure_logging(level: str = LOG_LEVEL) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level)


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        check_args(args)
        execute(args)
    except ValidationError as exc:
        print(json.dumps(error_payload(exc), ensure_ascii=False), file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(json.dumps(error_payload(exc), ensure_ascii=False), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception('未预料的错误')
        print(json.dumps(error_payload(exc), ensure_ascii=False), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
