import json
import unittest
from unittest.mock import Mock, patch

from exceptions import ConfigurationError, NumericError, RegistryMismatchError
from main import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    build_parser,
    error_payload,
    execute,
    main,
)
from models import Checkpoint, DeltaReport, MetricReport


def parse_args(argv):
    return build_parser().parse_args(argv)


class ParserTest(unittest.TestCase):
    def test_train_overrides_default_to_none(self):
        args = parse_args(['train', '--config', 'run.json'])

        self.assertIsNone(args.paradigm)
        self.assertIsNone(args.seed)
        self.assertIsNone(args.deterministic)
        self.assertFalse(args.force)

    def test_evaluate_split_defaults_to_test(self):
        args = parse_args(['evaluate', 'runs/au', '--config', 'run.json'])

        self.assertEqual(args.split, 'test')
        self.assertEqual(parse_args(['evaluate', 'runs/au', 'val', '--config', 'r']).split, 'val')

    def test_analyze_defaults_to_absolute_mode(self):
        args = parse_args(['analyze', 'ts.json', 'cg.json', '--tasks', 'OB_seg1,OB_cls1'])

        self.assertEqual(args.mode, 'absolute')
        self.assertEqual(args.tasks, 'OB_seg1,OB_cls1')

    def test_unknown_paradigm_is_rejected_by_parser(self):
        with patch('sys.stderr'):
            with self.assertRaises(SystemExit):
                parse_args(['train', '--config', 'run.json', '--paradigm', 'mt'])


class ExecuteTest(unittest.TestCase):
    def test_train_applies_cli_overrides(self):
        service = Mock()
        service.train.return_value = []
        run = Mock()
        args = parse_args(
            ['train', '--config', 'run.json', '--paradigm', 'cg', '--seed', '3', '--force']
        )

        with patch('main.load_run_config', return_value=run) as load, patch('main.print'):
            execute(args, service)

        load.assert_called_once_with('run.json')
        run.override.assert_called_once_with(
            paradigm='cg', seed=3, out=None, deterministic=None
        )
        service.train.assert_called_once_with(run.override.return_value, force=True)

    def test_train_prints_one_row_per_unit(self):
        outcome = Mock()
        outcome.unit.unit_id = 'cg_OB'
        outcome.unit.task_ids = ('OB_seg1', 'OB_cls1')
        outcome.checkpoint = Checkpoint({}, 'hash', {}, 0.75, 4, 0)
        service = Mock()
        service.train.return_value = [outcome]

        with patch('main.load_run_config'), patch('main.print') as mock_print:
            execute(parse_args(['train', '--config', 'run.json']), service)

        table = mock_print.call_args_list[0].args[0]
        self.assertIn('cg_OB', table)
        self.assertIn('0.75', table)

    def test_analyze_splits_task_list(self):
        service = Mock()
        service.analyze.return_value = DeltaReport('cg', 'absolute')
        args = parse_args(['analyze', 'ts.json', 'cg.json', '--tasks', 'OB_seg1, OB_cls1'])

        with patch('main.print'):
            report = execute(args, service)

        service.analyze.assert_called_once_with(
            'ts.json', 'cg.json', 'absolute', None, ['OB_seg1', 'OB_cls1']
        )
        self.assertEqual(report.paradigm, 'cg')

    def test_report_passes_metric_reports(self):
        service = Mock()
        service.report.return_value = ['out/delta_heatmap.png']
        args = parse_args(
            ['report', 'd_cg.json', 'd_au.json', '--config', 'ts.json', 'au.json', '--out', 'out']
        )

        with patch('main.print') as mock_print:
            execute(args, service)

        service.report.assert_called_once_with(
            ['d_cg.json', 'd_au.json'], 'out', ['ts.json', 'au.json'], None
        )
        self.assertEqual(mock_print.call_args_list[0].args[0], '已生成 1 个文件:')

    def test_evaluate_prints_metric_table(self):
        report = MetricReport('au', 0, 'runs/au')
        report.add('OB_seg1', 'dsc', 0.8, 5)
        report.tasks['OB_seg1'] = {'type': 'seg', 'group': 'OB'}
        service = Mock()
        service.evaluate.return_value = report

        with patch('main.load_run_config') as load, patch('main.print') as mock_print:
            execute(parse_args(['evaluate', 'runs/au', '--config', 'run.json']), service)

        service.evaluate.assert_called_once_with('runs/au', 'test', load.return_value, None)
        self.assertTrue(mock_print.call_args_list[0].args[0].startswith('范式 au'))
        self.assertIn('| Seg ', mock_print.call_args_list[1].args[0])


class ExitCodeTest(unittest.TestCase):
    def run_main(self, error):
        with patch('main.execute', side_effect=error), patch('sys.stderr') as stderr:
            code = main(['analyze', 'ts.json', 'cg.json'])
        written = ''.join(call.args[0] for call in stderr.write.call_args_list)
        return code, json.loads(written.strip().splitlines()[-1])

    def test_success(self):
        with patch('main.execute', return_value=None):
            self.assertEqual(main(['analyze', 'ts.json', 'cg.json']), EXIT_OK)

    def test_validation_error(self):
        code, payload = self.run_main(
            ConfigurationError('运行配置', '缺少 manifest 路径', 'manifest')
        )

        self.assertEqual(code, EXIT_VALIDATION)
        self.assertEqual(payload['error'], 'ConfigurationError')
        self.assertEqual(payload['field'], 'manifest')

    def test_registry_mismatch_lists_ids(self):
        code, payload = self.run_main(RegistryMismatchError('比较指标报告', ['b', 'a']))

        self.assertEqual(code, EXIT_VALIDATION)
        self.assertEqual(payload['differing_ids'], ['a', 'b'])

    def test_numeric_error(self):
        code, payload = self.run_main(
            NumericError('训练', '损失非有限', epoch=2, task_id='OB_seg1', batch=5)
        )

        self.assertEqual(code, EXIT_RUNTIME)
        self.assertEqual(
            (payload['epoch'], payload['task_id'], payload['batch']), (2, 'OB_seg1', 5)
        )

    def test_unexpected_error_maps_to_runtime_code(self):
        code, payload = self.run_main(RuntimeError('CUDA out of memory'))

        self.assertEqual(code, EXIT_RUNTIME)
        self.assertEqual(payload['error'], 'RuntimeError')
        self.assertEqual(payload['message'], 'CUDA out of memory')

    def test_negative_seed_is_a_validation_error(self):
        with patch('main.execute') as mock_execute, patch('sys.stderr') as stderr:
            code = main(['synth', '--config', 'plan.json', '--seed', '-1', '--out', 'out'])
        written = ''.join(call.args[0] for call in stderr.write.call_args_list)
        payload = json.loads(written.strip().splitlines()[-1])

        self.assertEqual(code, EXIT_VALIDATION)
        self.assertEqual(payload['field'], 'seed')
        mock_execute.assert_not_called()

    def test_error_payload_omits_missing_context(self):
        payload = error_payload(NumericError('训练', '损失非有限'))

        self.assertEqual(
            payload, {'error': 'NumericError', 'action': '训练', 'message': '损失非有限'}
        )


if __name__ == '__main__':
    unittest.main()
