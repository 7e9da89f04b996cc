import json
import os

import pytest

from exceptions import ConfigurationError, ValidationError
from service import (
    ExperimentService,
    RunConfig,
    checkpoint_dirs,
    load_run_config,
    prepare_output,
)
from storage import load_report
from synth import parse_plan

TINY = {
    'encoder': {
        'image_size': 32, 'patch_size': 16, 'embed_dim': 8, 'depth': 4, 'num_heads': 2,
        'moe_layers': [3, 4], 'num_experts': 2, 'task_embed_dim': 4,
    },
    'segmentation': {'tap_layers': [1, 2, 3, 4], 'fusion_dim': 8, 'reassemble_dims': [4, 4, 8, 8]},
    'optimizer': {'epochs': 1, 'batch_size': 4, 'batches_per_epoch': 2},
}


class TestRunConfig:
    def test_bundled_run_config(self):
        run = load_run_config('plans/desk_run.json')
        assert run.paradigm == 'au' and run.deterministic
        assert os.path.normpath(run.manifest) == os.path.abspath('data/desk4/manifest.json')
        assert run.encoder.moe_layers == (7, 8, 9, 10, 11, 12)

    def test_relative_manifest_and_round_trip(self, tmp_path):
        run = RunConfig.from_dict({'manifest': 'm.json', **TINY}, base_dir=str(tmp_path))
        assert run.manifest == os.path.join(str(tmp_path), 'm.json')
        assert RunConfig.from_dict(json.loads(json.dumps(run.to_dict()))) == run

    def test_unknown_field_and_paradigm(self):
        with pytest.raises(ConfigurationError) as info:
            RunConfig.from_dict({'manifest': 'm.json', 'paradigms': 'au'})
        assert info.value.field == 'paradigms'
        with pytest.raises(ConfigurationError) as info:
            RunConfig(manifest='m.json', paradigm='mt')
        assert info.value.field == 'paradigm'

    def test_negative_seed_and_workers(self):
        with pytest.raises(ConfigurationError) as info:
            RunConfig(manifest='m.json', seed=-1)
        assert info.value.field == 'seed'
        with pytest.raises(ConfigurationError) as info:
            RunConfig(manifest='m.json', data_workers=-1)
        assert info.value.field == 'data_workers'
        assert RunConfig(manifest='m.json').data_workers == 0

    def test_override_ignores_none(self):
        run = RunConfig(manifest='m.json', seed=4)
        changed = run.override(paradigm='CG', seed=None, out='runs/cg')
        assert (changed.paradigm, changed.seed, changed.out) == ('cg', 4, 'runs/cg')


class TestOutputDirectory:
    def test_non_empty_needs_force(self, tmp_path):
        (tmp_path / 'old.txt').write_text('x', encoding='utf-8')
        with pytest.raises(ConfigurationError) as info:
            prepare_output(str(tmp_path))
        assert info.value.field == 'out'
        prepare_output(str(tmp_path), force=True)
        assert os.listdir(tmp_path) == []

    def test_checkpoint_lookup(self, tmp_path):
        with pytest.raises(ValidationError):
            checkpoint_dirs(str(tmp_path / 'missing'))
        with pytest.raises(ValidationError):
            checkpoint_dirs(str(tmp_path))
        (tmp_path / 'b').mkdir()
        (tmp_path / 'b' / 'meta.json').write_text('{}', encoding='utf-8')
        (tmp_path / 'a').mkdir()
        (tmp_path / 'a' / 'meta.json').write_text('{}', encoding='utf-8')
        assert checkpoint_dirs(str(tmp_path)) == [str(tmp_path / 'a'), str(tmp_path / 'b')]
        assert checkpoint_dirs(str(tmp_path / 'a')) == [str(tmp_path / 'a')]


class TestWorkflow:
    def test_train_evaluate_analyze_report(self, tmp_path):
        service = ExperimentService()
        plan = parse_plan(
            {
                'resolution': [32, 32],
                'rows': [
                    {'group': 'Desk', 'seg': 1, 'cls': 1, 'reg': 1, 'det': 1,
                     'train': 8, 'test': 2},
                ],
            }
        )
        registry = service.synth(plan, 0, str(tmp_path / 'data'))
        manifest = str(tmp_path / 'data' / 'manifest.json')

        reports = {}
        for paradigm in ('ts', 'au'):
            run = RunConfig.from_dict(
                {'manifest': manifest, 'paradigm': paradigm, 'deterministic': True,
                 'out': str(tmp_path / paradigm), **TINY}
            )
            outcomes = service.train(run)
            assert len(outcomes) == (4 if paradigm == 'ts' else 1)
            assert os.path.isfile(tmp_path / paradigm / 'plan.json')
            out = str(tmp_path / f'{paradigm}_test.json')
            reports[paradigm] = service.evaluate(str(tmp_path / paradigm), 'test', run, out)
            assert sorted(load_report(out).task_ids()) == sorted(registry.task_ids())

        delta = service.analyze(
            reports['ts'], reports['au'], 'absolute', str(tmp_path / 'analysis')
        )
        assert delta.paradigm == 'au'
        assert [g.group for g in delta.per_group] == ['Desk']
        assert os.path.isfile(tmp_path / 'analysis' / 'delta_au.md')

        written = service.report(
            [str(tmp_path / 'analysis' / 'delta_au.json')],
            str(tmp_path / 'summary'),
            [str(tmp_path / 'ts_test.json'), str(tmp_path / 'au_test.json')],
        )
        names = sorted(os.path.basename(p) for p in written)
        assert names == ['delta_heatmap.png', 'group_table.md', 'paradigm_bars.png']
        index = json.loads((tmp_path / 'summary' / 'report_index.json').read_text('utf-8'))
        assert len(index['files']) == 3

    def test_unknown_split(self, tmp_path):
        with pytest.raises(ValidationError) as info:
            ExperimentService().evaluate(str(tmp_path), 'train', RunConfig(manifest='m.json'))
        assert info.value.field == 'split'
