import json
import os

import numpy as np
import pytest
import torch
from PIL import Image

from config import NORMALIZE_MEAN, NORMALIZE_STD
from data import (
    Augmenter,
    BatchCollator,
    DetectionBatch,
    TaskBatchSampler,
    TaskDataset,
    TaskRegistry,
    UnitDataset,
    build_datasets,
    collate,
    evaluation_loader,
    load_manifest,
    load_split,
    preprocess,
    registry_from_dict,
    regression_scale,
    resize_mask,
    sample_batches,
    serialize_manifest,
    set_loader_epoch,
    split_train_val,
    training_loader,
)
from exceptions import ConfigurationError, DataError, ManifestError, RegistrationError
from models import BoundingBox, LabeledSample, RegressionLabel, TaskSpec
from synth import parse_plan, write_synth


def manifest_payload() -> dict:
    return {
        'tasks': [
            {
                'task_id': 'OB_seg1',
                'type': 'seg',
                'group': 'OB',
                'train': [{'image': 'a.png', 'label': {'mask': 'a_mask.png'}}],
            },
            {
                'task_id': 'OB_cls1',
                'type': 'cls',
                'group': 'OB',
                'num_classes': 3,
                'train': [{'image': 'b.png', 'label': {'class': 2}}],
            },
            {
                'task_id': 'Lung_reg1',
                'type': 'reg',
                'group': 'Lung',
                'original_resolution': [480, 640],
                'paradigms': ['cg', 'au'],
                'train': [{'image': 'c.png', 'label': {'value': 31.5}}],
            },
        ]
    }


def desk_plan(train: int = 10, test: int = 2):
    return parse_plan(
        {
            'resolution': [32, 32],
            'rows': [
                {'group': 'Desk', 'seg': 1, 'cls': 1, 'reg': 1, 'det': 1,
                 'train': train, 'test': test},
            ],
        }
    )


# ── manifest ────────────────────────────────────────────────────────


class TestManifest:
    def test_parse_tasks_in_order(self):
        registry = registry_from_dict(manifest_payload())
        assert registry.task_ids() == ['OB_seg1', 'OB_cls1', 'Lung_reg1']
        assert registry['OB_seg1'].num_classes == 2
        assert registry['Lung_reg1'].original_resolution == (480, 640)
        assert registry['OB_cls1'].n_images == 1

    def test_groups_and_enrollment(self):
        registry = registry_from_dict(manifest_payload())
        assert registry.groups() == {'Lung': ['Lung_reg1'], 'OB': ['OB_cls1', 'OB_seg1']}
        assert registry.enrolled('ts').task_ids() == ['OB_seg1', 'OB_cls1']
        assert len(registry.enrolled('au')) == 3

    def test_duplicate_task_id(self):
        payload = manifest_payload()
        payload['tasks'][1]['task_id'] = 'OB_seg1'
        with pytest.raises(ManifestError) as info:
            registry_from_dict(payload)
        assert info.value.field == 'tasks[1].task_id'

    def test_missing_type(self):
        payload = manifest_payload()
        del payload['tasks'][0]['type']
        with pytest.raises(ManifestError) as info:
            registry_from_dict(payload)
        assert info.value.field == 'tasks[0].type'

    def test_unknown_type(self):
        payload = manifest_payload()
        payload['tasks'][2]['type'] = 'pose'
        with pytest.raises(ManifestError) as info:
            registry_from_dict(payload)
        assert info.value.field == 'tasks[2].type'

    def test_class_label_out_of_range(self):
        payload = manifest_payload()
        payload['tasks'][1]['train'][0]['label']['class'] = 3
        with pytest.raises(ManifestError) as info:
            registry_from_dict(payload)
        assert info.value.field == 'tasks[1].train[0].label.class'

    def test_classification_needs_two_classes(self):
        payload = manifest_payload()
        payload['tasks'][1]['num_classes'] = 1
        with pytest.raises(ManifestError):
            registry_from_dict(payload)

    def test_box_outside_image(self):
        payload = manifest_payload()
        payload['tasks'].append(
            {
                'task_id': 'OB_det1',
                'type': 'det',
                'group': 'OB',
                'train': [{'image': 'd.png', 'label': {'box': [0.5, 1.2, 0.1, 0.1]}}],
            }
        )
        with pytest.raises(ManifestError) as info:
            registry_from_dict(payload)
        assert info.value.field == 'tasks[3].train[0].label.box'

    def test_empty_task_list(self):
        with pytest.raises(ManifestError):
            registry_from_dict({'tasks': []})

    def test_equality_ignores_root(self):
        assert registry_from_dict(manifest_payload(), '/a') == registry_from_dict(
            manifest_payload(), '/b'
        )

    def test_serialized_manifest_parses_back(self, tmp_path):
        registry = registry_from_dict(manifest_payload())
        path = tmp_path / 'manifest.json'
        serialize_manifest(registry, str(path))
        assert load_manifest(str(path)) == registry

    def test_load_missing_and_malformed(self, tmp_path):
        with pytest.raises(ManifestError):
            load_manifest(str(tmp_path / 'absent.json'))
        broken = tmp_path / 'broken.json'
        broken.write_text('{"tasks": [', encoding='utf-8')
        with pytest.raises(ManifestError):
            load_manifest(str(broken))

    def test_subset_and_lookup(self):
        registry = registry_from_dict(manifest_payload())
        assert registry.subset(['Lung_reg1']).task_ids() == ['Lung_reg1']
        with pytest.raises(RegistrationError):
            registry.subset(['Heart_seg1'])
        with pytest.raises(RegistrationError):
            registry['Heart_seg1']

    def test_snapshot(self):
        snapshot = registry_from_dict(manifest_payload()).snapshot()
        assert snapshot['OB_cls1'] == {
            'type': 'cls', 'group': 'OB', 'num_classes': 3, 'n_images': 1
        }


# ── preprocessing ───────────────────────────────────────────────────


class TestPreprocess:
    def test_grayscale_is_replicated_and_normalised(self):
        image = np.full((20, 30), 255, dtype=np.uint8)
        tensor = preprocess(image, 16)
        assert tensor.shape == (3, 16, 16)
        for channel in range(3):
            expected = (1.0 - NORMALIZE_MEAN[channel]) / NORMALIZE_STD[channel]
            assert torch.allclose(tensor[channel], torch.full((16, 16), expected), atol=1e-5)

    def test_rgba_drops_alpha(self):
        image = np.zeros((8, 8, 4), dtype=np.uint8)
        assert preprocess(image, 8).shape == (3, 8, 8)

    def test_empty_image(self):
        with pytest.raises(DataError):
            preprocess(np.zeros((0, 0), dtype=np.uint8), 8)

    def test_unsupported_shape(self):
        with pytest.raises(DataError):
            preprocess(np.zeros((4, 4, 2), dtype=np.uint8), 8)

    def test_mask_resize_keeps_label_values(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[2:8, 2:8] = 2
        resized = resize_mask(mask, 5)
        assert resized.shape == (5, 5)
        assert set(resized.unique().tolist()) <= {0, 2}

    def test_regression_scale(self):
        assert regression_scale(640, 224) == 640 / 224
        with pytest.raises(DataError):
            regression_scale(0, 224)


# ── splitting / augmentation / batching ─────────────────────────────


class TestSplit:
    def test_fraction_and_disjointness(self):
        train, val = split_train_val(list(range(10)), 0.2, seed=4)
        assert len(val) == 2
        assert sorted(train + val) == list(range(10))

    def test_deterministic_per_seed(self):
        assert split_train_val(list(range(50)), 0.2, 1) == split_train_val(list(range(50)), 0.2, 1)
        assert split_train_val(list(range(50)), 0.2, 1) != split_train_val(list(range(50)), 0.2, 2)

    def test_at_least_one_validation_sample(self):
        assert len(split_train_val([0, 1], 0.1, 0)[1]) == 1

    def test_too_few_samples(self):
        with pytest.raises(DataError):
            split_train_val([0], 0.2, 0)

    def test_fraction_out_of_range(self):
        with pytest.raises(ConfigurationError):
            split_train_val(list(range(5)), 1.0, 0)


class TestAugmenter:
    def test_flip_mirrors_box_and_mask(self):
        augmenter = Augmenter(flip_prob=1.0, brightness=0.0, contrast=0.0)
        image = torch.arange(12, dtype=torch.float32).reshape(1, 3, 4).expand(3, 3, 4)
        rng = np.random.default_rng(0)

        boxed = augmenter(LabeledSample(image, BoundingBox(0.2, 0.5, 0.1, 0.1)), rng)
        assert torch.equal(boxed.image, torch.flip(image, dims=(-1,)))
        assert abs(boxed.label.cx - 0.8) < 1e-12

        mask = torch.tensor([[1, 0, 0, 0]] * 3)
        masked = augmenter(LabeledSample(image, mask), rng)
        assert masked.label[:, -1].tolist() == [1, 1, 1]

    def test_no_flip_keeps_scalar_label(self):
        augmenter = Augmenter(flip_prob=0.0)
        sample = augmenter(LabeledSample(torch.zeros(3, 4, 4), 1), np.random.default_rng(0))
        assert sample.label == 1


class TestCollate:
    def test_detection_targets(self):
        task = TaskSpec('D_det1', 'det', 'D')
        items = [
            LabeledSample(torch.zeros(3, 8, 8), BoundingBox(0.5, 0.5, 0.2, 0.2)),
            LabeledSample(torch.zeros(3, 8, 8), BoundingBox(0.1, 0.9, 0.2, 0.2)),
        ]
        batch = collate(task, items, grid_size=7)
        assert isinstance(batch.target, DetectionBatch)
        assert batch.target.heatmap.shape == (2, 7, 7)
        assert batch.target.cells.tolist() == [[3, 3], [6, 0]]
        assert batch.target.regression.shape == (2, 4)

    def test_regression_target_in_resized_pixels(self):
        task = TaskSpec('D_reg1', 'reg', 'D')
        items = [LabeledSample(torch.zeros(3, 8, 8), RegressionLabel(64.0, 4.0))]
        batch = collate(task, items, grid_size=1)
        assert batch.target.tolist() == [16.0]
        assert batch.labels[0].value == 64.0

    def test_empty_batch(self):
        with pytest.raises(DataError):
            collate(TaskSpec('D_cls1', 'cls', 'D', 2), [], grid_size=1)


class TestSampleBatches:
    def test_task_frequency_follows_size(self):
        batches = sample_batches({'big': 900, 'small': 100}, 1, 0, 8, num_batches=10_000)
        share = sum(1 for task_id, _ in batches if task_id == 'big') / len(batches)
        assert abs(share - 0.9) < 0.02

    def test_batches_are_single_task(self):
        batches = sample_batches({'a': 5, 'b': 30}, 1, 0, 4)
        for task_id, indices in batches:
            limit = 5 if task_id == 'a' else 30
            assert all(0 <= i < limit for i in indices)

    def test_batch_size_capped_by_task_size(self):
        batches = sample_batches({'a': 3}, 1, 0, 8)
        assert len(batches) == 1
        assert sorted(batches[0][1]) == [0, 1, 2]

    def test_each_pass_visits_every_index(self):
        batches = sample_batches({'a': 10}, 2, 5, 5, num_batches=4)
        first_pass = batches[0][1] + batches[1][1]
        second_pass = batches[2][1] + batches[3][1]
        assert sorted(first_pass) == list(range(10))
        assert sorted(second_pass) == list(range(10))

    def test_default_batch_count(self):
        assert len(sample_batches({'a': 10, 'b': 7}, 1, 0, 4)) == 5

    def test_stream_is_pure(self):
        sizes = {'a': 12, 'b': 7}
        assert sample_batches(sizes, 3, 1, 4) == sample_batches(sizes, 3, 1, 4)
        assert sample_batches(sizes, 3, 1, 4) != sample_batches(sizes, 4, 1, 4)

    def test_empty_inputs(self):
        with pytest.raises(DataError):
            sample_batches({}, 1, 0, 4)
        with pytest.raises(DataError):
            sample_batches({'a': 0}, 1, 0, 4)


class TestLoaders:
    @staticmethod
    def datasets() -> dict[str, TaskDataset]:
        cls_task = TaskSpec('D_cls1', 'cls', 'D', 2)
        reg_task = TaskSpec('D_reg1', 'reg', 'D')
        cls_samples = [LabeledSample(torch.full((3, 8, 8), float(i)), i % 2, i) for i in range(6)]
        reg_samples = [
            LabeledSample(torch.full((3, 8, 8), -float(i)), RegressionLabel(4.0 * i, 2.0), i)
            for i in range(3)
        ]
        return {
            'D_reg1': TaskDataset(reg_task, reg_samples, 8),
            'D_cls1': TaskDataset(cls_task, cls_samples, 8),
        }

    def test_unit_dataset_maps_global_indices(self):
        unit = UnitDataset(self.datasets())
        assert unit.task_ids == ['D_cls1', 'D_reg1']
        assert unit.offsets == {'D_cls1': 0, 'D_reg1': 6}
        assert len(unit) == 9
        task_id, sample = unit[7]
        assert task_id == 'D_reg1'
        assert sample.index == 1

    def test_sampler_follows_sample_batches(self):
        unit = UnitDataset(self.datasets())
        sampler = TaskBatchSampler(unit, batch_size=4, seed=3)
        sampler.set_epoch(2)
        expected = [
            [unit.offsets[task_id] + i for i in indices]
            for task_id, indices in sample_batches(unit.sizes, 2, 3, 4)
        ]
        assert list(sampler) == expected
        assert len(sampler) == len(expected)

    def test_training_loader_yields_single_task_batches(self):
        datasets = self.datasets()
        loader = training_loader(datasets, 1, batch_size=4, seed=0, num_batches=6)
        set_loader_epoch(loader, 1)
        batches = list(loader)
        assert len(batches) == 6
        for batch in batches:
            expected = datasets[batch.task_id]
            assert len(batch.labels) == min(4, len(expected))
            assert batch.images.shape[1:] == (3, 8, 8)

    def test_batch_order_ignores_worker_count(self):
        augmenter = Augmenter(flip_prob=0.5)
        streams = []
        for workers in (0, 2):
            loader = training_loader(
                self.datasets(), 1, batch_size=2, seed=7, augmenter=augmenter, workers=workers
            )
            set_loader_epoch(loader, 3)
            streams.append([(b.task_id, b.images) for b in loader])
        assert [t for t, _ in streams[0]] == [t for t, _ in streams[1]]
        for (_, first), (_, second) in zip(*streams):
            assert torch.equal(first, second)

    def test_evaluation_loader_is_sequential(self):
        dataset = self.datasets()['D_cls1']
        batches = list(evaluation_loader(dataset, 1, batch_size=4))
        assert [len(b.labels) for b in batches] == [4, 2]
        assert [b.labels for b in batches] == [[0, 1, 0, 1], [0, 1]]

    def test_mixed_task_batch_is_rejected(self):
        unit = UnitDataset(self.datasets())
        collator = BatchCollator({t: unit.datasets[i].task for i, t in enumerate(unit.task_ids)}, 1)
        with pytest.raises(DataError):
            collator([unit[0], unit[6]])

    def test_empty_unit(self):
        with pytest.raises(DataError):
            UnitDataset({})



# ── loading from disk ───────────────────────────────────────────────


class TestLoading:
    def test_synthetic_manifest_loads(self, tmp_path):
        write_synth(desk_plan(), seed=0, out=str(tmp_path))
        registry = load_manifest(str(tmp_path / 'manifest.json'))
        train = load_split(registry, 'train', 32)
        assert {tid: len(ds) for tid, ds in train.items()} == {
            'Desk_seg1': 10, 'Desk_cls1': 10, 'Desk_reg1': 10, 'Desk_det1': 10
        }
        sample = train['Desk_seg1'][0]
        assert sample.image.shape == (3, 32, 32)
        assert sample.label.shape == (32, 32)
        assert train['Desk_reg1'][0].label.scale == 1.0

    def test_corrupt_images_are_skipped(self, tmp_path):
        write_synth(desk_plan(), seed=0, out=str(tmp_path))
        (tmp_path / 'Desk_cls1' / 'train' / '00000.png').write_bytes(b'not a png')
        registry = load_manifest(str(tmp_path / 'manifest.json'))
        dataset = TaskDataset.from_records(
            registry['Desk_cls1'], registry['Desk_cls1'].train, registry.root, 32
        )
        assert len(dataset) == 9

    def test_all_images_unreadable(self, tmp_path):
        task = TaskSpec('D_cls1', 'cls', 'D', 2)
        registry = registry_from_dict(
            {'tasks': [{'task_id': 'D_cls1', 'type': 'cls', 'group': 'D', 'num_classes': 2,
                        'train': [{'image': 'missing.png', 'label': {'class': 0}}]}]},
            str(tmp_path),
        )
        with pytest.raises(DataError):
            TaskDataset.from_records(task, registry['D_cls1'].train, registry.root, 16)

    def test_mask_size_must_match_image(self, tmp_path):
        Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(tmp_path / 'x.png')
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(tmp_path / 'x_mask.png')
        payload = {'tasks': [{'task_id': 'D_seg1', 'type': 'seg', 'group': 'D', 'train': [
            {'image': 'x.png', 'label': {'mask': 'x_mask.png'}},
            {'image': 'x.png', 'label': {'mask': 'x.png'}},
        ]}]}
        registry = registry_from_dict(payload, str(tmp_path))
        task = registry['D_seg1']
        dataset = TaskDataset.from_records(task, task.train, str(tmp_path), 16)
        assert [s.index for s in dataset.samples] == [1]

    def test_build_datasets_is_reproducible(self, tmp_path):
        write_synth(desk_plan(), seed=0, out=str(tmp_path))
        registry = load_manifest(str(tmp_path / 'manifest.json'))
        first = build_datasets(registry, 32, seed=3, workers=2)
        second = build_datasets(registry, 32, seed=3)
        for task_id, (train, val) in first.items():
            assert (len(train), len(val)) == (8, 2)
            assert [s.index for s in val.samples] == [s.index for s in second[task_id][1].samples]

    def test_unknown_split(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_split(TaskRegistry([], str(tmp_path)), 'val', 32)

    def test_manifest_written_by_synth_is_plain_json(self, tmp_path):
        write_synth(desk_plan(train=2, test=1), seed=0, out=str(tmp_path))
        with open(os.path.join(tmp_path, 'manifest.json'), encoding='utf-8') as fp:
            payload = json.load(fp)
        assert [t['task_id'] for t in payload['tasks']] == [
            'Desk_seg1', 'Desk_cls1', 'Desk_reg1', 'Desk_det1'
        ]
