import math

import numpy as np
import pytest

from data import load_manifest, load_split
from exceptions import ManifestError
from metrics import MetricAccumulator
from synth import (
    ELLIPSE,
    RECTANGLE,
    clinical_plan,
    load_plan,
    parse_plan,
    render_sample,
    render_shape,
    speckle,
    synth_generate,
    write_synth,
)


def small_plan(**row):
    values = {'group': 'Desk', 'seg': 1, 'cls': 1, 'reg': 1, 'det': 1, 'train': 3, 'test': 1}
    values.update(row)
    return parse_plan({'resolution': [48, 64], 'rows': [values]})


class TestPlan:
    def test_clinical_layout(self):
        plan = clinical_plan()
        generated = synth_generate(clinical_plan(train=2, test=0), seed=0)
        assert len(plan.rows) == 5
        assert len(generated) == 13
        ts_tasks = [t for t, task in generated.items() if task.spec.enrolled('ts')]
        assert len(ts_tasks) == 11
        groups = {}
        for task in generated.values():
            groups[task.spec.clinical_group] = groups.get(task.spec.clinical_group, 0) + 1
        assert groups == {'OB': 7, 'Lung': 3, 'Breast': 3}

    def test_task_ids_count_per_group_and_type(self):
        generated = synth_generate(clinical_plan(train=1, test=0), seed=0)
        assert 'Lung_cls2' in generated
        assert not generated['Lung_cls2'].spec.enrolled('ts')
        assert generated['OB_reg3'].spec.task_type == 'reg'

    def test_unknown_row_field(self):
        with pytest.raises(ManifestError) as info:
            parse_plan({'rows': [{'group': 'A', 'seg': 1, 'train': 2, 'pose': 1}]})
        assert info.value.field == 'rows[0].pose'

    def test_row_needs_a_task_and_training_images(self):
        with pytest.raises(ManifestError):
            parse_plan({'rows': [{'group': 'A', 'train': 2}]})
        with pytest.raises(ManifestError) as info:
            parse_plan({'rows': [{'group': 'A', 'seg': 1, 'train': 0}]})
        assert info.value.field == 'rows[0].train'

    def test_bad_paradigm_and_resolution(self):
        with pytest.raises(ManifestError):
            parse_plan({'rows': [{'group': 'A', 'seg': 1, 'train': 2, 'paradigms': ['mt']}]})
        with pytest.raises(ManifestError):
            parse_plan({'resolution': [8, 8], 'rows': [{'group': 'A', 'seg': 1, 'train': 2}]})

    def test_bundled_plans_parse(self):
        assert len(load_plan('plans/clinical13.json').rows) == 5
        desk = load_plan('plans/desk4.json')
        assert desk.rows[0].counts == {'seg': 1, 'cls': 1, 'reg': 1, 'det': 1}

    def test_missing_plan_file(self, tmp_path):
        with pytest.raises(ManifestError):
            load_plan(str(tmp_path / 'nope.json'))


class TestRendering:
    def test_rectangle_area(self):
        mask = render_shape(20, 30, RECTANGLE, 3, 4, 10, 5)
        assert int(mask.sum()) == 50
        assert mask[4, 3] and not mask[9, 3]

    def test_ellipse_inside_its_box(self):
        mask = render_shape(40, 40, ELLIPSE, 5, 8, 20, 12)
        rows, cols = np.nonzero(mask)
        assert rows.min() >= 8 and rows.max() < 20
        assert cols.min() >= 5 and cols.max() < 25
        assert mask[14, 15]

    def test_speckle_is_brighter_inside(self):
        mask = np.zeros((64, 64), dtype=bool)
        mask[16:48, 16:48] = True
        image = speckle(mask, np.random.default_rng(0))
        assert image.dtype == np.uint8
        assert image[mask].mean() > image[~mask].mean()

    def test_labels_are_consistent_with_image(self):
        rng = np.random.default_rng(1)
        seg = render_sample('seg', (48, 64), rng)
        assert seg.mask.shape == (48, 64) and seg.mask.max() == 1

        reg = render_sample('reg', (48, 64), rng)
        assert reg.label['value'] >= 4

        det = render_sample('det', (48, 64), rng)
        cx, cy, bw, bh = det.label['box']
        assert 0 < bw <= 1 and 0 < bh <= 1
        assert 0 <= cx - bw / 2 and cx + bw / 2 <= 1
        assert 0 <= cy - bh / 2 and cy + bh / 2 <= 1

        cls = render_sample('cls', (48, 64), rng)
        assert cls.label['class'] in (ELLIPSE, RECTANGLE)


class TestGeneration:
    def test_same_seed_same_pixels(self):
        first = synth_generate(small_plan(), seed=7)
        second = synth_generate(small_plan(), seed=7)
        for task_id, task in first.items():
            for a, b in zip(task.train, second[task_id].train, strict=True):
                assert np.array_equal(a.image, b.image)
                assert a.label == b.label

    def test_different_seed_differs(self):
        first = synth_generate(small_plan(), seed=7)['Desk_seg1'].train[0].image
        second = synth_generate(small_plan(), seed=8)['Desk_seg1'].train[0].image
        assert not np.array_equal(first, second)

    def test_task_stream_independent_of_plan(self):
        alone = synth_generate(small_plan(cls=0, reg=0, det=0), seed=3)['Desk_seg1']
        together = synth_generate(small_plan(), seed=3)['Desk_seg1']
        assert np.array_equal(alone.train[0].image, together.train[0].image)

    def test_split_sizes_and_resolution(self):
        generated = synth_generate(small_plan(train=4, test=2), seed=0)
        task = generated['Desk_det1']
        assert (len(task.train), len(task.test)) == (4, 2)
        assert task.train[0].image.shape == (48, 64)
        assert task.spec.original_resolution == (48, 64)

    def test_write_synth_produces_loadable_manifest(self, tmp_path):
        registry = write_synth(small_plan(), seed=0, out=str(tmp_path))
        loaded = load_manifest(str(tmp_path / 'manifest.json'))
        assert loaded == registry
        record = loaded['Desk_seg1'].train[0]
        assert (tmp_path / record.image).exists()
        assert (tmp_path / record.label['mask']).exists()

    def test_rendered_labels_score_perfectly_as_predictions(self, tmp_path):
        write_synth(small_plan(train=6, test=2), seed=0, out=str(tmp_path))
        registry = load_manifest(str(tmp_path / 'manifest.json'))
        for task_id, dataset in load_split(registry, 'train', 32).items():
            task = registry[task_id]
            labels = [sample.label for sample in dataset.samples]
            accumulator = MetricAccumulator(task.task_type, task.num_classes)
            if task.task_type == 'seg':
                masks = [label.numpy() for label in labels]
                accumulator.add_masks(masks, masks)
                assert accumulator.compute(task_id)['dsc'][0] == 1.0
            elif task.task_type == 'cls':
                accumulator.add_classes(np.eye(task.num_classes)[labels], labels)
                assert accumulator.compute(task_id)['accuracy'][0] == 1.0
            elif task.task_type == 'reg':
                assert {label.scale for label in labels} == {2.0}
                accumulator.add_values(
                    [label.resized_value for label in labels],
                    [label.value for label in labels],
                    [label.scale for label in labels],
                )
                assert math.isclose(accumulator.compute(task_id)['mre'][0], 0.0, abs_tol=1e-9)
            else:
                accumulator.add_boxes(labels, labels)
                assert math.isclose(accumulator.compute(task_id)['iou'][0], 1.0)
