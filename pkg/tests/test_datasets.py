import numpy as np
import pytest

from vct.datasets import (FactorSpec, MiniScene, MiniShapes, SceneObject, SceneSpec, batch_at, coverage,
                          dataset_iter, export_dataset, image_digest, load_exported_images,
                          sample_fixed_factor_labels, shapes_batch_indices)


@pytest.fixture(scope="module")
def shapes():
    return MiniShapes(32)


def test_factor_spec_arithmetic():
    spec = FactorSpec()
    assert spec.num_combinations == 24576
    idx = np.arange(0, 24576, 37)
    assert np.array_equal(spec.index_from_labels(spec.labels_from_index(idx)), idx)
    with pytest.raises(ValueError):
        FactorSpec((("a", 1),))
    with pytest.raises(ValueError):
        spec.validate(np.array([3, 0, 0, 0, 0, 0]))


def test_render_deterministic(shapes):
    labels = [1, 2, 3, 4, 5, 1]
    a, b = shapes.render(labels), shapes.render(labels)
    assert a.dtype == np.float32 and a.shape == (32, 32, 3)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_background_hue_changes_only_background(shapes):
    a = shapes.render([0, 0, 3, 4, 4, 0])
    b = shapes.render([0, 0, 3, 4, 4, 2])
    cov = shapes.object_coverage([0, 0, 3, 4, 4, 0])
    changed = np.any(a != b, axis=-1)
    assert not np.any(changed & (cov == 1.0))
    assert np.all(changed[cov == 0.0])


def test_pos_x_sweep_moves_centroid(shapes):
    xs = []
    for px in range(8):
        cov = shapes.object_coverage([2, 0, 1, px, 3, 0])
        xs.append((cov * np.arange(32)[None, :]).sum() / cov.sum())
    assert all(b > a for a, b in zip(xs, xs[1:]))


def test_all_renders_distinct():
    ds = MiniShapes(32)
    digests = {image_digest(img) for start in range(0, len(ds), 4096)
               for img in ds.render_index(np.arange(start, min(start + 4096, len(ds))))}
    assert len(digests) == 24576


def test_fixed_factor_batches():
    spec = FactorSpec()
    a = sample_fixed_factor_labels(spec, 2, np.random.default_rng(0), 64)
    b = sample_fixed_factor_labels(spec, 2, np.random.default_rng(1), 64)
    assert len(np.unique(a[:, 2])) == 1 and len(np.unique(b[:, 2])) == 1
    assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_fixed_factor_labels(spec, 6, np.random.default_rng(0), 4)


def test_free_factor_marginal_uniform():
    spec = FactorSpec()
    labels = sample_fixed_factor_labels(spec, 0, np.random.default_rng(3), 10000)
    counts = np.bincount(labels[:, 1], minlength=8)
    p = 1 / 8
    sigma = np.sqrt(10000 * p * (1 - p))
    assert np.all(np.abs(counts - 10000 * p) < 3 * sigma)


def test_dataset_iter_replay_and_epoch(shapes):
    a, la = batch_at(shapes, 7, 32, 5)
    b, lb = batch_at(shapes, 7, 32, 5)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert len(shapes) // 32 == 768
    seen = np.concatenate([shapes_batch_indices(len(shapes), 7, 32, s) for s in range(768)])
    assert np.array_equal(np.sort(seen), np.arange(24576))
    it = dataset_iter(shapes, 7, 32, start_step=5)
    assert np.array_equal(next(it)[1], la)


def test_scene_empty_and_single():
    scenes = MiniScene(32)
    img, mask = scenes.render(SceneSpec([], background_hue=1))
    assert np.all(mask == 0)
    assert np.all(img == img[0, 0])
    spec = SceneSpec([SceneObject(1, 3, 0.5, 0.5)], background_hue=0)
    img, mask = scenes.render(spec)
    cov = coverage("circle", 0.5, 0.5, scenes.radius, 32)
    assert np.array_equal(mask > 0, cov >= 0.5)


def test_scene_disjoint_objects_pixel_counts():
    scenes = MiniScene(32)
    spec = SceneSpec([SceneObject(0, 1, 0.25, 0.25), SceneObject(2, 5, 0.75, 0.75)], background_hue=2)
    _, mask = scenes.render(spec)
    c1 = (coverage("square", 0.25, 0.25, scenes.radius, 32) >= 0.5).sum()
    c2 = (coverage("triangle", 0.75, 0.75, scenes.radius, 32) >= 0.5).sum()
    assert (mask == 1).sum() == c1 and (mask == 2).sum() == c2


def test_scene_masks_consistent_with_pixels():
    scenes = MiniScene(32)
    images, masks, specs = scenes.sample(np.random.default_rng(0), 20)
    for img, mask, spec in zip(images, masks, specs):
        bg, _ = scenes.render(SceneSpec([], spec.background_hue))
        assert np.all(np.any(img != bg, axis=-1)[mask > 0])


def test_scene_validation():
    with pytest.raises(ValueError):
        MiniScene(32).render(SceneSpec([SceneObject(0, 9, 0.5, 0.5)]))
    with pytest.raises(ValueError):
        MiniScene(32, 2, 1)


def test_export_roundtrip(tmp_path, shapes):
    out = export_dataset(shapes, tmp_path / "shapes", seed=3, count=50)
    images = load_exported_images(out)
    labels = np.loadtxt(out / "labels.txt", dtype=np.int64)
    assert images.shape == (50, 32, 32, 3)
    assert np.array_equal(images[7], np.round(shapes.render(labels[7]) * 255).astype(np.uint8))
    assert (out / "images.bin").stat().st_size == 50 * 32 * 32 * 3
    scene_out = export_dataset(MiniScene(32), tmp_path / "scene", seed=1, count=5)
    assert (scene_out / "masks.bin").stat().st_size == 5 * 32 * 32
