import json

import numpy as np
import pytest

from cacc.dataset import (CrowdScene, SynthConfig, augment, draw_window, load_dataset, load_scene, save_dataset, save_scene,
                          source_config, synth_generate, target_config)


def small(cfg, **kw):
    return cfg.__class__(**{**cfg.__dict__, "n_train": 6, "n_test": 2, **kw})


def test_zero_crowd_scenes():
    ds = synth_generate(small(source_config(), count_range=(0, 0)))
    for sc in ds.train + ds.test:
        assert sc.count == 0
        assert not sc.body_mask.any()


def test_fixed_count_and_bounds():
    ds = synth_generate(small(target_config(), count_range=(5, 5)))
    for sc in ds.train + ds.test:
        assert sc.count == 5
        assert (sc.points[:, 0] >= 0).all() and (sc.points[:, 0] < sc.width).all()
        assert (sc.points[:, 1] >= 0).all() and (sc.points[:, 1] < sc.height).all()


def test_same_seed_identical():
    a = synth_generate(small(source_config()))
    b = synth_generate(small(source_config()))
    for x, y in zip(a.train + a.test, b.train + b.test):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.points.tobytes() == y.points.tobytes()


def test_different_seed_differs():
    a = synth_generate(small(source_config()))
    b = synth_generate(small(source_config(), seed=99))
    assert a.train[0].image.tobytes() != b.train[0].image.tobytes()


def test_points_lie_on_body_mask():
    for cfg in (source_config(), target_config()):
        for sc in synth_generate(small(cfg)).train:
            rows = np.floor(sc.points[:, 1]).astype(int)
            cols = np.floor(sc.points[:, 0]).astype(int)
            assert sc.body_mask[rows, cols].all()


def test_domain_shift_in_background():
    def bg_mean(ds):
        return np.mean([sc.image[..., 0][~sc.body_mask].mean() for sc in ds.train])

    src = synth_generate(small(source_config()))
    tgt = synth_generate(small(target_config()))
    assert bg_mean(tgt) - bg_mean(src) > 0.15


def test_size_must_divide_by_eight():
    with pytest.raises(ValueError):
        SynthConfig(size=(60, 64))
    with pytest.raises(ValueError):
        CrowdScene(image=np.zeros((12, 16)), points=[])


def test_multichannel_generation_and_roundtrip(tmp_path):
    ds = synth_generate(small(source_config(), channels=3, n_train=1, n_test=0))
    sc = ds.train[0]
    assert sc.image.shape == (64, 64, 3)
    save_scene(sc, tmp_path, "0000")
    back = load_scene(tmp_path, "0000")
    np.testing.assert_array_equal(back.image, sc.image)


def test_scene_roundtrip(tmp_path):
    sc = synth_generate(small(source_config())).train[0]
    save_scene(sc, tmp_path, "0007")
    back = load_scene(tmp_path, "0007")
    assert back.points.tobytes() == sc.points.tobytes()
    assert np.abs(back.image - sc.image).max() <= 0.5 / 255 + 1e-7
    np.testing.assert_array_equal(back.body_mask, sc.body_mask)


def test_dataset_roundtrip(tmp_path):
    ds = synth_generate(small(target_config()))
    save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["domain"] == "target"
    assert len(manifest["train"]) == 6 and len(manifest["test"]) == 2
    back = load_dataset(tmp_path)
    for a, b in zip(ds.train + ds.test, back.train + back.test):
        assert a.points.tobytes() == b.points.tobytes()
        assert a.image.tobytes() == b.image.tobytes()


def _write_annotation(tmp_path, points, w=16, h=16):
    sc = CrowdScene(image=np.zeros((h, w)), points=[])
    save_scene(sc, tmp_path, "0000")
    (tmp_path / "0000.json").write_text(json.dumps({"points": points}))


def test_out_of_bounds_annotation(tmp_path):
    _write_annotation(tmp_path, [[1, 1], [16, 0]])
    with pytest.raises(ValueError, match="point 1"):
        load_scene(tmp_path, "0000")


def test_empty_annotation(tmp_path):
    _write_annotation(tmp_path, [])
    assert load_scene(tmp_path, "0000").count == 0


def test_malformed_annotation(tmp_path):
    _write_annotation(tmp_path, [[1, 2, 3]])
    with pytest.raises(ValueError):
        load_scene(tmp_path, "0000")
    (tmp_path / "0000.json").write_text("{not json")
    with pytest.raises(ValueError):
        load_scene(tmp_path, "0000")


# -- augmentation ------------------------------------------------------------------

def test_full_crop_without_flip_is_identity():
    sc = synth_generate(small(source_config())).train[0]
    out = augment(sc, 64, seed=3, flip=False)
    np.testing.assert_array_equal(out.image, sc.image)
    np.testing.assert_array_equal(out.points, sc.points)


def test_forced_flip_mirror_formula():
    sc = CrowdScene(image=np.zeros((64, 64)), points=[(0.0, 10.0), (20.5, 3.0)])
    out = augment(sc, 64, seed=0, flip=True)
    np.testing.assert_array_equal(out.points, [(63.0, 10.0), (42.5, 3.0)])


def test_flip_mirrors_pixels():
    img = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    sc = CrowdScene(image=img, points=[])
    out = augment(sc, 16, seed=0, flip=True)
    np.testing.assert_array_equal(out.image[..., 0], img[:, ::-1])


def test_crop_larger_than_image():
    sc = CrowdScene(image=np.zeros((16, 16)), points=[])
    with pytest.raises(ValueError):
        augment(sc, 24, seed=0)


def test_many_draws_never_invent_points():
    sc = synth_generate(small(target_config())).train[0]
    for seed in range(100):
        win = draw_window(64, 64, 32, np.random.default_rng(seed))
        out = augment(sc, 32, seed)
        assert out.count <= sc.count
        assert ((out.points >= 0) & (out.points < 32)).all()
        # undo the window and look each point up among the originals
        x = out.points[:, 0]
        if win.flip:
            x = 31 - x
        back = np.column_stack([x + win.x0, out.points[:, 1] + win.y0])
        for p in back:
            assert np.isclose(sc.points, p, atol=1e-9).all(axis=1).any()
