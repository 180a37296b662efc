import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cacc import tensor as T
from cacc.dataset import source_config, synth_generate
from cacc.gradcheck import check_gradients
from cacc.pcs import (AnchorConfig, PCSTrainConfig, WeakLearner, bag_loss, body_contamination, collect_bags,
                      coverage, infer_segmentation, partition_bags, refine_background, sample_bags,
                      train_weak_learner)

from oracles import brute_contains, brute_partition, brute_refine


def random_scene(rng):
    h = int(rng.choice([16, 24, 32]))
    w = int(rng.choice([16, 24, 32]))
    k = int(rng.integers(0, 8))
    pts = np.column_stack([rng.uniform(0, w, k), rng.uniform(0, h, k)])
    # put a few points exactly on bag edges
    if k:
        pts[0] = np.floor(pts[0] / 4) * 4
    return h, w, pts


def test_partition_and_refine_match_brute_force():
    rng = np.random.default_rng(0)
    anchors = AnchorConfig()
    for _ in range(100):
        h, w, pts = random_scene(rng)
        rects = sample_bags(h, w, anchors)
        crowd, bg = partition_bags(rects, pts)
        bc, bb = brute_partition(rects, pts)
        assert [tuple(r) for r in crowd] == bc
        assert [tuple(r) for r in bg] == bb
        assert [tuple(r) for r in refine_background(bg, pts, (h, w))] == brute_refine(bb, pts, h, w)


def test_sample_bags_tiles_exhaustively():
    rects = sample_bags(16, 24, AnchorConfig(scales=((8, 8),), stride=4))
    assert len(rects) == 3 * 5
    assert (rects[:, 0] + rects[:, 2] <= 24).all() and (rects[:, 1] + rects[:, 3] <= 16).all()
    assert len(sample_bags(4, 4, AnchorConfig())) == 0


def test_partition_half_open_edges():
    rects = np.array([[0, 0, 8, 8], [8, 0, 8, 8]])
    crowd, bg = partition_bags(rects, [(8.0, 3.0)])
    assert crowd.tolist() == [[8, 0, 8, 8]] and bg.tolist() == [[0, 0, 8, 8]]


def test_refine_removes_bag_under_head():
    # U = (0, 0, 8, 8) and the doubled rect spans y in [4, 20) so the head at y = 6 hits both
    kept = refine_background(np.array([[0, 8, 8, 8]]), [(4.0, 6.0)], (32, 32))
    assert len(kept) == 0


def test_refine_keeps_bag_when_doubled_rect_misses():
    kept = refine_background(np.array([[0, 8, 8, 8]]), [(4.0, 2.0)], (32, 32))
    assert kept.tolist() == [[0, 8, 8, 8]]


def test_refine_keeps_top_edge_and_empty_scene():
    bg = np.array([[0, 0, 8, 8], [4, 2, 8, 8]])
    assert refine_background(bg, [(2.0, 1.0)], (32, 32)).tolist() == bg.tolist()
    assert refine_background(bg, [], (32, 32)).tolist() == bg.tolist()


def test_refinement_reduces_body_contamination():
    scenes = synth_generate(source_config()).train[:20]
    before = after = 0.0
    for sc in scenes:
        _, bg = partition_bags(sample_bags(sc.height, sc.width, AnchorConfig()), sc.points)
        before += body_contamination(bg, sc.body_mask)
        after += body_contamination(refine_background(bg, sc.points, (sc.height, sc.width)), sc.body_mask)
    assert after < before


def test_body_contamination_matches_direct_count():
    rng = np.random.default_rng(1)
    mask = rng.random((16, 16)) > 0.9
    rects = sample_bags(16, 16, AnchorConfig())
    direct = np.mean([mask[y:y + h, x:x + w].any() for x, y, w, h in rects])
    assert body_contamination(rects, mask) == pytest.approx(direct)


def test_bag_loss_examples():
    zeros = T.Tensor(np.zeros((2, 2, 4, 4)))
    assert bag_loss(zeros, [0, 1]).item() == pytest.approx(np.log(2))
    m = np.zeros((1, 2, 3, 3))
    m[0, 0] = 2.0
    expected = np.log1p(np.exp(-2.0))
    assert bag_loss(T.Tensor(m), [0]).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        bag_loss(zeros, [0])


def test_bag_loss_gradient_through_weak_learner():
    from cacc.gradcheck import check_tensor_gradients

    model = WeakLearner(width=4, seed=0).astype(np.float64)
    x = T.Tensor(np.random.default_rng(0).random((2, 1, 8, 8)))
    err = check_tensor_gradients(lambda: bag_loss(model(x), [0, 1]), model.parameters(), max_entries=12)
    assert err < 1e-4
    assert check_gradients(lambda t: bag_loss(t[0], [1, 0]),
                           [np.random.default_rng(1).standard_normal((2, 2, 6, 7))]) < 1e-4


def test_untrained_learner_refuses_inference():
    with pytest.raises(RuntimeError):
        infer_segmentation(WeakLearner(), np.zeros((8, 8)))


def test_crop_equivalence_of_fully_convolutional_response():
    # away from zero-padding effects, the response on a crop equals the crop of the response
    model = WeakLearner(width=4, seed=3)
    model.trained = True
    img = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    full = infer_segmentation(model, img)
    part = infer_segmentation(model, img[:, 8:24, 8:24])
    np.testing.assert_allclose(part[:, 3:-3, 3:-3], full[:, 11:21, 11:21], rtol=1e-5, atol=1e-6)


def test_coverage():
    seg = np.zeros((4, 4))
    seg[1, 2] = 1
    assert coverage(seg, [(2.5, 1.9), (0, 0)]) == 50.0
    assert coverage(seg, []) == 100.0
    with pytest.raises(ValueError):
        coverage(seg, [(4.0, 0.0)])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 31.99), st.floats(0, 31.99)), max_size=10))
def test_crowd_bags_cover_every_point(points):
    rects = sample_bags(32, 32, AnchorConfig())
    crowd, bg = partition_bags(rects, points)
    assert len(crowd) + len(bg) == len(rects)
    for p in points:
        assert any(brute_contains(r, [p]) for r in crowd)
    assert not any(brute_contains(r, points) for r in bg)


def test_training_is_deterministic_and_descends():
    scenes = synth_generate(source_config()).train[:8]
    cfg = PCSTrainConfig(iterations=30, batch_size=16, lr=2e-3, width=8)
    losses_a, losses_b = [], []
    a = train_weak_learner(scenes, AnchorConfig(), cfg, seed=4, callback=lambda i, l: losses_a.append(l))
    b = train_weak_learner(scenes, AnchorConfig(), cfg, seed=4, callback=lambda i, l: losses_b.append(l))
    assert losses_a == losses_b
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert np.mean(losses_a[-10:]) < np.mean(losses_a[:10])


def test_collect_bags_stats():
    scenes = synth_generate(source_config()).train[:3]
    bags = collect_bags(scenes, AnchorConfig())
    raw = collect_bags(scenes, AnchorConfig(), refine=False)
    assert bags.stats["crowd"] == raw.stats["crowd"]
    assert raw.stats["background"] - bags.stats["background"] == bags.stats["removed_by_refinement"]
