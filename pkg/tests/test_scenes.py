import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnguide import scenes
from attnguide.scenes import Scene, SceneObject, detect, generate_scene, match_objects, render


def test_same_seed_same_scene():
    a = generate_scene(np.random.default_rng(11))
    b = generate_scene(np.random.default_rng(11))
    assert a[0] == b[0] and a[1] == b[1]


def test_color_and_shape_frequencies_are_uniform():
    rng = np.random.default_rng(0)
    colors, shapes = Counter(), Counter()
    for _ in range(10_000):
        scene, _ = generate_scene(rng)
        for o in scene.objects:
            colors[o.color] += 1
            shapes[o.shape] += 1
    total = sum(colors.values())
    for c in scenes.PALETTE:
        assert abs(colors[c] / total - 0.25) <= 0.02
    for s in ("circle", "square", "triangle"):
        assert abs(shapes[s] / total - 1 / 3) <= 0.02


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_two_object_scenes_never_overlap(seed):
    scene, prompt = generate_scene(np.random.default_rng(seed), n_objects=2)
    a, b = scene.objects
    assert not np.any(scenes.object_mask(a) & scenes.object_mask(b))
    for o in scene.objects:
        x0, y0, x1, y1 = o.extent()
        assert 0 <= x0 and x1 <= 1 and 0 <= y0 and y1 <= 1
    assert len(prompt.subject_positions) == 2


def test_caption_matches_objects():
    scene = Scene((SceneObject("circle", "red", (0.3, 0.3), 0.15), SceneObject("square", "blue", (0.7, 0.7), 0.15)))
    p = scenes.caption(scene)
    assert p.text() == "red circle and blue square"
    assert p.subject_positions == (1, 4)


def test_empty_scene_renders_background():
    img = render(Scene())
    assert img.shape == (32, 32, 3)
    assert np.all(img == -1.0)


def test_centered_circle_pixel_count():
    img = render(Scene((SceneObject("circle", "red", (0.5, 0.5), 0.15),)))
    expected = math.pi * (0.15 * 32) ** 2
    red = np.all(img == np.array([1, -1, -1], dtype=np.float32), axis=-1).sum()
    assert abs(red - expected) <= 0.15 * expected


def test_render_is_pure():
    scene, _ = generate_scene(np.random.default_rng(3), n_objects=2)
    assert render(scene).tobytes() == render(scene).tobytes()


def test_detector_on_background_finds_nothing():
    assert detect(render(Scene())).blobs == ()


def test_two_same_color_squares_are_two_blobs():
    scene = Scene((SceneObject("square", "green", (0.25, 0.25), 0.12),
                   SceneObject("square", "green", (0.75, 0.75), 0.12)))
    det = detect(render(scene))
    assert len(det.find("square", "green")) == 2
    assert all(match_objects(scene, det))


@pytest.mark.parametrize("shape", ["circle", "square", "triangle"])
def test_detector_classifies_each_shape(shape):
    scene = Scene((SceneObject(shape, "yellow", (0.5, 0.5), 0.18),))
    det = detect(render(scene))
    assert [b.shape for b in det.blobs] == [shape]
    assert det.blobs[0].color == "yellow"


def test_detector_round_trip_on_rendered_scenes():
    rng = np.random.default_rng(2024)
    hits = total = 0
    for _ in range(1000):
        scene, _ = generate_scene(rng)
        m = match_objects(scene, detect(render(scene)))
        hits += sum(m)
        total += len(m)
    assert hits / total >= 0.99


def test_small_specks_are_ignored():
    img = render(Scene())
    img[0:2, 0:3] = (1, -1, -1)  # 6 red pixels
    assert detect(img).blobs == ()


def test_fill_bands():
    assert scenes.classify_fill(1.0) == "square"
    assert scenes.classify_fill(0.78) == "circle"
    assert scenes.classify_fill(0.5) == "triangle"
    assert scenes.classify_fill(0.2) == "unknown"


def test_dataset_export_round_trip(tmp_path):
    images, ids, records = scenes.make_dataset(10, seed=4)
    scenes.export_dataset(tmp_path / "ds", 10, seed=4, shard_size=4)
    im2, ids2, rec2 = scenes.load_dataset(tmp_path / "ds")
    assert im2.tobytes() == images.tobytes()
    np.testing.assert_array_equal(ids, ids2)
    assert rec2 == records
