import math

import numpy as np

from owlst.annotate import MockNoise
from owlst.evaluation import ap_fixed
from owlst.sim import (
    SWEEP_HEADER,
    caption_for,
    eval_task,
    generate_scene,
    generate_scenes,
    mean_box_iou,
    run_pipeline,
    run_threshold_sweep,
)


def test_scene_is_deterministic_and_consistent():
    a, b = generate_scene(3, seed=1), generate_scene(3, seed=1)
    assert a.image == b.image and a.gt == b.gt
    assert a.id == "scene-000003"
    assert 1 <= len(a.gt) <= 6
    for label, _ in a.gt:
        assert label in a.caption
    # Every object's box contains coloured (non-background) pixels.
    for _, box in a.gt:
        h, w = a.image.height, a.image.width
        region = a.image.pixels[int(box.y0 * h):int(box.y1 * h), int(box.x0 * w):int(box.x1 * w)]
        assert (np.abs(region - 0.5).sum(axis=-1) > 0.1).any()


def test_caption_articles():
    assert caption_for(["red circle", "orange square", "red circle"]) == "a photo of a red circle and an orange square"


def test_box_noise_lowers_iou_monotonically():
    scenes = generate_scenes(100)
    ious = [mean_box_iou(scenes, MockNoise(box_sigma=s)) for s in (0.0, 0.01, 0.05, 0.1)]
    assert ious[0] == 1.0
    assert all(x > y for x, y in zip(ious, ious[1:]))


def test_small_pipeline():
    scenes = generate_scenes(50, seed=2)
    annotated = run_pipeline(scenes)
    assert ap_fixed(eval_task(scenes, annotated)).ap_all == 1.0
    rows = run_threshold_sweep(scenes, [0.0, 0.5, 1.0], MockNoise(0.05, 0.2, 2), keep_threshold=0.1)
    assert SWEEP_HEADER.count(",") == rows[0].as_csv().count(",")
    assert rows[1].keep == 0.1 and rows[0].keep == 0.0
    assert rows[0].images_retained == 50
    assert math.isnan(rows[-1].precision) or rows[-1].precision >= rows[0].precision
