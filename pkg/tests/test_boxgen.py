# Copyright (c) 2026, saml-pipeline contributors.

import numpy as np
import pytest
from conftest import box_mask, make_instance

from saml.boxgen import (
    BoxKind,
    BoxPrompt,
    PerturbConfig,
    boxes_for_corpus,
    random_box,
    read_boxes,
    tight_box,
    write_boxes,
)
from saml.errors import InputError


def _pixels(shape, *points):
    mask = np.zeros(shape, dtype=bool)
    for r, c in points:
        mask[r, c] = True
    return make_instance("i", "p", 1, mask)


@pytest.mark.parametrize(
    "shape, points, expected",
    [
        ((8, 10), [(2, 3), (5, 7)], (2, 3, 5, 7)),
        ((8, 8), [(4, 4)], (4, 4, 4, 4)),
        ((512, 512), [(0, 0), (511, 511), (100, 300)], (0, 0, 511, 511)),
    ],
)
def test_tight_box(shape, points, expected):
    box = tight_box(_pixels(shape, *points))
    assert box.coords == expected
    assert box.kind is BoxKind.TIGHT


def test_tight_box_is_minimal():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        mask = rng.random((16, 16)) < rng.uniform(0.01, 0.3)
        if not mask.any():
            mask[rng.integers(16), rng.integers(16)] = True
        box = tight_box(make_instance(f"i{trial}", "p", 2, mask))
        inside = box.region(mask.shape)
        assert not (mask & ~inside).any()
        # Every side touches a foreground pixel, so shrinking it drops one.
        assert mask[box.r_min, box.c_min : box.c_max + 1].any()
        assert mask[box.r_max, box.c_min : box.c_max + 1].any()
        assert mask[box.r_min : box.r_max + 1, box.c_min].any()
        assert mask[box.r_min : box.r_max + 1, box.c_max].any()


@pytest.mark.parametrize("relative", [True, False])
def test_zero_offset_reproduces_tight_box(relative):
    tight = tight_box(make_instance("i", "p", 1, box_mask((20, 20), 3, 4, 12, 9)))
    cfg = PerturbConfig(max_offset=0, relative=relative, seed=5)
    for draw_index in range(10):
        box = random_box(tight, cfg, draw_index, shape=(20, 20))
        assert box.coords == tight.coords
        assert box.kind is BoxKind.RANDOM


def test_random_box_is_clamped():
    tight = tight_box(make_instance("i", "p", 1, box_mask((10, 10), 0, 0, 5, 5)))
    cfg = PerturbConfig(max_offset=100, relative=False, seed=1)
    for draw_index in range(200):
        box = random_box(tight, cfg, draw_index, shape=(10, 10))
        assert 0 <= box.r_min <= box.r_max <= 9
        assert 0 <= box.c_min <= box.c_max <= 9


def test_random_box_invariants():
    rng = np.random.default_rng(42)
    shape = (64, 64)
    for draw in range(10_000):
        r0, c0 = rng.integers(0, 60, size=2)
        r1, c1 = r0 + rng.integers(0, 4), c0 + rng.integers(0, 4)
        tight = BoxPrompt(f"i{draw % 97}", "p", 1, int(r0), int(c0), int(r1), int(c1))
        cfg = PerturbConfig(
            max_offset=float(rng.choice([0.1, 0.5, 2.0])), relative=True, seed=draw
        )
        box = random_box(tight, cfg, draw % 3, shape=shape)
        assert 0 <= box.r_min <= box.r_max < shape[0]
        assert 0 <= box.c_min <= box.c_max < shape[1]
        assert box.instance_id == tight.instance_id
        assert box.seed == draw


def test_random_box_is_deterministic():
    tight = tight_box(make_instance("i", "p", 1, box_mask((50, 50), 10, 10, 30, 25)))
    cfg = PerturbConfig(max_offset=0.3, seed=42)
    assert random_box(tight, cfg, 2, shape=(50, 50)) == random_box(
        tight, cfg, 2, shape=(50, 50)
    )
    draws = {random_box(tight, cfg, i, shape=(50, 50)).coords for i in range(20)}
    assert len(draws) > 1


def test_random_box_needs_tight_box():
    tight = tight_box(make_instance("i", "p", 1, box_mask((9, 9), 1, 1, 4, 4)))
    cfg = PerturbConfig(seed=0)
    perturbed = random_box(tight, cfg, shape=(9, 9))
    with pytest.raises(InputError, match="tight box"):
        random_box(perturbed, cfg, shape=(9, 9))


@pytest.mark.parametrize(
    "max_offset, relative, expected",
    [
        (0.1, True, (1, 2)),
        (0.01, True, (1, 1)),
        (0.0, True, (0, 0)),
        (0.5, True, (5, 10)),
        (3, False, (3, 3)),
    ],
)
def test_offset_limits(max_offset, relative, expected):
    # A 10 row x 20 column tight box.
    tight = BoxPrompt("i", "p", 1, 0, 0, 9, 19)
    assert PerturbConfig(max_offset, relative).offset_limits(tight) == expected


@pytest.mark.parametrize(
    "kwargs",
    [
        {"max_offset": -1},
        {"max_offset": 1.5, "relative": False},
        {"samples_per_instance": 0},
    ],
)
def test_bad_perturb_config(kwargs):
    with pytest.raises(InputError):
        PerturbConfig(**kwargs)


def test_invalid_box():
    with pytest.raises(InputError):
        BoxPrompt("i", "p", 1, 5, 0, 4, 3)


@pytest.mark.parametrize("mode", ["tight", "random"])
def test_boxes_for_corpus(three_instance_corpus, mode):
    boxes = boxes_for_corpus(three_instance_corpus, mode, PerturbConfig(seed=3))
    assert [b.instance_id for b in boxes] == ["a_0", "a_1", "b_0"]
    assert all(b.kind is BoxKind(mode) for b in boxes)
    assert all(b.fits((10, 10)) for b in boxes)


def test_samples_per_instance(three_instance_corpus):
    cfg = PerturbConfig(seed=3, samples_per_instance=4)
    boxes = boxes_for_corpus(three_instance_corpus, "random", cfg)
    assert len(boxes) == 12
    assert [b.draw_index for b in boxes[:4]] == [0, 1, 2, 3]


def test_boxes_csv_is_reproducible(tmp_path, synthetic_corpus):
    cfg = PerturbConfig(max_offset=0.2, seed=9)
    write_boxes(tmp_path / "a.csv", boxes_for_corpus(synthetic_corpus, "random", cfg))
    write_boxes(tmp_path / "b.csv", boxes_for_corpus(synthetic_corpus, "random", cfg))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    boxes = read_boxes(tmp_path / "a.csv")
    assert boxes == boxes_for_corpus(synthetic_corpus, "random", cfg)
    assert len(boxes) == len(synthetic_corpus.all_instances())
