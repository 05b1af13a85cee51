# Copyright (c) 2026, saml-pipeline contributors.

import numpy as np
import pytest

from saml.dataset import CellClass, load_corpus
from saml.errors import InputError
from saml.synth import SyntheticSpec, generate_synthetic
from saml.utils import _read_csv


def _files(root):
    return {
        path.relative_to(root).as_posix(): path.read_bytes()
        for path in sorted(root.rglob("*"))
        if path.is_file()
    }


def test_fixed_seed_is_byte_identical(tmp_path):
    spec = SyntheticSpec(
        n_patches=6, height=24, width=24, blobs_per_class=(1, 1), radius=(3, 4), seed=11
    )
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    first, second = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert first.keys() == second.keys()
    assert first == second
    assert "synth.csv" in first


def test_seed_changes_images():
    small = {"height": 24, "width": 24, "blobs_per_class": (1, 1), "radius": (3, 4)}
    spec = SyntheticSpec(n_patches=2, seed=1, **small)
    other = SyntheticSpec(n_patches=2, seed=2, **small)
    a = generate_synthetic(spec).corpus.patches["p0000"].image
    b = generate_synthetic(other).corpus.patches["p0000"].image
    assert not np.array_equal(a, b)


def test_clean_corpus(synthetic):
    corpus = synthetic.corpus
    assert synthetic.n_corrupted == 0
    assert len(corpus) == 20
    for pid, labelmap in corpus.labelmaps.items():
        for inst in corpus.instances[pid]:
            assert (labelmap.classes[inst.mask] == inst.cell_class).all()
        # Blobs never touch, so the merge covers exactly the instance pixels.
        union = np.any([inst.mask for inst in corpus.instances[pid]], axis=0)
        np.testing.assert_array_equal(labelmap.classes > 0, union)


def test_written_corpus_loads(synthetic):
    loaded = load_corpus(synthetic.corpus.root)
    assert list(loaded.patches) == list(synthetic.corpus.patches)
    rows = _read_csv(synthetic.corpus.root / "synth.csv")
    assert len(rows) == len(synthetic.corpus.all_instances())
    assert {row["corrupted"] for row in rows} == {"0"}


def test_corruption_fraction():
    spec = SyntheticSpec(
        n_patches=50,
        height=32,
        width=32,
        blobs_per_class=(1, 1),
        radius=(4, 5),
        corruption_fraction=0.3,
        seed=4,
    )
    result = generate_synthetic(spec)
    corpus = result.corpus
    assert len(corpus.all_instances()) == 100
    assert result.n_corrupted == 30

    for corruption in result.corruptions:
        inst = corpus.instance(corruption.instance_id)
        clean = corpus.labelmaps[inst.patch_id].binary(inst.cell_class)
        if corruption.operation == "dilate":
            assert inst.area > int((clean & inst.mask).sum())
        elif corruption.operation == "erode":
            assert inst.area < int(clean.sum())
        else:
            assert inst.mask[clean].all()
            assert not inst.mask[~clean].any()


def test_strata_follow_injured_fraction():
    spec = SyntheticSpec(
        n_patches=10, height=24, width=24, blobs_per_class=(1, 1), radius=(3, 3)
    )
    corpus = generate_synthetic(spec).corpus
    assert corpus.counts()["strata"] == {"injured": 5, "normal": 5}
    assert {p.annotator_id for p in corpus.patches.values()} == {"synthetic-expert"}


def test_podocytes_are_darker(synthetic_corpus):
    brightness = {CellClass.PODOCYTE: [], CellClass.MESANGIAL: []}
    for pid, patch in synthetic_corpus.patches.items():
        grey = patch.image.mean(axis=2)
        for inst in synthetic_corpus.instances[pid]:
            brightness[inst.cell_class].extend(grey[inst.mask].tolist())
    assert np.mean(brightness[CellClass.PODOCYTE]) < np.mean(
        brightness[CellClass.MESANGIAL]
    )


@pytest.mark.parametrize(
    "kwargs",
    [
        {"height": 8, "width": 8, "radius": (5, 5)},
        {"radius": (0, 2)},
        {"radius": (5, 3)},
        {"n_patches": 0},
        {"corruption_fraction": 1.5},
        {"injured_fraction": -0.1},
    ],
)
def test_bad_spec(kwargs):
    with pytest.raises(InputError):
        SyntheticSpec(**kwargs)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"height": 16, "width": 16, "blobs_per_class": (30, 30), "radius": (4, 4)},
        # Six radius-4 disks with their gaps claim 82% of a 24x24 patch.
        {"height": 24, "width": 24, "radius": (3, 4)},
    ],
)
def test_infeasible_packing_is_rejected_up_front(kwargs):
    with pytest.raises(InputError, match="infeasible packing"):
        SyntheticSpec(n_patches=1, **kwargs)


def test_failed_placement_names_the_patch(monkeypatch):
    monkeypatch.setattr("saml.synth._PLACEMENT_ATTEMPTS", 0)
    spec = SyntheticSpec(n_patches=1, height=32, width=32, radius=(3, 3))
    with pytest.raises(InputError, match="infeasible packing.*p0000"):
        generate_synthetic(spec)
