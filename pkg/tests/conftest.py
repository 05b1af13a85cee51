# Copyright (c) 2026, saml-pipeline contributors.

import os
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from jinja2 import Environment, FileSystemLoader

from saml.dataset import CellClass, Corpus, InstanceMask, Patch, Stratum
from saml.synth import SyntheticSpec, generate_synthetic

DIR = Path(__file__).parent.parent.resolve()

# A network small enough to train for a few epochs inside a unit test.
TINY_ARCHITECTURE = "unet(depth=2,base=4,embed=8)"


@lru_cache
def jinja_environment():
    template_dir = os.path.join(
        os.path.dirname(__file__),
        "templates/",
    )
    return Environment(
        loader=FileSystemLoader(template_dir), trim_blocks=True, lstrip_blocks=True
    )


_TEMPLATE_DEFAULTS = {
    "saml.toml": {
        "seed": 0,
        "jobs": 1,
        "paths": {},
        "sections": {},
    }
}


def generate_from_template(directory, template_name, template_args=None):
    default_template_args = _TEMPLATE_DEFAULTS.get(template_name, {})
    template = jinja_environment().get_template(template_name)

    template_args = default_template_args | (template_args or {})
    content = template.render(**template_args)
    output_file = os.path.join(directory, template_name)
    with open(output_file, mode="w", encoding="utf-8") as f:
        f.write(content)
    return Path(output_file)


def write_config(directory, corpus=None, output=None, sections=None, **template_args):
    """Render ``saml.toml`` into ``directory`` and return its path.

    ``sections`` maps section names to ``{option: toml_literal}``.
    """
    paths = {}
    if corpus is not None:
        paths["corpus"] = Path(corpus).as_posix()
    if output is not None:
        paths["output"] = Path(output).as_posix()
    return generate_from_template(
        directory,
        "saml.toml",
        {"paths": paths, "sections": sections or {}, **template_args},
    )


def box_mask(shape, r_min, c_min, r_max, c_max):
    mask = np.zeros(shape, dtype=bool)
    mask[r_min : r_max + 1, c_min : c_max + 1] = True
    return mask


def make_patch(patch_id, shape=(10, 10), stratum=Stratum.NORMAL):
    return Patch(
        patch_id,
        np.full((*shape, 3), 128, dtype=np.uint8),
        stratum=stratum,
        source_wsi="wsi-0",
        annotator_id="tester",
    )


def make_instance(instance_id, patch_id, cell_class, mask):
    return InstanceMask(instance_id, patch_id, CellClass(cell_class), mask)


@pytest.fixture
def three_instance_corpus():
    """Two 10x10 patches holding three disjoint rectangular instances."""
    shape = (10, 10)
    return Corpus(
        patches={
            "a": make_patch("a", shape, Stratum.INJURED),
            "b": make_patch("b", shape, Stratum.NORMAL),
        },
        instances={
            "a": [
                make_instance("a_0", "a", 1, box_mask(shape, 1, 1, 3, 4)),
                make_instance("a_1", "a", 2, box_mask(shape, 6, 5, 8, 8)),
            ],
            "b": [make_instance("b_0", "b", 2, box_mask(shape, 2, 2, 7, 6))],
        },
    )


SMALL_SPEC = SyntheticSpec(
    n_patches=20,
    height=32,
    width=32,
    blobs_per_class=(1, 2),
    radius=(3, 5),
    seed=3,
)


@pytest.fixture
def synthetic(tmp_path):
    """A small clean synthetic corpus written under ``tmp_path / 'corpus'``."""
    return generate_synthetic(SMALL_SPEC, tmp_path / "corpus")


@pytest.fixture
def synthetic_corpus(synthetic):
    return synthetic.corpus
