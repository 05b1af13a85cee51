# Copyright (c) 2026, saml-pipeline contributors.

"""Seeded synthetic corpus of two distinguishable cell classes on tissue noise.

Podocyte blobs are dark and coarsely textured, mesangial blobs pale and smooth,
so a small network can tell them apart from intensity alone. Optional corruption
dilates or erodes a fixed fraction of instance masks to mimic unreliable lay
annotation; the clean merge is kept as the reference label map.
"""

import logging
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import draw, morphology

from .dataset import (
    CellClass,
    Corpus,
    InstanceMask,
    Modality,
    Patch,
    Stratum,
    instances_to_labelmap,
    write_corpus,
)
from .errors import InputError
from .utils import _derive_seed, _write_csv

if typing.TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

SYNTH_COLUMNS = ("instance_id", "patch_id", "corrupted", "operation", "radius")

_BACKGROUND = np.array([225.0, 185.0, 205.0])
_APPEARANCE = {
    CellClass.PODOCYTE: (np.array([95.0, 35.0, 115.0]), 28.0),
    CellClass.MESANGIAL: (np.array([125.0, 155.0, 225.0]), 6.0),
}
_PLACEMENT_ATTEMPTS = 200
# Minimum pixel gap between neighbouring blobs.
_BLOB_GAP = 2
# Largest share of the patch area the blobs of one patch may claim.
_MAX_PACKING_DENSITY = 0.5
# Number of slides the synthetic patches are attributed to.
_N_SOURCE_WSI = 11


@dataclass(frozen=True)
class SyntheticSpec:
    n_patches: int = 50
    height: int = 64
    width: int = 64
    blobs_per_class: tuple[int, int] = (1, 3)
    radius: tuple[int, int] = (4, 7)
    injured_fraction: float = 0.5
    corruption_fraction: float = 0.0
    dilate_px: tuple[int, int] = (1, 3)
    erode_px: tuple[int, int] = (1, 2)
    seed: int = 0

    def __post_init__(self):
        for name in ("blobs_per_class", "radius", "dilate_px", "erode_px"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise InputError(f"{name} must be an increasing non-negative range")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.n_patches < 1 or self.height < 1 or self.width < 1:
            raise InputError("n_patches, height and width must be positive")
        if self.radius[0] < 1:
            raise InputError("Blob radius must be at least 1")
        if not 0.0 <= self.injured_fraction <= 1.0:
            raise InputError("injured_fraction must be in [0, 1]")
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise InputError("corruption_fraction must be in [0, 1]")
        if 2 * self.radius[0] + 1 > min(self.height, self.width):
            raise InputError(
                f"infeasible packing: radius {self.radius[0]} does not fit a "
                f"{self.height}x{self.width} patch"
            )
        # Worst case: the most blobs of each class at the largest radius, each
        # claiming half of the gap kept between neighbours.
        n_blobs = 2 * self.blobs_per_class[1]
        claimed = n_blobs * math.pi * (self.radius[1] + _BLOB_GAP / 2) ** 2
        if claimed > _MAX_PACKING_DENSITY * self.height * self.width:
            raise InputError(
                f"infeasible packing: {n_blobs} blobs of radius {self.radius[1]} "
                f"need more than {_MAX_PACKING_DENSITY:.0%} of a "
                f"{self.height}x{self.width} patch"
            )

    @classmethod
    def from_config(cls, config: "Config") -> "SyntheticSpec":
        s = config.synth
        return cls(
            n_patches=s.n_patches,
            height=s.height,
            width=s.width,
            blobs_per_class=tuple(s.blobs_per_class),
            radius=tuple(s.radius),
            injured_fraction=s.injured_fraction,
            corruption_fraction=s.corruption_fraction,
            dilate_px=tuple(s.dilate_px),
            erode_px=tuple(s.erode_px),
            seed=config.seed_for("synth"),
        )


@dataclass(frozen=True)
class Corruption:
    instance_id: str
    patch_id: str
    operation: str = ""
    radius: int = 0

    @property
    def corrupted(self) -> bool:
        return bool(self.operation)


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    corruptions: list[Corruption] = field(default_factory=list)

    @property
    def n_corrupted(self) -> int:
        return sum(c.corrupted for c in self.corruptions)


def _place_blobs(rng, spec: SyntheticSpec, patch_id: str):
    """Disjoint, non-touching disks; returns ``(cell_class, center, radius)``."""
    placed: list[tuple[CellClass, tuple[int, int], int]] = []
    for cell_class in (CellClass.PODOCYTE, CellClass.MESANGIAL):
        count = int(rng.integers(*spec.blobs_per_class, endpoint=True))
        for _ in range(count):
            for _ in range(_PLACEMENT_ATTEMPTS):
                radius = int(rng.integers(*spec.radius, endpoint=True))
                radius = min(radius, (min(spec.height, spec.width) - 1) // 2)
                center = (
                    int(rng.integers(radius, spec.height - radius)),
                    int(rng.integers(radius, spec.width - radius)),
                )
                if all(
                    np.hypot(center[0] - c[0], center[1] - c[1])
                    >= radius + r + _BLOB_GAP
                    for _, c, r in placed
                ):
                    placed.append((cell_class, center, radius))
                    break
            else:
                raise InputError(
                    f"infeasible packing: could not place {count} "
                    f"{cell_class.label} blob(s) in {patch_id} "
                    f"({spec.height}x{spec.width})"
                )
    return placed


def _render_patch(rng, spec: SyntheticSpec, patch_id: str):
    shape = (spec.height, spec.width)
    image = _BACKGROUND + rng.normal(0.0, 8.0, size=(*shape, 3))
    instances = []
    for k, (cell_class, center, radius) in enumerate(_place_blobs(rng, spec, patch_id)):
        mask = np.zeros(shape, dtype=bool)
        rr, cc = draw.disk(center, radius + 0.5, shape=shape)
        mask[rr, cc] = True
        colour, texture = _APPEARANCE[cell_class]
        image[mask] = colour + rng.normal(0.0, texture, size=(int(mask.sum()), 3))
        instances.append(
            InstanceMask(f"{patch_id}_{k:02d}", patch_id, cell_class, mask)
        )
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), instances


def _corrupt(mask: np.ndarray, operation: str, radius: int):
    footprint = morphology.disk(radius)
    if operation == "erode":
        eroded = morphology.erosion(mask, footprint=footprint)
        if eroded.any():
            return eroded, operation
        operation = "dilate"
    return morphology.dilation(mask, footprint=footprint), operation


def generate_synthetic(
    spec: SyntheticSpec, root: typing.Union[str, os.PathLike, None] = None
) -> SyntheticCorpus:
    """Build (and, given ``root``, write) a corpus that is a pure function of spec.

    Exactly ``round(corruption_fraction * n_instances)`` instance masks are
    corrupted, chosen by the seed.
    """
    n_injured = round(spec.injured_fraction * spec.n_patches)
    stratum_rng = np.random.default_rng(_derive_seed(spec.seed, "strata"))
    injured = set(stratum_rng.permutation(spec.n_patches)[:n_injured].tolist())

    patches, instances, labelmaps = {}, {}, {}
    annotator = "synthetic-lay" if spec.corruption_fraction > 0 else "synthetic-expert"
    for i in range(spec.n_patches):
        patch_id = f"p{i:04d}"
        rng = np.random.default_rng(_derive_seed(spec.seed, "patch", i))
        image, patch_instances = _render_patch(rng, spec, patch_id)
        patches[patch_id] = Patch(
            patch_id,
            image,
            modality=Modality.PAS,
            stratum=Stratum.INJURED if i in injured else Stratum.NORMAL,
            source_wsi=f"synth-wsi-{i % _N_SOURCE_WSI:02d}",
            annotator_id=annotator,
        )
        instances[patch_id] = patch_instances
        labelmaps[patch_id] = instances_to_labelmap(
            patch_instances, patch_id=patch_id, shape=image.shape[:2]
        )

    flat = [inst for pid in sorted(instances) for inst in instances[pid]]
    n_corrupt = round(spec.corruption_fraction * len(flat))
    corrupt_rng = np.random.default_rng(_derive_seed(spec.seed, "corruption"))
    chosen = set(corrupt_rng.choice(len(flat), size=n_corrupt, replace=False).tolist())
    corruptions = []
    for index, inst in enumerate(flat):
        if index not in chosen:
            corruptions.append(Corruption(inst.instance_id, inst.patch_id))
            continue
        operation = "dilate" if corrupt_rng.random() < 0.5 else "erode"
        bounds = spec.dilate_px if operation == "dilate" else spec.erode_px
        radius = max(1, int(corrupt_rng.integers(*bounds, endpoint=True)))
        mask, operation = _corrupt(inst.mask, operation, radius)
        noisy = InstanceMask(inst.instance_id, inst.patch_id, inst.cell_class, mask)
        patch_list = instances[inst.patch_id]
        patch_list[patch_list.index(inst)] = noisy
        corruptions.append(
            Corruption(inst.instance_id, inst.patch_id, operation, radius)
        )

    corpus = Corpus(patches, instances, labelmaps)
    result = SyntheticCorpus(corpus, corruptions)
    if root is not None:
        root = Path(root)
        write_corpus(corpus, root)
        corpus.root = root
        _write_csv(
            root / "synth.csv",
            SYNTH_COLUMNS,
            (
                (c.instance_id, c.patch_id, int(c.corrupted), c.operation, c.radius)
                for c in corruptions
            ),
        )
        logger.info(
            "Wrote %d synthetic patches (%d instances, %d corrupted) to %s",
            spec.n_patches,
            len(flat),
            result.n_corrupted,
            root,
        )
    return result

