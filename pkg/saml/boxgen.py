# Copyright (c) 2026, saml-pipeline contributors.

"""Tight and randomly perturbed bounding boxes derived from instance masks."""

import enum
import logging
import os
import typing
from dataclasses import dataclass

import numpy as np

from .dataset import CellClass, Corpus, InstanceMask
from .errors import InputError
from .utils import _derive_seed, _read_csv, _write_csv

if typing.TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

BOX_COLUMNS = (
    "patch_id",
    "instance_id",
    "cell_class",
    "kind",
    "r_min",
    "c_min",
    "r_max",
    "c_max",
    "seed",
    "draw_index",
)


class BoxKind(str, enum.Enum):
    TIGHT = "tight"
    RANDOM = "random"


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box with inclusive bounds, ``(r_min, c_min)`` top-left."""

    instance_id: str
    patch_id: str
    cell_class: CellClass
    r_min: int
    c_min: int
    r_max: int
    c_max: int
    kind: BoxKind = BoxKind.TIGHT
    seed: typing.Union[int, None] = None
    draw_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cell_class", CellClass(self.cell_class))
        object.__setattr__(self, "kind", BoxKind(self.kind))
        if not (0 <= self.r_min <= self.r_max and 0 <= self.c_min <= self.c_max):
            raise InputError(f"Invalid box for {self.instance_id}: {self.coords}")

    @property
    def coords(self) -> tuple[int, int, int, int]:
        return self.r_min, self.c_min, self.r_max, self.c_max

    @property
    def height(self) -> int:
        return self.r_max - self.r_min + 1

    @property
    def width(self) -> int:
        return self.c_max - self.c_min + 1

    @property
    def area(self) -> int:
        return self.height * self.width

    def fits(self, shape: tuple[int, int]) -> bool:
        return self.r_max < shape[0] and self.c_max < shape[1]

    def region(self, shape: tuple[int, int]) -> np.ndarray:
        """Boolean grid of ``shape`` that is true inside the box."""
        inside = np.zeros(shape, dtype=bool)
        inside[self.r_min : self.r_max + 1, self.c_min : self.c_max + 1] = True
        return inside


@dataclass(frozen=True)
class PerturbConfig:
    """Random-box perturbation settings.

    ``max_offset`` is either absolute pixels (``relative=False``) or a fraction of
    the tight-box side along the same axis (``relative=True``).
    """

    max_offset: float = 0.1
    relative: bool = True
    seed: int = 0
    samples_per_instance: int = 1

    def __post_init__(self):
        if self.max_offset < 0:
            raise InputError(f"max_offset must be >= 0, got {self.max_offset}")
        if not self.relative and int(self.max_offset) != self.max_offset:
            raise InputError(
                f"An absolute max_offset must be a whole number of pixels, "
                f"got {self.max_offset}"
            )
        if self.samples_per_instance < 1:
            raise InputError(
                f"samples_per_instance must be >= 1, got {self.samples_per_instance}"
            )

    @classmethod
    def from_config(cls, config: "Config") -> "PerturbConfig":
        return cls(
            max_offset=config.boxes.max_offset,
            relative=config.boxes.relative_offset,
            seed=config.seed_for("boxes"),
            samples_per_instance=config.boxes.samples_per_instance,
        )

    def offset_limits(self, tight: BoxPrompt) -> tuple[int, int]:
        """Maximum absolute offset for row and column coordinates."""
        if not self.relative:
            return int(self.max_offset), int(self.max_offset)
        if self.max_offset == 0:
            return 0, 0
        return (
            max(1, round(self.max_offset * tight.height)),
            max(1, round(self.max_offset * tight.width)),
        )


def tight_box(mask: InstanceMask) -> BoxPrompt:
    """Minimal box containing every true pixel of the mask."""
    rows = np.flatnonzero(mask.mask.any(axis=1))
    cols = np.flatnonzero(mask.mask.any(axis=0))
    if rows.size == 0:
        raise InputError(f"Cannot box empty mask {mask.instance_id}")
    return BoxPrompt(
        mask.instance_id,
        mask.patch_id,
        mask.cell_class,
        int(rows[0]),
        int(cols[0]),
        int(rows[-1]),
        int(cols[-1]),
        kind=BoxKind.TIGHT,
    )


def random_box(
    tight: BoxPrompt, cfg: PerturbConfig, draw_index: int = 0, *, shape: tuple[int, int]
) -> BoxPrompt:
    """Offset each coordinate of a tight box independently and uniformly.

    The stream is seeded by ``(cfg.seed, instance_id, draw_index)`` only. An axis
    whose offsets invert it is swapped, then everything is clamped to ``shape``.
    The result may cut into the object or extend past it.
    """
    if tight.kind is not BoxKind.TIGHT:
        raise InputError(f"random_box needs a tight box, got {tight.kind.value}")
    height, width = shape
    row_limit, col_limit = cfg.offset_limits(tight)
    rng = np.random.default_rng(_derive_seed(cfg.seed, tight.instance_id, draw_index))
    dr = rng.integers(-row_limit, row_limit, size=2, endpoint=True)
    dc = rng.integers(-col_limit, col_limit, size=2, endpoint=True)

    r_min, r_max = sorted((tight.r_min + int(dr[0]), tight.r_max + int(dr[1])))
    c_min, c_max = sorted((tight.c_min + int(dc[0]), tight.c_max + int(dc[1])))
    return BoxPrompt(
        tight.instance_id,
        tight.patch_id,
        tight.cell_class,
        int(np.clip(r_min, 0, height - 1)),
        int(np.clip(c_min, 0, width - 1)),
        int(np.clip(r_max, 0, height - 1)),
        int(np.clip(c_max, 0, width - 1)),
        kind=BoxKind.RANDOM,
        seed=cfg.seed,
        draw_index=draw_index,
    )


def boxes_for_corpus(
    corpus: Corpus,
    mode: typing.Union[BoxKind, str] = BoxKind.TIGHT,
    cfg: typing.Union[PerturbConfig, None] = None,
) -> list[BoxPrompt]:
    """One tight box, or ``samples_per_instance`` random boxes, per instance."""
    mode = BoxKind(mode)
    cfg = cfg or PerturbConfig()
    boxes = []
    for pid, patch in corpus.patches.items():
        for inst in corpus.instances[pid]:
            tight = tight_box(inst)
            if mode is BoxKind.TIGHT:
                boxes.append(tight)
                continue
            for draw_index in range(cfg.samples_per_instance):
                boxes.append(random_box(tight, cfg, draw_index, shape=patch.shape))
    boxes.sort(key=lambda b: (b.patch_id, b.instance_id, b.draw_index))
    logger.info(
        "Generated %d %s boxes for %d patches", len(boxes), mode.value, len(corpus)
    )
    return boxes


def boxes_by_patch(boxes: typing.Iterable[BoxPrompt]) -> dict[str, list[BoxPrompt]]:
    grouped: dict[str, list[BoxPrompt]] = {}
    for box in boxes:
        grouped.setdefault(box.patch_id, []).append(box)
    return grouped


def write_boxes(
    path: typing.Union[str, os.PathLike], boxes: typing.Iterable[BoxPrompt]
):
    _write_csv(
        path,
        BOX_COLUMNS,
        (
            (
                b.patch_id,
                b.instance_id,
                b.cell_class.label,
                b.kind.value,
                *b.coords,
                "" if b.seed is None else b.seed,
                b.draw_index,
            )
            for b in boxes
        ),
    )


def read_boxes(path: typing.Union[str, os.PathLike]) -> list[BoxPrompt]:
    return [
        BoxPrompt(
            row["instance_id"],
            row["patch_id"],
            CellClass.from_name(row["cell_class"]),
            int(row["r_min"]),
            int(row["c_min"]),
            int(row["r_max"]),
            int(row["c_max"]),
            kind=BoxKind(row["kind"]),
            seed=int(row["seed"]) if row["seed"] else None,
            draw_index=int(row["draw_index"]),
        )
        for row in _read_csv(path)
    ]
