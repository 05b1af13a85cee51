# Copyright (c) 2026, saml-pipeline contributors.

"""Patch corpus: typed records, on-disk layout, validation and splitting.

Layout under a corpus root::

    patches/<patch_id>.png          RGB image
    masks/<patch_id>/<iid>.png      8-bit 0/255 instance mask
    labelmaps/<patch_id>.png        indexed: 0 background, 1 podocyte, 2 mesangial
    meta.csv                        patch_id,modality,stratum,source_wsi,annotator_id
    instances.csv                   instance_id,patch_id,cell_class

All grids are row-major and 0-indexed; pixel ``(r, c)`` is row ``r`` from the top.
"""

import enum
import logging
import os
import typing
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from skimage import measure

from .errors import InputError
from .utils import (
    _derive_seed,
    _read_binary,
    _read_csv,
    _read_indexed,
    _read_rgb,
    _write_binary,
    _write_csv,
    _write_indexed,
    _write_rgb,
)

logger = logging.getLogger(__name__)

META_COLUMNS = ("patch_id", "modality", "stratum", "source_wsi", "annotator_id")
INSTANCE_COLUMNS = ("instance_id", "patch_id", "cell_class")
SPLIT_COLUMNS = ("patch_id", "split")

DEFAULT_RATIOS = (6, 1, 3)


class Modality(str, enum.Enum):
    PAS = "PAS"
    IF = "IF"


class Stratum(str, enum.Enum):
    INJURED = "injured"
    NORMAL = "normal"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class CellClass(enum.IntEnum):
    """Label map coding. Instances only ever carry PODOCYTE or MESANGIAL."""

    BACKGROUND = 0
    PODOCYTE = 1
    MESANGIAL = 2

    @classmethod
    def from_name(cls, name: str) -> "CellClass":
        try:
            cell_class = cls[name.strip().upper()]
        except KeyError:
            raise InputError(f"Unknown cell class '{name}'") from None
        if cell_class is cls.BACKGROUND:
            raise InputError("Instances cannot be labelled 'background'")
        return cell_class

    @property
    def label(self) -> str:
        return self.name.lower()


FOREGROUND_CLASSES = (CellClass.PODOCYTE, CellClass.MESANGIAL)

RESOLUTION_POLICIES = ("smaller_area", "class_priority")


@dataclass(frozen=True, eq=False)
class Patch:
    patch_id: str
    image: np.ndarray
    modality: Modality = Modality.PAS
    stratum: Stratum = Stratum.NORMAL
    source_wsi: str = ""
    annotator_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "modality", _enum_value(Modality, self.modality))
        object.__setattr__(self, "stratum", _enum_value(Stratum, self.stratum))
        image = np.asarray(self.image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(
                f"Patch {self.patch_id} must be an HxWx3 RGB grid, got {image.shape}"
            )
        if image.shape[0] < 1 or image.shape[1] < 1:
            raise InputError(f"Patch {self.patch_id} has an empty image")
        if image.dtype != np.uint8:
            if image.min() < 0 or image.max() > 255:
                raise InputError(f"Patch {self.patch_id} has channels outside [0, 255]")
            image = image.astype(np.uint8)
        object.__setattr__(self, "image", image)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]


@dataclass(frozen=True, eq=False)
class InstanceMask:
    instance_id: str
    patch_id: str
    cell_class: CellClass
    mask: np.ndarray

    def __post_init__(self):
        cell_class = self.cell_class
        if isinstance(cell_class, str):
            cell_class = CellClass.from_name(cell_class)
        cell_class = CellClass(cell_class)
        if cell_class is CellClass.BACKGROUND:
            raise InputError(f"Instance {self.instance_id} cannot be background")
        object.__setattr__(self, "cell_class", cell_class)
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise InputError(f"Instance {self.instance_id} mask must be 2-D")
        if not mask.any():
            raise InputError(f"Instance {self.instance_id} has an empty mask")
        object.__setattr__(self, "mask", mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True, eq=False)
class LabelMap:
    patch_id: str
    classes: np.ndarray

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise InputError(f"Label map {self.patch_id} must be 2-D")
        unknown = np.setdiff1d(np.unique(classes), [c.value for c in CellClass])
        if unknown.size:
            raise InputError(
                f"Label map {self.patch_id} has unknown class indices "
                f"{unknown.tolist()}"
            )
        object.__setattr__(self, "classes", classes.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape

    def binary(self, cell_class: int) -> np.ndarray:
        return self.classes == int(cell_class)

    @classmethod
    def background(cls, patch_id: str, shape: tuple[int, int]) -> "LabelMap":
        return cls(patch_id, np.zeros(shape, dtype=np.uint8))


@dataclass(frozen=True)
class SplitAssignment:
    assignment: dict[str, Split]
    seed: int
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def patches(self, split: typing.Union[Split, str]) -> list[str]:
        split = Split(split)
        return sorted(pid for pid, s in self.assignment.items() if s is split)


@dataclass
class Corpus:
    """Patches with their instance masks and (optional) label maps, keyed by id."""

    patches: dict[str, Patch]
    instances: dict[str, list[InstanceMask]] = field(default_factory=dict)
    labelmaps: dict[str, LabelMap] = field(default_factory=dict)
    root: typing.Union[Path, None] = None

    def __post_init__(self):
        self.patches = {pid: self.patches[pid] for pid in sorted(self.patches)}
        for pid in self.patches:
            self.instances.setdefault(pid, [])
        self.instances = {
            pid: sorted(self.instances[pid], key=lambda m: m.instance_id)
            for pid in sorted(self.instances)
        }
        _validate_references(self)

    def __len__(self):
        return len(self.patches)

    def all_instances(self) -> list[InstanceMask]:
        return [inst for pid in self.patches for inst in self.instances[pid]]

    def instance(self, instance_id: str) -> InstanceMask:
        for inst in self.all_instances():
            if inst.instance_id == instance_id:
                return inst
        raise KeyError(instance_id)

    def counts(self) -> dict[str, dict[str, int]]:
        """Patches containing each class, patches per stratum, instances per class."""
        per_class = Counter()
        per_instance_class = Counter()
        for instances in self.instances.values():
            for cell_class in {inst.cell_class for inst in instances}:
                per_class[cell_class.label] += 1
            for inst in instances:
                per_instance_class[inst.cell_class.label] += 1
        per_stratum = Counter(p.stratum.value for p in self.patches.values())
        return {
            "patches": {c.label: per_class[c.label] for c in FOREGROUND_CLASSES},
            "strata": {s.value: per_stratum[s.value] for s in Stratum},
            "instances": {
                c.label: per_instance_class[c.label] for c in FOREGROUND_CLASSES
            },
        }

    def reference_labelmap(
        self, patch_id: str, resolution_policy: str = "smaller_area"
    ) -> LabelMap:
        """The stored label map, or one merged from the instance masks."""
        if patch_id in self.labelmaps:
            return self.labelmaps[patch_id]
        return instances_to_labelmap(
            self.instances[patch_id],
            resolution_policy,
            patch_id=patch_id,
            shape=self.patches[patch_id].shape,
        )


def _enum_value(enum_cls, value):
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_cls)
        raise InputError(
            f"'{value}' is not a valid {enum_cls.__name__.lower()} (one of {allowed})"
        ) from None


def _validate_references(corpus: Corpus) -> None:
    for pid, instances in corpus.instances.items():
        if pid not in corpus.patches:
            orphans = ", ".join(inst.instance_id for inst in instances) or pid
            raise InputError(
                f"Missing image for patch '{pid}' (orphan masks: {orphans})"
            )
        shape = corpus.patches[pid].shape
        for inst in instances:
            if inst.patch_id != pid:
                raise InputError(
                    f"Instance {inst.instance_id} references patch {inst.patch_id} "
                    f"but is filed under {pid}"
                )
            if inst.mask.shape != shape:
                raise InputError(
                    f"Dimension mismatch: mask {inst.instance_id} is "
                    f"{inst.mask.shape[0]}x{inst.mask.shape[1]} but patch {pid} is "
                    f"{shape[0]}x{shape[1]}"
                )
    for pid, labelmap in corpus.labelmaps.items():
        if pid not in corpus.patches:
            raise InputError(f"Missing image for label map '{pid}'")
        if labelmap.shape != corpus.patches[pid].shape:
            raise InputError(
                f"Dimension mismatch: label map {pid} is {labelmap.shape} but the "
                f"patch is {corpus.patches[pid].shape}"
            )


def read_labelmap(path: typing.Union[str, os.PathLike], patch_id: str) -> LabelMap:
    classes = _read_indexed(path)
    unknown = np.setdiff1d(np.unique(classes), [c.value for c in CellClass])
    if unknown.size:
        raise InputError(f"Unknown class index {unknown.tolist()} in label PNG {path}")
    return LabelMap(patch_id, classes)


def write_labelmap(path: typing.Union[str, os.PathLike], labelmap: LabelMap) -> None:
    _write_indexed(path, labelmap.classes)


def load_corpus(
    root: typing.Union[str, os.PathLike], jobs: int = 1, with_labelmaps: bool = True
) -> Corpus:
    """Load and validate a corpus laid out as documented in this module."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"corpus not found: {root}")
    patch_files = sorted((root / "patches").glob("*.png"))
    if not patch_files:
        raise InputError(f"no patches found in {root}")
    if not (root / "meta.csv").is_file():
        raise InputError(f"{root} has patches but no meta.csv")

    meta = {row["patch_id"]: row for row in _read_csv(root / "meta.csv")}
    on_disk = {p.stem for p in patch_files}
    if missing := sorted(set(meta) - on_disk):
        raise InputError(f"Missing image for patch '{missing[0]}' listed in meta.csv")
    if unlisted := sorted(on_disk - set(meta)):
        raise InputError(f"Patch image '{unlisted[0]}' has no meta.csv row")

    instance_rows: dict[str, list[dict[str, str]]] = {}
    if (root / "instances.csv").is_file():
        for row in _read_csv(root / "instances.csv"):
            if row["patch_id"] not in meta:
                raise InputError(
                    f"Missing image for mask '{row['instance_id']}' "
                    f"(patch '{row['patch_id']}')"
                )
            instance_rows.setdefault(row["patch_id"], []).append(row)
    if (root / "masks").is_dir():
        for mask_dir in sorted((root / "masks").iterdir()):
            if mask_dir.name not in meta:
                raise InputError(
                    f"Missing image for masks under '{mask_dir.name}' "
                    "(orphan directory)"
                )
            rows = instance_rows.get(mask_dir.name, [])
            listed = {row["instance_id"] for row in rows}
            if orphans := sorted(
                p.name for p in mask_dir.glob("*.png") if p.stem not in listed
            ):
                warnings.warn(
                    f"{len(orphans)} mask file(s) under masks/{mask_dir.name} are "
                    f"not listed in instances.csv and are ignored: "
                    f"{', '.join(orphans)}",
                    stacklevel=2,
                )

    def _load(patch_id):
        row = meta[patch_id]
        patch = Patch(
            patch_id,
            _read_rgb(root / "patches" / f"{patch_id}.png"),
            modality=row["modality"],
            stratum=row["stratum"],
            source_wsi=row["source_wsi"],
            annotator_id=row["annotator_id"],
        )
        instances = []
        for inst_row in instance_rows.get(patch_id, []):
            mask_path = root / "masks" / patch_id / f"{inst_row['instance_id']}.png"
            if not mask_path.is_file():
                raise InputError(
                    f"Mask file missing for instance {inst_row['instance_id']}"
                )
            mask = _read_binary(mask_path)
            if mask.shape != patch.shape:
                raise InputError(
                    f"Dimension mismatch: mask {inst_row['instance_id']} is "
                    f"{mask.shape[0]}x{mask.shape[1]} but patch {patch_id} is "
                    f"{patch.shape[0]}x{patch.shape[1]}"
                )
            instances.append(
                InstanceMask(
                    inst_row["instance_id"],
                    patch_id,
                    CellClass.from_name(inst_row["cell_class"]),
                    mask,
                )
            )
        labelmap = None
        labelmap_path = root / "labelmaps" / f"{patch_id}.png"
        if with_labelmaps and labelmap_path.is_file():
            labelmap = read_labelmap(labelmap_path, patch_id)
        return patch, instances, labelmap

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        loaded = list(pool.map(_load, sorted(meta)))

    corpus = Corpus(
        patches={p.patch_id: p for p, _, _ in loaded},
        instances={p.patch_id: insts for p, insts, _ in loaded},
        labelmaps={p.patch_id: lm for p, _, lm in loaded if lm is not None},
        root=root,
    )
    logger.info("Loaded %d patches from %s: %s", len(corpus), root, corpus.counts())
    return corpus


def write_corpus(corpus: Corpus, root: typing.Union[str, os.PathLike]) -> Path:
    """Write a corpus in the layout :func:`load_corpus` reads."""
    root = Path(root)
    for sub in ("patches", "masks", "labelmaps"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    meta_rows = []
    instance_rows = []
    for pid, patch in corpus.patches.items():
        _write_rgb(root / "patches" / f"{pid}.png", patch.image)
        meta_rows.append(
            (
                pid,
                patch.modality.value,
                patch.stratum.value,
                patch.source_wsi,
                patch.annotator_id,
            )
        )
        if corpus.instances[pid]:
            (root / "masks" / pid).mkdir(exist_ok=True)
        for inst in corpus.instances[pid]:
            _write_binary(root / "masks" / pid / f"{inst.instance_id}.png", inst.mask)
            instance_rows.append((inst.instance_id, pid, inst.cell_class.label))
        if pid in corpus.labelmaps:
            write_labelmap(root / "labelmaps" / f"{pid}.png", corpus.labelmaps[pid])
    _write_csv(root / "meta.csv", META_COLUMNS, meta_rows)
    _write_csv(root / "instances.csv", INSTANCE_COLUMNS, instance_rows)
    return root


def _apportion(n: int, ratios: typing.Sequence[Fraction]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items over ``ratios``.

    Each count is the floor or ceiling of its exact share, so no split deviates
    from the exact ratio by more than one item. Leftover items go to the largest
    fractional part, then the largest weight, then the earlier split.
    """
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    counts = [int(e) for e in exact]
    order = sorted(
        range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), -ratios[i], i)
    )
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    corpus: typing.Union[Corpus, typing.Iterable[Patch]],
    ratios: typing.Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> SplitAssignment:
    """Assign every patch to train/val/test, stratum by stratum.

    Patches are ordered by id, shuffled with a stream derived from ``(seed,
    stratum)`` and cut by largest-remainder apportionment of the ratios.
    """
    patches = list(corpus.patches.values() if isinstance(corpus, Corpus) else corpus)
    if not patches:
        raise InputError("Cannot split an empty corpus")
    if len(ratios) != len(Split) or any(r <= 0 for r in ratios):
        raise InputError(f"Split ratios must be three positive weights, got {ratios}")
    weights = [Fraction(str(r)) for r in ratios]

    assignment: dict[str, Split] = {}
    for stratum in Stratum:
        ids = sorted(p.patch_id for p in patches if p.stratum is stratum)
        if not ids:
            continue
        if len(ids) < len(Split):
            warnings.warn(
                f"Stratum '{stratum.value}' has {len(ids)} patches, fewer than the "
                f"{len(Split)} splits; assigning by largest ratio first.",
                stacklevel=2,
            )
        rng = np.random.default_rng(_derive_seed(seed, "split", stratum.value))
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for split, count in zip(Split, _apportion(len(ids), weights)):
            for pid in shuffled[start : start + count]:
                assignment[pid] = split
            start += count
    return SplitAssignment(
        dict(sorted(assignment.items())), seed, tuple(float(r) for r in ratios)
    )


def write_splits(path: typing.Union[str, os.PathLike], splits: SplitAssignment) -> None:
    _write_csv(
        path,
        SPLIT_COLUMNS,
        ((pid, split.value) for pid, split in sorted(splits.assignment.items())),
    )


def read_splits(
    path: typing.Union[str, os.PathLike], seed: int = 0, ratios=DEFAULT_RATIOS
) -> SplitAssignment:
    rows = _read_csv(path)
    return SplitAssignment(
        {row["patch_id"]: _enum_value(Split, row["split"]) for row in rows},
        seed,
        tuple(ratios),
    )


def instances_to_labelmap(
    instances: typing.Sequence[InstanceMask],
    resolution_policy: str = "smaller_area",
    *,
    patch_id: typing.Union[str, None] = None,
    shape: typing.Union[tuple[int, int], None] = None,
) -> LabelMap:
    """Merge instance masks of one patch into a multi-class label map.

    ``smaller_area``: on overlap the smaller instance wins, ties go to the lower
    class index. ``class_priority``: the lower class index always wins, ties go to
    the smaller instance.
    """
    if resolution_policy not in RESOLUTION_POLICIES:
        raise InputError(
            f"Unknown resolution policy '{resolution_policy}' "
            f"(one of {', '.join(RESOLUTION_POLICIES)})"
        )
    if not instances:
        if patch_id is None or shape is None:
            raise InputError("An empty instance list needs patch_id and shape")
        return LabelMap.background(patch_id, shape)

    patch_ids = {inst.patch_id for inst in instances}
    if len(patch_ids) > 1:
        raise InputError(f"Instances reference several patches: {sorted(patch_ids)}")
    patch_id = patch_id or patch_ids.pop()
    shape = shape or instances[0].mask.shape

    def priority(item):
        index, inst = item
        if resolution_policy == "smaller_area":
            return (inst.area, int(inst.cell_class), index)
        return (int(inst.cell_class), inst.area, index)

    classes = np.zeros(shape, dtype=np.uint8)
    # Paint from lowest to highest priority so the winner is written last.
    for _, inst in sorted(enumerate(instances), key=priority, reverse=True):
        if inst.mask.shape != tuple(shape):
            raise InputError(f"Dimension mismatch for instance {inst.instance_id}")
        classes[inst.mask] = int(inst.cell_class)
    return LabelMap(patch_id, classes)


def labelmap_to_instances(labelmap: LabelMap) -> list[InstanceMask]:
    """Split a label map into one instance per 8-connected component per class."""
    instances = []
    for cell_class in FOREGROUND_CLASSES:
        components = measure.label(labelmap.binary(cell_class), connectivity=2)
        for k in range(1, int(components.max()) + 1):
            instances.append(
                InstanceMask(
                    f"{labelmap.patch_id}_{cell_class.label}_{k:03d}",
                    labelmap.patch_id,
                    cell_class,
                    components == k,
                )
            )
    return instances
