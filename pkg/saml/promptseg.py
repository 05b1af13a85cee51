# Copyright (c) 2026, saml-pipeline contributors.

"""Box prompts to pixel masks through a pluggable promptable segmenter."""

import csv
import logging
import os
import threading
import typing
import warnings
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import import_module
from importlib.metadata import PackageNotFoundError
from importlib.metadata import version as _dist_version
from pathlib import Path

import numpy as np
from skimage import morphology

from . import __version__
from .boxgen import BoxKind, BoxPrompt, boxes_by_patch
from .dataset import (
    CellClass,
    Corpus,
    InstanceMask,
    LabelMap,
    Patch,
    read_labelmap,
    write_labelmap,
)
from .errors import (
    BackendError,
    ContractViolationError,
    InputError,
    SegmenterUnavailableError,
)
from .utils import _read_csv, _write_csv

if typing.TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

PROVENANCE_COLUMNS = (
    "patch_id",
    "box_kind",
    "seed",
    "segmenter_id",
    "segmenter_version",
    "n_prompts",
    "n_failures",
)

MERGE_POLICIES = ("confidence", "area")


@dataclass(frozen=True)
class Capabilities:
    accepts_box_prompts: bool = True
    returns_confidence: bool = False
    # None means any number of concurrent segment() calls is safe.
    max_concurrency: typing.Union[int, None] = None


@dataclass(frozen=True, eq=False)
class SegmentResult:
    instance_id: str
    patch_id: str
    mask: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractViolationError(
                f"Confidence {self.confidence} for {self.instance_id} is outside [0, 1]"
            )

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


class PromptableSegmenter(ABC):
    """A backend that turns one box prompt on one patch into a mask."""

    segmenter_id: str = "abstract"

    @property
    @abstractmethod
    def version(self) -> str:
        """Version string recorded in every pseudo-label's provenance."""

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities()

    @abstractmethod
    def segment(
        self, patch: Patch, box: BoxPrompt
    ) -> tuple[np.ndarray, typing.Union[float, None]]:
        """Return a boolean mask shaped like the patch and an optional confidence."""


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    denominator = np.count_nonzero(a) + np.count_nonzero(b)
    if denominator == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / denominator


def oracle_segment(
    ground_truth: InstanceMask,
    box: BoxPrompt,
    dilate_px: int = 0,
    erode_px: int = 0,
) -> SegmentResult:
    """Ground truth cropped to the box, optionally dilated then eroded.

    Confidence is the Dice of the produced mask against the ground truth.
    """
    shape = ground_truth.mask.shape
    if not box.fits(shape):
        raise InputError(f"Box {box.coords} does not fit a {shape} patch")
    mask = ground_truth.mask & box.region(shape)
    if dilate_px > 0:
        mask = morphology.dilation(mask, footprint=morphology.disk(dilate_px))
    if erode_px > 0 and mask.any():
        mask = morphology.erosion(mask, footprint=morphology.disk(erode_px))
    confidence = float(np.clip(_dice(mask, ground_truth.mask), 0.0, 1.0))
    return SegmentResult(box.instance_id, box.patch_id, mask.astype(bool), confidence)


class OracleSegmenter(PromptableSegmenter):
    """Test double that answers prompts from known ground-truth instance masks."""

    segmenter_id = "oracle"

    def __init__(
        self,
        ground_truth: typing.Union[Corpus, typing.Mapping[str, InstanceMask]],
        dilate_px: int = 0,
        erode_px: int = 0,
    ):
        if isinstance(ground_truth, Corpus):
            ground_truth = {m.instance_id: m for m in ground_truth.all_instances()}
        self.ground_truth = dict(ground_truth)
        self.dilate_px = dilate_px
        self.erode_px = erode_px

    @property
    def version(self) -> str:
        return f"{__version__}+dilate{self.dilate_px}.erode{self.erode_px}"

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities(returns_confidence=True)

    def segment(self, patch, box):
        try:
            truth = self.ground_truth[box.instance_id]
        except KeyError:
            raise BackendError(
                f"Oracle has no ground truth for {box.instance_id}", [box.instance_id]
            ) from None
        result = oracle_segment(truth, box, self.dilate_px, self.erode_px)
        return result.mask, result.confidence


@lru_cache
def _get_sam_api():
    """Import the Segment Anything package on first use."""
    try:
        return import_module("segment_anything")
    except ImportError as e:
        raise SegmenterUnavailableError(
            "segmenter unavailable: the external backend needs the "
            "'segment-anything' package installed."
        ) from e


class ExternalModelAdapter(PromptableSegmenter):
    """Wraps a pretrained Segment Anything predictor.

    The image embedding is computed once per patch and reused for all of its
    prompts, so calls are serialized (``max_concurrency=1``).
    """

    segmenter_id = "segment-anything"

    def __init__(
        self,
        checkpoint: typing.Union[str, os.PathLike, None],
        model_type: str = "vit_b",
        threshold: float = 0.5,
        device: str = "cpu",
        version: typing.Union[str, None] = None,
    ):
        if checkpoint is None or not Path(checkpoint).is_file():
            raise SegmenterUnavailableError(
                f"segmenter unavailable: no model checkpoint at {checkpoint!r}. Set "
                "segmenter.checkpoint in the configuration."
            )
        if not 0.0 < threshold < 1.0:
            raise InputError(f"threshold must be in (0, 1), got {threshold}")
        sam = _get_sam_api()
        try:
            model = sam.sam_model_registry[model_type](checkpoint=str(checkpoint))
        except KeyError as e:
            raise SegmenterUnavailableError(
                f"segmenter unavailable: unknown model type '{model_type}'"
            ) from e
        model.to(device=device)
        self.predictor = sam.SamPredictor(model)
        self.threshold = threshold
        self.model_type = model_type
        self._version = version
        self._lock = threading.Lock()
        self._current_patch: typing.Union[str, None] = None

    @property
    def version(self) -> str:
        if self._version is not None:
            return self._version
        try:
            package_version = _dist_version("segment-anything")
        except PackageNotFoundError:
            package_version = "unknown"
        return f"{package_version}+{self.model_type}"

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities(returns_confidence=True, max_concurrency=1)

    def segment(self, patch, box):
        with self._lock:
            if self._current_patch != patch.patch_id:
                self.predictor.set_image(patch.image)
                self._current_patch = patch.patch_id
            # The predictor takes pixel-edge XYXY boxes; ours are inclusive row/col.
            xyxy = np.array([box.c_min, box.r_min, box.c_max + 1, box.r_max + 1])
            logits, scores, _ = self.predictor.predict(
                box=xyxy, multimask_output=False, return_logits=True
            )
        probability = 1.0 / (1.0 + np.exp(-logits[0]))
        return probability >= self.threshold, float(np.clip(scores[0], 0.0, 1.0))


def make_segmenter(config: "Config", corpus: Corpus) -> PromptableSegmenter:
    backend = config.segmenter.backend
    if backend == "oracle":
        return OracleSegmenter(
            corpus, config.segmenter.dilate_px, config.segmenter.erode_px
        )
    if backend == "external":
        return ExternalModelAdapter(
            config.segmenter.checkpoint,
            model_type=config.segmenter.model_type,
            threshold=config.segmenter.threshold,
            device=config.segmenter.device,
            version=config.segmenter.version,
        )
    raise InputError(f"Unknown segmenter backend '{backend}' (oracle or external)")


def segment_with_prompts(
    segmenter: PromptableSegmenter, patch: Patch, prompts: typing.Sequence[BoxPrompt]
) -> list[SegmentResult]:
    """One result per prompt, in prompt order."""
    if not segmenter.capabilities.accepts_box_prompts:
        raise ContractViolationError(
            f"Segmenter '{segmenter.segmenter_id}' does not accept box prompts"
        )
    for box in prompts:
        if box.patch_id != patch.patch_id:
            raise InputError(
                f"Prompt {box.instance_id} targets {box.patch_id}, not {patch.patch_id}"
            )
        if not box.fits(patch.shape):
            raise InputError(f"Prompt {box.instance_id} lies outside {patch.patch_id}")

    results, failed = [], []
    for box in prompts:
        try:
            mask, confidence = segmenter.segment(patch, box)
        except (ContractViolationError, SegmenterUnavailableError):
            raise
        except (RuntimeError, OSError) as e:
            logger.debug("Segmenter failed on %s: %s", box.instance_id, e)
            failed.append(box.instance_id)
            continue
        mask = np.asarray(mask)
        if mask.shape != patch.shape:
            raise ContractViolationError(
                f"Segmenter '{segmenter.segmenter_id}' returned a {mask.shape} mask "
                f"for a {patch.shape} patch ({box.instance_id})"
            )
        results.append(
            SegmentResult(
                box.instance_id,
                patch.patch_id,
                mask.astype(bool),
                1.0 if confidence is None else float(confidence),
            )
        )
    if failed:
        raise BackendError(
            f"Segmenter failed on {len(failed)} prompt(s) of {patch.patch_id}",
            instance_ids=failed,
        )
    return results


def merge_results(
    results: typing.Sequence[SegmentResult],
    class_of: typing.Union[typing.Mapping[str, CellClass], typing.Callable],
    policy: str = "confidence",
    *,
    patch_id: typing.Union[str, None] = None,
    shape: typing.Union[tuple[int, int], None] = None,
) -> LabelMap:
    """Merge instance masks into a label map.

    ``confidence``: a contested pixel goes to the most confident result, then the
    smaller mask, then the lower class index. ``area`` skips the confidence step.
    """
    if policy not in MERGE_POLICIES:
        raise InputError(f"Unknown merge policy '{policy}' (one of {MERGE_POLICIES})")
    lookup = class_of if callable(class_of) else class_of.__getitem__
    if not results:
        if patch_id is None or shape is None:
            raise InputError("Merging no results needs patch_id and shape")
        return LabelMap.background(patch_id, shape)
    patch_id = patch_id or results[0].patch_id
    shape = shape or results[0].mask.shape

    def priority(item):
        index, result = item
        key = (result.area, int(lookup(result.instance_id)), index)
        return key if policy == "area" else (-result.confidence, *key)

    classes = np.zeros(shape, dtype=np.uint8)
    for _, result in sorted(enumerate(results), key=priority, reverse=True):
        classes[result.mask] = int(lookup(result.instance_id))
    return LabelMap(patch_id, classes)


@dataclass
class PseudolabelRun:
    labelmaps: dict[str, LabelMap] = field(default_factory=dict)
    provenance: list[tuple] = field(default_factory=list)
    failures: dict[str, list[str]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)


def pseudolabel_corpus(
    corpus: Corpus,
    boxes: typing.Sequence[BoxPrompt],
    segmenter: PromptableSegmenter,
    output_dir: typing.Union[str, os.PathLike],
    policy: str = "confidence",
    *,
    jobs: int = 1,
    resume: bool = True,
    box_kind: typing.Union[BoxKind, str, None] = None,
    seed: typing.Union[int, None] = None,
) -> PseudolabelRun:
    """Pseudo-label every patch and write labelmaps plus ``pseudolabels.csv``.

    Provenance is read off the boxes themselves; ``box_kind`` and ``seed`` only
    describe patches that have no boxes. Completed patches are recorded in
    ``pseudolabels.csv.partial`` as they finish. With ``resume`` a recorded patch
    is skipped when its box kind, seed, prompt count and segmenter match this
    run, and redone otherwise. The final CSV is always rewritten in patch order.
    """
    output_dir = Path(output_dir)
    labelmap_dir = output_dir / "labelmaps"
    labelmap_dir.mkdir(parents=True, exist_ok=True)
    partial_path = output_dir / "pseudolabels.csv.partial"
    final_path = output_dir / "pseudolabels.csv"

    grouped = boxes_by_patch(boxes)
    if unknown := sorted(set(grouped) - set(corpus.patches)):
        raise InputError(f"Boxes reference patches not in the corpus: {unknown[:5]}")
    class_of = {b.instance_id: b.cell_class for b in boxes}

    def _provenance(pid, n_prompts, n_failures):
        patch_boxes = grouped.get(pid, [])
        if patch_boxes:
            kind = patch_boxes[0].kind
            box_seed = next((b.seed for b in patch_boxes if b.seed is not None), "")
        else:
            kind = BoxKind(box_kind) if box_kind else None
            box_seed = seed if kind is BoxKind.RANDOM and seed is not None else ""
        return (
            pid,
            kind.value if kind else "",
            box_seed,
            segmenter.segmenter_id,
            segmenter.version,
            n_prompts,
            n_failures,
        )

    done: dict[str, tuple] = {}
    if resume:
        recorded: dict[str, tuple] = {}
        for path in (final_path, partial_path):
            if path.is_file():
                for row in _read_csv(path):
                    recorded[row["patch_id"]] = tuple(
                        row[c] for c in PROVENANCE_COLUMNS
                    )
        for pid, row in recorded.items():
            if pid not in corpus.patches:
                continue
            expected = _provenance(pid, len(grouped.get(pid, [])), 0)
            if row != tuple(str(v) for v in expected):
                logger.debug("Redoing %s: recorded provenance %s is stale", pid, row)
                continue
            if (labelmap_dir / f"{pid}.png").is_file():
                done[pid] = expected
    elif partial_path.exists():
        partial_path.unlink()

    def _run(pid):
        patch = corpus.patches[pid]
        prompts = grouped.get(pid, [])
        try:
            results = segment_with_prompts(segmenter, patch, prompts)
        except BackendError as e:
            return pid, None, _provenance(pid, len(prompts), len(e.instance_ids)), e
        labelmap = merge_results(
            results, class_of, policy, patch_id=pid, shape=patch.shape
        )
        write_labelmap(labelmap_dir / f"{pid}.png", labelmap)
        return pid, labelmap, _provenance(pid, len(prompts), 0), None

    run = PseudolabelRun()
    pending = [pid for pid in corpus.patches if pid not in done]
    run.skipped = [pid for pid in corpus.patches if pid in done]
    if run.skipped:
        logger.info("Resuming: %d patches already pseudo-labelled", len(run.skipped))
    for pid in pending:
        if pid not in grouped:
            warnings.warn(
                f"Patch {pid} has no boxes; its pseudo-label is all background.",
                stacklevel=2,
            )

    workers = max(1, jobs)
    if (limit := segmenter.capabilities.max_concurrency) is not None:
        workers = min(workers, limit)
    rows = dict(done)
    with ThreadPoolExecutor(max_workers=workers) as pool, open(
        partial_path, "a", newline=""
    ) as partial:
        writer = csv.writer(partial, lineterminator="\n")
        if partial.tell() == 0:
            writer.writerow(PROVENANCE_COLUMNS)
        for pid, labelmap, row, error in pool.map(_run, pending):
            rows[pid] = row
            if error is not None:
                run.failures[pid] = error.instance_ids
                continue
            run.labelmaps[pid] = labelmap
            writer.writerow(row)
            partial.flush()

    for pid in run.skipped:
        run.labelmaps[pid] = read_labelmap(labelmap_dir / f"{pid}.png", pid)
    run.provenance = [rows[pid] for pid in sorted(rows)]
    _write_csv(final_path, PROVENANCE_COLUMNS, run.provenance)
    if run.failures:
        raise BackendError(
            f"Pseudo-labelling failed on {len(run.failures)} patch(es); rerun with "
            "resume to retry them",
            failures=run.failures,
        )
    partial_path.unlink()
    logger.info("Pseudo-labelled %d patches into %s", len(run.labelmaps), labelmap_dir)
    return run
