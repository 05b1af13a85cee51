# Copyright (c) 2026, saml-pipeline contributors.

"""Molecular-oriented corrective learning (MOCL).

Per image and class, the labelled pixels whose predicted probability for their
label is highest become anchors. Every labelled pixel is then weighted by the
cosine similarity of its embedding to the anchors of its class, mapped from
[-1, 1] to [0, 1], and the cross-entropy is averaged with those weights.
"""

import logging
import math
import os
import typing
import warnings
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from packaging.version import Version
from torch.utils.data import DataLoader, Dataset

from . import __version__
from .config import DEFAULT_ARCHITECTURE
from .dataset import FOREGROUND_CLASSES, Corpus, LabelMap, Patch, Split, SplitAssignment
from .errors import ArtifactMissingError, ContractViolationError, InputError
from .metrics import class_f1
from .model import NUM_CLASSES, UNet
from .utils import _derive_seed, _write_csv

if typing.TYPE_CHECKING:
    from .config import Config

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = Version("1.0")

HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "val_dice_podocyte",
    "val_dice_mesangial",
    "val_dice_macro",
    "mean_confidence",
)

_EPS = 1e-12


@dataclass(frozen=True)
class MoclConfig:
    k_fraction: float = 0.05
    warmup_epochs: int = 5
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    similarity_aggregation: str = "mean"
    # False trains with plain cross-entropy throughout.
    corrective: bool = True
    architecture: str = DEFAULT_ARCHITECTURE
    sample_pixels: typing.Union[int, None] = None
    background: str = "anchors"
    cache: str = "batch"
    deterministic: bool = True

    def __post_init__(self):
        if not 0.0 < self.k_fraction <= 1.0:
            raise InputError(f"k_fraction must be in (0, 1], got {self.k_fraction}")
        if self.warmup_epochs < 0:
            raise InputError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise InputError("batch_size and learning_rate must be positive")
        if self.similarity_aggregation not in ("mean", "max"):
            raise InputError(
                f"similarity_aggregation must be 'mean' or 'max', "
                f"not '{self.similarity_aggregation}'"
            )
        if self.background not in ("anchors", "uniform"):
            raise InputError(
                f"background must be 'anchors' or 'uniform', not '{self.background}'"
            )
        if self.cache not in ("batch", "epoch"):
            raise InputError(f"cache must be 'batch' or 'epoch', not '{self.cache}'")
        if self.sample_pixels is not None and self.sample_pixels < 1:
            raise InputError("sample_pixels must be >= 1 when set")

    @classmethod
    def from_config(cls, config: "Config") -> "MoclConfig":
        m = config.mocl
        return cls(
            k_fraction=m.k_fraction,
            warmup_epochs=m.warmup_epochs,
            epochs=m.epochs,
            batch_size=m.batch_size,
            learning_rate=m.learning_rate,
            seed=config.seed_for("mocl"),
            similarity_aggregation=m.similarity_aggregation,
            corrective=m.corrective,
            architecture=m.architecture,
            sample_pixels=m.sample_pixels,
            background=m.background,
            cache=m.cache,
            deterministic=m.deterministic,
        )


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    patch_id: str
    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2:
            raise ContractViolationError("Confidence weights must be a 2-D grid")
        if weights.size and (weights.min() < 0.0 or weights.max() > 1.0):
            raise ContractViolationError(
                f"Confidence weights for {self.patch_id} fall outside [0, 1]"
            )
        object.__setattr__(self, "weights", weights)


@dataclass(frozen=True, eq=False)
class Anchors:
    cell_class: int
    coords: torch.Tensor  # (k, 2) row, col
    vectors: torch.Tensor  # (k, D)

    def __len__(self):
        return int(self.coords.shape[0])


def _label_tensor(labels) -> torch.Tensor:
    if isinstance(labels, LabelMap):
        return torch.from_numpy(labels.classes.astype(np.int64))
    if isinstance(labels, np.ndarray):
        return torch.from_numpy(labels.astype(np.int64))
    return labels.long()


def select_topk_anchors(
    probs: torch.Tensor,
    embeddings: torch.Tensor,
    labels,
    cell_class: int,
    k_fraction: float,
) -> Anchors:
    """Top ``max(1, round(k_fraction * n))`` most confident pixels labelled ``c``.

    ``probs`` is (C, H, W), ``embeddings`` (D, H, W). Equal probabilities are
    ordered row-major, earliest first.
    """
    labels = _label_tensor(labels)
    height, width = labels.shape
    if probs.shape[1:] != labels.shape or embeddings.shape[1:] != labels.shape:
        raise InputError(
            f"Grid mismatch: probs {tuple(probs.shape)}, embeddings "
            f"{tuple(embeddings.shape)}, labels {tuple(labels.shape)}"
        )
    flat = torch.nonzero(labels.reshape(-1) == int(cell_class)).squeeze(1)
    if flat.numel() == 0:
        return Anchors(
            int(cell_class),
            torch.zeros((0, 2), dtype=torch.long),
            embeddings.new_zeros((0, embeddings.shape[0])),
        )
    k = max(1, round(k_fraction * flat.numel()))
    scores = probs[int(cell_class)].reshape(-1)[flat]
    order = torch.sort(scores, descending=True, stable=True).indices[:k]
    chosen = flat[order]
    coords = torch.stack([chosen // width, chosen % width], dim=1)
    vectors = embeddings.reshape(embeddings.shape[0], -1)[:, chosen].T
    return Anchors(int(cell_class), coords, vectors.detach())


def confidence_from_anchors(
    anchors: typing.Mapping[int, Anchors],
    embeddings: torch.Tensor,
    labels,
    aggregation: str = "mean",
    *,
    background: str = "anchors",
    sample_pixels: typing.Union[int, None] = None,
    generator: typing.Union[torch.Generator, None] = None,
) -> torch.Tensor:
    """Per-pixel weights in [0, 1] for one image, shaped like ``labels``.

    A pixel labelled ``c`` gets ``(s + 1) / 2`` where ``s`` aggregates its cosine
    similarity to the anchors of ``c``. Classes without anchors, background under
    ``background="uniform"``, and pixels left out by ``sample_pixels`` keep 1.
    """
    labels = _label_tensor(labels)
    dim = embeddings.shape[0]
    flat_embeddings = embeddings.detach().reshape(dim, -1).T
    zero = flat_embeddings.norm(dim=1) == 0
    if bool(zero.any()):
        warnings.warn(
            f"{int(zero.sum())} pixel embedding(s) have zero norm; their cosine "
            "similarity is taken as 0.",
            stacklevel=2,
        )
    unit = F.normalize(flat_embeddings, dim=1, eps=_EPS)
    flat_labels = labels.reshape(-1)
    weights = torch.ones(flat_labels.shape[0], dtype=unit.dtype)
    for cell_class, class_anchors in sorted(anchors.items()):
        if len(class_anchors) == 0:
            continue
        if cell_class == 0 and background == "uniform":
            continue
        pixels = torch.nonzero(flat_labels == cell_class).squeeze(1)
        if sample_pixels is not None and pixels.numel() > sample_pixels:
            pick = torch.randperm(pixels.numel(), generator=generator)[:sample_pixels]
            pixels = pixels[pick.sort().values]
        vectors = F.normalize(class_anchors.vectors.to(unit.dtype), dim=1, eps=_EPS)
        cosine = unit[pixels] @ vectors.T
        if aggregation == "mean":
            similarity = cosine.mean(dim=1)
        elif aggregation == "max":
            similarity = cosine.max(dim=1).values
        else:
            raise InputError(f"Unknown similarity aggregation '{aggregation}'")
        weights[pixels] = ((similarity + 1.0) / 2.0).clamp(0.0, 1.0)
    return weights.reshape(labels.shape)


def image_confidence(
    probs: torch.Tensor,
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    cfg: MoclConfig,
    generator: typing.Union[torch.Generator, None] = None,
) -> torch.Tensor:
    """Anchors and weights for one image's (C, H, W) outputs."""
    anchors = {
        int(c): select_topk_anchors(probs, embeddings, labels, int(c), cfg.k_fraction)
        for c in torch.unique(labels).tolist()
    }
    return confidence_from_anchors(
        anchors,
        embeddings,
        labels,
        cfg.similarity_aggregation,
        background=cfg.background,
        sample_pixels=cfg.sample_pixels,
        generator=generator,
    )


@torch.no_grad()
def batch_confidence(
    logits: torch.Tensor,
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    cfg: MoclConfig,
    generator: typing.Union[torch.Generator, None] = None,
) -> torch.Tensor:
    probs = logits.detach().softmax(dim=1)
    return torch.stack(
        [
            image_confidence(probs[i], embeddings[i], labels[i], cfg, generator)
            for i in range(labels.shape[0])
        ]
    )


def mocl_loss(logits: torch.Tensor, labels, confidence) -> torch.Tensor:
    """Confidence-weighted mean cross-entropy.

    ``logits`` is (N, C, H, W) or (C, H, W); weights are treated as constants.
    Returns 0 when every weight is 0.
    """
    if not bool(torch.isfinite(logits).all()):
        raise ContractViolationError("Logits contain NaN or Inf")
    labels = _label_tensor(labels)
    if isinstance(confidence, ConfidenceMap):
        confidence = torch.from_numpy(confidence.weights)
    weights = confidence.detach().to(logits.dtype)
    if logits.dim() == 3:
        logits, labels, weights = logits[None], labels[None], weights[None]
    if weights.shape != labels.shape or logits.shape[2:] != labels.shape[1:]:
        raise InputError(
            f"Shape mismatch: logits {tuple(logits.shape)}, labels "
            f"{tuple(labels.shape)}, confidence {tuple(weights.shape)}"
        )
    if weights.numel() and (float(weights.min()) < 0.0 or float(weights.max()) > 1.0):
        raise ContractViolationError("Confidence weights must lie in [0, 1]")
    ce = F.cross_entropy(logits, labels, reduction="none")
    total = weights.sum()
    if float(total) == 0.0:
        logger.warning("All confidence weights are zero; loss is 0 for this batch")
        return (logits * 0.0).sum()
    return (weights * ce).sum() / total


class PatchDataset(Dataset):
    """Image/label pairs as tensors, reflect-padded to the network stride."""

    def __init__(
        self,
        patches: typing.Sequence[Patch],
        labels: typing.Sequence[LabelMap],
        stride: int = 1,
    ):
        self.patch_ids = [p.patch_id for p in patches]
        self.images = []
        self.labels = []
        for patch, labelmap in zip(patches, labels):
            image = _pad(patch.image, stride)
            self.images.append(
                torch.from_numpy(image.transpose(2, 0, 1).astype(np.float32) / 255.0)
            )
            self.labels.append(
                torch.from_numpy(_pad(labelmap.classes, stride).astype(np.int64))
            )

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        return self.images[index], self.labels[index], index


def _pad(grid: np.ndarray, stride: int) -> np.ndarray:
    pad_rows = -grid.shape[0] % stride
    pad_cols = -grid.shape[1] % stride
    if not (pad_rows or pad_cols):
        return grid
    widths = [(0, pad_rows), (0, pad_cols)] + [(0, 0)] * (grid.ndim - 2)
    return np.pad(grid, widths, mode="reflect")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: dict[str, float]
    mean_confidence: float

    @property
    def val_dice_macro(self) -> float:
        return float(np.mean([self.val_dice[c.label] for c in FOREGROUND_CLASSES]))

    def row(self) -> tuple:
        return (
            self.epoch,
            f"{self.train_loss:.6f}",
            f"{self.val_dice['podocyte']:.6f}",
            f"{self.val_dice['mesangial']:.6f}",
            f"{self.val_dice_macro:.6f}",
            f"{self.mean_confidence:.6f}",
        )


@dataclass
class TrainResult:
    checkpoint: Path
    model: UNet
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0


def save_checkpoint(
    path: typing.Union[str, os.PathLike],
    model: UNet,
    cfg: MoclConfig,
    epoch: int,
    extra: typing.Union[dict, None] = None,
) -> Path:
    path = Path(path)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    torch.save(
        {
            "format_version": str(CHECKPOINT_FORMAT),
            "saml_version": __version__,
            "architecture": model.descriptor,
            "config": asdict(cfg),
            "seed": cfg.seed,
            "epoch": epoch,
            "state_dict": model.state_dict(),
            **(extra or {}),
        },
        tmp_path,
    )
    os.replace(tmp_path, path)
    return path


def load_checkpoint(path: typing.Union[str, os.PathLike]) -> tuple[UNet, dict]:
    """Rebuild the model from a checkpoint file; returns ``(model, metadata)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise ArtifactMissingError(f"Checkpoint not found: {path}") from e
    found = Version(payload.get("format_version", "0"))
    if found.major != CHECKPOINT_FORMAT.major:
        raise ContractViolationError(
            f"Checkpoint {path} has format {found}, this version reads "
            f"{CHECKPOINT_FORMAT.major}.x"
        )
    model = UNet.from_descriptor(payload["architecture"])
    model.load_state_dict(payload.pop("state_dict"))
    model.eval()
    return model, payload


@torch.no_grad()
def _forward(model: UNet, image: np.ndarray, pad: bool = True):
    height, width = image.shape[:2]
    if (height % model.stride or width % model.stride) and not pad:
        raise InputError(
            f"A {height}x{width} patch is not a multiple of the network stride "
            f"{model.stride}; pad it (reflectively) to a multiple of {model.stride} "
            "or predict with pad=True."
        )
    padded = _pad(image, model.stride)
    tensor = torch.from_numpy(padded.transpose(2, 0, 1).astype(np.float32) / 255.0)
    logits, embeddings = model(tensor[None])
    return logits[0, :, :height, :width], embeddings[0, :, :height, :width]


def predict(
    checkpoint: typing.Union[UNet, str, os.PathLike], patch: Patch, *, pad: bool = True
) -> LabelMap:
    """Per-pixel argmax class map for one patch."""
    if isinstance(checkpoint, UNet):
        model = checkpoint
    else:
        model = load_checkpoint(checkpoint)[0]
    model.eval()
    logits, _ = _forward(model, patch.image, pad)
    return LabelMap(patch.patch_id, logits.argmax(dim=0).numpy().astype(np.uint8))


def patch_confidence(
    model: UNet, patch: Patch, labels: LabelMap, cfg: MoclConfig
) -> ConfidenceMap:
    """The confidence map the corrective loss would use for this patch."""
    model.eval()
    logits, embeddings = _forward(model, patch.image)
    probs = logits.softmax(dim=0)
    weights = image_confidence(probs, embeddings, _label_tensor(labels), cfg)
    return ConfidenceMap(patch.patch_id, weights.numpy())


def validation_dice(
    model: UNet, patches: typing.Sequence[Patch], reference: typing.Sequence[LabelMap]
) -> dict[str, float]:
    """Pooled Dice per foreground class over the given patches."""
    counts = {c.label: [0, 0, 0] for c in FOREGROUND_CLASSES}
    for patch, ref in zip(patches, reference):
        pred = predict(model, patch)
        for cell_class in FOREGROUND_CLASSES:
            score = class_f1(pred, ref, cell_class)
            tally = counts[cell_class.label]
            tally[0] += score.tp
            tally[1] += score.fp
            tally[2] += score.fn
    dice = {}
    for label, (tp, fp, fn) in counts.items():
        denominator = 2 * tp + fp + fn
        dice[label] = 1.0 if denominator == 0 else 2 * tp / denominator
    return dice


@contextmanager
def _seeded(seed: int, deterministic: bool):
    """Seed torch and, if asked, switch to deterministic kernels for one run.

    The process-wide deterministic-algorithm setting is restored on exit.
    """
    enabled = torch.are_deterministic_algorithms_enabled()
    warn_only = torch.is_deterministic_algorithms_warn_only_enabled()
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(enabled, warn_only=warn_only)


def train(
    corpus: Corpus,
    splits: SplitAssignment,
    labels: typing.Mapping[str, LabelMap],
    cfg: MoclConfig,
    output_dir: typing.Union[str, os.PathLike],
    *,
    reference: typing.Union[typing.Mapping[str, LabelMap], None] = None,
) -> TrainResult:
    """Train on ``labels`` for the train split, selecting by validation macro Dice.

    Validation is scored against ``reference`` (default: the corpus reference
    label maps). Writes ``checkpoint.pt`` (best), ``checkpoint-last.pt`` and
    ``history.csv`` into ``output_dir``. Runs repeat exactly for a fixed seed with
    single-process loading, up to nondeterministic backend kernels.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    train_ids = [pid for pid in splits.patches(Split.TRAIN) if pid in corpus.patches]
    val_ids = [pid for pid in splits.patches(Split.VAL) if pid in corpus.patches]
    if not train_ids:
        raise InputError("The train split is empty")
    if missing := [pid for pid in train_ids if pid not in labels]:
        raise ArtifactMissingError(
            f"No training labels for {len(missing)} patch(es), e.g. {missing[0]}"
        )
    shapes = {corpus.patches[pid].shape for pid in train_ids}
    if len(shapes) > 1:
        raise InputError(
            f"Training patches must share one size, found {sorted(shapes)}"
        )
    if not val_ids:
        warnings.warn(
            "The validation split is empty; the last epoch is kept as the checkpoint.",
            stacklevel=2,
        )

    with _seeded(cfg.seed, cfg.deterministic):
        return _fit(corpus, train_ids, val_ids, labels, cfg, output_dir, reference)


def _fit(corpus, train_ids, val_ids, labels, cfg, output_dir, reference):
    model = UNet.from_descriptor(cfg.architecture)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    dataset = PatchDataset(
        [corpus.patches[pid] for pid in train_ids],
        [labels[pid] for pid in train_ids],
        model.stride,
    )
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        num_workers=0,
        generator=torch.Generator().manual_seed(_derive_seed(cfg.seed, "loader")),
    )
    sampler = torch.Generator().manual_seed(_derive_seed(cfg.seed, "confidence"))
    val_patches = [corpus.patches[pid] for pid in val_ids]
    val_reference = [
        (reference or {}).get(pid) or corpus.reference_labelmap(pid) for pid in val_ids
    ]

    best_path = output_dir / "checkpoint.pt"
    last_path = output_dir / "checkpoint-last.pt"
    result = TrainResult(best_path, model)
    best_score = -math.inf
    for epoch in range(1, cfg.epochs + 1):
        corrective = cfg.corrective and epoch > cfg.warmup_epochs
        cached = _epoch_confidence(model, dataset, cfg, sampler) if (
            corrective and cfg.cache == "epoch"
        ) else None

        model.train()
        loss_sum, weight_sum, pixel_count, image_count = 0.0, 0.0, 0, 0
        for images, targets, index in loader:
            logits, embeddings = model(images)
            if not corrective:
                weights = torch.ones(targets.shape, dtype=logits.dtype)
            elif cached is not None:
                weights = cached[index]
            else:
                weights = batch_confidence(logits, embeddings, targets, cfg, sampler)
            loss = mocl_loss(logits, targets, weights)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss) * images.shape[0]
            image_count += images.shape[0]
            weight_sum += float(weights.sum())
            pixel_count += weights.numel()

        try:
            val_dice = (
                validation_dice(model, val_patches, val_reference)
                if val_ids
                else {c.label: math.nan for c in FOREGROUND_CLASSES}
            )
        except Exception:
            _write_history(output_dir / "history.csv", result.history)
            logger.error(
                "Validation failed in epoch %d; keeping the checkpoint of epoch %d",
                epoch,
                epoch - 1,
            )
            raise
        record = EpochRecord(
            epoch, loss_sum / image_count, val_dice, weight_sum / pixel_count
        )
        result.history.append(record)
        save_checkpoint(last_path, model, cfg, epoch)
        score = record.val_dice_macro if val_ids else float(epoch)
        if score > best_score:
            best_score = score
            result.best_epoch = epoch
            save_checkpoint(best_path, model, cfg, epoch, {"val_dice_macro": score})
        logger.info(
            "epoch %d/%d loss %.4f val macro Dice %.4f mean confidence %.3f%s",
            epoch,
            cfg.epochs,
            record.train_loss,
            record.val_dice_macro,
            record.mean_confidence,
            " (corrective)" if corrective else "",
        )

    _write_history(output_dir / "history.csv", result.history)
    result.model, _ = load_checkpoint(best_path)
    return result


@torch.no_grad()
def _epoch_confidence(model, dataset, cfg, sampler) -> torch.Tensor:
    """Confidence maps for the whole training set, computed once per epoch."""
    model.eval()
    maps = []
    for image, labels, _ in dataset:
        logits, embeddings = model(image[None])
        maps.append(
            image_confidence(
                logits[0].softmax(dim=0), embeddings[0], labels, cfg, sampler
            )
        )
    return torch.stack(maps)


def _write_history(path: Path, history: typing.Sequence[EpochRecord]) -> None:
    _write_csv(path, HISTORY_COLUMNS, (record.row() for record in history))
