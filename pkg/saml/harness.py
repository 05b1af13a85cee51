# Copyright (c) 2026, saml-pipeline contributors.

"""End-to-end orchestration behind the CLI subcommands.

Every ``run_*`` function takes a :class:`~saml.config.Config`, writes its
artifacts under ``paths.output`` together with a ``config.toml`` echo, and raises
the errors of :mod:`saml.errors` for the CLI to map to exit codes.
"""

import logging
import typing
from pathlib import Path

from .boxgen import BoxKind, PerturbConfig, boxes_for_corpus, read_boxes, write_boxes
from .config import Config
from .dataset import (
    Corpus,
    LabelMap,
    Split,
    SplitAssignment,
    instances_to_labelmap,
    load_corpus,
    read_labelmap,
    read_splits,
    stratified_split,
    write_splits,
)
from .errors import ArtifactMissingError, InputError
from .metrics import (
    EvalReport,
    annotation_accuracy,
    format_report_table,
    merge_reports,
    read_report_csv,
    write_report_csv,
)
from .mocl import (
    MoclConfig,
    TrainResult,
    load_checkpoint,
    predict,
    train,
)
from .promptseg import PseudolabelRun, make_segmenter, pseudolabel_corpus
from .synth import SyntheticCorpus, SyntheticSpec, generate_synthetic
from .utils import _atomic_write, _read_csv

logger = logging.getLogger(__name__)

# Settings layered onto the base config for each named method of a matrix run.
MATRIX_METHODS: dict[str, dict[str, typing.Any]] = {
    "mocl-pixel": {"experiment__labels": "instances", "mocl__corrective": True},
    "ce-pixel": {"experiment__labels": "instances", "mocl__corrective": False},
    "sam-l-tight": {"experiment__labels": "pseudolabels", "boxes__mode": "tight"},
    "sam-l-random": {"experiment__labels": "pseudolabels", "boxes__mode": "random"},
    "ce-sam-l-random": {
        "experiment__labels": "pseudolabels",
        "boxes__mode": "random",
        "mocl__corrective": False,
    },
}

ANNOTATION_METHODS: dict[str, typing.Union[str, None]] = {
    "manual-contour": None,
    "sam-l-tight": "tight",
    "sam-l-random": "random",
}


def _output_dir(config: Config) -> Path:
    output = Path(config.paths.output)
    output.mkdir(parents=True, exist_ok=True)
    with _atomic_write(output / "config.toml") as f:
        f.write(config.dumps())
    return output


def _load(config: Config) -> Corpus:
    return load_corpus(config.paths.corpus, jobs=config.jobs)


def _reference(config: Config, corpus: Corpus) -> dict[str, LabelMap]:
    """Expert reference label maps: ``paths.reference`` or the corpus's own."""
    policy = config.dataset.resolution_policy
    if config.paths.reference is None:
        return {pid: corpus.reference_labelmap(pid, policy) for pid in corpus.patches}
    reference = load_corpus(config.paths.reference, jobs=config.jobs)
    return {pid: reference.reference_labelmap(pid, policy) for pid in reference.patches}


def run_synth(config: Config) -> SyntheticCorpus:
    spec = SyntheticSpec.from_config(config)
    synthetic = generate_synthetic(spec, config.paths.corpus)
    _output_dir(config)
    return synthetic


def run_boxes(config: Config, corpus: typing.Union[Corpus, None] = None) -> Path:
    corpus = _load(config) if corpus is None else corpus
    output = _output_dir(config)
    boxes = boxes_for_corpus(
        corpus, BoxKind(config.boxes.mode), PerturbConfig.from_config(config)
    )
    path = output / "boxes.csv"
    write_boxes(path, boxes)
    logger.info("Wrote %d boxes to %s", len(boxes), path)
    return path


def run_pseudolabel(
    config: Config, corpus: typing.Union[Corpus, None] = None, resume: bool = False
) -> PseudolabelRun:
    """Segment the configured boxes into pseudo-labels.

    ``boxes.csv`` is regenerated from the current box settings on every run, so a
    stale file never reaches the segmenter. With ``resume`` only patches whose
    recorded provenance matches these boxes and this segmenter are skipped.
    """
    corpus = _load(config) if corpus is None else corpus
    output = _output_dir(config)
    boxes = read_boxes(run_boxes(config, corpus))
    segmenter = make_segmenter(config, corpus)
    return pseudolabel_corpus(
        corpus,
        boxes,
        segmenter,
        output / "pseudolabels",
        config.segmenter.merge_policy,
        jobs=config.jobs,
        resume=resume,
        box_kind=config.boxes.mode,
        seed=config.seed_for("boxes"),
    )


def run_split(config: Config, corpus: Corpus) -> SplitAssignment:
    output = _output_dir(config)
    seed = config.seed_for("split")
    ratios = tuple(config.split.ratios)
    path = output / "splits.csv"
    splits = stratified_split(corpus, ratios, seed)
    if path.is_file():
        existing = read_splits(path, seed, ratios)
        if existing.assignment != splits.assignment:
            raise InputError(
                f"{path} does not match the configured split; remove it or restore "
                "the split settings it was made with"
            )
    write_splits(path, splits)
    return splits


def training_labels(config: Config, corpus: Corpus) -> dict[str, LabelMap]:
    """The labels the network learns from, per ``experiment.labels``."""
    source = config.experiment.labels
    policy = config.dataset.resolution_policy
    if source == "instances":
        return {
            pid: instances_to_labelmap(
                corpus.instances[pid], policy, patch_id=pid, shape=patch.shape
            )
            for pid, patch in corpus.patches.items()
        }
    if source == "labelmaps":
        return _reference(config, corpus)
    if source == "pseudolabels":
        directory = Path(config.paths.output) / "pseudolabels" / "labelmaps"
        labels = {}
        for pid in corpus.patches:
            path = directory / f"{pid}.png"
            if path.is_file():
                labels[pid] = read_labelmap(path, pid)
        if not labels:
            raise ArtifactMissingError(
                f"No pseudo-labels under {directory}; run 'saml pseudolabel' first"
            )
        return labels
    raise InputError(
        "experiment.labels must be instances, labelmaps or pseudolabels, "
        f"not '{source}'"
    )


def _checkpoint_path(config: Config) -> Path:
    if config.paths.checkpoint is not None:
        return Path(config.paths.checkpoint)
    return Path(config.paths.output) / "checkpoint.pt"


def _completed_history(path: Path) -> int:
    return len(_read_csv(path)) if path.is_file() else 0


def run_train(
    config: Config, corpus: typing.Union[Corpus, None] = None, resume: bool = False
) -> TrainResult:
    corpus = _load(config) if corpus is None else corpus
    output = _output_dir(config)
    cfg = MoclConfig.from_config(config)
    checkpoint = output / "checkpoint.pt"
    if resume and checkpoint.is_file() and (
        _completed_history(output / "history.csv") == cfg.epochs
    ):
        logger.info("Training already complete in %s; skipping", output)
        model, meta = load_checkpoint(checkpoint)
        return TrainResult(checkpoint, model, best_epoch=meta["epoch"])
    if config.experiment.labels == "pseudolabels":
        # Finished pseudo-labels are reused only if they match the current settings.
        run_pseudolabel(config, corpus, resume=True)
    splits = run_split(config, corpus)
    labels = training_labels(config, corpus)
    return train(
        corpus, splits, labels, cfg, output, reference=_reference(config, corpus)
    )


def run_evaluate(
    config: Config, corpus: typing.Union[Corpus, None] = None
) -> EvalReport:
    """Predict the test split and score it against the reference."""
    checkpoint = _checkpoint_path(config)
    if not checkpoint.is_file():
        raise ArtifactMissingError(f"Checkpoint not found: {checkpoint}")
    corpus = _load(config) if corpus is None else corpus
    output = _output_dir(config)
    model, _ = load_checkpoint(checkpoint)
    splits = run_split(config, corpus)
    test_ids = splits.patches(Split.TEST)
    if not test_ids:
        raise InputError("The test split is empty")
    predictions = {pid: predict(model, corpus.patches[pid]) for pid in test_ids}
    reference = _reference(config, corpus)
    report = annotation_accuracy(
        {config.experiment.method: {config.experiment.annotator_group: predictions}},
        reference,
        {pid: corpus.patches[pid].stratum for pid in test_ids},
        pooling=config.metrics.pooling,
    )
    _write_report(output, report, f"Test split segmentation ({len(test_ids)} patches)")
    return report


def _write_report(output: Path, report: EvalReport, title: str) -> None:
    write_report_csv(output / "report.csv", report)
    with _atomic_write(output / "report.txt") as f:
        f.write(format_report_table(report, title))


def run_report(
    config: Config, reports: typing.Sequence[typing.Union[str, Path]] = ()
) -> str:
    """Consolidate ``report.csv`` files into one text table."""
    output = Path(config.paths.output)
    paths = [Path(p) for p in reports] or [output / "report.csv"]
    if missing := [p for p in paths if not p.is_file()]:
        raise ArtifactMissingError(f"Report not found: {missing[0]}")
    report = merge_reports(read_report_csv(p) for p in paths)
    output = _output_dir(config)
    table = format_report_table(report)
    if len(paths) > 1:
        _write_report(output, report, "")
    return table


def _method_config(config: Config, method: str, index: int) -> Config:
    try:
        settings = dict(MATRIX_METHODS[method])
    except KeyError:
        raise InputError(
            f"Unknown matrix method '{method}' (one of {', '.join(MATRIX_METHODS)})"
        ) from None
    # Each method trains with its own seed; splits and boxes stay shared.
    settings["mocl__seed"] = config.seed_for("mocl") + index
    settings["split__seed"] = config.seed_for("split")
    settings["boxes__seed"] = config.seed_for("boxes")
    settings["experiment__method"] = method
    settings["paths__output"] = str(Path(config.paths.output) / method)
    return config.with_settings(**settings)


def run_experiment_matrix(config: Config, resume: bool = False) -> EvalReport:
    """One train + evaluate run per method, consolidated into one report."""
    if config.experiment.matrix == "annotation":
        return run_annotation_matrix(config, resume)
    if config.experiment.matrix != "segmentation":
        raise InputError(
            f"experiment.matrix must be segmentation or annotation, "
            f"not '{config.experiment.matrix}'"
        )
    corpus = _load(config)
    reports = []
    for index, method in enumerate(config.experiment.methods):
        method_config = _method_config(config, method, index)
        logger.info("Matrix run %d: %s", index + 1, method)
        run_train(method_config, corpus, resume=resume)
        reports.append(run_evaluate(method_config, corpus))
    report = merge_reports(reports)
    _write_report(_output_dir(config), report, "Downstream multi-class segmentation")
    return report


def _by_annotator(
    corpus: Corpus, labelmaps: typing.Mapping[str, LabelMap]
) -> dict[str, dict[str, LabelMap]]:
    """Split per-patch label maps by the annotator who labelled each patch."""
    split: dict[str, dict[str, LabelMap]] = {}
    for pid, labelmap in labelmaps.items():
        annotator = corpus.patches[pid].annotator_id
        split.setdefault(annotator, {})[pid] = labelmap
    return split


def run_annotation_matrix(config: Config, resume: bool = False) -> EvalReport:
    """Annotation accuracy of manual masks and box-prompted pseudo-labels."""
    corpus = _load(config)
    reference = _reference(config, corpus)
    policy = config.dataset.resolution_policy
    group = config.experiment.annotator_group
    candidates: dict[str, dict[str, dict[str, LabelMap]]] = {}
    for method, mode in ANNOTATION_METHODS.items():
        if mode is None:
            candidates[method] = _by_annotator(
                corpus,
                {
                    pid: instances_to_labelmap(
                        corpus.instances[pid], policy, patch_id=pid, shape=patch.shape
                    )
                    for pid, patch in corpus.patches.items()
                },
            )
            continue
        method_config = config.with_settings(
            boxes__mode=mode,
            boxes__seed=config.seed_for("boxes"),
            paths__output=str(Path(config.paths.output) / method),
        )
        run = run_pseudolabel(method_config, corpus, resume=resume)
        candidates[method] = _by_annotator(corpus, run.labelmaps)
    annotators = {p.annotator_id for p in corpus.patches.values()}
    report = annotation_accuracy(
        candidates,
        reference,
        {pid: p.stratum for pid, p in corpus.patches.items()},
        groups=dict.fromkeys(annotators, group),
        pooling=config.metrics.pooling,
    )
    _write_report(_output_dir(config), report, "Annotation accuracy (F1)")
    return report
