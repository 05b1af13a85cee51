# Copyright (c) 2026, saml-pipeline contributors.

from unittest.mock import Mock, patch

import numpy as np
import pytest
from conftest import box_mask, make_instance, make_patch, write_config

from saml.boxgen import BoxPrompt, PerturbConfig, boxes_for_corpus, tight_box
from saml.config import Config
from saml.dataset import CellClass
from saml.errors import (
    BackendError,
    ContractViolationError,
    InputError,
    SegmenterUnavailableError,
)
from saml.metrics import annotation_accuracy
from saml.promptseg import (
    ExternalModelAdapter,
    OracleSegmenter,
    PromptableSegmenter,
    SegmentResult,
    make_segmenter,
    merge_results,
    oracle_segment,
    pseudolabel_corpus,
    segment_with_prompts,
)
from saml.synth import SyntheticSpec, generate_synthetic
from saml.utils import _read_csv


class FlakyOracle(OracleSegmenter):
    """Oracle that raises a transient error for the listed patches."""

    def __init__(self, corpus, fail_on):
        super().__init__(corpus)
        self.fail_on = set(fail_on)

    def segment(self, patch, box):
        if patch.patch_id in self.fail_on:
            raise RuntimeError("connection reset")
        return super().segment(patch, box)


class MisshapenSegmenter(PromptableSegmenter):
    segmenter_id = "misshapen"

    @property
    def version(self):
        return "0"

    def segment(self, patch, box):
        return np.zeros((patch.shape[0] + 1, patch.shape[1]), dtype=bool), None


def test_oracle_tight_box_returns_ground_truth():
    truth = make_instance("g", "p", 1, box_mask((8, 8), 2, 1, 5, 6))
    result = oracle_segment(truth, tight_box(truth))
    np.testing.assert_array_equal(result.mask, truth.mask)
    assert result.confidence == 1.0


def test_oracle_random_box_is_intersection():
    mask = np.zeros((8, 8), dtype=bool)
    mask[1:6, 2:7] = True
    mask[3, 0:3] = True
    truth = make_instance("g", "p", 2, mask)
    box = BoxPrompt("g", "p", 2, 2, 1, 7, 4, kind="random")
    result = oracle_segment(truth, box)

    expected = np.zeros((8, 8), dtype=bool)
    expected[2:6, 2:5] = True
    expected[3, 1] = True
    np.testing.assert_array_equal(result.mask, expected)


def test_oracle_partial_box_confidence():
    truth = make_instance("g", "p", 1, box_mask((5, 5), 1, 1, 3, 3))
    box = BoxPrompt("g", "p", 1, 1, 1, 3, 2, kind="random")
    result = oracle_segment(truth, box)
    assert result.area == 6
    assert result.mask[1:4, 1:3].all()
    assert result.confidence == pytest.approx(2 * 6 / (6 + 9))


def test_oracle_erosion_can_empty_mask():
    truth = make_instance("g", "p", 1, box_mask((9, 9), 3, 3, 5, 5))
    result = oracle_segment(truth, tight_box(truth), erode_px=2)
    assert not result.mask.any()
    assert result.confidence == 0.0


def test_oracle_dilation():
    truth = make_instance("g", "p", 1, box_mask((9, 9), 4, 4, 4, 4))
    result = oracle_segment(truth, tight_box(truth), dilate_px=1)
    assert result.area == 5
    assert result.confidence == pytest.approx(2 / 6)


def test_empty_prompt_list(three_instance_corpus):
    segmenter = OracleSegmenter(three_instance_corpus)
    assert segment_with_prompts(segmenter, three_instance_corpus.patches["a"], []) == []


def test_segment_with_prompts(three_instance_corpus):
    segmenter = OracleSegmenter(three_instance_corpus)
    boxes = boxes_for_corpus(three_instance_corpus, "tight")
    prompts = [b for b in boxes if b.patch_id == "a"]
    target = three_instance_corpus.patches["a"]
    results = segment_with_prompts(segmenter, target, prompts)
    assert [r.instance_id for r in results] == ["a_0", "a_1"]
    for result, inst in zip(results, three_instance_corpus.instances["a"]):
        np.testing.assert_array_equal(result.mask, inst.mask)


def test_prompt_for_other_patch(three_instance_corpus):
    segmenter = OracleSegmenter(three_instance_corpus)
    box = tight_box(three_instance_corpus.instances["b"][0])
    with pytest.raises(InputError, match="targets"):
        segment_with_prompts(segmenter, three_instance_corpus.patches["a"], [box])


def test_wrong_mask_shape_is_contract_violation():
    patch_ = make_patch("p", (6, 6))
    box = BoxPrompt("i", "p", 1, 0, 0, 2, 2)
    with pytest.raises(ContractViolationError, match="mask"):
        segment_with_prompts(MisshapenSegmenter(), patch_, [box])


def test_confidence_outside_unit_interval():
    with pytest.raises(ContractViolationError):
        SegmentResult("i", "p", np.ones((2, 2), dtype=bool), 1.5)


def test_backend_failure_names_prompts(three_instance_corpus):
    segmenter = FlakyOracle(three_instance_corpus, fail_on={"a"})
    boxes = [b for b in boxes_for_corpus(three_instance_corpus) if b.patch_id == "a"]
    with pytest.raises(BackendError) as excinfo:
        segment_with_prompts(segmenter, three_instance_corpus.patches["a"], boxes)
    assert excinfo.value.instance_ids == ["a_0", "a_1"]


def test_unknown_instance_is_backend_error(three_instance_corpus):
    segmenter = OracleSegmenter({})
    with pytest.raises(BackendError):
        segmenter.segment(
            three_instance_corpus.patches["a"],
            tight_box(three_instance_corpus.instances["a"][0]),
        )


def _result(instance_id, mask, confidence=1.0):
    return SegmentResult(instance_id, "p", mask, confidence)


def test_merge_disjoint_results():
    shape = (6, 6)
    results = [
        _result("a", box_mask(shape, 0, 0, 1, 1)),
        _result("b", box_mask(shape, 3, 3, 5, 5)),
    ]
    labelmap = merge_results(
        results, {"a": CellClass.PODOCYTE, "b": CellClass.MESANGIAL}
    )
    expected = np.zeros(shape, dtype=np.uint8)
    expected[0:2, 0:2] = 1
    expected[3:6, 3:6] = 2
    np.testing.assert_array_equal(labelmap.classes, expected)


@pytest.mark.parametrize(
    "policy, expected",
    [
        # The more confident mesangial mask wins the overlap.
        ("confidence", CellClass.MESANGIAL),
        # Ignoring confidence, the smaller podocyte mask wins.
        ("area", CellClass.PODOCYTE),
    ],
)
def test_merge_overlap(policy, expected):
    shape = (6, 6)
    podocyte = box_mask(shape, 0, 0, 2, 2)
    mesangial = box_mask(shape, 1, 1, 5, 5)
    results = [_result("pod", podocyte, 0.6), _result("mes", mesangial, 0.9)]
    labelmap = merge_results(
        results, {"pod": CellClass.PODOCYTE, "mes": CellClass.MESANGIAL}, policy
    )
    assert (labelmap.classes[podocyte & mesangial] == expected).all()
    assert (labelmap.classes[podocyte & ~mesangial] == CellClass.PODOCYTE).all()


def test_merge_empty_results():
    labelmap = merge_results([], {}, patch_id="p", shape=(3, 4))
    assert labelmap.shape == (3, 4)
    assert not labelmap.classes.any()
    with pytest.raises(InputError, match="merge policy"):
        merge_results([], {}, "loudest", patch_id="p", shape=(3, 4))


def test_oracle_pseudolabels_reproduce_ground_truth(tmp_path, synthetic_corpus):
    boxes = boxes_for_corpus(synthetic_corpus, "tight")
    run = pseudolabel_corpus(
        synthetic_corpus, boxes, OracleSegmenter(synthetic_corpus), tmp_path, jobs=3
    )
    assert sorted(run.labelmaps) == sorted(synthetic_corpus.patches)
    for pid, labelmap in run.labelmaps.items():
        np.testing.assert_array_equal(
            labelmap.classes, synthetic_corpus.labelmaps[pid].classes
        )
    assert (tmp_path / "pseudolabels.csv").is_file()
    assert not (tmp_path / "pseudolabels.csv.partial").exists()
    assert len(list((tmp_path / "labelmaps").glob("*.png"))) == len(synthetic_corpus)


def test_oracle_composition_is_identity_on_a_full_corpus(tmp_path):
    corpus = generate_synthetic(SyntheticSpec(n_patches=50, seed=21)).corpus
    boxes = boxes_for_corpus(corpus, "tight")
    assert len(boxes) == len(corpus.all_instances())
    run = pseudolabel_corpus(corpus, boxes, OracleSegmenter(corpus), tmp_path, jobs=4)

    assert len(run.labelmaps) == 50
    for pid, labelmap in run.labelmaps.items():
        np.testing.assert_array_equal(labelmap.classes, corpus.labelmaps[pid].classes)
    report = annotation_accuracy(
        {"sam-l-tight": {"expert": run.labelmaps}},
        corpus.labelmaps,
        {pid: p.stratum for pid, p in corpus.patches.items()},
    )
    assert report.rows
    assert all(row.score == 1.0 and row.fp == row.fn == 0 for row in report.rows)


def _artifacts(directory):
    return {
        path.relative_to(directory).as_posix(): path.read_bytes()
        for path in sorted(directory.rglob("*"))
        if path.is_file()
    }


def test_resume_after_failure_matches_clean_run(tmp_path, synthetic_corpus):
    boxes = boxes_for_corpus(synthetic_corpus, "random", PerturbConfig(seed=8))
    clean = tmp_path / "clean"
    oracle = OracleSegmenter(synthetic_corpus)
    pseudolabel_corpus(synthetic_corpus, boxes, oracle, clean)

    resumed = tmp_path / "resumed"
    failing = sorted(synthetic_corpus.patches)[3:5]
    with pytest.raises(BackendError) as excinfo:
        pseudolabel_corpus(
            synthetic_corpus,
            boxes,
            FlakyOracle(synthetic_corpus, failing),
            resumed,
            jobs=2,
        )
    assert sorted(excinfo.value.failures) == failing
    assert (resumed / "pseudolabels.csv.partial").is_file()

    run = pseudolabel_corpus(synthetic_corpus, boxes, oracle, resumed, resume=True)
    assert len(run.skipped) == len(synthetic_corpus) - len(failing)
    assert _artifacts(resumed) == _artifacts(clean)


def test_resume_redoes_patches_from_another_segmenter(tmp_path, synthetic_corpus):
    boxes = boxes_for_corpus(synthetic_corpus, "tight")
    oracle = OracleSegmenter(synthetic_corpus)
    pseudolabel_corpus(synthetic_corpus, boxes, oracle, tmp_path)

    same = pseudolabel_corpus(
        synthetic_corpus, boxes, OracleSegmenter(synthetic_corpus), tmp_path
    )
    assert same.skipped == sorted(synthetic_corpus.patches)

    bleeding = OracleSegmenter(synthetic_corpus, dilate_px=1)
    run = pseudolabel_corpus(synthetic_corpus, boxes, bleeding, tmp_path, resume=True)
    assert run.skipped == []
    rows = _read_csv(tmp_path / "pseudolabels.csv")
    assert {row["segmenter_version"] for row in rows} == {bleeding.version}


def test_provenance_comes_from_the_boxes(tmp_path, synthetic_corpus):
    boxes = boxes_for_corpus(synthetic_corpus, "random", PerturbConfig(seed=4))
    pseudolabel_corpus(
        synthetic_corpus,
        boxes,
        OracleSegmenter(synthetic_corpus),
        tmp_path,
        box_kind="tight",
        seed=99,
    )
    rows = _read_csv(tmp_path / "pseudolabels.csv")
    assert {row["box_kind"] for row in rows} == {"random"}
    assert {row["seed"] for row in rows} == {"4"}


def test_jobs_do_not_change_outputs(tmp_path, synthetic_corpus):
    boxes = boxes_for_corpus(synthetic_corpus, "random", PerturbConfig(seed=1))
    segmenter = OracleSegmenter(synthetic_corpus)
    pseudolabel_corpus(synthetic_corpus, boxes, segmenter, tmp_path / "one", jobs=1)
    pseudolabel_corpus(synthetic_corpus, boxes, segmenter, tmp_path / "four", jobs=4)
    assert _artifacts(tmp_path / "one") == _artifacts(tmp_path / "four")


def test_patch_without_boxes_is_background(tmp_path, three_instance_corpus):
    boxes = [b for b in boxes_for_corpus(three_instance_corpus) if b.patch_id != "b"]
    with pytest.warns(UserWarning, match="no boxes"):
        run = pseudolabel_corpus(
            three_instance_corpus,
            boxes,
            OracleSegmenter(three_instance_corpus),
            tmp_path,
        )
    assert not run.labelmaps["b"].classes.any()
    assert run.labelmaps["a"].classes.any()


def test_external_backend_without_checkpoint(tmp_path):
    with pytest.raises(SegmenterUnavailableError, match="segmenter unavailable"):
        ExternalModelAdapter(None)
    with pytest.raises(SegmenterUnavailableError, match="segmenter unavailable"):
        ExternalModelAdapter(tmp_path / "missing.pth")


def test_make_segmenter(tmp_path, three_instance_corpus):
    config = Config(
        write_config(
            tmp_path,
            corpus=tmp_path,
            sections={"segmenter": {"backend": '"oracle"', "dilate-px": "1"}},
        )
    )
    segmenter = make_segmenter(config, three_instance_corpus)
    assert isinstance(segmenter, OracleSegmenter)
    assert segmenter.dilate_px == 1

    with pytest.raises(SegmenterUnavailableError):
        make_segmenter(
            config.with_settings(segmenter__backend="external"), three_instance_corpus
        )
    with pytest.raises(InputError, match="Unknown segmenter backend"):
        make_segmenter(config.with_settings(segmenter__backend="magic"), None)


def _fake_sam_api(predictor):
    api = Mock()
    api.sam_model_registry = {"vit_b": Mock(return_value=Mock())}
    api.SamPredictor = Mock(return_value=predictor)
    return api


def test_external_adapter_wraps_predictor(tmp_path):
    checkpoint = tmp_path / "sam.pth"
    checkpoint.write_bytes(b"weights")
    image_shape = (8, 10)

    def predict(box, multimask_output, return_logits):
        assert not multimask_output and return_logits
        x0, y0, x1, y1 = box
        logits = np.full(image_shape, -6.0)
        logits[y0:y1, x0:x1] = 6.0
        return logits[None], np.array([0.87]), None

    predictor = Mock()
    predictor.predict.side_effect = predict
    sam_api = Mock(return_value=_fake_sam_api(predictor))
    with patch("saml.promptseg._get_sam_api", sam_api):
        adapter = ExternalModelAdapter(checkpoint, version="test-1")
    assert adapter.version == "test-1"
    assert adapter.capabilities.max_concurrency == 1

    patch_ = make_patch("p", image_shape)
    boxes = [BoxPrompt("i0", "p", 1, 1, 2, 3, 5), BoxPrompt("i1", "p", 2, 5, 0, 7, 1)]
    results = segment_with_prompts(adapter, patch_, boxes)

    predictor.set_image.assert_called_once()
    for result, box in zip(results, boxes):
        np.testing.assert_array_equal(result.mask, box.region(image_shape))
        assert result.confidence == pytest.approx(0.87)
