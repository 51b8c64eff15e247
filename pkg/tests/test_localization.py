"""Structural, parameter and activation diffs and the verdict procedure"""
import numpy as np
import pytest

from deltadiff.errors import ParamMapMismatch, TraceMismatch
from deltadiff.models import Backend, Dialect, LayerDiff, OptLevel, PassId, TraceEntry, Verdict
from deltadiff.optimizer import apply_level, apply_pass
from deltadiff.services.executor import run_debug, run_inference
from deltadiff.services.localization import (
    VariantPackage, activation_diff, localize, onset_layer, parameter_diff, parameter_diff_by_layer,
    structural_differences, triangulate,
)
from deltadiff.services.scoring import compare_labels
from deltadiff.services.variants import convert, inject_noise, repair_parameters
from deltadiff.tensor import Tensor


def _package(graph, corpus, variant_id, backend=Backend.REFERENCE):
    record = run_debug(graph, corpus, variant_id=variant_id, backend=backend)
    return VariantPackage(graph, record, record.traces)


def _entry(index, values, op="ReLU"):
    return TraceEntry(index, f"n{index}", op, Tensor(values), 1)


@pytest.fixture
def bmm_a(tinynet_a):
    return apply_level(convert(tinynet_a, Dialect.DENSE_AS_BATCH_MATMUL), OptLevel.BASIC)


class TestActivationDiff:
    def test_identical_traces(self):
        trace = [_entry(0, [1.0, 2.0]), _entry(1, [3.0])]
        assert all(l.mean == l.max == l.std == 0.0 for l in activation_diff(trace, trace))

    def test_constant_offset(self):
        [layer] = activation_diff([_entry(0, [1.0, 2.0])], [_entry(0, [1.5, 2.5])])
        assert (layer.mean, layer.max, layer.std) == (0.5, 0.5, 0.0)

    def test_length_mismatch(self):
        with pytest.raises(TraceMismatch):
            activation_diff([_entry(0, [1.0])], [_entry(0, [1.0]), _entry(1, [1.0])])

    def test_kind_mismatch(self):
        with pytest.raises(TraceMismatch):
            activation_diff([_entry(0, [1.0])], [_entry(0, [1.0], op="Softmax")])

    def test_shape_mismatch(self):
        with pytest.raises(TraceMismatch):
            activation_diff([_entry(0, [1.0])], [_entry(0, [1.0, 2.0])])

    def test_onset_layer(self):
        profile = [LayerDiff(layer_index=i, node_id=f"n{i}", mean=m, max=m, std=0.0) for i, m in enumerate([0, 1e-6, 1e-3])]
        assert onset_layer(profile, 1e-5) == 2
        assert onset_layer(profile, 1e-2) is None


class TestStructure:
    def test_same_graph(self, basic_a):
        assert structural_differences(basic_a, basic_a) == []

    def test_parameter_noise_keeps_structure(self, basic_a):
        assert structural_differences(basic_a, inject_noise(basic_a, 1e-3)) == []

    def test_batch_matmul_dialect_differs(self, basic_a, bmm_a):
        differences = structural_differences(basic_a, bmm_a)
        assert any(d.startswith("Reshape") for d in differences)


class TestParameterDiff:
    def test_identical(self, basic_a):
        diff = parameter_diff(basic_a, basic_a)
        assert (diff.mean, diff.max, diff.count) == (0.0, 0.0, 0)

    def test_calibrated_noise(self, basic_a):
        diff = parameter_diff(basic_a, inject_noise(basic_a, 3.75e-4, clamp=0.011, seed=1))
        assert 2.7e-4 < diff.mean < 3.3e-4
        assert diff.max <= 0.011 + 1e-6
        assert diff.count > 0

    def test_through_a_conversion(self, basic_a, bmm_a):
        assert parameter_diff(basic_a, bmm_a).max == 0.0

    def test_by_layer(self, basic_a):
        noisy = inject_noise(basic_a, 1e-3, overrides={"fc": 0.0})
        rows = {row.node_id: row for row in parameter_diff_by_layer(basic_a, noisy)}
        assert rows["conv1"].max > 0
        assert rows["fc"].max == 0.0

    def test_different_parameter_names(self, basic_a, tinynet_c):
        with pytest.raises(ParamMapMismatch):
            parameter_diff(basic_a, apply_level(tinynet_c, OptLevel.BASIC))


class TestLocalize:
    def test_self_comparison(self, basic_a, small_corpus):
        pkg = _package(basic_a, small_corpus, "a")
        report = localize(pkg, pkg, labels=small_corpus.labels(), label_names=small_corpus.label_names)
        assert report.verdict == Verdict.NO_DIVERGENCE
        assert report.dissimilarity_pct == 0.0
        assert report.mean_rbo == 1.0
        assert report.onset_layer is None
        assert all(layer.max == 0.0 for layer in report.per_layer)
        assert all(row.pct == 0.0 for row in report.per_class)

    def test_backends_do_not_diverge(self, basic_a, small_corpus):
        report = localize(
            _package(basic_a, small_corpus, "ref"),
            _package(basic_a, small_corpus, "opt", Backend.OPTIMIZED_LAYOUT),
        )
        assert report.verdict == Verdict.NO_DIVERGENCE

    def test_parameter_noise(self, basic_a, small_corpus):
        noisy = inject_noise(basic_a, 3.75e-4, seed=2)
        report = localize(_package(basic_a, small_corpus, "a"), _package(noisy, small_corpus, "noisy"))
        assert report.verdict == Verdict.PARAMETER
        assert report.param_diff.max > 0
        assert report.onset_layer == 0
        assert report.per_layer[-1].mean > 0
        assert report.worst_image_id in small_corpus.ids()
        assert len(report.worst_image_layers) == len(basic_a.nodes)

    def test_dialect_conversion(self, basic_a, bmm_a, small_corpus):
        report = localize(_package(basic_a, small_corpus, "a"), _package(bmm_a, small_corpus, "bmm"))
        assert report.verdict == Verdict.GRAPH_STRUCTURE
        assert report.structural_differences

    def test_repair_removes_the_divergence(self, basic_a, small_corpus):
        repaired = repair_parameters(inject_noise(basic_a, 3.75e-4, seed=2), basic_a)
        report = localize(_package(basic_a, small_corpus, "a"), _package(repaired, small_corpus, "repaired"))
        assert report.verdict == Verdict.NO_DIVERGENCE
        assert report.dissimilarity_pct == 0.0

    def test_fast_math_is_activation_only(self, basic_a, small_corpus):
        fast = apply_pass(basic_a, PassId.FAST_MATH)
        report = localize(
            _package(basic_a, small_corpus, "a"), _package(fast, small_corpus, "fast"), threshold=0.0,
        )
        assert report.verdict == Verdict.ACTIVATION_ONLY
        assert report.param_diff.max == 0.0

    def test_without_traces_uses_final_outputs(self, basic_a, small_corpus):
        noisy = inject_noise(basic_a, 3.75e-4, seed=2)
        a = VariantPackage(basic_a, run_inference(basic_a, small_corpus, repeats=2, warmup=0, variant_id="a"))
        b = VariantPackage(noisy, run_inference(noisy, small_corpus, repeats=2, warmup=0, variant_id="b"))
        report = localize(a, b)
        assert report.verdict == Verdict.PARAMETER
        assert len(report.per_layer) == 1
        assert report.timing is not None


def test_calibrated_noise_flips_labels_on_the_desk_corpus(basic_a, desk):
    clean = run_inference(basic_a, desk, repeats=1, warmup=0, variant_id="clean")
    flips = [
        compare_labels(clean, run_inference(
            inject_noise(basic_a, 3.75e-4, clamp=0.011, seed=seed), desk, repeats=1, warmup=0, variant_id="noisy",
        ))
        for seed in range(5)
    ]
    assert max(flips) > 0


def test_label_flips_grow_from_first_layer_to_logits(basic_a, desk):
    clean = run_debug(basic_a, desk, variant_id="clean")
    clean_top1 = {image.image_id: image.top1 for image in clean.images}
    divergent = 0
    for seed in range(5):
        noisy = run_debug(inject_noise(basic_a, 3.75e-4, clamp=0.011, seed=seed), desk, variant_id="noisy")
        for image in noisy.images:
            if image.top1 == clean_top1[image.image_id]:
                continue
            divergent += 1
            profile = activation_diff(clean.traces[image.image_id], noisy.traces[image.image_id])
            assert profile[0].node_id == "conv1" and profile[-1].node_id == "fc"
            assert profile[-1].mean >= profile[0].mean, (seed, image.image_id)
    assert divergent > 0


def test_triangulate_names_the_noisy_hop(basic_a, bmm_a, small_corpus):
    noisy = inject_noise(bmm_a, 1e-3, seed=3)
    result, reports = triangulate(
        _package(basic_a, small_corpus, "source"),
        _package(bmm_a, small_corpus, "intermediate"),
        _package(noisy, small_corpus, "target"),
    )
    assert [hop.verdict for hop in result.hops] == [Verdict.GRAPH_STRUCTURE, Verdict.PARAMETER]
    assert result.faulty_hop == 1
    assert len(reports) == 2
    assert np.isclose(reports[0].dissimilarity_pct, 0.0)
