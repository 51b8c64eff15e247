"""Pass lists, individual passes, tolerance classes and idempotence"""
import numpy as np
import pytest

from deltadiff.backends import get_backend
from deltadiff.errors import InvalidGraph
from deltadiff.ir import DESK_MODELS, GraphBuilder, desk_model, save_model, sidecar_path
from deltadiff.models import Dialect, OpKind, OptLevel, PassId
from deltadiff.optimizer import (
    LEVEL_PASSES, CanonicalizeOps, CombineParallelOps, EliminateCommonSubexpr, FoldConstants,
    FoldScaleAxis, FuseOps, GraphEditor, SimplifyInference, apply_level, apply_pass, fold_batchnorm,
    pass_list, provenance,
)
from deltadiff.services.executor import prepare_inputs
from deltadiff.services.variants import convert
from deltadiff.tensor import Tensor, kernels

EXACT_PASSES = [PassId.FUSE_OPS, PassId.ELIMINATE_COMMON_SUBEXPR, PassId.CANONICALIZE_OPS]
FOLDING_PASSES = [PassId.SIMPLIFY_INFERENCE, PassId.FOLD_CONSTANTS, PassId.FOLD_SCALE_AXIS, PassId.COMBINE_PARALLEL_OPS]


def _run(graph, x):
    return get_backend(graph).execute(x)


def _input(seed=0, shape=(1, 3, 16, 16)):
    return Tensor(np.random.Generator(np.random.Philox(seed)).standard_normal(shape))


def _same_graph(a, b):
    return (
        a.nodes == b.nodes
        and a.outputs == b.outputs
        and a.metadata == b.metadata
        and set(a.params) == set(b.params)
        and all(a.params[n].bitwise_equal(b.params[n]) for n in a.params)
    )


class TestPassList:
    def test_basic(self):
        assert pass_list(OptLevel.BASIC) == [PassId.SIMPLIFY_INFERENCE]

    def test_levels_nest_in_order(self):
        basic, default, extended = (pass_list(level) for level in OptLevel)
        assert default[:len(basic)] == basic
        assert extended[:len(default)] == default
        assert default == [PassId.SIMPLIFY_INFERENCE, PassId.FUSE_OPS, PassId.FOLD_CONSTANTS, PassId.FOLD_SCALE_AXIS]
        assert extended[len(default):] == [
            PassId.ELIMINATE_COMMON_SUBEXPR, PassId.CANONICALIZE_OPS, PassId.COMBINE_PARALLEL_OPS, PassId.FAST_MATH,
        ]

    def test_enable_slots_into_canonical_order(self):
        assert pass_list(OptLevel.BASIC, enable=[PassId.FAST_MATH, PassId.FUSE_OPS]) == [
            PassId.SIMPLIFY_INFERENCE, PassId.FUSE_OPS, PassId.FAST_MATH,
        ]

    def test_disable_wins(self):
        passes = pass_list(OptLevel.EXTENDED, enable=[PassId.FAST_MATH], disable=[PassId.FAST_MATH])
        assert PassId.FAST_MATH not in passes

    def test_deterministic(self):
        assert pass_list(OptLevel.EXTENDED) == pass_list(OptLevel.EXTENDED)
        assert LEVEL_PASSES[OptLevel.EXTENDED] == pass_list(OptLevel.EXTENDED)

    def test_parse_accepts_snake_case(self):
        assert PassId.parse("fuse_ops") == PassId.FUSE_OPS
        assert PassId.parse("EliminateCommonSubexpr") == PassId.ELIMINATE_COMMON_SUBEXPR
        with pytest.raises(ValueError):
            PassId.parse("loop_unroll")


class TestLevels:
    def test_basic_is_simplify_inference(self, tinynet_a):
        assert _same_graph(apply_level(tinynet_a, OptLevel.BASIC), apply_pass(tinynet_a, PassId.SIMPLIFY_INFERENCE))

    @pytest.mark.parametrize("name", sorted(DESK_MODELS))
    @pytest.mark.parametrize("level", list(OptLevel))
    def test_apply_level_idempotent(self, name, level):
        once = apply_level(desk_model(name), level)
        assert _same_graph(apply_level(once, level), once)

    def test_extended_sets_fast_math(self, tinynet_a):
        assert apply_level(tinynet_a, OptLevel.EXTENDED).metadata.fast_math
        assert not apply_level(tinynet_a, OptLevel.DEFAULT).metadata.fast_math

    def test_passes_recorded_in_metadata(self, tinynet_a):
        graph = apply_level(tinynet_a, OptLevel.DEFAULT)
        assert graph.metadata.passes == tuple(p.value for p in pass_list(OptLevel.DEFAULT))

    @pytest.mark.parametrize("name", sorted(DESK_MODELS))
    def test_top1_invariant_on_desk_corpus(self, name, desk):
        source = desk_model(name)
        inputs = prepare_inputs(source, desk)
        basic = apply_level(source, OptLevel.BASIC)
        expected = [int(np.argmax(_run(basic, x).flat())) for x in inputs]
        for level in (OptLevel.DEFAULT, OptLevel.EXTENDED):
            graph = apply_level(source, level)
            assert [int(np.argmax(_run(graph, x).flat())) for x in inputs] == expected


class TestIdempotence:
    @pytest.mark.parametrize("name", sorted(DESK_MODELS))
    @pytest.mark.parametrize("pass_id", list(PassId))
    def test_every_pass_is_idempotent(self, name, pass_id):
        once = apply_pass(desk_model(name), pass_id)
        assert _same_graph(apply_pass(once, pass_id), once)


class TestToleranceClasses:
    @pytest.mark.parametrize("name", sorted(DESK_MODELS))
    @pytest.mark.parametrize("pass_id", EXACT_PASSES)
    def test_exact_passes_are_bit_identical(self, name, pass_id):
        graph = apply_level(desk_model(name), OptLevel.BASIC)
        x = _input(3)
        assert _run(apply_pass(graph, pass_id), x).bitwise_equal(_run(graph, x))

    @pytest.mark.parametrize("name", sorted(DESK_MODELS))
    @pytest.mark.parametrize("pass_id", FOLDING_PASSES)
    def test_folding_passes_within_relative_tolerance(self, name, pass_id):
        graph = desk_model(name)
        x = _input(4)
        expected = _run(graph, x).array
        error = np.abs(_run(apply_pass(graph, pass_id), x).array - expected).max()
        assert error <= 1e-5 * np.abs(expected).max()

    @pytest.mark.parametrize("name", sorted(DESK_MODELS))
    def test_fast_math_within_absolute_tolerance(self, name):
        graph = apply_level(desk_model(name), OptLevel.BASIC)
        x = _input(5)
        fast = apply_pass(graph, PassId.FAST_MATH)
        np.testing.assert_allclose(
            kernels.softmax(_run(fast, x)).array, kernels.softmax(_run(graph, x)).array, atol=1e-3,
        )


class TestSimplifyInference:
    def test_folds_batchnorm_into_conv(self, conv_bn_graph):
        folded = SimplifyInference()(conv_bn_graph)
        assert "BatchNorm" not in folded.kind_counts()
        bn = conv_bn_graph.node("bn")
        gamma, var = conv_bn_graph.param(bn, "gamma").array, conv_bn_graph.param(bn, "var").array
        scale = gamma / np.sqrt(var + np.float32(1e-3))
        expected_w = conv_bn_graph.params["conv.weight"].array * scale[:, None, None, None]
        np.testing.assert_allclose(folded.params["conv.weight"].array, expected_w, rtol=1e-6)

        x = _input(6, (1, 3, 6, 6))
        np.testing.assert_allclose(_run(folded, x).array, _run(conv_bn_graph, x).array, rtol=1e-5, atol=1e-6)

    def test_fold_batchnorm_folds_one_at_a_time(self, tinynet_c):
        editor = GraphEditor(tinynet_c)
        before = editor.build().kind_counts()["BatchNorm"]
        assert fold_batchnorm(editor)
        assert editor.build().kind_counts()["BatchNorm"] == before - 1
        while fold_batchnorm(editor):
            pass
        assert "BatchNorm" not in editor.build().kind_counts()
        assert not fold_batchnorm(editor)

    def test_tracks_provenance(self, conv_bn_graph):
        folded = SimplifyInference()(conv_bn_graph)
        assert provenance(folded, "conv.weight") == ("conv.weight", "folded")
        assert provenance(folded, "fc.weight") == ("fc.weight", "identity")

    def test_removes_identity_reshape(self, tinynet_a):
        assert "gap_flatten" not in {n.id for n in SimplifyInference()(tinynet_a).nodes}

    def test_precondition_failure_is_reported(self, tinynet_a):
        params = dict(tinynet_a.params)
        params["stray"] = Tensor([1.0])
        with pytest.raises(InvalidGraph):
            SimplifyInference()(tinynet_a.with_params(params))


class TestFoldConstants:
    def test_add_of_constants_becomes_constant(self):
        b = GraphBuilder("consts")
        b.input("x", (1,))
        b.add("two", OpKind.CONSTANT, value=Tensor([2.0]))
        b.add("three", OpKind.CONSTANT, value=Tensor([3.0]))
        b.add("five", OpKind.ADD, ["two", "three"])
        b.add("out", OpKind.ADD, ["x", "five"])
        folded = FoldConstants()(b.build(["out"]))

        assert folded.kind_counts() == {"Constant": 1, "Add": 1}
        const = folded.node("five")
        assert const.op == OpKind.CONSTANT
        assert folded.param(const, "value").tolist() == [5.0]
        assert _run(folded, Tensor([1.0])).tolist() == [6.0]


class TestFuseOps:
    def test_conv_relu_fused(self, basic_a):
        fused = FuseOps()(basic_a)
        counts = fused.kind_counts()
        assert counts["FusedConvReLU"] == 3
        assert "ReLU" not in counts

    def test_chained_conv_relu_pairs_all_fuse(self):
        b = GraphBuilder("chain")
        b.input("x", (1, 2, 5, 5))
        rng = np.random.Generator(np.random.Philox(8))
        src = "x"
        for i in range(3):
            b.add(f"conv{i}", OpKind.CONV2D, [src], {"stride": [1, 1], "padding": "SAME"},
                  weight=Tensor(rng.standard_normal((2, 2, 3, 3))), bias=Tensor(rng.standard_normal(2)))
            src = b.add(f"relu{i}", OpKind.RELU, [f"conv{i}"])
        graph = b.build([src])

        fused = FuseOps()(graph)
        assert fused.kind_counts() == {"FusedConvReLU": 3}
        assert [n.inputs for n in fused.nodes] == [("x",), ("conv0",), ("conv1",)]
        assert fused.outputs == ("conv2",)
        x = _input(9, (1, 2, 5, 5))
        assert _run(fused, x).bitwise_equal(_run(graph, x))

    @pytest.mark.parametrize("level", [OptLevel.DEFAULT, OptLevel.EXTENDED])
    def test_branchy_model_keeps_a_valid_graph(self, tinynet_b, level):
        optimized = apply_level(tinynet_b, level)
        ids = {n.id for n in optimized.nodes} | {"input"}
        assert all(src in ids for n in optimized.nodes for src in n.inputs)
        assert "mix_3x3_reduce_relu" not in ids
        if level == OptLevel.DEFAULT:
            assert optimized.node("mix_3x3").inputs == ("mix_3x3_reduce",)


class TestFoldScaleAxis:
    def test_scale_channels_folded_into_conv(self, tinynet_a):
        folded = FoldScaleAxis()(tinynet_a)
        assert "ScaleChannels" not in folded.kind_counts()
        assert provenance(folded, "conv2.weight") == ("conv2.weight", "folded")


class TestEliminateCommonSubexpr:
    def test_duplicate_branch_merged(self):
        b = GraphBuilder("dup")
        b.input("x", (1, 4))
        b.add("left", OpKind.RELU, ["x"])
        b.add("right", OpKind.RELU, ["x"])
        b.add("sum", OpKind.ADD, ["left", "right"])
        graph = b.build(["sum"])
        merged = EliminateCommonSubexpr()(graph)
        assert len(merged.nodes) == len(graph.nodes) - 1
        assert merged.node("sum").inputs == ("left", "left")
        x = _input(7, (1, 4))
        assert _run(merged, x).bitwise_equal(_run(graph, x))

    def test_different_parameters_not_merged(self, tinynet_c):
        merged = EliminateCommonSubexpr()(tinynet_c)
        assert len(merged.nodes) == len(tinynet_c.nodes)


class TestCanonicalizeOps:
    def test_batch_matmul_becomes_dense(self, tinynet_a):
        converted = convert(tinynet_a, Dialect.DENSE_AS_BATCH_MATMUL)
        canonical = CanonicalizeOps()(converted)
        assert "BatchMatmul" not in canonical.kind_counts()
        assert canonical.kind_counts()["Dense"] == 1
        dense = next(n for n in canonical.nodes if n.op == OpKind.DENSE)
        assert provenance(canonical, dense.params["weight"]) == ("fc.weight", "identity")
        x = _input(8)
        assert _run(canonical, x).bitwise_equal(_run(converted, x))

    def test_add_operands_sorted(self, tinynet_c):
        canonical = CanonicalizeOps()(tinynet_c)
        for node in canonical.nodes:
            if node.op == OpKind.ADD:
                assert list(node.inputs) == sorted(node.inputs)


class TestCombineParallelOps:
    def test_sibling_convs_combined(self, tinynet_b):
        combined = CombineParallelOps()(tinynet_b)
        assert combined.kind_counts()["Conv2D"] < tinynet_b.kind_counts()["Conv2D"]
        assert "Slice" in combined.kind_counts()
        x = _input(9)
        np.testing.assert_allclose(_run(combined, x).array, _run(tinynet_b, x).array, rtol=1e-5, atol=1e-6)

    def test_sibling_dense_become_batched_matmul(self, rng):
        b = GraphBuilder("heads")
        b.input("x", (2, 6))
        b.add("head_a", OpKind.DENSE, ["x"], weight=Tensor(rng.standard_normal((3, 6))), bias=Tensor(rng.standard_normal(3)))
        b.add("head_b", OpKind.DENSE, ["x"], weight=Tensor(rng.standard_normal((3, 6))), bias=Tensor(rng.standard_normal(3)))
        b.add("sum", OpKind.ADD, ["head_a", "head_b"])
        graph = b.build(["sum"])
        combined = CombineParallelOps()(graph)
        assert combined.kind_counts()["BatchMatmul"] == 1
        assert "Dense" not in combined.kind_counts()
        x = _input(10, (2, 6))
        np.testing.assert_allclose(_run(combined, x).array, _run(graph, x).array, rtol=1e-5, atol=1e-6)


def test_pass_output_is_deterministic(tmp_path, tinynet_b):
    for name in ("one", "two"):
        save_model(apply_level(tinynet_b, OptLevel.EXTENDED), tmp_path / name / "b.json")
    assert (tmp_path / "one" / "b.json").read_bytes() == (tmp_path / "two" / "b.json").read_bytes()
    assert sidecar_path(tmp_path / "one" / "b.json").read_bytes() == sidecar_path(tmp_path / "two" / "b.json").read_bytes()
