"""Dialect conversion, noise injection, repair and variant enumeration"""
import numpy as np
import pytest

from deltadiff.backends import get_backend
from deltadiff.config import experiment_config_from_dict
from deltadiff.errors import ConfigError, InvalidGraph, ParamMapMismatch, UnsupportedOp
from deltadiff.ir import save_model
from deltadiff.models import Backend, Dialect, NoiseSpec, OptLevel, VariantSpec
from deltadiff.optimizer import apply_level
from deltadiff.services.variants import (
    align_parameters, build_specs, convert, enumerate_variants, inject_noise, load_model_ref,
    materialize, noise_settings, repair_parameters,
)
from deltadiff.tensor import Tensor


def _x(seed=11):
    return Tensor(np.random.Generator(np.random.Philox(seed)).uniform(-1, 1, (1, 3, 16, 16)))


def _out(graph, x):
    return get_backend(graph).execute(x)


def _deltas(a, b):
    return np.concatenate([(b.params[n].flat() - a.params[n].flat()) for n in sorted(a.params)])


class TestConvert:
    def test_native_is_identity(self, tinynet_a):
        assert convert(tinynet_a, Dialect.NATIVE) is tinynet_a

    def test_dense_as_batch_matmul(self, tinynet_a):
        converted = convert(tinynet_a, Dialect.DENSE_AS_BATCH_MATMUL)
        counts = converted.kind_counts()
        assert "Dense" not in counts
        assert counts["BatchMatmul"] == 1
        assert converted.metadata.dialect == Dialect.DENSE_AS_BATCH_MATMUL
        x = _x()
        np.testing.assert_allclose(_out(converted, x).array, _out(tinynet_a, x).array, atol=1e-6)

    def test_pre_fused_batch_norm(self, tinynet_c):
        converted = convert(tinynet_c, Dialect.PRE_FUSED_BATCH_NORM)
        assert "BatchNorm" not in converted.kind_counts()
        x = _x()
        np.testing.assert_allclose(_out(converted, x).array, _out(tinynet_c, x).array, rtol=1e-5, atol=1e-6)

    def test_concat_is_inexpressible_as_batch_matmul(self, tinynet_b):
        with pytest.raises(UnsupportedOp) as e:
            convert(tinynet_b, Dialect.DENSE_AS_BATCH_MATMUL)
        assert e.value.kind == "Concat"

    def test_only_native_graphs_convert(self, tinynet_a):
        converted = convert(tinynet_a, Dialect.PRE_FUSED_BATCH_NORM)
        with pytest.raises(InvalidGraph):
            convert(converted, Dialect.DENSE_AS_BATCH_MATMUL)


class TestInjectNoise:
    def test_statistics(self, tinynet_a):
        noisy = inject_noise(tinynet_a, 3.75e-4, clamp=0.011, seed=3)
        deltas = np.abs(_deltas(tinynet_a, noisy).astype(np.float64))
        expected_mean = 3.75e-4 * np.sqrt(2 / np.pi)
        assert abs(deltas.mean() - expected_mean) < 0.1 * expected_mean
        assert deltas.max() <= 0.011 + 1e-6

    def test_clamp_bounds_every_delta(self, tinynet_a):
        noisy = inject_noise(tinynet_a, 1e-2, clamp=1e-3, seed=1)
        assert np.abs(_deltas(tinynet_a, noisy)).max() <= 1e-3 + 1e-6

    def test_deterministic_per_seed(self, tinynet_a):
        one = inject_noise(tinynet_a, 1e-3, seed=5)
        two = inject_noise(tinynet_a, 1e-3, seed=5)
        other = inject_noise(tinynet_a, 1e-3, seed=6)
        assert all(one.params[n].bitwise_equal(two.params[n]) for n in one.params)
        assert not all(one.params[n].bitwise_equal(other.params[n]) for n in one.params)

    def test_zero_sigma_is_identity(self, tinynet_a):
        clean = inject_noise(tinynet_a, 0.0, seed=9)
        assert all(clean.params[n].bitwise_equal(tinynet_a.params[n]) for n in tinynet_a.params)

    def test_structure_untouched(self, tinynet_c):
        noisy = inject_noise(tinynet_c, 1e-3)
        assert noisy.nodes == tinynet_c.nodes
        assert noisy.metadata == tinynet_c.metadata

    def test_overrides_by_node_and_name(self, tinynet_a):
        noisy = inject_noise(tinynet_a, 1e-3, overrides={"fc": 0.0, "conv1.bias": 0.0})
        assert noisy.params["fc.weight"].bitwise_equal(tinynet_a.params["fc.weight"])
        assert noisy.params["conv1.bias"].bitwise_equal(tinynet_a.params["conv1.bias"])
        assert not noisy.params["conv1.weight"].bitwise_equal(tinynet_a.params["conv1.weight"])


class TestRepair:
    def test_repair_restores_source_values(self, tinynet_a):
        noisy = inject_noise(tinynet_a, 1e-3, seed=2)
        repaired = repair_parameters(noisy, tinynet_a)
        assert all(repaired.params[n].bitwise_equal(tinynet_a.params[n]) for n in tinynet_a.params)
        x = _x()
        assert _out(repaired, x).bitwise_equal(_out(tinynet_a, x))

    def test_repair_through_a_dialect_conversion(self, tinynet_a):
        converted = convert(tinynet_a, Dialect.DENSE_AS_BATCH_MATMUL)
        repaired = repair_parameters(inject_noise(converted, 1e-3, seed=2), tinynet_a)
        assert all(repaired.params[n].bitwise_equal(converted.params[n]) for n in converted.params)

    def test_align_pairs_transformed_weights(self, tinynet_a):
        converted = convert(tinynet_a, Dialect.DENSE_AS_BATCH_MATMUL)
        pairs = {name: (expected, value) for name, expected, value in align_parameters(converted, tinynet_a)}
        assert len(pairs) == len(converted.params)
        for expected, value in pairs.values():
            assert expected.bitwise_equal(value)

    def test_unmatched_parameter(self, tinynet_a):
        params = dict(tinynet_a.params)
        del params["fc.weight"]
        with pytest.raises(ParamMapMismatch):
            align_parameters(tinynet_a, tinynet_a.with_params(params))


class TestEnumeration:
    def test_noise_settings_skip_zero_sigma(self):
        config = experiment_config_from_dict({"models": ["tinynet-A"], "noise": {"sigma": [0, 1e-4]}})
        settings = noise_settings(config)
        assert settings[0] is None
        assert [s.sigma for s in settings[1:]] == [1e-4]

    def test_duplicate_variant_ids(self):
        config = experiment_config_from_dict({"models": ["tinynet-A"], "noise": {"sigma": [1e-4, 1e-4]}})
        with pytest.raises(ConfigError):
            build_specs(config, ["tinynet-A"])

    def test_variant_ids(self):
        config = experiment_config_from_dict({
            "models": ["tinynet-A"],
            "noise": {"sigma": 1e-4, "seed": 4},
            "opt": {"levels": ["basic", "extended"]},
            "backends": ["reference", "optimized_layout"],
        })
        ids = [s.variant_id for s in build_specs(config, ["tinynet-A"])]
        assert len(ids) == 8
        assert ids[0] == "tinynet-A.native.clean.basic.reference"
        assert "tinynet-A.native.noise0.0001s4.extended.optimized_layout" in ids

    def test_failed_conversion_is_recorded(self):
        config = experiment_config_from_dict({
            "models": ["tinynet-A", "tinynet-B"],
            "dialects": ["native", "dense_as_batch_matmul"],
        })
        result = enumerate_variants(config)
        assert len(result.ids()) == 4
        assert len(result.variants) == 3
        [failed] = result.failed
        assert failed.variant_id == "tinynet-B.dense_as_batch_matmul.clean.basic.reference"
        assert failed.error == "UnsupportedOp"

    def test_enumeration_is_deterministic(self, tinynet_a):
        config = experiment_config_from_dict({"models": ["tinynet-A"], "noise": {"sigma": 1e-4}})
        one = enumerate_variants(config, {"tinynet-A": tinynet_a})
        two = enumerate_variants(config, {"tinynet-A": tinynet_a})
        assert one.ids() == two.ids()
        for (_, a), (_, b) in zip(one.variants, two.variants):
            assert all(a.params[n].bitwise_equal(b.params[n]) for n in a.params)

    def test_materialize_applies_every_axis(self, tinynet_a):
        noise = NoiseSpec(sigma=1e-4, seed=1)
        spec = VariantSpec(
            variant_id=VariantSpec.make_id("tinynet-A", Dialect.NATIVE, noise, OptLevel.DEFAULT, Backend.REFERENCE),
            model="tinynet-A",
            noise=noise,
            opt_level=OptLevel.DEFAULT,
        )
        graph = materialize(spec, tinynet_a)
        expected = apply_level(inject_noise(tinynet_a, 1e-4, seed=1), OptLevel.DEFAULT)
        assert all(graph.params[n].bitwise_equal(expected.params[n]) for n in expected.params)
        assert graph.metadata.passes == expected.metadata.passes


def test_load_model_ref(tmp_path, tinynet_c):
    assert load_model_ref("tinynet-C").metadata.name == "tinynet-C"
    save_model(tinynet_c, tmp_path / "c.json")
    assert load_model_ref(tmp_path / "c.json").nodes == tinynet_c.nodes
