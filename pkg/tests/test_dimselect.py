"""Dimension ranking, schema application, and selection diagnostics."""

import numpy as np
import pytest

from fourier_kv.cache import PartitionParams
from fourier_kv.dimselect import (
    CompressionSchema,
    apply_schema,
    build_selection_report,
    rank_dimensions,
    read_selection_manifest,
    schema_variants,
    selection_histogram,
    temporal_std,
    write_selection_manifest,
)
from fourier_kv.spectral import build_basis
from fourier_kv.traceio import KVTrace, gen_synthetic


def calibration_trace(rng, *, layers=1, kv_heads=1, head_dim=4, init=4, local=8, period=32,
                      builder=None):
    """Trace whose middle region spans exactly one period."""
    seq_len = init + period + local
    shape = (layers, kv_heads, seq_len, head_dim)
    data = rng.standard_normal(shape).astype(np.float32)
    if builder is not None:
        data = builder(np.arange(seq_len)).astype(np.float32)
    return KVTrace(keys=data, values=data.copy())


class TestRankDimensions:
    def test_constant_dimension_ranks_first(self):
        rng = np.random.default_rng(0)
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)

        def builder(t):
            out = rng.standard_normal((1, 1, t.size, 4))
            out[0, 0, :, 2] = 1.25  # constant channel
            return out

        trace = calibration_trace(rng, builder=builder)
        ranking = rank_dimensions(trace, part, build_basis(4, 32))
        assert ranking.k_mse[0, 0, 2] < 1e-8
        assert np.argmin(ranking.k_mse[0, 0]) == 2

    def test_tone_ranks_above_noise(self):
        rng = np.random.default_rng(1)
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)

        def builder(t):
            out = np.empty((1, 1, t.size, 4))
            out[0, 0, :, 0] = rng.standard_normal(t.size)          # white noise
            out[0, 0, :, 1] = np.cos(2 * np.pi * 2 * t / 32)       # in-band tone
            out[0, 0, :, 2] = rng.standard_normal(t.size)
            out[0, 0, :, 3] = rng.standard_normal(t.size)
            return out

        trace = calibration_trace(rng, builder=builder)
        ranking = rank_dimensions(trace, part, build_basis(4, 32))
        mse = ranking.k_mse[0, 0]
        assert mse[1] < 1e-8
        assert mse[1] < mse[0] and mse[1] < mse[2] and mse[1] < mse[3]

    def test_too_short_trace_rejected(self):
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)
        trace = gen_synthetic("constant", layers=1, kv_heads=1, head_dim=4, seq_len=12)
        with pytest.raises(ValueError):
            rank_dimensions(trace, part, build_basis(4, 32))


class TestApplySchema:
    def test_ratio_zero_keeps_everything(self):
        part = PartitionParams(init_len=4, local_len=8, period=64, orders=4)
        schema = CompressionSchema(ratios=((0.0, 0.0),))
        layout = apply_schema(None, schema, layers=1, kv_heads=2, head_dim=8, partition=part)
        hd = layout.dims[0][0]
        assert hd.k_compressed.size == 0
        assert hd.v_compressed.size == 0
        assert hd.k_kept.size == 8

    def test_half_ratio_on_128(self):
        part = PartitionParams(init_len=4, local_len=8, period=64, orders=4)
        schema = CompressionSchema(ratios=((0.5, 0.5),))
        layout = apply_schema(None, schema, layers=1, kv_heads=1, head_dim=128, partition=part)
        assert layout.dims[0][0].k_compressed.size == 64

    def test_counts_follow_round_half_even(self):
        part = PartitionParams(init_len=0, local_len=1, period=8, orders=1)
        # 0.25 * 10 = 2.5 -> 2 under round-half-even; 0.35 * 10 = 3.5 -> 4
        schema = CompressionSchema(ratios=((0.25, 0.35),))
        layout = apply_schema(None, schema, layers=1, kv_heads=1, head_dim=10, partition=part)
        assert layout.dims[0][0].k_compressed.size == 2
        assert layout.dims[0][0].v_compressed.size == 4

    def test_inverted_pyramid_preset_bands(self):
        schema = CompressionSchema.inverted_pyramid(32)
        assert schema.ratios[0] == (0.90, 0.95)
        assert schema.ratios[3] == (0.90, 0.95)
        assert schema.ratios[4] == (0.80, 0.80)
        assert schema.ratios[23] == (0.80, 0.80)
        assert schema.ratios[24] == (0.50, 0.70)
        assert schema.ratios[31] == (0.50, 0.70)
        assert abs(schema.aggregate_fraction() - 0.765625) < 1e-12

    def test_lowest_mse_dimensions_chosen(self):
        rng = np.random.default_rng(2)
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)

        def builder(t):
            out = np.empty((1, 1, t.size, 4))
            for d in range(4):
                # reconstruction error rises with the dimension index
                out[0, 0, :, d] = d * rng.standard_normal(t.size)
            return out

        trace = calibration_trace(rng, builder=builder)
        ranking = rank_dimensions(trace, part, build_basis(4, 32))
        layout = apply_schema(ranking, CompressionSchema(ratios=((0.5, 0.5),)), partition=part)
        np.testing.assert_array_equal(layout.dims[0][0].k_compressed, [0, 1])

    def test_equal_mse_ties_break_by_index(self):
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)
        trace = gen_synthetic("constant", layers=1, kv_heads=1, head_dim=6, seq_len=44)
        ranking = rank_dimensions(trace, part, build_basis(4, 32))
        layout = apply_schema(ranking, CompressionSchema(ratios=((0.5, 0.5),)), partition=part)
        np.testing.assert_array_equal(layout.dims[0][0].k_compressed, [0, 1, 2])

    def test_monotone_in_ratio(self):
        rng = np.random.default_rng(3)
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)
        trace = calibration_trace(rng, head_dim=8)
        ranking = rank_dimensions(trace, part, build_basis(4, 32))
        previous = set()
        for ratio in (0.25, 0.5, 0.75, 1.0):
            layout = apply_schema(
                ranking, CompressionSchema(ratios=((ratio, ratio),)), partition=part
            )
            chosen = set(layout.dims[0][0].k_compressed.tolist())
            assert previous <= chosen
            previous = chosen

    def test_ratio_bounds_validated(self):
        with pytest.raises(ValueError):
            CompressionSchema(ratios=((1.2, 0.5),))


class TestSchemaVariants:
    def test_kv_inverted_swaps(self):
        base = CompressionSchema.inverted_pyramid(32)
        variants = schema_variants(base)
        assert variants["kv_inverted"].ratios[0] == (0.95, 0.90)
        assert variants["kv_inverted"].ratios[31] == (0.70, 0.50)

    def test_layer_inverted_reverses(self):
        base = CompressionSchema.inverted_pyramid(32)
        variants = schema_variants(base)
        assert variants["layer_inverted"].ratios[0] == (0.50, 0.70)
        assert variants["layer_inverted"].ratios[31] == (0.90, 0.95)

    def test_uniform_matches_aggregate(self):
        base = CompressionSchema.inverted_pyramid(32)
        uniform = schema_variants(base)["uniform"]
        for k_ratio, v_ratio in uniform.ratios:
            assert abs(k_ratio - 0.765625) < 1e-12
            assert k_ratio == v_ratio

    def test_variants_preserve_aggregate_within_half_point(self):
        base = CompressionSchema.inverted_pyramid(32)
        target = base.aggregate_fraction()
        for variant in schema_variants(base).values():
            assert abs(variant.aggregate_fraction() - target) < 0.005


class TestTemporalStd:
    def test_constant_trace_all_zero(self):
        trace = gen_synthetic("constant", layers=2, kv_heads=2, head_dim=4, seq_len=16)
        np.testing.assert_array_equal(temporal_std(trace), np.zeros((2, 2, 4)))

    def test_alternating_signs_give_unit_std(self):
        data = np.ones((1, 1, 8, 2), dtype=np.float32)
        data[0, 0, 1::2] = -1.0
        trace = KVTrace(keys=data, values=data.copy())
        np.testing.assert_allclose(temporal_std(trace), np.ones((1, 2, 2)))

    def test_scaling_k_doubles_k_std(self):
        rng = np.random.default_rng(4)
        base = rng.standard_normal((1, 2, 64, 4)).astype(np.float32)
        trace = KVTrace(keys=2.0 * base, values=base)
        curves = temporal_std(trace)
        np.testing.assert_allclose(curves[:, 0], 2.0 * curves[:, 1], rtol=1e-6)


class TestSelectionHistogram:
    def make_report(self, ratio, head_dim=128):
        part = PartitionParams(init_len=0, local_len=1, period=16, orders=2)
        schema = CompressionSchema(ratios=((ratio, ratio),))
        layout = apply_schema(None, schema, layers=1, kv_heads=2, head_dim=head_dim,
                              partition=part)
        from fourier_kv.dimselect import SelectionReport

        return SelectionReport(layout=layout, schema=schema)

    def test_all_compressed_fills_groups(self):
        hist = selection_histogram(self.make_report(1.0))
        assert hist.shape == (1, 2, 8)
        np.testing.assert_array_equal(hist, np.full((1, 2, 8), 16.0))

    def test_none_compressed_is_zero(self):
        hist = selection_histogram(self.make_report(0.0))
        np.testing.assert_array_equal(hist, np.zeros((1, 2, 8)))

    def test_rising_mse_fills_low_groups(self):
        rng = np.random.default_rng(5)
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)

        def builder(t):
            # one shared noise draw scaled per dimension keeps the realized
            # MSE strictly rising with the index
            noise = rng.standard_normal(t.size)
            out = np.empty((1, 1, t.size, 128))
            for d in range(128):
                out[0, 0, :, d] = (d + 1) * noise
            return out

        trace = calibration_trace(rng, head_dim=128, builder=builder)
        report = build_selection_report(
            trace, CompressionSchema(ratios=((0.5, 0.5),)),
            PartitionParams(init_len=4, local_len=8, period=32, orders=4),
            build_basis(4, 32),
        )
        hist = selection_histogram(report)
        np.testing.assert_array_equal(hist[0, 0, :4], np.full(4, 16.0))
        np.testing.assert_array_equal(hist[0, 0, 4:], np.zeros(4))


class TestManifest:
    def test_round_trip_and_determinism(self, tmp_path):
        rng = np.random.default_rng(6)
        part = PartitionParams(init_len=4, local_len=8, period=32, orders=4)
        trace = calibration_trace(rng, layers=2, kv_heads=2, head_dim=8)
        schema = CompressionSchema.inverted_pyramid(2)
        basis = build_basis(4, 32)
        report = build_selection_report(trace, schema, part, basis)
        path_a, path_b = tmp_path / "a.json", tmp_path / "b.json"
        write_selection_manifest(report, path_a)
        write_selection_manifest(
            build_selection_report(trace, schema, part, basis), path_b
        )
        assert path_a.read_bytes() == path_b.read_bytes()

        layout, schema_back = read_selection_manifest(path_a)
        assert schema_back.ratios == schema.ratios
        assert layout.partition == part
        for layer in range(2):
            for head in range(2):
                np.testing.assert_array_equal(
                    layout.dims[layer][head].k_compressed,
                    report.layout.dims[layer][head].k_compressed,
                )

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"hello": 1}')
        with pytest.raises(ValueError):
            read_selection_manifest(path)
