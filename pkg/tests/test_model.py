import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowgate import layers as L
from flowgate.model import (
    REPORTED_TOTALS,
    CheckpointError,
    ModelVariant,
    build_model,
    count_params,
    dumps_checkpoint,
    forward,
    gate_fusion,
    load_checkpoint,
    loads_checkpoint,
    param_table,
    save_checkpoint,
)
from flowgate.tensor import Tensor, gradient_check, no_grad

SMALL = dict(input_shape=(8, 16, 16), fusion_pool=2)


def last_flow_conv(model):
    return model.flow_channel[-1].units[-1][-1]


def random_batch(rng, shape=(8, 16, 16), b=1, dtype=np.float64):
    x = rng.uniform(0, 1, (b,) + shape + (5,))
    x[..., 3:] = rng.uniform(-1, 1, x[..., 3:].shape)
    return x.astype(dtype)


class TestParameterCounts:
    def test_block_counts(self):
        m = build_model("fusion-p3d")
        assert count_params(m, "rgb_channel") == 24_432
        assert count_params(m, "flow_channel") == 24_288
        assert count_params(m, "merging_block") == 203_264
        assert count_params(m, "head") == 33_282

    def test_variant_identities(self):
        n = {v: count_params(build_model(v)) for v in ModelVariant}
        assert n[ModelVariant.FUSION_P3D] - n[ModelVariant.RGB_ONLY] == count_params(build_model("fusion-p3d"), "flow_channel")
        assert n[ModelVariant.RGB_ONLY] - n[ModelVariant.OPT_ONLY] == 144
        assert n[ModelVariant.FUSION_C3D] > n[ModelVariant.FUSION_P3D]

    def test_reported_gap_is_constant(self):
        gaps = {v: count_params(build_model(v)) - REPORTED_TOTALS[v] for v in ModelVariant}
        assert set(gaps.values()) == {12_576}

    def test_table_rows(self):
        rows = dict(param_table(build_model("rgb-only")))
        assert "flow_channel" not in rows
        assert rows["total"] == rows["rgb_channel"] + rows["merging_block"] + rows["head"]
        assert rows["difference"] == rows["total"] - rows["reported_total"]

    def test_count_independent_of_geometry(self):
        assert count_params(build_model("fusion-p3d", **SMALL)) == count_params(build_model("fusion-p3d"))


class TestConstruction:
    def test_deterministic_init(self):
        a = build_model("fusion-p3d", seed=3)
        b = build_model("fusion-p3d", seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_seed_changes_weights(self):
        a, b = build_model("fusion-p3d", seed=0), build_model("fusion-p3d", seed=1)
        assert not np.array_equal(a.parameters()[0].data, b.parameters()[0].data)

    def test_he_uniform_bounds_and_zero_bias(self):
        m = build_model("fusion-p3d")
        for conv in (c for st in m.merging_block for c in st.convs()):
            assert np.abs(conv.weight.data).max() <= np.sqrt(6 / conv.fan_in)
            assert not conv.bias.data.any()

    def test_variant_aliases(self):
        assert ModelVariant.parse("FUSION_P3D") is ModelVariant.FUSION_P3D
        with pytest.raises(ValueError):
            ModelVariant.parse("fusion-xyz")


class TestForward:
    def test_shapes_small(self):
        rng = np.random.default_rng(0)
        m = build_model("fusion-p3d", **SMALL)
        trace = {}
        with no_grad():
            logits = forward(m, random_batch(rng, b=2, dtype=np.float32), trace)
        assert logits.shape == (2, 2)
        assert trace["rgb_channel"].shape == (2, 8, 4, 4, 32)
        assert trace["flow_channel"].shape == (2, 8, 4, 4, 32)
        assert trace["fusion"].shape == (2, 4, 4, 4, 32)
        assert trace["merging_block"].shape == (2, 1, 1, 1, 128)

    def test_rejects_wrong_shape(self):
        m = build_model("fusion-p3d", **SMALL)
        with pytest.raises(ValueError, match="expected input shape"):
            forward(m, np.zeros((1, 8, 16, 16, 3), dtype=np.float32))

    def test_gate_range(self):
        m = build_model("fusion-p3d", **SMALL)
        trace = {}
        with no_grad():
            forward(m, random_batch(np.random.default_rng(1), dtype=np.float32), trace)
        g = trace["flow_channel"]
        assert g.min() >= 0 and g.max() <= 1

    def test_zero_gate_blinds_the_rgb_branch(self):
        m = build_model("fusion-p3d", **SMALL)
        last_flow_conv(m).bias.data[:] = -1e4
        rng = np.random.default_rng(2)
        a, b = random_batch(rng, dtype=np.float32), random_batch(rng, dtype=np.float32)
        b[..., 3:] = a[..., 3:]
        ta, tb = {}, {}
        with no_grad():
            la, lb = forward(m, a, ta), forward(m, b, tb)
        assert not ta["fusion"].any()
        np.testing.assert_array_equal(la.data, lb.data)

    def test_open_gate_is_plain_temporal_pool(self):
        m = build_model("fusion-p3d", input_shape=(16, 16, 16), fusion_pool=4)
        last_flow_conv(m).bias.data[:] = 1e4
        tr = {}
        with no_grad():
            forward(m, random_batch(np.random.default_rng(3), (16, 16, 16), dtype=np.float32), tr)
        rgb = tr["rgb_channel"][0]
        brute = np.stack([rgb[k * 4:(k + 1) * 4].max(axis=0) for k in range(4)])
        np.testing.assert_array_equal(tr["fusion"][0], brute)

    def test_single_branch_variants_run(self):
        rng = np.random.default_rng(4)
        for v in ("rgb-only", "opt-only", "fusion-c3d"):
            with no_grad():
                assert forward(build_model(v, **SMALL), random_batch(rng, dtype=np.float32)).shape == (1, 2)

    def test_end_to_end_gradient(self):
        m = build_model("fusion-p3d", seed=5, **SMALL).astype(np.float64)
        rng = np.random.default_rng(5)
        for p in m.parameters():  # nonzero biases keep units away from ties
            if p.ndim == 1:
                p.data = rng.uniform(-0.1, 0.1, p.shape)
        x = Tensor(random_batch(rng), dtype=np.float64)
        f = lambda: L.softmax_cross_entropy(forward(m, x), [1])[0]
        err = gradient_check(f, m.parameters(), h=1e-6, max_coords=3, rng=np.random.default_rng(0),
                             avoid_kinks=True)
        assert err < 1e-3


class TestGateFusion:
    def test_all_ones_gate(self):
        rgb = Tensor(np.arange(16, dtype=np.float64).reshape(8, 1, 1, 2))
        out = gate_fusion(rgb, Tensor(np.ones((8, 1, 1, 2))), pool=8)
        np.testing.assert_array_equal(out.data.reshape(-1), [14, 15])

    def test_zero_gate(self):
        out = gate_fusion(Tensor(np.ones((8, 2, 2, 1))), Tensor(np.zeros((8, 2, 2, 1))), pool=4)
        assert out.shape == (2, 2, 2, 1) and not out.data.any()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gate_fusion(Tensor(np.ones((8, 1, 1, 2))), Tensor(np.ones((8, 1, 1, 1))))

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_gate(self, seed):
        rng = np.random.default_rng(seed)
        rgb = Tensor(rng.uniform(0, 1, (8, 2, 2, 3)), dtype=np.float64)
        g1 = rng.uniform(0, 1, rgb.shape)
        g2 = np.minimum(1, g1 + rng.uniform(0, 0.5, rgb.shape))
        lo = gate_fusion(rgb, Tensor(g1, dtype=np.float64), 4).data
        hi = gate_fusion(rgb, Tensor(g2, dtype=np.float64), 4).data
        assert np.all(hi >= lo)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = build_model("fusion-p3d", seed=7, **SMALL)
        path = tmp_path / "m.fgn"
        save_checkpoint(m, path)
        back = load_checkpoint(path, **SMALL)
        assert back.variant is ModelVariant.FUSION_P3D
        for a, b in zip(m.parameters(), back.parameters()):
            assert a.name == b.name
            np.testing.assert_array_equal(a.data, b.data)
        x = random_batch(np.random.default_rng(0), dtype=np.float32)
        with no_grad():
            np.testing.assert_array_equal(forward(m, x).data, forward(back, x).data)

    def test_layout(self):
        blob = dumps_checkpoint(build_model("rgb-only"))
        assert blob[:4] == b"FGN1"
        variant, tensors = loads_checkpoint(blob)
        assert variant is ModelVariant.RGB_ONLY
        assert sum(a.size for a in tensors.values()) == count_params(build_model("rgb-only"))

    def test_variant_mismatch(self, tmp_path):
        path = tmp_path / "m.fgn"
        save_checkpoint(build_model("rgb-only"), path)
        with pytest.raises(CheckpointError, match="variant"):
            load_checkpoint(path, variant="fusion-p3d")

    def test_truncated(self):
        blob = dumps_checkpoint(build_model("opt-only"))
        with pytest.raises(CheckpointError):
            loads_checkpoint(blob[:-3])
