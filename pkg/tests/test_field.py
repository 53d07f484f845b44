import numpy as np
import pytest

from scribblefield import nn
from scribblefield.encoding import HashGridConfig
from scribblefield.field import FieldConfig, SemanticField

TINY_GRID = HashGridConfig(num_levels=3, base_resolution=4, growth_factor=1.8, table_size=128)


def tiny_field(mode="hybrid", num_classes=3, feature_dim=8, seed=0, dtype=np.float64):
    cfg = FieldConfig(
        encoder_mode=mode,
        num_classes=num_classes,
        feature_dim=feature_dim,
        trunk_width=16,
        trunk_depth=2,
        grid=TINY_GRID,
        seed=seed,
    )
    f = SemanticField(cfg, dtype=dtype)
    if f.encoder.grid is not None:
        rng = np.random.default_rng(seed + 100)
        for t in f.encoder.grid.tables:
            t[...] = rng.uniform(-0.5, 0.5, size=t.shape)
    return f


def random_batch(n=6, seed=1):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.9, 0.9, size=(n, 3))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return pts, dirs


class TestQuery:
    def test_output_ranges(self):
        f = tiny_field()
        pts, dirs = random_batch(32)
        out, _ = f.query(pts, dirs)
        assert np.all(out.sigma >= 0)
        assert np.all((out.rgb >= 0) & (out.rgb <= 1))
        assert np.isfinite(out.logits).all() and np.isfinite(out.features).all()

    def test_semantics_and_features_ignore_view_direction(self):
        f = tiny_field()
        pts, dirs_a = random_batch(8, seed=2)
        _, dirs_b = random_batch(8, seed=3)
        out_a, _ = f.query(pts, dirs_a)
        out_b, _ = f.query(pts, dirs_b)
        np.testing.assert_array_equal(out_a.features, out_b.features)
        np.testing.assert_array_equal(out_a.logits, out_b.logits)
        assert not np.array_equal(out_a.rgb, out_b.rgb)

    def test_feature_dim_default_is_64(self):
        f = SemanticField(FieldConfig(num_classes=2, grid=TINY_GRID))
        pts, dirs = random_batch(2)
        out, _ = f.query(pts, dirs)
        assert out.features.shape == (2, 64)

    def test_nonfinite_inputs_rejected(self):
        f = tiny_field()
        pts, dirs = random_batch(2)
        pts[0, 0] = np.nan
        with pytest.raises(ValueError):
            f.query(pts, dirs)

    def test_encoder_mode_changes_only_encoder_dim(self):
        for mode in ("freq", "hashgrid", "hybrid"):
            f = tiny_field(mode)
            pts, dirs = random_batch(4)
            out, _ = f.query(pts, dirs)
            assert out.rgb.shape == (4, 3)
            assert out.logits.shape == (4, 3)
            assert f.trunk.in_dim == f.encoder.output_dim


class TestQueryBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        f = tiny_field()
        pts, dirs = random_batch(5)
        out, cache = f.query(pts, dirs)
        grads = f.query_backward(
            cache,
            d_sigma=np.zeros_like(out.sigma),
            d_rgb=np.zeros_like(out.rgb),
            d_features=np.zeros_like(out.features),
            d_logits=np.zeros_like(out.logits),
        )
        assert set(grads) == set(f.parameters())
        for g in grads.values():
            assert np.all(g == 0)

    def test_semantic_upstream_does_not_touch_color_head(self):
        f = tiny_field()
        pts, dirs = random_batch(5)
        out, cache = f.query(pts, dirs)
        grads = f.query_backward(cache, d_logits=np.ones_like(out.logits))
        for name, g in grads.items():
            if name.startswith("color"):
                assert np.all(g == 0)
            if name.startswith("semantic") or name.startswith("trunk"):
                assert np.any(g != 0)

    @pytest.mark.parametrize("mode", ["freq", "hashgrid", "hybrid"])
    def test_full_gradient_check(self, mode):
        f = tiny_field(mode, seed=4)
        pts, dirs = random_batch(4, seed=5)
        rng = np.random.default_rng(6)
        up_sigma = rng.normal(size=4)
        up_rgb = rng.normal(size=(4, 3))
        up_feat = rng.normal(size=(4, 8))
        up_logit = rng.normal(size=(4, 3))

        def loss_fn(_):
            out, _c = f.query(pts, dirs)
            return float(
                np.sum(out.sigma * up_sigma)
                + np.sum(out.rgb * up_rgb)
                + np.sum(out.features * up_feat)
                + np.sum(out.logits * up_logit)
            )

        out, cache = f.query(pts, dirs)
        analytic = f.query_backward(
            cache, d_sigma=up_sigma, d_rgb=up_rgb, d_features=up_feat, d_logits=up_logit
        )
        params = f.parameters()
        # probe grid tables only where this batch touched them
        indices = {}
        if f.encoder.grid is not None:
            for i, idx in enumerate(cache.encoder_cache.indices):
                rows = np.unique(idx)
                indices[f"encoder.level{i}"] = np.concatenate([rows * 2, rows * 2 + 1])
        numeric = nn.finite_difference_grad(loss_fn, params, h=1e-5, indices=indices)
        errs = nn.grad_relative_error(analytic, numeric, indices=indices or None)
        assert max(errs.values()) <= 1e-4, errs


class TestAddClass:
    def test_add_class_grows_logits_and_keeps_old_values(self):
        f = tiny_field(num_classes=2)
        pts, dirs = random_batch(3)
        before, _ = f.query(pts, dirs)
        new_id = f.add_class()
        assert new_id == 2 and f.num_classes == 3
        after, _ = f.query(pts, dirs)
        np.testing.assert_array_equal(after.logits[:, :2], before.logits)
        np.testing.assert_array_equal(after.logits[:, 2], 0.0)
