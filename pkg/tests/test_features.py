import numpy as np
import pytest

from scribblefield import nn
from scribblefield.features import (
    FeatureMap,
    FeatureMapFormatError,
    autoencoder_loss,
    encode_targets,
    fit_pca,
    load_feature_map,
    lookup_feature,
    make_class_embeddings,
    pca_rgb,
    save_feature_map,
    synth_features,
    train_autoencoder,
)


class TestFmapFile:
    def test_round_trip_is_bit_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        fm = FeatureMap(rng.normal(size=(5, 7, 3)).astype(np.float32))
        p = tmp_path / "a.fmap"
        save_feature_map(p, fm)
        back = load_feature_map(p)
        assert back.data.tobytes() == fm.data.tobytes()

    def test_truncated_file_is_rejected(self, tmp_path):
        p = tmp_path / "t.fmap"
        fm = FeatureMap(np.zeros((2, 2, 2), dtype=np.float32))
        save_feature_map(p, fm)
        raw = p.read_bytes()
        p.write_bytes(raw[:-5])
        with pytest.raises(FeatureMapFormatError, match="byte"):
            load_feature_map(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "b.fmap"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FeatureMapFormatError, match="magic"):
            load_feature_map(p)

    def test_payload_size_matches_header(self, tmp_path):
        p = tmp_path / "c.fmap"
        save_feature_map(p, np.zeros((2, 3, 4), dtype=np.float32))
        raw = p.read_bytes()
        assert len(raw) - 20 == 2 * 3 * 4 * 4  # 96 payload bytes


def rank_limited_samples(n=4096, ambient=384, rank=32, basis_seed=0, coeff_seed=1):
    basis = np.random.default_rng(basis_seed).normal(size=(rank, ambient)) / np.sqrt(rank)
    coeffs = np.random.default_rng(coeff_seed).normal(size=(n, rank))
    return (coeffs @ basis).astype(np.float32)


class TestAutoencoder:
    def test_single_repeated_vector_reconstructs(self):
        rng = np.random.default_rng(1)
        v = rng.normal(size=96).astype(np.float32)
        samples = np.tile(v, (256, 1))
        ae = train_autoencoder(samples, latent_dim=64, sparsity_weight=0.0,
                               iterations=600, rng=np.random.default_rng(2))
        recon = ae.decode(ae.encode(v[None]))[0]
        rel = np.linalg.norm(recon - v) / np.linalg.norm(v)
        assert rel < 0.02

    def test_low_rank_subspace_is_nearly_lossless(self):
        samples = rank_limited_samples()
        ae = train_autoencoder(samples, latent_dim=64, sparsity_weight=0.0,
                               iterations=1500, rng=np.random.default_rng(3))
        test = rank_limited_samples(n=512, coeff_seed=9)
        recon = ae.decode(ae.encode(test))
        rel = np.linalg.norm(recon - test) / np.linalg.norm(test)
        assert rel < 0.05

    def test_sparsity_weight_shrinks_latents(self):
        samples = rank_limited_samples(n=2048)
        dense = train_autoencoder(samples, latent_dim=64, sparsity_weight=0.0,
                                  iterations=400, rng=np.random.default_rng(4))
        sparse = train_autoencoder(samples, latent_dim=64, sparsity_weight=10.0,
                                   iterations=400, rng=np.random.default_rng(4))
        test = samples[:512]
        assert np.mean(np.abs(sparse.encode(test))) < np.mean(np.abs(dense.encode(test)))

    def test_reduction_assumed(self):
        with pytest.raises(nn.ConfigurationError):
            train_autoencoder(np.zeros((10, 16), dtype=np.float32), latent_dim=64,
                              iterations=1)


class TestEncodeTargets:
    def _tiny_ae(self, m=8, d=4):
        rng = np.random.default_rng(5)
        enc = nn.Mlp.create([m, 16, d], rng)
        dec = nn.Mlp.create([d, 16, m], rng)
        from scribblefield.features import FeatureAutoencoder

        return FeatureAutoencoder(enc, dec)

    def test_output_shape_and_determinism(self):
        ae = self._tiny_ae()
        fm = FeatureMap(np.random.default_rng(6).normal(size=(4, 5, 8)).astype(np.float32))
        a = encode_targets(fm, ae)
        b = encode_targets(fm, ae)
        assert a.shape == (4, 5, 4)
        np.testing.assert_array_equal(a, b)

    def test_zero_map_with_zero_bias_encoder_gives_zero(self):
        ae = self._tiny_ae()
        for layer in ae.encoder.layers:
            layer.bias[...] = 0.0
        fm = FeatureMap(np.zeros((3, 3, 8), dtype=np.float32))
        assert np.all(encode_targets(fm, ae) == 0)

    def test_never_touches_decoder(self):
        ae = self._tiny_ae()
        for layer in ae.decoder.layers:
            layer.weights[...] = np.nan  # poison: any decoder use would propagate
        fm = FeatureMap(np.random.default_rng(7).normal(size=(3, 3, 8)).astype(np.float32))
        assert np.isfinite(encode_targets(fm, ae)).all()

    def test_dim_mismatch_rejected(self):
        ae = self._tiny_ae()
        with pytest.raises(nn.ConfigurationError):
            encode_targets(FeatureMap(np.zeros((2, 2, 5), dtype=np.float32)), ae)


class TestLookup:
    def test_identity_when_sizes_match(self):
        m = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        assert lookup_feature(m, (2, 3), (4, 4))[0] == m[3, 2, 0]

    def test_half_resolution_floors(self):
        m = np.random.default_rng(8).normal(size=(8, 8, 2)).astype(np.float32)
        v = lookup_feature(m, (3, 5), (16, 16))
        np.testing.assert_array_equal(v, m[2, 1])

    def test_clamps_at_border(self):
        m = np.random.default_rng(9).normal(size=(3, 3, 1)).astype(np.float32)
        v = lookup_feature(m, (15, 15), (16, 16))
        np.testing.assert_array_equal(v, m[2, 2])


class TestPca:
    def test_constant_map_falls_back_to_gray(self):
        fm = np.ones((4, 6, 8), dtype=np.float32)
        out = pca_rgb(fm)
        np.testing.assert_array_equal(out, 0.5)

    def test_three_clusters_get_separated_colors(self):
        rng = np.random.default_rng(10)
        centers = make_class_embeddings(3, 16, separation=10.0, rng=rng)
        labels = np.repeat(np.arange(3), 100).reshape(10, 30)
        fm = centers[labels] + rng.normal(0, 0.05, size=(10, 30, 16)).astype(np.float32)
        img = pca_rgb(fm)
        means = [img[labels == c].mean(axis=0) for c in range(3)]
        for a in range(3):
            for b in range(a + 1, 3):
                assert np.max(np.abs(means[a] - means[b])) > 0.2

    def test_output_in_unit_range(self):
        fm = np.random.default_rng(11).normal(size=(6, 6, 5)).astype(np.float32)
        img = pca_rgb(fm)
        assert np.all((img >= 0) & (img <= 1))

    def test_orthonormal_components(self):
        fm = np.random.default_rng(12).normal(size=(32, 32, 8))
        proj = fit_pca(fm)
        np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(3), atol=1e-5)


class TestSynthFeatures:
    def test_noiseless_pixels_equal_their_embedding(self):
        emb = make_class_embeddings(3, 8)
        cm = np.array([[0, 1], [2, 1]])
        fm = synth_features(cm, 8, emb, noise_sigma=0.0, smoothing_radius=0)
        np.testing.assert_array_equal(fm.data[0, 0], emb[0])
        np.testing.assert_array_equal(fm.data[1, 0], emb[2])

    def test_same_class_same_feature(self):
        emb = make_class_embeddings(2, 8)
        cm = np.zeros((4, 4), dtype=int)
        fm = synth_features(cm, 8, emb)
        assert np.all(fm.data == fm.data[0, 0])

    def test_linear_probe_recovers_classes(self):
        rng = np.random.default_rng(13)
        emb = make_class_embeddings(4, 32, separation=1.0, rng=rng)
        sep = min(
            np.linalg.norm(emb[a] - emb[b]) for a in range(4) for b in range(a + 1, 4)
        )
        cm = rng.integers(0, 4, size=(64, 64))
        fm = synth_features(cm, 32, emb, noise_sigma=0.1 * sep, rng=rng)
        x = fm.data.reshape(-1, 32)
        onehot = np.eye(4)[cm.reshape(-1)]
        # least-squares linear classifier as the oracle
        w, *_ = np.linalg.lstsq(np.hstack([x, np.ones((len(x), 1))]), onehot, rcond=None)
        pred = (np.hstack([x, np.ones((len(x), 1))]) @ w).argmax(axis=1)
        assert (pred == cm.reshape(-1)).mean() > 0.99
