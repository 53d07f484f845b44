"""The offline feature autoencoder.

Image features arrive as M-dim maps (here synthetic 96-d oracle features;
in production DINO/FCN exports). The autoencoder compresses them to the
64-d space the field's feature head renders into. This script fits one,
reports reconstruction quality, and shows the sparsity trade-off.
"""
import tempfile

import numpy as np

from scribblefield.features import (
    autoencoder_loss,
    load_feature_map,
    train_autoencoder,
)
from scribblefield.scene import load_scene
from scribblefield.synthetic import generate_synthetic_scene, standard_scene_spec

dataset = load_scene(generate_synthetic_scene(standard_scene_spec(), tempfile.mkdtemp()))

maps = [load_feature_map(f.feature_path) for f in dataset.frames if f.feature_path]
pooled = np.concatenate([m.data.reshape(-1, m.dim) for m in maps])
rng = np.random.default_rng(0)
pooled = pooled[rng.choice(len(pooled), 8192, replace=False)]
print(f"pooled {len(pooled)} feature vectors of dim {pooled.shape[1]}")

for sparsity in (0.0, 1e-3, 1.0):
    ae = train_autoencoder(pooled, latent_dim=64, sparsity_weight=sparsity,
                           iterations=1200, rng=np.random.default_rng(1))
    test = pooled[:1024]
    recon = ae.decode(ae.encode(test))
    rel = np.linalg.norm(recon - test) / np.linalg.norm(test)
    latent_l1 = float(np.mean(np.abs(ae.encode(test))))
    print(f"sparsity={sparsity:<6}: relative reconstruction error {rel:.3f}, "
          f"mean |latent| {latent_l1:.4f}, loss {autoencoder_loss(ae, test):.4f}")
