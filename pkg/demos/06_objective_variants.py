"""
Ablation objectives side by side
================================

The same tiny encoder trained under each objective for a few steps:
plain MIRL, the dagger variant, independent multi-decoders, coarse/fine
targets in both orders, and MIRL with InfoNCE or perceptual terms added.
"""

from dataclasses import replace

import numpy as np

from mirl import DecoderConfig, ImageBatch, MIRLModel, ObjectiveConfig, OptimSpec, ViTConfig, pretrain
from mirl.objectives import coarse_fine_targets
from mirl.tokenizer import synthetic_textures

vit = ViTConfig(depth=4, hidden=32, mlp_dim=64, heads=4, segments=2, patch=4, image_size=16)
dec = DecoderConfig(blocks=1, hidden=32, heads=4)
train = ImageBatch(synthetic_textures(64, size=16, seed=0).values)
spec = OptimSpec(base_lr=0.01, batch_size=16, warmup_epochs=1, total_epochs=3, steps_per_epoch=4)

# Coarse is a Gaussian blur snapped to a fine dyadic grid, so the split is exact.
cf = coarse_fine_targets(train.values, sigma=2.0)
print("coarse + fine == x:", np.array_equal(cf.coarse + cf.fine, train.values))

variants = {
    "mirl": (vit, ObjectiveConfig()),
    "mirl dagger w=0.5": (vit, ObjectiveConfig(dagger_omega=0.5)),
    "mae (G=1)": (replace(vit, segments=1), ObjectiveConfig(mode="mae")),
    "multi-decoder": (vit, ObjectiveConfig(mode="multi_decoder")),
    "coarse to fine": (vit, ObjectiveConfig(mode="coarse_to_fine")),
    "fine to coarse": (vit, ObjectiveConfig(mode="fine_to_coarse")),
    "mirl + infonce": (vit, ObjectiveConfig(infonce_weight=0.1)),
    "mirl + perceptual": (vit, ObjectiveConfig(perceptual_weight=0.1)),
}
for name, (v, objective) in variants.items():
    records, _ = pretrain(MIRLModel(v, dec, objective, seed=0), train, spec, seed=0)
    print(f"{name:>18}: loss {records[0]['loss']:.4f} -> {records[-1]['loss']:.4f}")
