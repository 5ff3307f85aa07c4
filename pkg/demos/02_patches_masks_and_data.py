"""
Patches, random masks and the synthetic dataset
===============================================

Images become rows of flattened P x P x C patches.  A mask plan hides a fixed
share of them from the encoder, sampled independently for every image.
"""

import numpy as np

from mirl.tokenizer import patchify, sample_mask, synthetic_textures, unpatchify

data = synthetic_textures(8, size=32, seed=0)
print("images", data.values.shape, data.values.dtype, "labels", data.labels)

# 32x32 images with P=4 give 64 patches of 48 values each.
patches = patchify(data.values, 4)
print("patches", patches.shape)
print("round trip exact:", np.array_equal(unpatchify(patches, 4, 32, 32), data.values))

# r = 0.75 hides round(0.75 N) patches of every image.
plan = sample_mask(64, 0.75, np.random.default_rng(1), batch=8)
print("masked per image", plan.num_masked, "visible per image", plan.num_visible)
print("first image visible indices", plan.visible[0])

# Over many draws each index is hidden about 75% of the time.
freq = sample_mask(196, 0.75, np.random.default_rng(2), 10_000).mask_matrix().mean(axis=0)
print(f"per-index mask frequency: min {freq.min():.3f} max {freq.max():.3f}")

# The pixels are 8-bit levels, and class identity lives in spatial structure
# while colour is a per-image nuisance.
print("8-bit levels:", np.allclose(data.values * 255, np.round(data.values * 255), atol=1e-4))
