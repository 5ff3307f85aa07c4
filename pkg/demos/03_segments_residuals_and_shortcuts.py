"""
Segmented encoder, paired decoders and the residual loss
========================================================

The encoder is cut into G segments.  Segment g's decoder predicts the main
component of the masked image, and segment G-g+1's decoder predicts what is
left over.  The residual loss keeps the shallow prediction in the graph, so
the deep decoder's error also trains the shallow path.
"""

import numpy as np

from mirl import DecoderConfig, MIRLModel, ViTConfig
from mirl.objectives import pixel_loss, residual_pair_loss
from mirl.tokenizer import synthetic_textures

vit = ViTConfig(depth=8, hidden=32, mlp_dim=64, heads=4, segments=4, patch=4, image_size=16)
model = MIRLModel(vit, DecoderConfig(blocks=1, hidden=32, heads=4), seed=0)
x = synthetic_textures(2, size=16).values
plan = model.sample_plan(2, np.random.default_rng(0))

res = model.forward(x, plan)
print("segments", vit.segments, "blocks per segment", vit.blocks_per_segment)
for pair in res.pairs:
    print(f"pair g={pair.g}: main from segment {pair.g}, residual from segment {vit.segments - pair.g + 1}")

report, _ = model.loss(x, plan)
print("per-pair losses", [round(t.item(), 5) for t in report.per_pair], "weights", report.lambdas)
print("total", report.total.item())

# Predicting the residual is the same as predicting the image with main + residual.
p = res.pairs[0]
print("reduction identity:", residual_pair_loss(p, res.target, plan).item()
      == pixel_loss(p.main + p.residual, res.target, plan).item())

# The shortcut: dL/dx_hat is -(2/(B|M|K))(x - x_hat - xi_hat) on masked rows.
p.main.retain_grad()
residual_pair_loss(p, res.target, plan).backward()
B, M, K = plan.batch, plan.num_masked, res.target.shape[-1]
expect = -(2 / (B * M * K)) * (res.target - p.main.data - p.residual.data) * plan.mask_matrix()[..., None]
print("shortcut gradient max error", np.abs(p.main.grad - expect).max())
