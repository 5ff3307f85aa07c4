"""
Pre-training a tiny encoder and probing it
==========================================

A depth-8 encoder on the synthetic 10-class set.  The linear probe on frozen
features is compared with the same probe on the untrained encoder.  Pass a
step count on the command line; the acceptance run uses 2000.
"""

import sys
import time

import numpy as np

from mirl import DecoderConfig, ImageBatch, MIRLModel, OptimSpec, preset, pretrain, probe_encoder
from mirl.tokenizer import synthetic_textures

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
data = synthetic_textures(3000, size=32, seed=0)
train = ImageBatch(data.values[:2000], data.labels[:2000])
test = ImageBatch(data.values[2000:], data.labels[2000:])

vit = preset("tiny-8", segments=2, pos_embed="sincos")
model = MIRLModel(vit, DecoderConfig(blocks=1, hidden=64, heads=4), seed=0, dtype=np.float32)
print(f"random-init probe accuracy {probe_encoder(model, train, test, epochs=50):.3f}")

# base_lr follows the lr = base_lr * B / 256 rule; one "epoch" here is one step.
spec = OptimSpec(base_lr=3e-4 * 256 / 16, batch_size=16, warmup_epochs=min(100, steps), total_epochs=steps)
t0 = time.time()
records, state = pretrain(model, train, spec, seed=0, metrics_path="runs/demo04/metrics.jsonl")
loss = [r["loss"] for r in records]
print(f"{steps} steps in {time.time() - t0:.0f}s; loss {np.mean(loss[:50]):.4f} -> {np.mean(loss[-50:]):.4f}")
print(f"pre-trained probe accuracy {probe_encoder(model, train, test, epochs=50):.3f}")
