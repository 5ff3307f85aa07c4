"""Quick invariant suite behind ``mirl selftest``; each check returns (name, ok, detail)."""

from __future__ import annotations

import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .decoder import DecoderConfig, PairOutputs
from .encoder import ViTConfig, encode_segments, run_blocks, tokenize
from .model import MIRLModel, ObjectiveConfig
from .objectives import (
    coarse_fine_targets,
    pixel_loss,
    residual_pair_loss,
    total_loss,
    variant_loss_dagger,
)
from .tokenizer import sample_mask, synthetic_textures
from .training import OptimSpec, adamw_step, load_checkpoint, lr_at, save_checkpoint

TINY = ViTConfig(depth=4, hidden=16, mlp_dim=32, heads=2, segments=2, patch=4, image_size=16)
TINY_DEC = DecoderConfig(blocks=1, hidden=16, heads=2)


def _images(n=2, size=16, seed=0):
    return synthetic_textures(n, size, seed=seed).values


def _rand_pairs(rng, G, B=2, N=8, K=6):
    t = lambda: dc.Tensor(rng.normal(size=(B, N, K)), requires_grad=True)
    return [PairOutputs(g + 1, t(), t()) for g in range(G // 2)], rng.normal(size=(B, N, K))


def check_primitives():
    rng = np.random.default_rng(0)
    a = dc.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = dc.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    g = dc.Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    fns = {
        "matmul+gelu": lambda: dc.gelu(dc.matmul(a, b)).sum(),
        "softmax": lambda: (dc.softmax(a) * a).sum(),
        "layer_norm": lambda: (dc.layer_norm(a, g, g, 1e-6) ** 2).sum(),
        "cross_entropy": lambda: dc.cross_entropy(a, np.array([0, 1, 3]), 0.1),
    }
    worst = 0.0
    for fn in fns.values():
        worst = max(worst, dc.grad_check(fn, {"a": a, "b": b, "g": g}).max_error)
    return worst <= 1e-5, f"max rel err {worst:.2e}"


def check_model_grad():
    model = MIRLModel(TINY, TINY_DEC, seed=0)
    dc.jitter_params(model.trainable(), np.random.default_rng(1))
    x = np.random.default_rng(0).random((2, 3, 16, 16))
    plan = model.sample_plan(2, np.random.default_rng(0))
    rep = dc.grad_check(lambda: model.loss(x, plan)[0].total, model.trainable(), max_entries=3)
    return rep.ok, f"max rel err {rep.max_error:.2e} over {sum(rep.checked.values())} entries"


def check_loss_identities():
    rng = np.random.default_rng(1)
    plan = sample_mask(8, 0.5, rng, 2)
    worst = 0.0
    for G in (2, 4, 6):
        pairs, x = _rand_pairs(rng, G)
        rep = total_loss(pairs, x, plan)
        ref = sum((2.0 / G) * residual_pair_loss(p, x, plan).item() for p in pairs)
        worst = max(worst, abs(rep.total.item() - ref) / abs(ref))
    pairs, x = _rand_pairs(rng, 2)
    p = pairs[0]
    same = residual_pair_loss(p, x, plan).item() == pixel_loss(dc.add(p.main, p.residual), x, plan).item()
    dag = variant_loss_dagger(p, x, plan, 0.0).item() == residual_pair_loss(p, x, plan).item()
    ok = worst <= 1e-12 and same and dag
    return ok, f"weighted-sum rel err {worst:.1e}; reduction identity {same}; omega=0 identity {dag}"


def check_mask_locality():
    model = MIRLModel(TINY, TINY_DEC, seed=0)
    x = _images()
    plan = model.sample_plan(2, np.random.default_rng(0))
    t = model.targets(x)
    noisy = [a.copy() for a in t]
    rng = np.random.default_rng(5)
    for a in noisy:
        for b in range(plan.batch):
            a[b, plan.visible[b]] = rng.normal(size=a[b, plan.visible[b]].shape)
    l1 = model.loss(x, plan, t)[0].total.item()
    l2 = model.loss(x, plan, noisy)[0].total.item()
    return l1 == l2, f"{l1!r} vs {l2!r}"


def check_shortcut():
    rng = np.random.default_rng(2)
    plan = sample_mask(8, 0.5, rng, 2)
    (pair,), x = _rand_pairs(rng, 2)
    residual_pair_loss(pair, x, plan).backward()
    K = x.shape[-1]
    expect = -(2.0 / (plan.num_masked * plan.batch * K)) * (x - pair.main.data - pair.residual.data)
    expect *= plan.mask_matrix()[..., None]
    err = float(np.max(np.abs(pair.main.grad - expect)))
    pair.main.grad = None
    residual_pair_loss(pair, x, plan, detach_main=True).backward()
    control = pair.main.grad is None or np.max(np.abs(pair.main.grad - expect)) > 1e-8
    return err <= 1e-8 and control, f"max abs err {err:.1e}; detached control rejected {control}"


def check_structure():
    model = MIRLModel(TINY, TINY_DEC, seed=0)
    x = _images()
    plan = model.sample_plan(2, np.random.default_rng(0))
    z0 = tokenize(dc.Tensor(model.patches(x)), plan, model.params)
    seg = encode_segments(z0, TINY, model.params).per_segment[-1].tokens.data
    mono = run_blocks(z0.tokens, model.params, TINY, range(TINY.depth)).data
    comp = np.array_equal(seg, mono)
    off = MIRLModel(TINY, replace(TINY_DEC, did=False), seed=0)
    for n, p in model.params.items():
        if n in off.params:
            off.params[n].data = p.data.copy()
        elif ".did.proj." in n:
            p.data = np.zeros_like(p.data)
    did = model.loss(x, plan)[0].total.item() == off.loss(x, plan)[0].total.item()
    one = replace(TINY, segments=1)
    mae = MIRLModel(one, TINY_DEC, ObjectiveConfig(mode="mae"), seed=0)
    mirl1 = MIRLModel(one, TINY_DEC, ObjectiveConfig(mode="mirl"), seed=0)
    res = mae.forward(x, plan)
    direct = pixel_loss(res.pairs[0].main, res.target, plan).item()
    g1 = mirl1.loss(x, plan)[0].total.item() == direct
    return comp and did and g1, f"composition {comp}; zeroed DID {did}; G=1 equals MAE {g1}"


def check_masks():
    rng = np.random.default_rng(3)
    counts = {sample_mask(196, 0.75, rng, 1).num_masked for _ in range(50)}
    plan = sample_mask(196, 0.75, rng, 10_000)
    freq = plan.mask_matrix().mean(axis=0)
    dev = float(np.max(np.abs(freq - 0.75)))
    return counts == {147} and dev <= 0.02, f"|M| values {sorted(counts)}; max freq deviation {dev:.4f}"


def check_coarse_fine():
    x = _images(3, 16)
    cf = coarse_fine_targets(x, 2.0)
    return np.array_equal(cf.coarse + cf.fine, x), "coarse + fine == x"


def check_optim():
    b1, b2, lr, eps = 0.9, 0.95, 0.1, 1e-8
    p, m, v = np.array(1.0), np.array(0.0), np.array(0.0)
    p1, m, v = adamw_step(p, np.array(0.5), m, v, 1, lr, (b1, b2), eps, 0.0)
    p2, m, v = adamw_step(p1, np.array(-0.25), m, v, 2, lr, (b1, b2), eps, 0.0)
    e1 = 1.0 - lr * 0.5 / (0.5 + eps)
    mm = b1 * 0.05 - 0.1 * 0.25
    vv = b2 * 0.05 * 0.25 + 0.05 * 0.0625
    e2 = e1 - lr * (mm / (1 - b1 ** 2)) / (math.sqrt(vv / (1 - b2 ** 2)) + eps)
    trace = abs(p2 - e2) <= 1e-12
    spec = OptimSpec(batch_size=256, warmup_epochs=0, total_epochs=1000, schedule="step")
    lrs = [lr_at(spec, e) for e in range(1000)]
    changes = [e for e in range(1, 1000) if lrs[e] != lrs[e - 1]]
    sched = changes == [900, 950] and lrs[900] == lrs[899] * 0.1
    return trace and sched, f"two-step trace err {abs(p2 - e2):.1e}; step decay at {changes}"


def check_checkpoint():
    model = MIRLModel(TINY, TINY_DEC, seed=0)
    x = _images()
    plan = model.sample_plan(2, np.random.default_rng(0))
    before = model.loss(x, plan)[0].total.item()
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "c.mirl"
        save_checkpoint(path, model.state_params(), step=7)
        other = MIRLModel(TINY, TINY_DEC, seed=1)
        ck = load_checkpoint(path)
        ck.load_into(other.state_params())
    after = other.loss(x, plan)[0].total.item()
    return before == after and ck.step == 7, f"{before!r} vs {after!r}"


CHECKS = {
    "primitive gradients": check_primitives,
    "model gradient": check_model_grad,
    "loss identities": check_loss_identities,
    "mask locality": check_mask_locality,
    "shortcut gradient": check_shortcut,
    "structural equivalences": check_structure,
    "mask statistics": check_masks,
    "coarse/fine split": check_coarse_fine,
    "optimizer oracles": check_optim,
    "checkpoint roundtrip": check_checkpoint,
}


def run_all() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't abort the suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out

