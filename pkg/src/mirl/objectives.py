"""Reconstruction losses, residual pair losses and auxiliary objectives.

All pixel-space losses take predictions and targets as (B, N, P*P*C) patch
matrices and average only over the masked rows of a :class:`MaskPlan`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    cross_entropy,
    gather_rows,
    l2_normalize,
    matmul,
    mean_over,
    relu,
    scale,
    square,
    sub,
)
from .decoder import PairOutputs
from .tokenizer import MaskPlan, patchify, unpatchify


@dataclass
class LossReport:
    per_pair: list[Tensor]
    total: Tensor
    lambdas: list[float]
    aux: dict[str, Tensor] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        out = {"loss": self.total.item()}
        out.update({f"loss_{g + 1}": t.item() for g, t in enumerate(self.per_pair)})
        out.update({k: t.item() for k, t in self.aux.items()})
        return out


@dataclass
class CoarseFineTargets:
    coarse: np.ndarray
    fine: np.ndarray
    sigma: float


def _target(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=like.dtype)


def masked_rows(x: Tensor, plan: MaskPlan) -> Tensor:
    return gather_rows(x, plan.masked)


def pixel_loss(pred: Tensor, target, plan: MaskPlan) -> Tensor:
    """Mean over masked patches of the per-patch mean squared error."""
    target = _target(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs target {target.shape}")
    if plan.num_masked == 0:
        raise ValueError("pixel loss needs at least one masked patch")
    diff = sub(masked_rows(pred, plan), masked_rows(target, plan))
    return mean_over(square(diff))


def residual_pair_loss(pair: PairOutputs, target, plan: MaskPlan, detach_main: bool = False) -> Tensor:
    """Squared error between the residual ``x - x_hat_g`` and its prediction, over masked patches.

    ``detach_main`` cuts the shortcut connection (main prediction treated as a
    constant); it exists only as a negative control.
    """
    if pair.residual is None:
        return pixel_loss(pair.main, target, plan)
    main = pair.main.detach() if detach_main else pair.main
    return pixel_loss(add(main, pair.residual), target, plan)


def default_lambdas(G: int) -> list[float]:
    if G == 1:
        return [1.0]
    return [2.0 / G] * (G // 2)


def total_loss(pairs: Sequence[PairOutputs], target, plan: MaskPlan, lambdas: Sequence[float] | None = None,
               dagger_omega: float | None = None, detach_main: bool = False) -> LossReport:
    """Weighted sum of per-pair losses; weights default to 2/G."""
    G = 1 if (len(pairs) == 1 and pairs[0].residual is None) else 2 * len(pairs)
    lambdas = default_lambdas(G) if lambdas is None else list(lambdas)
    if len(lambdas) != len(pairs):
        raise ValueError(f"{len(lambdas)} loss weights for {len(pairs)} pairs")
    if dagger_omega is None:
        per = [residual_pair_loss(p, target, plan, detach_main) for p in pairs]
    else:
        per = [variant_loss_dagger(p, target, plan, dagger_omega) for p in pairs]
    return LossReport(per, weighted_sum(per, lambdas), lambdas)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    total = scale(terms[0], weights[0])
    for t, w in zip(terms[1:], weights[1:]):
        total = add(total, scale(t, w))
    return total


def variant_loss_dagger(pair: PairOutputs, target, plan: MaskPlan, omega: float) -> Tensor:
    """Residual loss plus ``omega`` times the main-component reconstruction error."""
    if omega < 0:
        raise ValueError("omega must be non-negative")
    base = residual_pair_loss(pair, target, plan)
    if omega == 0:
        return base
    return add(scale(pixel_loss(pair.main, target, plan), omega), base)


def multi_decoder_loss(preds: Sequence[Tensor], targets: Sequence, plan: MaskPlan,
                       weights: Sequence[float] | None = None) -> LossReport:
    """Independent reconstruction losses, one per decoder; weights default to 1/len(preds)."""
    if len(targets) != len(preds):
        raise ValueError(f"{len(targets)} targets for {len(preds)} decoders")
    weights = [1.0 / len(preds)] * len(preds) if weights is None else list(weights)
    per = [pixel_loss(p, t, plan) for p, t in zip(preds, targets)]
    return LossReport(per, weighted_sum(per, weights), weights)


# -- coarse / fine targets -------------------------------------------------------------
def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(np.ceil(3 * sigma)) if radius is None else radius
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(images: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of (..., H, W) images with reflect padding."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(images, dtype=np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric" if r >= out.shape[axis] else "reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=axis)
        out = win @ k
    return out


def coarse_fine_targets(images: np.ndarray, sigma: float = 2.0) -> CoarseFineTargets:
    """Low-pass (Gaussian) component and its complement.

    The blur is snapped to a dyadic grid 2**-30 below the peak magnitude so
    ``x - coarse`` is computed without rounding and ``coarse + fine == x``
    holds bit for bit.  That needs ``x`` itself to carry no bits below the
    same grid, which holds for float32 data (and so for anything decoded from
    8 or 16 bit pixels) whose nonzero magnitudes exceed ``2**-29`` of the peak.
    """
    x = np.asarray(images, dtype=np.float64)
    coarse = gaussian_blur(x, sigma)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 0:
        step = 2.0 ** (np.ceil(np.log2(peak)) - 30)
        coarse = np.round(coarse / step) * step
    return CoarseFineTargets(coarse, x - coarse, sigma)


def assign_coarse_fine(targets: CoarseFineTargets, G: int, order: str = "coarse_to_fine",
                       P: int | None = None) -> list[np.ndarray]:
    """Per-decoder targets: the first G/2 decoders get one component, the rest the other.

    ``coarse_to_fine`` gives shallow decoders the coarse part; ``fine_to_coarse`` reverses it.
    Returned in image space unless ``P`` is given (then patchified).
    """
    if G % 2:
        raise ValueError("coarse/fine targets need an even number of segments")
    if order == "coarse_to_fine":
        shallow, deep = targets.coarse, targets.fine
    elif order == "fine_to_coarse":
        shallow, deep = targets.fine, targets.coarse
    else:
        raise ValueError(f"unknown order {order!r}")
    out = [shallow] * (G // 2) + [deep] * (G // 2)
    return [patchify(t, P) for t in out] if P is not None else out


# -- feature-level contrastive loss ----------------------------------------------------
def infonce_feature_loss(pred: Tensor, positive, tau: float = 0.2) -> Tensor:
    """InfoNCE over a batch: row ``b`` of ``positive`` is the positive for ``pred[b]``, the rest are negatives.

    Both inputs are L2-normalised along the last axis; ``positive`` is
    treated as a constant (momentum-encoder output).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if pred.ndim != 2 or pred.shape[0] < 2:
        raise ValueError("InfoNCE needs a (B, D) batch with B >= 2")
    pos = positive.detach() if isinstance(positive, Tensor) else Tensor(np.asarray(positive), dtype=pred.dtype)
    if pos.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} vs positives {pos.shape}")
    zp = l2_normalize(pred)
    zk = Tensor(pos.data / np.sqrt((pos.data ** 2).sum(-1, keepdims=True) + 1e-12))
    logits = scale(matmul(zp, zk.transpose()), 1.0 / tau)
    return cross_entropy(logits, np.arange(pred.shape[0]))


# -- perceptual loss ---------------------------------------------------------------------
class ConvFeatureExtractor:
    """Fixed multi-layer conv + ReLU feature map used by the perceptual loss.

    ``layers`` holds ``(weight, bias, stride)``; ``weight`` is (O, C, k, k).
    """

    def __init__(self, layers: Sequence[tuple[np.ndarray, np.ndarray, int]]):
        self.layers = [(np.asarray(w), np.asarray(b), int(s)) for w, b, s in layers]

    @classmethod
    def seeded(cls, channels: int = 3, widths=(8, 16), seed: int = 0) -> "ConvFeatureExtractor":
        rng = np.random.default_rng(seed)
        layers, c = [], channels
        for i, o in enumerate(widths):
            w = rng.normal(0.0, np.sqrt(2.0 / (c * 9)), size=(o, c, 3, 3))
            layers.append((w, np.zeros(o), 1 if i == 0 else 2))
            c = o
        return cls(layers)

    @classmethod
    def from_file(cls, path: str | Path) -> "ConvFeatureExtractor":
        from .training import read_tensor_file

        tensors, meta = read_tensor_file(path)
        n = int(meta.get("layers", 0)) or len([k for k in tensors if k.endswith(".weight")])
        strides = meta.get("strides", [1] * n)
        return cls([(tensors[f"layer{i}.weight"], tensors[f"layer{i}.bias"], strides[i]) for i in range(n)])

    def to_tensors(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors = {}
        for i, (w, b, _) in enumerate(self.layers):
            tensors[f"layer{i}.weight"] = w
            tensors[f"layer{i}.bias"] = b
        return tensors, {"layers": len(self.layers), "strides": [s for _, _, s in self.layers]}

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for w, b, s in self.layers:
            x = relu(conv2d(x, Tensor(w, dtype=x.dtype), Tensor(b, dtype=x.dtype), stride=s, padding=1))
            feats.append(x)
        return feats


def mix_visible(pred_patches: Tensor, target_patches, plan: MaskPlan) -> Tensor:
    """Prediction at masked positions, ground truth at visible ones."""
    target = _target(target_patches, pred_patches)
    B, N, _ = pred_patches.shape
    mask = np.zeros((B, N, 1), dtype=pred_patches.dtype)
    np.put_along_axis(mask[..., 0], plan.masked, 1.0, axis=1)
    return add(pred_patches * mask, target * (1.0 - mask))


def perceptual_loss(mixed: Tensor, target, extractor: ConvFeatureExtractor, layers: Sequence[int] | None = None) -> Tensor:
    """Sum over selected layers of the size-normalised squared feature difference, averaged over the batch.

    ``mixed`` and ``target`` are (B, C, H, W) images.
    """
    layers = list(range(len(extractor.layers))) if layers is None else list(layers)
    if not layers:
        raise ValueError("perceptual loss needs at least one layer")
    target = _target(target, mixed)
    fx = extractor(target.detach())
    fm = extractor(mixed)
    terms = [mean_over(square(sub(fm[l], fx[l]))) for l in layers]
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def patches_to_image(patches: Tensor, P: int, H: int, W: int) -> Tensor:
    """Differentiable counterpart of :func:`unpatchify`."""
    B, N, K = patches.shape
    C = K // (P * P)
    return patches.reshape(B, H // P, W // P, P, P, C).transpose(0, 5, 1, 3, 2, 4).reshape(B, C, H, W)
