"""End-to-end pre-training model: tokenizer, segmented encoder, decoders and objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import objectives as obj
from .decoder import DecoderConfig, PairOutputs, decode_pairs, init_decoder_params, multi_decoder_outputs, run_decoder
from .diffcore import Parameter, Tensor, add, mean_over, scale
from .encoder import (
    ConfigError,
    SegmentedEncoderState,
    ViTConfig,
    encode,
    encode_segments,
    frozen_names,
    init_encoder_params,
    tokenize,
)
from .tokenizer import MaskPlan, full_plan, patchify, sample_mask

MODES = ("mirl", "mae", "multi_decoder", "coarse_to_fine", "fine_to_coarse")


@dataclass(frozen=True)
class ObjectiveConfig:
    mode: str = "mirl"
    mask_ratio: float = 0.75
    lambdas: tuple[float, ...] | None = None
    dagger_omega: float | None = None
    norm_pix: bool = False
    coarse_sigma: float = 2.0
    infonce_weight: float = 0.0
    infonce_tau: float = 0.2
    momentum: float = 0.996
    perceptual_weight: float = 0.0
    perceptual_layers: tuple[int, ...] | None = None

    def validate(self, vit: ViTConfig):
        G = vit.segments
        if self.mode not in MODES:
            raise ConfigError(f"objective.mode={self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask.ratio={self.mask_ratio} must lie in [0, 1)")
        if self.mode == "mae" and G != 1:
            raise ConfigError(f"objective.mode=mae requires model.segments=1 (got {G})")
        if self.mode in ("coarse_to_fine", "fine_to_coarse") and G % 2:
            raise ConfigError(f"objective.mode={self.mode} requires an even model.segments (got {G})")
        if self.lambdas is not None:
            expected = G if self.mode in ("multi_decoder", "coarse_to_fine", "fine_to_coarse") else max(G // 2, 1)
            if len(self.lambdas) != expected:
                raise ConfigError(
                    f"objective.lambdas has {len(self.lambdas)} entries; mode {self.mode} with "
                    f"model.segments={G} needs {expected}")
        if self.dagger_omega is not None:
            if self.dagger_omega < 0:
                raise ConfigError("objective.dagger_omega must be >= 0")
            if self.mode != "mirl":
                raise ConfigError("objective.dagger_omega applies only to objective.mode=mirl")
        if self.infonce_tau <= 0:
            raise ConfigError("objective.infonce_tau must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("objective.momentum must lie in [0, 1]")


@dataclass
class ForwardResult:
    state: SegmentedEncoderState
    plan: MaskPlan
    target: np.ndarray
    pairs: list[PairOutputs] = field(default_factory=list)
    preds: list[Tensor] = field(default_factory=list)


def normalize_patches(p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mu = p.mean(axis=-1, keepdims=True)
    var = p.var(axis=-1, keepdims=True)
    return (p - mu) / np.sqrt(var + eps)


class MIRLModel:
    """Parameters plus forward/loss for one pre-training configuration.

    ``params`` maps dot-path names to :class:`Parameter`; encoder weights live
    under ``encoder.``, decoders under ``decoder.<j>.``, the InfoNCE feature
    predictor under ``feature.`` and the momentum encoder (not trained) in
    ``momentum_params``.
    """

    def __init__(self, vit: ViTConfig, decoder: DecoderConfig | None = None,
                 objective: ObjectiveConfig | None = None, seed: int = 0, dtype=np.float64,
                 extractor: obj.ConvFeatureExtractor | None = None):
        self.vit = vit
        self.decoder = decoder or DecoderConfig()
        self.objective = objective or ObjectiveConfig()
        self.objective.validate(vit)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Parameter] = init_encoder_params(vit, rng, dtype)
        self.params.update(init_decoder_params(vit, self.decoder, rng, dtype))
        self.momentum_params: dict[str, Parameter] = {}
        if self.objective.infonce_weight > 0:
            self._init_feature_branch(rng)
        self.extractor = extractor
        if self.objective.perceptual_weight > 0 and self.extractor is None:
            self.extractor = obj.ConvFeatureExtractor.seeded(vit.channels)

    def _init_feature_branch(self, rng):
        # two decoding blocks at the end of the encoder predict encoder features
        fcfg = DecoderConfig(blocks=2, hidden=self.vit.hidden, heads=self.vit.heads, did=False,
                             shared_mask_token=False)
        feat = init_decoder_params(self.vit, fcfg, rng, self.dtype, count=1, prefix="feature")
        self.params.update({k: v for k, v in feat.items() if not k.startswith("feature.0.pred")})
        self._feature_cfg = fcfg
        self.momentum_params = {n.replace("encoder.", "momentum.", 1): Parameter(n, p.data.copy())
                                for n, p in self.params.items() if n.startswith("encoder.")}

    # -- bookkeeping -----------------------------------------------------------------
    @property
    def G(self) -> int:
        return self.vit.segments

    def trainable(self) -> dict[str, Parameter]:
        frozen = frozen_names(self.vit)
        return {n: p for n, p in self.params.items() if n not in frozen}

    def state_params(self) -> dict[str, Parameter]:
        """Everything a checkpoint must hold: trained weights plus the momentum encoder."""
        return {**self.params, **self.momentum_params}

    def encoder_params(self) -> dict[str, Parameter]:
        return {n: p for n, p in self.params.items() if n.startswith("encoder.")}

    def patches(self, images: np.ndarray) -> np.ndarray:
        return patchify(np.asarray(images, dtype=self.dtype), self.vit.patch)

    def sample_plan(self, batch: int, rng: np.random.Generator) -> MaskPlan:
        return sample_mask(self.vit.num_patches, self.objective.mask_ratio, rng, batch)

    # -- forward ------------------------------------------------------------------------
    def targets(self, images: np.ndarray) -> list[np.ndarray]:
        """Per-decoder pixel targets in patch space (one entry for pair-based modes)."""
        o, P = self.objective, self.vit.patch
        if o.mode in ("coarse_to_fine", "fine_to_coarse"):
            cf = obj.coarse_fine_targets(images, o.coarse_sigma)
            out = obj.assign_coarse_fine(cf, self.G, o.mode, P)
        else:
            out = [patchify(images, P)]
        if o.norm_pix:
            out = [normalize_patches(t) for t in out]
        return [t.astype(self.dtype) for t in out]

    def encode(self, images: np.ndarray, plan: MaskPlan, params=None) -> SegmentedEncoderState:
        params = self.params if params is None else params
        z0 = tokenize(Tensor(self.patches(images)), plan, params)
        return encode_segments(z0, self.vit, params)

    def forward(self, images: np.ndarray, plan: MaskPlan) -> ForwardResult:
        images = np.asarray(images, dtype=self.dtype)
        state = self.encode(images, plan)
        res = ForwardResult(state, plan, patchify(images, self.vit.patch))
        if self.objective.mode in ("mirl", "mae"):
            res.pairs = decode_pairs(state, self.decoder, self.params)
        else:
            res.preds = multi_decoder_outputs(state, self.decoder, self.params)
        return res

    def loss(self, images: np.ndarray, plan: MaskPlan, targets: list[np.ndarray] | None = None,
             detach_main: bool = False) -> tuple[obj.LossReport, ForwardResult]:
        """Forward pass and the configured objective.

        ``targets`` overrides the pixel targets (patch space); auxiliary terms
        are appended to ``report.aux`` and included in ``report.total``.
        """
        o = self.objective
        images = np.asarray(images, dtype=self.dtype)
        targets = self.targets(images) if targets is None else targets
        res = self.forward(images, plan)
        if o.mode in ("mirl", "mae"):
            report = obj.total_loss(res.pairs, targets[0], plan, o.lambdas, o.dagger_omega, detach_main)
        else:
            report = obj.multi_decoder_loss(res.preds, targets * (len(res.preds) // len(targets)), plan, o.lambdas)
        total = report.total
        if o.infonce_weight > 0:
            term = self.infonce_term(res)
            report.aux["infonce"] = term
            total = add(total, scale(term, o.infonce_weight))
        if o.perceptual_weight > 0:
            term = self.perceptual_term(res, images)
            report.aux["perceptual"] = term
            total = add(total, scale(term, o.perceptual_weight))
        report.total = total
        return report, res

    # -- auxiliary objectives --------------------------------------------------------------
    def infonce_term(self, res: ForwardResult) -> Tensor:
        from .decoder import decoder_block, fill_mask_tokens, mask_token_for
        from .encoder import ln

        fcfg, p = self._feature_cfg, self.params
        last = res.state.per_segment[-1]
        x = fill_mask_tokens(last, mask_token_for(p, 0, "feature"), p, "feature.0")
        for b in range(fcfg.blocks):
            x = decoder_block(x, p, f"feature.0.blocks.{b}", fcfg.heads)
        x = ln(x, p, "feature.0.norm")
        pred = mean_over(x[:, 1:], axis=1)
        mom = {n.replace("momentum.", "encoder.", 1): t for n, t in self.momentum_params.items()}
        # same masked view as the online encoder
        z0 = tokenize(Tensor(res.target), res.plan, mom)
        positive = encode(z0, self.vit, mom).data[:, 1:].mean(axis=1)
        return obj.infonce_feature_loss(pred, positive, self.objective.infonce_tau)

    def perceptual_term(self, res: ForwardResult, images: np.ndarray) -> Tensor:
        v = self.vit
        preds = [pr.main for pr in res.pairs] if res.pairs else res.preds[: max(self.G // 2, 1)]
        total = None
        for pred in preds:
            mixed = obj.mix_visible(pred, res.target, res.plan)
            img = obj.patches_to_image(mixed, v.patch, v.image_size, v.image_size)
            term = obj.perceptual_loss(img, images, self.extractor, self.objective.perceptual_layers)
            total = term if total is None else add(total, term)
        return scale(total, 1.0 / len(preds))

    # -- representation ---------------------------------------------------------------------
    def features(self, images: np.ndarray, params=None, batch_size: int = 256) -> np.ndarray:
        """Mean-pooled final-norm patch tokens of the unmasked encoder (no graph kept)."""
        params = self.params if params is None else params
        plain = {n: Tensor(p.data) for n, p in params.items() if n.startswith("encoder.")}
        out = []
        for i in range(0, len(images), batch_size):
            chunk = np.asarray(images[i:i + batch_size], dtype=self.dtype)
            plan = full_plan(self.vit.num_patches, len(chunk))
            z0 = tokenize(Tensor(self.patches(chunk)), plan, plain)
            out.append(encode(z0, self.vit, plain).data[:, 1:].mean(axis=1))
        return np.concatenate(out, axis=0)
