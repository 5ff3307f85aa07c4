"""Per-segment decoders, mask-token filling and densely interconnected decoding (DID).

Decoder ``j`` (0-based) is ``H_{j+1}`` and reads segment ``j+1``.  For pair
``g`` the shallow decoder ``H_g`` predicts the main component and the deep
decoder ``H_{G-g+1}`` predicts the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Parameter, Tensor, add, broadcast_to, concat, gather_rows, linear
from .encoder import (
    ConfigError,
    SegmentedEncoderState,
    ViTConfig,
    init_block_params,
    ln,
    mlp,
    multi_head_attention,
    self_attention,
    trunc_normal,
)
from .tokenizer import TokenSequence, sincos_pos_embed


@dataclass(frozen=True)
class DecoderConfig:
    blocks: int = 2
    hidden: int = 128
    heads: int = 4
    mlp_ratio: int = 4
    did: bool = True
    shared_mask_token: bool = True
    pos_init: str = "sincos"

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError("decoder needs at least one block")
        if self.hidden % self.heads:
            raise ConfigError(f"decoder hidden {self.hidden} not divisible by heads {self.heads}")
        if self.pos_init not in ("sincos", "random"):
            raise ConfigError(f"decoder.pos_init={self.pos_init!r}; choose sincos or random")


@dataclass
class PairOutputs:
    """Predictions for pair ``g``: main (x_hat_g) and residual (xi_hat_g), each (B, N, P*P*C).

    ``residual`` is None for the single-segment (plain MAE) case.
    """

    g: int
    main: Tensor
    residual: Tensor | None

    @property
    def combined(self) -> Tensor:
        return self.main if self.residual is None else add(self.main, self.residual)


def _p(prefix: str, spec: dict, dtype) -> dict[str, Parameter]:
    return {f"{prefix}.{k}": Parameter(f"{prefix}.{k}", v, dtype=dtype) for k, v in spec.items()}


def init_did_params(prefix: str, dim: int, rng: np.random.Generator, dtype) -> dict[str, Parameter]:
    spec = {"norm_q.gain": np.ones(dim), "norm_q.bias": np.zeros(dim),
            "norm_kv.gain": np.ones(dim), "norm_kv.bias": np.zeros(dim)}
    for name in ("q", "k", "v", "proj"):
        spec[f"{name}.weight"] = trunc_normal(rng, (dim, dim))
        spec[f"{name}.bias"] = np.zeros(dim)
    return _p(prefix, spec, dtype)


def _pos_init(cfg: DecoderConfig, vit: ViTConfig, rng: np.random.Generator) -> np.ndarray:
    # learned either way; sincos only sets the starting point
    if cfg.pos_init == "sincos":
        return sincos_pos_embed(cfg.hidden, vit.image_size // vit.patch)
    return trunc_normal(rng, (vit.num_patches + 1, cfg.hidden))


def init_decoder_params(vit: ViTConfig, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float64,
                        count: int | None = None, prefix: str = "decoder") -> dict[str, Parameter]:
    """Parameters for ``count`` decoders (default: one per segment) plus the mask token(s)."""
    count = vit.segments if count is None else count
    D, Dd, N = vit.hidden, cfg.hidden, vit.num_patches
    params: dict[str, Parameter] = {}
    if cfg.shared_mask_token:
        params["mask_token"] = Parameter("mask_token", trunc_normal(rng, (Dd,)), dtype=dtype)
    for j in range(count):
        pre = f"{prefix}.{j}"
        spec = {
            "input_norm.gain": np.ones(D), "input_norm.bias": np.zeros(D),
            "embed.weight": trunc_normal(rng, (D, Dd)), "embed.bias": np.zeros(Dd),
            "pos_embed": _pos_init(cfg, vit, rng),
            "norm.gain": np.ones(Dd), "norm.bias": np.zeros(Dd),
            "pred.weight": trunc_normal(rng, (Dd, vit.patch_dim)), "pred.bias": np.zeros(vit.patch_dim),
        }
        if not cfg.shared_mask_token:
            spec["mask_token"] = trunc_normal(rng, (Dd,))
        params.update(_p(pre, spec, dtype))
        for b in range(cfg.blocks):
            params.update(init_block_params(f"{pre}.blocks.{b}", Dd, Dd * cfg.mlp_ratio, rng, dtype))
        if cfg.did:
            params.update(init_did_params(f"{pre}.blocks.0.did", Dd, rng, dtype))
    return params


def mask_token_for(params, j: int, prefix: str = "decoder") -> Tensor:
    return params["mask_token"] if "mask_token" in params else params[f"{prefix}.{j}.mask_token"]


def project_tokens(z: TokenSequence, params, pre: str) -> Tensor:
    """Encoder width -> decoder width: LayerNorm then the decoder's shared linear embedding."""
    x = ln(z.tokens, params, f"{pre}.input_norm")
    return linear(x, params[f"{pre}.embed.weight"], params[f"{pre}.embed.bias"])


def fill_mask_tokens(z: TokenSequence, mask_token: Tensor, params, pre: str, add_pos: bool = True) -> Tensor:
    """Build ``u`` of length N+1: projected visible tokens at their indices, the mask token elsewhere."""
    y = project_tokens(z, params, pre)
    B, _, Dd = y.shape
    plan = z.plan
    cls, vis = y[:, :1], y[:, 1:]
    parts = [vis]
    if plan.num_masked:
        parts.append(broadcast_to(mask_token, (B, plan.num_masked, Dd)))
    seq = gather_rows(concat(parts, axis=1), plan.ids_restore)
    u = concat([cls, seq], axis=1)
    if add_pos:
        u = add(u, params[f"{pre}.pos_embed"])
    return u


def did_attention(u: Tensor, prior: list[TokenSequence], params, pre: str, heads: int) -> Tensor:
    """Cross-attention from ``u`` to the concatenated earlier-segment tokens ``[z_{g-1}, ..., z_0]``.

    Keys and values go through the same decoder embedding as ``u``.
    """
    if not prior:
        raise ValueError("DID needs at least one earlier sequence")
    dec = pre.rsplit(".blocks.", 1)[0]
    kv = concat([project_tokens(z, params, dec) for z in prior], axis=1)
    did = f"{pre}.did"
    q_in = ln(u, params, f"{did}.norm_q")
    kv_in = ln(kv, params, f"{did}.norm_kv")
    return multi_head_attention(
        q_in, kv_in,
        params[f"{did}.q.weight"], params[f"{did}.q.bias"],
        params[f"{did}.k.weight"], params[f"{did}.k.bias"],
        params[f"{did}.v.weight"], params[f"{did}.v.bias"],
        params[f"{did}.proj.weight"], params[f"{did}.proj.bias"], heads)


def decoder_block(x: Tensor, params, pre: str, heads: int, prior: list[TokenSequence] | None = None) -> Tensor:
    x = add(x, self_attention(ln(x, params, f"{pre}.norm1"), params, f"{pre}.attn", heads))
    if prior is not None:
        x = add(x, did_attention(x, prior, params, pre, heads))
    return add(x, mlp(ln(x, params, f"{pre}.norm2"), params, f"{pre}.mlp"))


def run_decoder(j: int, state: SegmentedEncoderState, cfg: DecoderConfig, params,
                source: int | None = None, prefix: str = "decoder") -> Tensor:
    """Decoder ``j`` applied to segment ``source`` (default ``j+1``); returns (B, N, P*P*C)."""
    g = j + 1 if source is None else source
    pre = f"{prefix}.{j}"
    x = fill_mask_tokens(state.per_segment[g - 1], mask_token_for(params, j, prefix), params, pre)
    for b in range(cfg.blocks):
        prior = state.prior(g) if (cfg.did and b == 0) else None
        x = decoder_block(x, params, f"{pre}.blocks.{b}", cfg.heads, prior)
    x = ln(x, params, f"{pre}.norm")
    x = linear(x, params[f"{pre}.pred.weight"], params[f"{pre}.pred.bias"])
    return x[:, 1:]


def decode_pairs(state: SegmentedEncoderState, cfg: DecoderConfig, params) -> list[PairOutputs]:
    """Main / residual predictions for pairs ``(g, G-g+1)``, ``g = 1..G/2``; one main-only output when G=1."""
    G = state.G
    if G == 1:
        return [PairOutputs(1, run_decoder(0, state, cfg, params), None)]
    if G % 2:
        raise ConfigError(f"cannot pair {G} segments")
    return [PairOutputs(g, run_decoder(g - 1, state, cfg, params), run_decoder(G - g, state, cfg, params))
            for g in range(1, G // 2 + 1)]


def multi_decoder_outputs(state: SegmentedEncoderState, cfg: DecoderConfig, params) -> list[Tensor]:
    """G independent full reconstructions, one per segment, without shortcut pairing."""
    return [run_decoder(j, state, cfg, params) for j in range(state.G)]
