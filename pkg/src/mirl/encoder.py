"""Segmented ViT encoder: blocks, segment grouping, truncation and tail re-initialisation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import truncnorm

from .diffcore import Parameter, Tensor, add, gelu, layer_norm, linear, matmul, scale, softmax
from .tokenizer import MaskPlan, TokenSequence, embed_visible, sincos_pos_embed

LN_EPS = 1e-6
INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid model or run configuration."""


@dataclass(frozen=True)
class ViTConfig:
    depth: int = 8
    hidden: int = 64
    mlp_dim: int = 256
    heads: int = 4
    segments: int = 2
    patch: int = 4
    image_size: int = 32
    channels: int = 3
    pos_embed: str = "learned"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.depth < 1 or self.hidden < 1 or self.mlp_dim < 1 or self.heads < 1:
            raise ConfigError("depth, hidden, mlp_dim and heads must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.segments < 1:
            raise ConfigError("segments must be >= 1")
        if self.segments != 1 and self.segments % 2:
            raise ConfigError(
                f"segments={self.segments}: residual pairing matches segment g with G-g+1, "
                "so G must be even (or 1)")
        if self.depth % self.segments:
            raise ConfigError(f"segments={self.segments} does not divide depth={self.depth}")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.pos_embed not in ("learned", "sincos"):
            raise ConfigError(f"unknown pos_embed {self.pos_embed!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def blocks_per_segment(self) -> int:
        return self.depth // self.segments

    def segment_blocks(self, g: int) -> range:
        """0-based block indices of segment ``g`` (1-based)."""
        n = self.blocks_per_segment
        return range((g - 1) * n, g * n)


# name -> (depth, hidden, mlp, heads, patch, image)
PRESETS = {
    "vit-s-54": dict(depth=54, hidden=384, mlp_dim=1536, heads=12, patch=16, image_size=224),
    "vit-b-24": dict(depth=24, hidden=768, mlp_dim=3072, heads=12, patch=16, image_size=224),
    "vit-b-48": dict(depth=48, hidden=768, mlp_dim=3072, heads=12, patch=16, image_size=224),
    "vit-s": dict(depth=12, hidden=384, mlp_dim=1536, heads=6, patch=16, image_size=224),
    "vit-b": dict(depth=12, hidden=768, mlp_dim=3072, heads=12, patch=16, image_size=224),
    "tiny-8": dict(depth=8, hidden=64, mlp_dim=256, heads=4, patch=4, image_size=32),
}

# default segment counts used for pre-training each preset
DEFAULT_SEGMENTS = {"vit-s-54": 6, "vit-b-48": 6, "vit-b-24": 4}


def preset(name: str, **overrides) -> ViTConfig:
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[key], segments=DEFAULT_SEGMENTS.get(key, 2))
    kw.update(overrides)
    return ViTConfig(**kw)


@dataclass
class SegmentedEncoderState:
    z0: TokenSequence
    per_segment: list[TokenSequence]

    @property
    def G(self) -> int:
        return len(self.per_segment)

    def prior(self, g: int) -> list[TokenSequence]:
        """``[z_{g-1}, ..., z_0]`` for 1-based segment ``g``."""
        seqs = [self.z0] + self.per_segment
        return [seqs[j] for j in range(g - 1, -1, -1)]


# -- initialisation ----------------------------------------------------------------
def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std."""
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def init_block_params(prefix: str, dim: int, mlp_dim: int, rng: np.random.Generator, dtype) -> dict[str, Parameter]:
    spec = {
        "norm1.gain": np.ones(dim), "norm1.bias": np.zeros(dim),
        "attn.qkv.weight": trunc_normal(rng, (dim, 3 * dim)), "attn.qkv.bias": np.zeros(3 * dim),
        "attn.proj.weight": trunc_normal(rng, (dim, dim)), "attn.proj.bias": np.zeros(dim),
        "norm2.gain": np.ones(dim), "norm2.bias": np.zeros(dim),
        "mlp.fc1.weight": trunc_normal(rng, (dim, mlp_dim)), "mlp.fc1.bias": np.zeros(mlp_dim),
        "mlp.fc2.weight": trunc_normal(rng, (mlp_dim, dim)), "mlp.fc2.bias": np.zeros(dim),
    }
    return {f"{prefix}.{k}": Parameter(f"{prefix}.{k}", v, dtype=dtype) for k, v in spec.items()}


def init_encoder_params(cfg: ViTConfig, rng: np.random.Generator, dtype=np.float64,
                        prefix: str = "encoder") -> dict[str, Parameter]:
    D, N = cfg.hidden, cfg.num_patches
    if cfg.pos_embed == "sincos":
        pos = sincos_pos_embed(D, cfg.image_size // cfg.patch)
    else:
        pos = trunc_normal(rng, (N + 1, D))
    base = {
        "patch_embed.weight": trunc_normal(rng, (cfg.patch_dim, D)),
        "patch_embed.bias": np.zeros(D),
        "cls_token": trunc_normal(rng, (D,)),
        "pos_embed": pos,
    }
    params = {f"{prefix}.{k}": Parameter(f"{prefix}.{k}", v, dtype=dtype) for k, v in base.items()}
    for i in range(cfg.depth):
        params.update(init_block_params(f"{prefix}.blocks.{i}", D, cfg.mlp_dim, rng, dtype))
    params[f"{prefix}.norm.gain"] = Parameter(f"{prefix}.norm.gain", np.ones(D), dtype=dtype)
    params[f"{prefix}.norm.bias"] = Parameter(f"{prefix}.norm.bias", np.zeros(D), dtype=dtype)
    return params


def frozen_names(cfg: ViTConfig, prefix: str = "encoder") -> set[str]:
    """Parameters that are not trained (fixed sin-cos embeddings)."""
    return {f"{prefix}.pos_embed"} if cfg.pos_embed == "sincos" else set()


# -- forward -----------------------------------------------------------------------
def multi_head_attention(q_in: Tensor, kv_in: Tensor, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
                         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention with queries from ``q_in`` and keys/values from ``kv_in``."""
    B, Tq, _ = q_in.shape
    Tk = kv_in.shape[1]
    dim = wq.shape[1]
    hd = dim // heads
    q = linear(q_in, wq, bq).reshape(B, Tq, heads, hd).transpose(0, 2, 1, 3)
    k = linear(kv_in, wk, bk).reshape(B, Tk, heads, hd).transpose(0, 2, 3, 1)
    v = linear(kv_in, wv, bv).reshape(B, Tk, heads, hd).transpose(0, 2, 1, 3)
    attn = softmax(scale(matmul(q, k), hd ** -0.5), axis=-1)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Tq, dim)
    return linear(out, wo, bo)


def self_attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    B, T, D = x.shape
    hd = D // heads
    qkv = linear(x, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(B, T, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = softmax(scale(matmul(q, k.swapaxes(-1, -2)), hd ** -0.5), axis=-1)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def mlp(x: Tensor, params, prefix: str) -> Tensor:
    h = gelu(linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def ln(x: Tensor, params, prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], LN_EPS)


def transformer_block(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Pre-norm block: ``x + MHA(LN(x))`` followed by ``+ MLP(LN(.))``."""
    x = add(x, self_attention(ln(x, params, f"{prefix}.norm1"), params, f"{prefix}.attn", heads))
    return add(x, mlp(ln(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp"))


def tokenize(patches, plan: MaskPlan, params, prefix: str = "encoder") -> TokenSequence:
    return embed_visible(patches, plan, params[f"{prefix}.patch_embed.weight"], params[f"{prefix}.patch_embed.bias"],
                         params[f"{prefix}.pos_embed"], params[f"{prefix}.cls_token"])


def run_blocks(x: Tensor, params, cfg: ViTConfig, blocks, prefix: str = "encoder") -> Tensor:
    for i in blocks:
        x = transformer_block(x, params, f"{prefix}.blocks.{i}", cfg.heads)
    return x


def encode_segments(z0: TokenSequence, cfg: ViTConfig, params, prefix: str = "encoder") -> SegmentedEncoderState:
    """Apply the G segments in turn, keeping every segment's output."""
    outputs = []
    x = z0.tokens
    for g in range(1, cfg.segments + 1):
        x = run_blocks(x, params, cfg, cfg.segment_blocks(g), prefix)
        outputs.append(TokenSequence(x, z0.plan, g))
    return SegmentedEncoderState(z0, outputs)


def encode(z0: TokenSequence, cfg: ViTConfig, params, prefix: str = "encoder") -> Tensor:
    """Monolithic forward through all blocks followed by the final norm."""
    x = run_blocks(z0.tokens, params, cfg, range(cfg.depth), prefix)
    return ln(x, params, f"{prefix}.norm")


# -- depth surgery -------------------------------------------------------------------
def block_index(name: str, prefix: str = "encoder") -> int | None:
    head = f"{prefix}.blocks."
    if not name.startswith(head):
        return None
    return int(name[len(head):].split(".", 1)[0])


def reinit_tail(params, cfg: ViTConfig, k: int, rng: np.random.Generator, prefix: str = "encoder") -> dict[str, Parameter]:
    """Copy of ``params`` with the last ``k`` encoder blocks freshly initialised."""
    if not 0 <= k <= cfg.depth:
        raise ConfigError(f"cannot re-initialise {k} of {cfg.depth} blocks")
    out = {n: Parameter(n, p.data.copy()) for n, p in params.items()}
    dtype = next(iter(params.values())).dtype
    for i in range(cfg.depth - k, cfg.depth):
        fresh = init_block_params(f"{prefix}.blocks.{i}", cfg.hidden, cfg.mlp_dim, rng, dtype)
        out.update(fresh)
    return out


def truncate(cfg: ViTConfig, keep: int, segments: int | None = None) -> ViTConfig:
    """Config for pre-training only the first ``keep`` blocks."""
    if not 1 <= keep <= cfg.depth:
        raise ConfigError(f"keep={keep} outside 1..{cfg.depth}")
    if segments is None:
        segments = cfg.segments if keep % cfg.segments == 0 else 1
    return replace(cfg, depth=keep, segments=segments)


def expand(truncated_params, full_cfg: ViTConfig, rng: np.random.Generator, prefix: str = "encoder") -> dict[str, Parameter]:
    """Full-depth encoder whose first blocks come from a truncated model; the tail is random."""
    dtype = next(iter(truncated_params.values())).dtype
    fresh = init_encoder_params(full_cfg, rng, dtype, prefix)
    out = {}
    for name, p in fresh.items():
        src = truncated_params.get(name)
        if src is not None:
            if src.shape != p.shape:
                raise ConfigError(f"{name}: truncated shape {src.shape} != {p.shape}")
            out[name] = Parameter(name, src.data.copy())
        else:
            out[name] = p
    return out
