"""Patch tokenisation, mask sampling and image data sources."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import DimensionError, Tensor, add, broadcast_to, concat, gather_rows, linear


@dataclass
class ImageBatch:
    values: np.ndarray  # (B, C, H, W) in [0, 1]
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[1] < 1:
            raise DimensionError(f"ImageBatch expects (B, C, H, W), got {self.values.shape}")

    def __len__(self):
        return self.values.shape[0]


@dataclass
class MaskPlan:
    """Disjoint visible / masked patch indices for each batch element.

    ``visible`` is (B, |V|) and ``masked`` is (B, |M|); row ``b`` of the two
    arrays together is a permutation of ``range(N)``.
    """

    N: int
    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        self.visible = np.asarray(self.visible, dtype=np.int64).reshape(len(self.visible), -1)
        self.masked = np.asarray(self.masked, dtype=np.int64).reshape(len(self.visible), -1)

    @property
    def batch(self) -> int:
        return self.visible.shape[0]

    @property
    def num_visible(self) -> int:
        return self.visible.shape[1]

    @property
    def num_masked(self) -> int:
        return self.masked.shape[1]

    @property
    def ids_restore(self) -> np.ndarray:
        """Index that maps the stored order ``[visible..., masked...]`` back to patch order."""
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")

    def mask_matrix(self) -> np.ndarray:
        """(B, N) array with 1 at masked positions."""
        m = np.zeros((self.batch, self.N))
        np.put_along_axis(m, self.masked, 1.0, axis=1)
        return m

    def validate(self):
        full = np.sort(np.concatenate([self.visible, self.masked], axis=1), axis=1)
        if not np.array_equal(full, np.broadcast_to(np.arange(self.N), full.shape)):
            raise ValueError("visible and masked indices must partition range(N)")

    def select(self, rows) -> "MaskPlan":
        return MaskPlan(self.N, self.visible[rows], self.masked[rows])


@dataclass
class TokenSequence:
    """Token embeddings (B, |V|+1, D) with the class token in slot 0."""

    tokens: Tensor
    plan: MaskPlan
    depth_tag: int = 0

    def __post_init__(self):
        if self.tokens.shape[1] != self.plan.num_visible + 1:
            raise DimensionError(
                f"{self.tokens.shape[1]} tokens for {self.plan.num_visible} visible patches")


def patchify(images: np.ndarray | ImageBatch, P: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, P*P*C), patches in row-major order, each flattened as (p, q, c)."""
    x = images.values if isinstance(images, ImageBatch) else np.asarray(images)
    B, C, H, W = x.shape
    if H % P or W % P:
        raise DimensionError(f"image {H}x{W} not divisible by patch size {P}")
    h, w = H // P, W // P
    x = x.reshape(B, C, h, P, w, P).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(B, h * w, P * P * C)


def unpatchify(patches: np.ndarray, P: int, H: int, W: int) -> np.ndarray:
    patches = np.asarray(patches)
    B, N, K = patches.shape
    if H % P or W % P or N * P * P != H * W or K % (P * P):
        raise DimensionError(f"{N} patches of dim {K} do not tile a {H}x{W} image with P={P}")
    C = K // (P * P)
    h, w = H // P, W // P
    x = patches.reshape(B, h, w, P, P, C).transpose(0, 5, 1, 3, 2, 4)
    return x.reshape(B, C, H, W)


def num_masked(N: int, ratio: float) -> int:
    return int(np.floor(ratio * N + 0.5))


def sample_mask(N: int, ratio: float, rng: np.random.Generator, batch: int = 1) -> MaskPlan:
    """Independent uniform masks per batch element, |M| = round(ratio * N)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    nm = num_masked(N, ratio)
    order = np.argsort(rng.random((batch, N)), axis=1)
    visible = np.sort(order[:, : N - nm], axis=1)
    masked = np.sort(order[:, N - nm:], axis=1)
    return MaskPlan(N, visible, masked)


def full_plan(N: int, batch: int) -> MaskPlan:
    """Plan with every patch visible (used for fine-tuning and probing)."""
    return MaskPlan(N, np.tile(np.arange(N), (batch, 1)), np.zeros((batch, 0), dtype=np.int64))


def embed_visible(patches, plan: MaskPlan, projection: Tensor, proj_bias: Tensor | None,
                  pos_embed: Tensor, class_token: Tensor) -> TokenSequence:
    """Project visible patches, add positional embeddings at their indices and prepend the class token.

    ``pos_embed`` has N+1 rows; row 0 belongs to the class token.
    """
    patches = patches if isinstance(patches, Tensor) else Tensor(patches, dtype=projection.dtype)
    B = patches.shape[0]
    vis = gather_rows(patches, plan.visible)
    x = linear(vis, projection, proj_bias)
    x = add(x, pos_embed[plan.visible + 1])
    cls = broadcast_to(add(class_token, pos_embed[0]), (B, 1, class_token.shape[-1]))
    return TokenSequence(concat([cls, x], axis=1), plan, 0)


def sincos_pos_embed(dim: int, grid: int, cls_token: bool = True) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding of shape (grid*grid [+1], dim)."""
    if dim % 4:
        raise ValueError("sincos embedding needs dim divisible by 4")
    omega = 1.0 / 10000 ** (np.arange(dim // 4) / (dim / 4.0))
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    parts = []
    for coord in (gy.reshape(-1), gx.reshape(-1)):
        out = np.outer(coord, omega)
        parts += [np.sin(out), np.cos(out)]
    emb = np.concatenate(parts, axis=1)
    if cls_token:
        emb = np.concatenate([np.zeros((1, dim)), emb], axis=0)
    return emb


# -- data sources --------------------------------------------------------------
def synthetic_textures(n: int, size: int = 32, channels: int = 3, num_classes: int = 10,
                       seed: int = 0, jitter: int = 2, noise: float = 0.05, smooth: float = 3.0) -> ImageBatch:
    """Seeded 8-bit images with ``num_classes`` labels.

    Each class owns one smooth random field (a fixed template shared by every
    seed).  An image is a randomly shifted crop of its class template under a
    per-channel affine colour transform (random sign, gain and offset) plus
    pixel noise.  Mean colour and per-pixel intensity carry almost no label
    information; the class lives in the spatial layout of the field.
    ``smooth`` is the Gaussian width (pixels) of the fields.
    """
    from scipy.ndimage import gaussian_filter

    template_rng = np.random.default_rng(12345)
    pad = size + 2 * jitter
    templates = []
    for _ in range(num_classes):
        f = gaussian_filter(template_rng.normal(size=(pad, pad)), smooth, mode="wrap")
        templates.append((f - f.mean()) / f.std())
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, n)
    images = np.empty((n, channels, size, size), dtype=np.float64)
    for i, k in enumerate(labels):
        dy, dx = rng.integers(0, 2 * jitter + 1, 2)
        t = templates[k][dy:dy + size, dx:dx + size]
        gain = rng.uniform(0.08, 0.18, channels) * rng.choice([-1, 1], channels)
        offset = rng.uniform(0.35, 0.65, channels)
        images[i] = offset[:, None, None] + gain[:, None, None] * t + rng.normal(0, noise, (channels, size, size))
    pixels = np.round(np.clip(images, 0.0, 1.0) * 255.0)
    return ImageBatch((pixels / 255.0).astype(np.float32), labels.astype(np.int64))


def load_image_directory(path: str | Path, size: int, channels: int = 3) -> ImageBatch:
    """Decode every image below ``path`` to (C, size, size) floats in [0, 1].

    Sub-directory names become integer labels (sorted); images directly in
    ``path`` get no labels.
    """
    from PIL import Image

    root = Path(path)
    exts = {".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".gif", ".tif", ".tiff"}
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    entries: list[tuple[Path, int]] = []
    if classes:
        for k, name in enumerate(classes):
            entries += [(f, k) for f in sorted((root / name).rglob("*")) if f.suffix.lower() in exts]
    else:
        entries = [(f, -1) for f in sorted(root.iterdir()) if f.suffix.lower() in exts]
    if not entries:
        raise FileNotFoundError(f"no images found under {root}")
    mode = "RGB" if channels == 3 else "L"
    out = np.empty((len(entries), channels, size, size), dtype=np.float32)
    for i, (f, _) in enumerate(entries):
        with Image.open(f) as im:
            arr = np.asarray(im.convert(mode).resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
        out[i] = arr.reshape(size, size, channels).transpose(2, 0, 1)
    labels = np.array([k for _, k in entries], dtype=np.int64) if classes else None
    return ImageBatch(out, labels)


def random_resized_crop(img: np.ndarray, rng: np.random.Generator, scale=(0.2, 1.0),
                        ratio=(3 / 4, 4 / 3)) -> np.ndarray:
    """Crop a random area/aspect box from a (C, H, W) image and resize it back bilinearly."""
    C, H, W = img.shape
    area = H * W
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        w = int(round(np.sqrt(target * aspect)))
        h = int(round(np.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            break
    else:
        h, w, top, left = H, W, 0, 0
    ys = top + (np.arange(H) + 0.5) * h / H - 0.5
    xs = left + (np.arange(W) + 0.5) * w / W - 0.5
    ys = np.clip(ys, top, top + h - 1)
    xs = np.clip(xs, left, left + w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top_row = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot_row = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top_row * (1 - wy) + bot_row * wy


def augment(images: np.ndarray, rng: np.random.Generator, scale=(0.2, 1.0)) -> np.ndarray:
    """Random resized crop followed by a random horizontal flip, per image."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        crop = random_resized_crop(img, rng, scale)
        out[i] = crop[:, :, ::-1] if rng.random() < 0.5 else crop
    return out
