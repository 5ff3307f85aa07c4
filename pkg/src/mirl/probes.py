"""Diagnostics: tail re-initialisation sweeps, truncated pre-training, gradient norms and reconstruction dumps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .encoder import ConfigError, ViTConfig, block_index, expand, reinit_tail, truncate
from .tokenizer import ImageBatch, full_plan, unpatchify
from .training import OptimSpec, finetune, linear_probe, pretrain

CSV_COLUMNS = ("probe", "sweep_var", "seed", "metric")


@dataclass
class ProbeResult:
    """One row per (sweep point, seed)."""

    probe: str
    sweep_var: str
    rows: list[tuple[float, int, float]] = field(default_factory=list)

    def add(self, value, seed: int, metric: float):
        self.rows.append((value, int(seed), float(metric)))

    @property
    def seeds(self) -> list[int]:
        return sorted({s for _, s, _ in self.rows})

    def points(self) -> list:
        return list(dict.fromkeys(v for v, _, _ in self.rows))

    def summary(self) -> dict:
        """Mean and (population) variance of the metric at each sweep point."""
        out = {}
        for v in self.points():
            m = np.array([x for p, _, x in self.rows if p == v])
            out[v] = {"mean": float(m.mean()), "var": float(m.var()), "n": len(m)}
        return out

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for v, s, m in self.rows:
                w.writerow([self.probe, f"{self.sweep_var}={v}", s, repr(m)])


# -- evaluation used by the sweeps -------------------------------------------------------
@dataclass(frozen=True)
class EvalSpec:
    """How a probed encoder is scored: ``linear`` (frozen features) or ``finetune``."""

    mode: str = "linear"
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    finetune: OptimSpec | None = None
    layer_decay: float = 0.65
    label_smoothing: float = 0.1
    ema_decay: float | None = None

    def __post_init__(self):
        if self.mode not in ("linear", "finetune"):
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        if self.mode == "finetune" and self.finetune is None:
            raise ValueError("fine-tune evaluation needs an OptimSpec")


def encoder_features(params, vit: ViTConfig, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Mean-pooled final-norm patch tokens with every patch visible."""
    from .diffcore import Tensor
    from .encoder import encode, tokenize
    from .tokenizer import patchify

    plain = {n: Tensor(p.data) for n, p in params.items() if n.startswith("encoder.")}
    dtype = next(iter(plain.values())).dtype
    out = []
    for i in range(0, len(images), batch_size):
        x = patchify(np.asarray(images[i:i + batch_size], dtype=dtype), vit.patch)
        z0 = tokenize(Tensor(x), full_plan(vit.num_patches, len(x)), plain)
        out.append(encode(z0, vit, plain).data[:, 1:].mean(axis=1))
    return np.concatenate(out)


def evaluate_encoder(params, vit: ViTConfig, train: ImageBatch, test: ImageBatch, spec: EvalSpec,
                     seed: int = 0) -> float:
    if spec.mode == "linear":
        return linear_probe(encoder_features(params, vit, train.values), train.labels,
                            encoder_features(params, vit, test.values), test.labels,
                            epochs=spec.probe_epochs, lr=spec.probe_lr, seed=seed)
    res = finetune(params, vit, train, test, spec.finetune, spec.layer_decay, spec.label_smoothing,
                   spec.ema_decay, seed=seed)
    return res.accuracy


# -- tail re-initialisation sweep ------------------------------------------------------
def reinit_sweep(params, vit: ViTConfig, ks: Sequence[int], train: ImageBatch, test: ImageBatch,
                 spec: EvalSpec = EvalSpec(), seeds: Sequence[int] = (0,)) -> ProbeResult:
    """Re-initialise the last ``k`` blocks of a pre-trained encoder and score it, for each k and seed."""
    bad = [k for k in ks if not 0 <= k <= vit.depth]
    if bad:
        raise ConfigError(f"k={bad[0]} exceeds encoder depth {vit.depth}")
    result = ProbeResult("reinit", "k")
    enc = {n: p for n, p in params.items() if n.startswith("encoder.")}
    for k in ks:
        for s in seeds:
            fresh = reinit_tail(enc, vit, k, np.random.default_rng(10_000 + s))
            result.add(k, s, evaluate_encoder(fresh, vit, train, test, spec, seed=s))
    return result


# -- truncated pre-training --------------------------------------------------------------
@dataclass
class TruncatedRun:
    model: object
    expanded: dict
    result: ProbeResult
    records: list[dict]


def truncated_pretrain(vit: ViTConfig, keep: int, mode: str, train: ImageBatch, test: ImageBatch,
                       spec: OptimSpec, steps: int | None = None, seed: int = 0, decoder=None,
                       eval_spec: EvalSpec = EvalSpec(), dtype=np.float32, segments: int | None = None,
                       augment_scale=(0.2, 1.0)) -> TruncatedRun:
    """Pre-train only the first ``keep`` blocks, then score the full-depth encoder with a random tail."""
    from .model import MIRLModel, ObjectiveConfig

    if mode not in ("mae", "mirl"):
        raise ValueError("truncated pre-training supports mode 'mae' or 'mirl'")
    if mode == "mae":
        segments = 1
    elif segments is None:
        segments = vit.segments if keep % vit.segments == 0 else 2
    small = truncate(vit, keep, segments)
    model = MIRLModel(small, decoder, ObjectiveConfig(mode=mode), seed=seed, dtype=dtype)
    records, _ = pretrain(model, train, spec, seed=seed, steps=steps, augment_scale=augment_scale)
    full = replace(vit, segments=vit.segments)
    expanded = expand(model.encoder_params(), full, np.random.default_rng(20_000 + seed))
    result = ProbeResult(f"truncated-{mode}", "keep")
    result.add(keep, seed, evaluate_encoder(expanded, full, train, test, eval_spec, seed=seed))
    return TruncatedRun(model, expanded, result, records)


# -- gradient-norm instrumentation --------------------------------------------------------
GROUPS = {"attn.qkv": "attn_qkv", "attn.proj": "attn_fc", "mlp.": "mlp", "norm": "norm"}


def param_group(name: str, prefix: str = "encoder") -> tuple[int, str] | None:
    """(block, group) for an encoder block parameter, else None."""
    i = block_index(name, prefix)
    if i is None:
        return None
    rest = name.split(".", 3)[3]
    for key, group in GROUPS.items():
        if rest.startswith(key):
            return i, group
    return i, "other"


def grad_norms(params: Mapping, prefix: str = "encoder", blocks: Callable[[int], bool] | None = None) -> dict[str, float]:
    """L2 norm of the gradient per ``block<i>.<group>`` over encoder block parameters."""
    sq: dict[str, float] = {}
    for name, p in params.items():
        bg = param_group(name, prefix)
        if bg is None or (blocks is not None and not blocks(bg[0])):
            continue
        key = f"block{bg[0]}.{bg[1]}"
        g = p.grad if p.grad is not None else 0.0
        sq[key] = sq.get(key, 0.0) + float(np.sum(np.square(g, dtype=np.float64)))
    return {k: math.sqrt(v) for k, v in sq.items()}


@dataclass
class GradNormTrace:
    label: str
    records: list[dict]

    def series(self, key: str) -> np.ndarray:
        return np.array([r[f"grad.{key}"] for r in self.records])

    def to_csv(self, path: str | Path):
        keys = sorted(k for k in self.records[0] if k.startswith("grad.")) if self.records else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "step", "block", "group", "norm"])
            for r in self.records:
                for k in keys:
                    block, group = k[len("grad."):].split(".")
                    w.writerow([self.label, r["step"], block[len("block"):], group, repr(r[k])])


def grad_norm_probe(model, data: ImageBatch, spec: OptimSpec, steps: int, seed: int = 0,
                    blocks: Callable[[int], bool] | None = None, label: str | None = None,
                    metrics_path=None, augment_scale=(0.2, 1.0)) -> GradNormTrace:
    """Train for ``steps`` and record per-block, per-sublayer gradient norms at every step."""

    def probe(m):
        return {f"grad.{k}": v for k, v in grad_norms(m.params, blocks=blocks).items()}

    records, _ = pretrain(model, data, spec, seed=seed, steps=steps, metrics_path=metrics_path,
                          augment_scale=augment_scale, probe=probe)
    return GradNormTrace(label or model.objective.mode, records)


# -- reconstruction visualisation ----------------------------------------------------------
PANELS = ("ground_truth", "masked", "reconstruction", "residual", "main")


@dataclass
class ReconstructionPanels:
    images: np.ndarray  # (B, 5, C, H, W) in [0, 1], panel order as PANELS
    paths: list[Path] = field(default_factory=list)


def rescale(x: np.ndarray) -> np.ndarray:
    """Per-image affine map of min/max to [0, 1] (constant images map to 0.5)."""
    lo = x.min(axis=tuple(range(1, x.ndim)), keepdims=True)
    hi = x.max(axis=tuple(range(1, x.ndim)), keepdims=True)
    span = hi - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.5)


def reconstruction_panels(model, images: np.ndarray, seed: int = 0, pair: int = 1,
                          fill: float = 0.5) -> np.ndarray:
    """(B, 5, C, H, W): ground truth, masked input, main+residual, rescaled residual, main."""
    v = model.vit
    images = np.asarray(images, dtype=model.dtype)
    B = len(images)
    plan = model.sample_plan(B, np.random.default_rng(seed))
    res = model.forward(images, plan)
    if not res.pairs:
        raise ValueError("reconstruction panels need a pair-based objective (mirl or mae)")
    if not 1 <= pair <= len(res.pairs):
        raise ValueError(f"pair {pair} not in 1..{len(res.pairs)}")
    out = res.pairs[pair - 1]
    target = res.target
    main = out.main.data
    resid = out.residual.data if out.residual is not None else np.zeros_like(main)
    if model.objective.norm_pix:
        mu = target.mean(-1, keepdims=True)
        sd = np.sqrt(target.var(-1, keepdims=True) + 1e-6)
        main = main * sd + mu
        resid = resid * sd
    H = W = v.image_size
    masked = target.copy()
    np.put_along_axis(masked, plan.masked[..., None], fill, axis=1)
    panels = [
        images,
        unpatchify(masked, v.patch, H, W),
        unpatchify(main + resid, v.patch, H, W),
        rescale(unpatchify(resid, v.patch, H, W)),
        unpatchify(main, v.patch, H, W),
    ]
    return np.stack([np.clip(p, 0, 1) for p in panels], axis=1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) in [0, 1] -> (H, W, 3) uint8."""
    x = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    x = np.transpose(x, (1, 2, 0))
    if x.shape[2] == 1:
        x = np.repeat(x, 3, axis=2)
    return x


def strip(panels: np.ndarray, gap: int = 2) -> np.ndarray:
    """Lay five (C, H, W) panels side by side with white gaps; returns (H, W_total, 3) uint8."""
    tiles = [to_uint8(p) for p in panels]
    H = tiles[0].shape[0]
    sep = np.full((H, gap, 3), 255, dtype=np.uint8)
    row = []
    for i, t in enumerate(tiles):
        if i:
            row.append(sep)
        row.append(t)
    return np.concatenate(row, axis=1)


def write_ppm(path: str | Path, rgb: np.ndarray):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_image(path: Path, rgb: np.ndarray):
    if path.suffix == ".ppm":
        write_ppm(path, rgb)
    else:
        from PIL import Image

        Image.fromarray(rgb).save(path)


def reconstruction_dump(model, images: np.ndarray, out_dir: str | Path, seed: int = 0, pair: int = 1,
                        fmt: str = "png", separate: bool = False) -> ReconstructionPanels:
    """Write one five-panel strip per image (and optionally each panel on its own)."""
    if fmt not in ("png", "ppm"):
        raise ValueError("format must be png or ppm")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panels = reconstruction_panels(model, images, seed, pair)
    paths = []
    for i, p in enumerate(panels):
        path = out / f"recon_{i:03d}.{fmt}"
        write_image(path, strip(p))
        paths.append(path)
        if separate:
            for name, img in zip(PANELS, p):
                q = out / f"recon_{i:03d}_{name}.{fmt}"
                write_image(q, to_uint8(img))
                paths.append(q)
    return ReconstructionPanels(panels, paths)
