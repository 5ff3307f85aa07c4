"""Optimisation: AdamW, learning-rate schedules, moving averages, training loops and checkpoints."""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .diffcore import Parameter, Tensor, cross_entropy, layer_norm, linear, mean_over, zero_grad
from .encoder import ViTConfig, block_index, encode, tokenize
from .tokenizer import ImageBatch, augment, full_plan, patchify


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


# -- schedules --------------------------------------------------------------------------
@dataclass(frozen=True)
class OptimSpec:
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    batch_size: int = 4096
    warmup_epochs: float = 40
    total_epochs: float = 800
    schedule: str = "cosine"
    steps_per_epoch: int = 1
    milestones: tuple[float, ...] = (0.9, 0.95)
    decay_factor: float = 0.1
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ValueError("warmup longer than training")
        if self.schedule not in ("cosine", "step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    @property
    def total_steps(self) -> int:
        return int(round(self.total_epochs * self.steps_per_epoch))

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.steps_per_epoch))


def lr_at(spec: OptimSpec, step: float) -> float:
    """Linear warm-up from 0, then cosine decay to 0 or step decay at the milestone fractions."""
    total, warm = spec.total_steps, spec.warmup_steps
    if step > total:
        raise ValueError(f"step {step} beyond schedule length {total}")
    peak = spec.peak_lr
    if step < warm:
        return peak * step / warm
    if spec.schedule == "cosine":
        if total == warm:
            return peak
        return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))
    passed = sum(step >= m * total for m in spec.milestones)
    return peak * spec.decay_factor ** passed


# -- optimiser --------------------------------------------------------------------------
def adamw_step(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update at step ``t`` (1-based); returns new (p, m, v)."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    p = p * (1 - lr * weight_decay)
    p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p, m, v


def decays(name: str, p: Tensor) -> bool:
    """Weight decay applies to matrices only; biases, norms, tokens and position tables are exempt."""
    return p.ndim >= 2 and not name.endswith("pos_embed")


class AdamW:
    def __init__(self, params: Mapping[str, Parameter], betas=(0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 0.05, lr_scale: Mapping[str, float] | None = None, grad_clip: float = 0.0):
        self.params = dict(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_scale = dict(lr_scale or {})
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        zero_grad(self.params)

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                             for p in self.params.values() if p.grad is not None))

    def step(self, lr: float):
        self.t += 1
        clip = 1.0
        if self.grad_clip > 0:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                clip = self.grad_clip / (norm + 1e-6)
        for n, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if clip != 1.0:
                g = g * clip
            wd = self.weight_decay if decays(n, p) else 0.0
            p.data, self.m[n], self.v[n] = adamw_step(
                p.data, g, self.m[n], self.v[n], self.t, lr * self.lr_scale.get(n, 1.0),
                self.betas, self.eps, wd)
            p.data = p.data.astype(self.m[n].dtype, copy=False)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, state: Mapping[str, np.ndarray], t: int):
        for n in self.params:
            self.m[n] = np.array(state[f"m.{n}"])
            self.v[n] = np.array(state[f"v.{n}"])
        self.t = t


def _moving_average(target: Mapping[str, Tensor], source: Mapping[str, Tensor], decay: float,
                    rename: Callable[[str], str] = lambda n: n):
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for name, t in target.items():
        src = source.get(rename(name))
        if src is None:
            raise KeyError(f"no online parameter for {name!r}")
        if src.shape != t.shape:
            raise ValueError(f"{name}: shape {src.shape} vs {t.shape}")
        t.data = (decay * t.data + (1 - decay) * src.data).astype(t.dtype, copy=False)


def momentum_update(online: Mapping[str, Tensor], momentum: Mapping[str, Tensor], m: float = 0.996,
                    prefix: tuple[str, str] = ("encoder.", "momentum.")):
    """theta_m <- m * theta_m + (1 - m) * theta, matched by name (momentum prefix mapped to online prefix)."""
    online_p, mom_p = prefix
    _moving_average(momentum, online, m, lambda n: n.replace(mom_p, online_p, 1))


def ema_update(params: Mapping[str, Tensor], ema: Mapping[str, Tensor], decay: float = 0.9998):
    _moving_average(ema, params, decay)


def clone_params(params: Mapping[str, Tensor]) -> dict[str, Parameter]:
    return {n: Parameter(n, p.data.copy()) for n, p in params.items()}


# -- pre-training ------------------------------------------------------------------------
@dataclass
class RngSet:
    """One generator per source of randomness."""

    data: np.random.Generator
    augment: np.random.Generator
    mask: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngSet":
        d, a, m = np.random.SeedSequence(seed).spawn(3)
        return cls(np.random.default_rng(d), np.random.default_rng(a), np.random.default_rng(m))

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("data", "augment", "mask")}

    def load_state(self, state: Mapping):
        for k in ("data", "augment", "mask"):
            getattr(self, k).bit_generator.state = state[k]


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """One epoch of shuffled index batches (trailing partial batch dropped)."""
    order = rng.permutation(n)
    for i in range(0, n - batch_size + 1, batch_size):
        yield order[i:i + batch_size]


class MetricsWriter:
    """Append-only JSON lines."""

    def __init__(self, path: str | Path | None, append: bool = False):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path and not append:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class PretrainState:
    """Everything needed to continue a run exactly.

    ``epoch_start`` is the data generator state before the current epoch's
    permutation and ``epoch_pos`` the number of its batches already used, so
    a resumed run replays the same permutation and skips what was consumed.
    """

    optimizer: AdamW
    rngs: RngSet
    step: int = 0
    epoch_start: dict | None = None
    epoch_pos: int = 0

    def rng_state(self) -> dict:
        return {**self.rngs.state(), "epoch_start": self.epoch_start, "epoch_pos": self.epoch_pos}


def pretrain_step(model, images: np.ndarray, state: PretrainState, spec: OptimSpec,
                  augment_scale=(0.2, 1.0), probe: Callable | None = None) -> dict:
    rngs = state.rngs
    if augment_scale is not None:
        images = augment(images, rngs.augment, augment_scale)
    plan = model.sample_plan(len(images), rngs.mask)
    lr = lr_at(spec, state.step)
    state.optimizer.zero_grad()
    report, _ = model.loss(images, plan)
    value = report.total.item()
    if not math.isfinite(value):
        raise TrainingDiverged(state.step, value)
    report.total.backward()
    record = {"step": state.step, "lr": lr}
    record.update(report.values())
    if probe is not None:
        record.update(probe(model))
    state.optimizer.step(lr)
    if model.momentum_params:
        momentum_update(model.params, model.momentum_params, model.objective.momentum)
    state.step += 1
    return record


def pretrain_epoch(model, data: ImageBatch, spec: OptimSpec, state: PretrainState,
                   writer: MetricsWriter | None = None, max_steps: int | None = None,
                   augment_scale=(0.2, 1.0), probe: Callable | None = None) -> list[dict]:
    """One pass over ``data``; returns the per-step metric records."""
    records = []
    rng = state.rngs.data
    if state.epoch_pos and state.epoch_start is not None:
        rng.bit_generator.state = state.epoch_start
    else:
        state.epoch_start, state.epoch_pos = rng.bit_generator.state, 0
    skip = state.epoch_pos
    for i, idx in enumerate(batches(len(data), min(spec.batch_size, len(data)), rng)):
        if i < skip:
            continue
        if max_steps is not None and state.step >= max_steps:
            return records
        rec = pretrain_step(model, data.values[idx], state, spec, augment_scale, probe)
        state.epoch_pos = i + 1
        rec["epoch"] = state.step // max(spec.steps_per_epoch, 1)
        records.append(rec)
        if writer is not None:
            writer.write(rec)
    state.epoch_pos = 0
    return records


def make_optimizer(model, spec: OptimSpec) -> AdamW:
    return AdamW(model.trainable(), spec.betas, spec.eps, spec.weight_decay, grad_clip=spec.grad_clip)


def pretrain(model, data: ImageBatch, spec: OptimSpec, seed: int = 0, steps: int | None = None,
             metrics_path: str | Path | None = None, augment_scale=(0.2, 1.0),
             state: PretrainState | None = None, probe: Callable | None = None,
             append_metrics: bool = False) -> tuple[list[dict], PretrainState]:
    """Run pre-training until ``steps`` optimiser steps have been taken (default: the whole schedule)."""
    steps = spec.total_steps if steps is None else steps
    state = state or PretrainState(make_optimizer(model, spec), RngSet.from_seed(seed))
    writer = MetricsWriter(metrics_path, append_metrics)
    records = []
    while state.step < steps:
        records += pretrain_epoch(model, data, spec, state, writer, steps, augment_scale, probe)
    return records, state


# -- fine-tuning and probing --------------------------------------------------------------
def layer_decay_multipliers(names, depth: int, decay: float, prefix: str = "encoder") -> dict[str, float]:
    """Geometric lr ladder: head/final norm 1, block l (1-based) decay**(L+1-l), embeddings decay**(L+1)."""
    out = {}
    for n in names:
        i = block_index(n, prefix)
        if i is not None:
            out[n] = decay ** (depth - i)
        elif n.startswith(f"{prefix}.") and not n.startswith(f"{prefix}.norm."):
            out[n] = decay ** (depth + 1)
        else:
            out[n] = 1.0
    return out


def classifier_logits(params, vit: ViTConfig, images: np.ndarray, dtype) -> Tensor:
    x = patchify(np.asarray(images, dtype=dtype), vit.patch)
    z0 = tokenize(Tensor(x), full_plan(vit.num_patches, len(x)), params)
    feats = mean_over(encode(z0, vit, params)[:, 1:], axis=1)
    feats = layer_norm(feats, params["head.norm.gain"], params["head.norm.bias"])
    return linear(feats, params["head.weight"], params["head.bias"])


def init_head(vit: ViTConfig, num_classes: int, rng: np.random.Generator, dtype) -> dict[str, Parameter]:
    from .encoder import trunc_normal

    D = vit.hidden
    return {
        "head.norm.gain": Parameter("head.norm.gain", np.ones(D), dtype=dtype),
        "head.norm.bias": Parameter("head.norm.bias", np.zeros(D), dtype=dtype),
        "head.weight": Parameter("head.weight", trunc_normal(rng, (D, num_classes), std=2e-5), dtype=dtype),
        "head.bias": Parameter("head.bias", np.zeros(num_classes), dtype=dtype),
    }


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class FinetuneResult:
    accuracy: float
    ema_accuracy: float | None
    records: list[dict] = field(default_factory=list)
    params: dict[str, Parameter] = field(default_factory=dict)


def finetune(encoder_params, vit: ViTConfig, train: ImageBatch, test: ImageBatch, spec: OptimSpec,
             layer_decay: float = 0.65, label_smoothing: float = 0.1, ema_decay: float | None = 0.9998,
             seed: int = 0, num_classes: int | None = None, augment_scale=(0.35, 1.0),
             steps: int | None = None) -> FinetuneResult:
    """Full fine-tuning of encoder + classification head with layer-wise lr decay and optional EMA."""
    if train.labels is None or test.labels is None:
        raise ValueError("fine-tuning needs labelled data")
    num_classes = num_classes or int(max(train.labels.max(), test.labels.max()) + 1)
    if train.labels.max() >= num_classes or test.labels.max() >= num_classes:
        raise ValueError(f"labels exceed {num_classes} classes")
    dtype = next(iter(encoder_params.values())).dtype
    rngs = RngSet.from_seed(seed)
    params = {n: Parameter(n, p.data.copy()) for n, p in encoder_params.items() if n.startswith("encoder.")}
    params.update(init_head(vit, num_classes, np.random.default_rng(seed), dtype))
    from .encoder import frozen_names

    trainable = {n: p for n, p in params.items() if n not in frozen_names(vit)}
    scales = layer_decay_multipliers(trainable, vit.depth, layer_decay)
    opt = AdamW(trainable, spec.betas, spec.eps, spec.weight_decay, scales, spec.grad_clip)
    ema = clone_params(trainable) if ema_decay is not None else None
    steps = spec.total_steps if steps is None else steps
    records, step = [], 0
    while step < steps:
        for idx in batches(len(train), min(spec.batch_size, len(train)), rngs.data):
            if step >= steps:
                break
            imgs = train.values[idx]
            if augment_scale is not None:
                imgs = augment(imgs, rngs.augment, augment_scale)
            lr = lr_at(spec, step)
            opt.zero_grad()
            loss = cross_entropy(classifier_logits(params, vit, imgs, dtype), train.labels[idx], label_smoothing)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(step, loss.item())
            loss.backward()
            opt.step(lr)
            if ema is not None:
                ema_update(trainable, ema, ema_decay)
            records.append({"step": step, "lr": lr, "loss": loss.item()})
            step += 1
    acc = evaluate(params, vit, test, dtype)
    ema_acc = None
    if ema is not None:
        ema_acc = evaluate({**params, **ema}, vit, test, dtype)
    return FinetuneResult(acc, ema_acc, records, params)


def evaluate(params, vit: ViTConfig, data: ImageBatch, dtype, batch_size: int = 256) -> float:
    plain = {n: Tensor(p.data) for n, p in params.items()}
    logits = np.concatenate([classifier_logits(plain, vit, data.values[i:i + batch_size], dtype).data
                             for i in range(0, len(data), batch_size)])
    return accuracy(logits, data.labels)


def linear_probe(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray,
                 test_labels: np.ndarray, epochs: int = 100, lr: float = 1e-2, weight_decay: float = 0.0,
                 batch_size: int = 256, seed: int = 0) -> float:
    """Train a linear classifier on frozen, standardised features; return test accuracy."""
    train_labels = np.asarray(train_labels)
    k = int(max(train_labels.max(), np.max(test_labels)) + 1)
    mu = train_feats.mean(axis=0)
    sd = train_feats.std(axis=0) + 1e-6
    xtr = (train_feats - mu) / sd
    xte = (test_feats - mu) / sd
    rng = np.random.default_rng(seed)
    W = Parameter("probe.weight", np.zeros((xtr.shape[1], k)))
    b = Parameter("probe.bias", np.zeros(k))
    opt = AdamW({"w": W, "b": b}, (0.9, 0.999), 1e-8, weight_decay)
    for _ in range(epochs):
        for idx in batches(len(xtr), min(batch_size, len(xtr)), rng):
            opt.zero_grad()
            cross_entropy(linear(Tensor(xtr[idx]), W, b), train_labels[idx]).backward()
            opt.step(lr)
    return accuracy(xte @ W.data + b.data, np.asarray(test_labels))


def probe_encoder(model, train: ImageBatch, test: ImageBatch, params=None, seed: int = 0, **kw) -> float:
    """Linear-probe accuracy of ``model``'s encoder (or ``params``) on labelled data."""
    ftr = model.features(train.values, params)
    fte = model.features(test.values, params)
    return linear_probe(ftr, train.labels, fte, test.labels, seed=seed, **kw)


# -- named-tensor container and checkpoints -----------------------------------------------
MAGIC = b"MIRLTNSR"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    def __init__(self, name: str, reason: str):
        self.name = name
        super().__init__(f"tensor {name!r}: {reason}")


def write_tensor_file(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None):
    """Write ``tensors`` plus a JSON header.

    Layout (little-endian)::

        magic[8] version:u32 meta_len:u64 meta:utf8-json meta_crc:u32 count:u32
        count x { name_len:u16 name dtype_len:u8 dtype ndim:u8 shape:u64[ndim]
                  nbytes:u64 data crc32:u32 }

    Each record's CRC covers name, dtype, shape and data bytes.
    """
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<II", zlib.crc32(meta_bytes), len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            nb, db = name.encode(), arr.dtype.str.encode()
            head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(db)) + db
            head += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
            data = arr.tobytes()
            crc = zlib.crc32(data, zlib.crc32(head))
            fh.write(head + struct.pack("<Q", len(data)) + data + struct.pack("<I", crc))


def read_tensor_file(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a tensor file (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<IQ", buf, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        pos = 20
        meta_bytes = buf[pos:pos + meta_len]
        pos += meta_len
        meta_crc, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if zlib.crc32(meta_bytes) != meta_crc:
            raise CheckpointError(f"{path}: header checksum mismatch")
        meta = json.loads(meta_bytes)
        tensors = {}
        for _ in range(count):
            start = pos
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (dlen,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dtype = np.dtype(buf[pos:pos + dlen].decode())
            pos += dlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            head = buf[start:pos]
            (nbytes,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            data = buf[pos:pos + nbytes]
            pos += nbytes
            (crc,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            if len(data) != nbytes or zlib.crc32(data, zlib.crc32(head)) != crc:
                raise CheckpointError(f"{path}: checksum mismatch in tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt file ({exc})") from exc
    return tensors, meta


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    rng_state: dict | None
    step: int
    optimizer_t: int = 0
    extra: dict = field(default_factory=dict)

    def load_into(self, params: Mapping[str, Tensor], strict: bool = True):
        """Copy stored tensors into ``params``; raises :class:`CheckpointMismatch` at the first incompatibility."""
        for name, p in params.items():
            if name not in self.params:
                if strict:
                    raise CheckpointMismatch(name, "missing from checkpoint")
                continue
            arr = self.params[name]
            if arr.shape != p.shape:
                raise CheckpointMismatch(name, f"checkpoint shape {arr.shape} vs model {p.shape}")
            if arr.dtype != p.dtype:
                raise CheckpointMismatch(name, f"checkpoint dtype {arr.dtype} vs model {p.dtype}")
        if strict:
            extra = sorted(set(self.params) - set(params))
            if extra:
                raise CheckpointMismatch(extra[0], "not present in model")
        for name, p in params.items():
            if name in self.params:
                p.data = self.params[name].copy()


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], optimizer: AdamW | None = None,
                    rngs: RngSet | None = None, step: int = 0, config: Mapping | None = None,
                    extra: Mapping | None = None, state: PretrainState | None = None):
    """Write parameters plus optional optimiser / rng / step; ``state`` supplies all three at once."""
    rng_state = rngs.state() if rngs is not None else None
    if state is not None:
        optimizer, step, rng_state = state.optimizer, state.step, state.rng_state()
    tensors = {f"param.{n}": p.data for n, p in params.items()}
    if optimizer is not None:
        tensors.update({f"opt.{k}": v for k, v in optimizer.state().items()})
    meta = {
        "kind": "checkpoint",
        "config": dict(config or {}),
        "step": int(step),
        "optimizer_t": optimizer.t if optimizer is not None else 0,
        "rng_state": rng_state,
        "extra": dict(extra or {}),
    }
    write_tensor_file(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = read_tensor_file(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: tensor file is not a checkpoint")
    params = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    moments = {k[len("opt."):]: v for k, v in tensors.items() if k.startswith("opt.")}
    return Checkpoint(FORMAT_VERSION, meta["config"], params, moments, meta.get("rng_state"),
                      meta["step"], meta.get("optimizer_t", 0), meta.get("extra", {}))


def restore_state(ckpt: Checkpoint, model, spec: OptimSpec) -> PretrainState:
    """Load parameters, optimiser moments, rng state and step counter to resume pre-training."""
    ckpt.load_into(model.state_params())
    opt = make_optimizer(model, spec)
    if ckpt.moments:
        opt.load_state(ckpt.moments, ckpt.optimizer_t)
    rngs = RngSet.from_seed(0)
    state = PretrainState(opt, rngs, ckpt.step)
    if ckpt.rng_state:
        rngs.load_state(ckpt.rng_state)
        state.epoch_start = ckpt.rng_state.get("epoch_start")
        state.epoch_pos = int(ckpt.rng_state.get("epoch_pos", 0))
    return state
