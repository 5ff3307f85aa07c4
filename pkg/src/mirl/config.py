"""Flat ``section.key = value`` run configuration: schema, parsing and cross-field validation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping

from .decoder import DecoderConfig
from .encoder import PRESETS, ConfigError, ViTConfig, preset
from .model import MODES, ObjectiveConfig
from .training import OptimSpec


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv: Callable) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        s = s.strip().strip("[]()")
        return tuple(conv(x) for x in s.replace(",", " ").split()) if s else ()
    return parse


def _optional(conv: Callable) -> Callable[[str], Any]:
    def parse(s: str):
        return None if s.strip().lower() in ("none", "") else conv(s)
    return parse


floats, ints = _list(float), _list(int)
opt_float, opt_int, opt_str = _optional(float), _optional(int), _optional(str)
opt_floats = _optional(floats)

# key -> (parser, default, help)
SCHEMA: dict[str, tuple[Callable, Any, str]] = {
    "run.seed": (opt_int, None, "master seed; falls back to $MIRL_SEED, then 0"),
    "run.output_dir": (str, "runs/default", "where metrics, checkpoints and artifacts go"),
    "run.dtype": (str, "float32", "float32 or float64"),
    "run.desk_runnable": (_bool, True, "false marks reference presets that are too large to run here"),
    "run.resume": (opt_str, None, "checkpoint to resume pre-training from"),
    "model.preset": (str, "tiny-8", f"one of {sorted(PRESETS)}"),
    "model.depth": (opt_int, None, "encoder blocks L (preset value if unset)"),
    "model.hidden": (opt_int, None, "encoder width"),
    "model.mlp_dim": (opt_int, None, "encoder MLP width"),
    "model.heads": (opt_int, None, "attention heads"),
    "model.segments": (opt_int, None, "segment count G (1 or even, divides depth)"),
    "model.patch": (opt_int, None, "patch size P"),
    "model.image_size": (opt_int, None, "input resolution"),
    "model.channels": (opt_int, None, "input channels"),
    "model.pos_embed": (opt_str, None, "learned or sincos"),
    "decoder.blocks": (int, 2, "blocks per decoder"),
    "decoder.hidden": (int, 128, "decoder width"),
    "decoder.heads": (int, 4, "decoder attention heads"),
    "decoder.mlp_ratio": (int, 4, "decoder MLP expansion"),
    "decoder.did": (_bool, True, "densely interconnected decoding"),
    "decoder.shared_mask_token": (_bool, True, "one mask token for every decoder"),
    "decoder.pos_init": (str, "sincos", "initial value of the learned decoder position table"),
    "mask.ratio": (float, 0.75, "fraction of patches hidden from the encoder"),
    "objective.mode": (str, "mirl", f"one of {MODES}"),
    "objective.lambdas": (opt_floats, None, "per-pair weights (default 2/G each)"),
    "objective.dagger_omega": (opt_float, None, "weight of the extra main-component term"),
    "objective.norm_pix": (_bool, False, "per-patch normalised pixel targets"),
    "objective.coarse_sigma": (float, 2.0, "Gaussian sigma for coarse/fine targets"),
    "objective.infonce_weight": (float, 0.0, "weight of the feature-level InfoNCE term"),
    "objective.infonce_tau": (float, 0.2, "InfoNCE temperature"),
    "objective.momentum": (float, 0.996, "momentum-encoder coefficient"),
    "objective.perceptual_weight": (float, 0.0, "weight of the perceptual term"),
    "objective.perceptual_layers": (_optional(ints), None, "extractor layers used (default all)"),
    "objective.extractor_path": (opt_str, None, "tensor file with extractor weights (seeded convnet if unset)"),
    "optim.base_lr": (float, 1.5e-4, "lr = base_lr * batch_size / 256"),
    "optim.weight_decay": (float, 0.05, "decoupled weight decay"),
    "optim.betas": (floats, (0.9, 0.95), "Adam betas"),
    "optim.eps": (float, 1e-8, "Adam epsilon"),
    "optim.batch_size": (int, 64, "images per step"),
    "optim.warmup_epochs": (float, 5.0, "linear warm-up length"),
    "optim.total_epochs": (float, 100.0, "schedule length"),
    "optim.schedule": (str, "cosine", "cosine or step"),
    "optim.grad_clip": (float, 0.0, "global gradient-norm clip (0 disables)"),
    "optim.steps": (opt_int, None, "stop after this many steps (defaults to the full schedule)"),
    "data.source": (str, "synthetic", "synthetic or directory"),
    "data.path": (opt_str, None, "image directory when data.source = directory"),
    "data.num_train": (int, 2000, "synthetic training images"),
    "data.num_test": (int, 1000, "synthetic held-out images"),
    "data.num_classes": (int, 10, "synthetic classes"),
    "data.seed": (int, 0, "synthetic data seed"),
    "data.test_fraction": (float, 0.2, "held-out share for directory data"),
    "data.augment": (_bool, True, "random resized crop + horizontal flip during pre-training"),
    "data.crop_scale": (floats, (0.2, 1.0), "area range of the random resized crop"),
    "finetune.checkpoint": (opt_str, None, "pre-trained checkpoint (random init if unset)"),
    "finetune.mode": (str, "linear", "linear (frozen probe) or full"),
    "finetune.probe_epochs": (int, 100, "linear-probe epochs"),
    "finetune.probe_lr": (float, 1e-2, "linear-probe learning rate"),
    "finetune.base_lr": (float, 7.5e-4, "full fine-tune base lr"),
    "finetune.weight_decay": (float, 0.05, "full fine-tune weight decay"),
    "finetune.betas": (floats, (0.9, 0.999), "full fine-tune Adam betas"),
    "finetune.batch_size": (int, 64, "full fine-tune batch size"),
    "finetune.warmup_epochs": (float, 2.0, "full fine-tune warm-up"),
    "finetune.total_epochs": (float, 10.0, "full fine-tune length"),
    "finetune.layer_decay": (float, 0.65, "layer-wise lr decay"),
    "finetune.label_smoothing": (float, 0.1, "label smoothing"),
    "finetune.ema_decay": (opt_float, 0.9998, "EMA of fine-tuned weights (none disables)"),
    "probe.ks": (ints, (0, 1, 2, 4), "tail blocks to re-initialise"),
    "probe.seeds": (ints, (0, 1, 2), "seeds per sweep point"),
    "probe.keep": (int, 4, "blocks pre-trained by the truncated run"),
    "probe.truncate_mode": (str, "mirl", "mae or mirl"),
    "probe.steps": (int, 50, "steps recorded by the gradient-norm probe"),
    "probe.compare": (_bool, True, "also record a single-decoder baseline in the gradient-norm probe"),
    "reconstruct.checkpoint": (opt_str, None, "checkpoint to visualise"),
    "reconstruct.count": (int, 8, "images to dump"),
    "reconstruct.pair": (int, 1, "which (main, residual) pair to show"),
    "reconstruct.format": (str, "png", "png or ppm"),
    "gradcheck.tol": (float, 1e-5, "max relative error"),
    "gradcheck.max_entries": (int, 6, "entries sampled per parameter"),
}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def builtin_config(name: str) -> Path | None:
    fname = name if name.endswith(".cfg") else f"{name}.cfg"
    path = resources.files("mirl") / "configs" / fname
    return Path(str(path)) if path.is_file() else None


def load_config_file(path: str | Path) -> dict[str, str]:
    """Read a config file; bare names (``tiny``, ``tiny.cfg``) resolve to the bundled presets."""
    p = Path(path)
    if not p.is_file():
        alt = builtin_config(str(path))
        if alt is None:
            raise ConfigError(f"config file {path} not found")
        p = alt
    return parse_text(p.read_text(), str(p))


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def vit(self) -> ViTConfig:
        return build_vit(self.values)

    @property
    def decoder(self) -> DecoderConfig:
        v = self.values
        return DecoderConfig(v["decoder.blocks"], v["decoder.hidden"], v["decoder.heads"], v["decoder.mlp_ratio"],
                             v["decoder.did"], v["decoder.shared_mask_token"], v["decoder.pos_init"])

    @property
    def objective(self) -> ObjectiveConfig:
        v = self.values
        return ObjectiveConfig(v["objective.mode"], v["mask.ratio"], v["objective.lambdas"],
                               v["objective.dagger_omega"], v["objective.norm_pix"], v["objective.coarse_sigma"],
                               v["objective.infonce_weight"], v["objective.infonce_tau"], v["objective.momentum"],
                               v["objective.perceptual_weight"], v["objective.perceptual_layers"])

    def optim(self, steps_per_epoch: int) -> OptimSpec:
        v = self.values
        return OptimSpec(v["optim.base_lr"], v["optim.weight_decay"], tuple(v["optim.betas"]), v["optim.eps"],
                         v["optim.batch_size"], v["optim.warmup_epochs"], v["optim.total_epochs"],
                         v["optim.schedule"], steps_per_epoch, grad_clip=v["optim.grad_clip"])

    def finetune_optim(self, steps_per_epoch: int) -> OptimSpec:
        v = self.values
        return OptimSpec(v["finetune.base_lr"], v["finetune.weight_decay"], tuple(v["finetune.betas"]), 1e-8,
                         v["finetune.batch_size"], v["finetune.warmup_epochs"], v["finetune.total_epochs"],
                         "cosine", steps_per_epoch)

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path):
        Path(path).write_text(self.to_text())


def build_vit(v: Mapping[str, Any]) -> ViTConfig:
    over = {f: v[f"model.{f}"] for f in ("depth", "hidden", "mlp_dim", "heads", "segments", "patch",
                                         "image_size", "channels", "pos_embed") if v.get(f"model.{f}") is not None}
    return preset(v["model.preset"], **over)


def validate_config(raw: Mapping[str, Any], env: Mapping[str, str] | None = None) -> RunConfig:
    """Fill defaults, type-convert and cross-check a raw key/value map."""
    env = os.environ if env is None else env
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}; valid keys: {', '.join(sorted(SCHEMA))}")
    v: dict[str, Any] = {}
    for key, (conv, default, _) in SCHEMA.items():
        if key in raw:
            val = raw[key]
            try:
                v[key] = conv(val) if isinstance(val, str) else val
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            v[key] = default
    if v["run.seed"] is None:
        v["run.seed"] = int(env.get("MIRL_SEED", 0))
    if v["run.dtype"] not in ("float32", "float64"):
        raise ConfigError("run.dtype must be float32 or float64")
    if v["model.preset"].lower() not in PRESETS:
        raise ConfigError(f"model.preset={v['model.preset']!r}; choose from {sorted(PRESETS)}")

    base = dict(PRESETS[v["model.preset"].lower()])
    depth = v["model.depth"] or base["depth"]
    G = v["model.segments"] if v["model.segments"] is not None else preset(v["model.preset"]).segments
    if G != 1 and G % 2:
        raise ConfigError(
            f"model.segments={G}: the residual loss pairs segment g with segment G-g+1, "
            "so G must be even or 1")
    if G < 1 or depth % G:
        raise ConfigError(f"model.segments={G} does not divide model.depth={depth}")
    if not 0.0 <= v["mask.ratio"] < 1.0:
        raise ConfigError(f"mask.ratio={v['mask.ratio']} must lie in [0, 1)")
    mode = v["objective.mode"]
    if mode == "mae" and G != 1:
        raise ConfigError(f"objective.mode=mae conflicts with model.segments={G}; it needs model.segments=1")
    if mode in ("coarse_to_fine", "fine_to_coarse") and G % 2:
        raise ConfigError(f"objective.mode={mode} conflicts with model.segments={G}; it needs an even count")
    lam = v["objective.lambdas"]
    if lam is not None:
        want = G if mode in ("multi_decoder", "coarse_to_fine", "fine_to_coarse") else max(G // 2, 1)
        if len(lam) != want:
            raise ConfigError(
                f"objective.lambdas has {len(lam)} entries but objective.mode={mode} with "
                f"model.segments={G} needs {want}")
    for key, allowed in (("optim.schedule", ("cosine", "step")), ("data.source", ("synthetic", "directory")),
                         ("finetune.mode", ("linear", "full")), ("probe.truncate_mode", ("mae", "mirl")),
                         ("reconstruct.format", ("png", "ppm"))):
        if v[key] not in allowed:
            raise ConfigError(f"{key}={v[key]!r}; choose from {allowed}")
    if v["data.source"] == "directory" and not v["data.path"]:
        raise ConfigError("data.source=directory needs data.path")
    if v["optim.warmup_epochs"] > v["optim.total_epochs"]:
        raise ConfigError("optim.warmup_epochs exceeds optim.total_epochs")
    if len(v["optim.betas"]) != 2 or len(v["finetune.betas"]) != 2:
        raise ConfigError("betas need exactly two values")
    # the dataclasses run their own checks too
    cfg = RunConfig(v)
    cfg.objective.validate(cfg.vit)
    cfg.decoder
    return cfg


def resolve(config_path: str | Path | None = None, overrides=None, env=None) -> RunConfig:
    raw = load_config_file(config_path) if config_path else {}
    raw.update(parse_overrides(overrides))
    return validate_config(raw, env)


def describe() -> str:
    """Human-readable list of every key with its default."""
    return "\n".join(f"{k} = {_fmt(d)}    # {h}" for k, (_, d, h) in SCHEMA.items())
