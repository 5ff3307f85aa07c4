"""Command-line entry point: ``mirl <subcommand> [--config FILE] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, describe, resolve
from .encoder import ConfigError

COMMANDS = ("pretrain", "finetune", "probe-reinit", "probe-truncate", "probe-gradnorm", "reconstruct",
            "gradcheck", "selftest")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# -- builders ------------------------------------------------------------------------------
def build_data(cfg: RunConfig):
    from .tokenizer import ImageBatch, load_image_directory, synthetic_textures

    vit = cfg.vit
    if cfg["data.source"] == "synthetic":
        n_tr, n_te = cfg["data.num_train"], cfg["data.num_test"]
        data = synthetic_textures(n_tr + n_te, vit.image_size, vit.channels, cfg["data.num_classes"],
                                  seed=cfg["data.seed"])
        return (ImageBatch(data.values[:n_tr], data.labels[:n_tr]),
                ImageBatch(data.values[n_tr:], data.labels[n_tr:]))
    data = load_image_directory(cfg["data.path"], vit.image_size, vit.channels)
    order = np.random.default_rng(cfg["data.seed"]).permutation(len(data))
    n_te = max(1, int(round(cfg["data.test_fraction"] * len(data))))
    te, tr = order[:n_te], order[n_te:]
    labels = data.labels if data.labels is not None else np.zeros(len(data), dtype=np.int64)
    return ImageBatch(data.values[tr], labels[tr]), ImageBatch(data.values[te], labels[te])


def build_model(cfg: RunConfig, vit=None, objective=None):
    from .model import MIRLModel
    from .objectives import ConvFeatureExtractor

    extractor = None
    if cfg["objective.extractor_path"]:
        extractor = ConvFeatureExtractor.from_file(cfg["objective.extractor_path"])
    return MIRLModel(vit or cfg.vit, cfg.decoder, objective or cfg.objective, seed=cfg.seed,
                     dtype=np.dtype(cfg["run.dtype"]), extractor=extractor)


def load_encoder(model, path: str):
    """Copy the encoder tensors of checkpoint ``path`` into ``model``."""
    from .training import load_checkpoint

    ckpt = load_checkpoint(path)
    enc = model.encoder_params()
    ckpt.params = {k: v for k, v in ckpt.params.items() if k.startswith("encoder.")}
    ckpt.load_into(enc)
    return ckpt


def steps_per_epoch(n: int, batch: int) -> int:
    return max(n // min(batch, n), 1)


def prepare_output(cfg: RunConfig) -> Path:
    out = Path(cfg["run.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.cfg")
    return out


def crop_scale(cfg: RunConfig):
    return tuple(cfg["data.crop_scale"]) if cfg["data.augment"] else None


# -- subcommands ------------------------------------------------------------------------------
def cmd_pretrain(cfg: RunConfig, args) -> int:
    from .training import load_checkpoint, pretrain, restore_state, save_checkpoint

    if not cfg["run.desk_runnable"] and not args.force:
        print("this configuration is marked run.desk_runnable = false; pass --force to run it anyway",
              file=sys.stderr)
        return EXIT_CONFIG
    train, _ = build_data(cfg)
    model = build_model(cfg)
    spec = cfg.optim(steps_per_epoch(len(train), cfg["optim.batch_size"]))
    state = None
    if cfg["run.resume"]:
        state = restore_state(load_checkpoint(cfg["run.resume"]), model, spec)
    out = prepare_output(cfg)
    records, state = pretrain(model, train, spec, seed=cfg.seed, steps=cfg["optim.steps"],
                              metrics_path=out / "metrics.jsonl", augment_scale=crop_scale(cfg), state=state,
                              append_metrics=state is not None)
    save_checkpoint(out / "checkpoint.mirl", model.state_params(), config=dict(cfg.values), state=state)
    if records:
        print(f"step {state.step}: loss {records[-1]['loss']:.6f}")
    print(f"wrote {out / 'metrics.jsonl'} and {out / 'checkpoint.mirl'}")
    return EXIT_OK


def _eval_spec(cfg: RunConfig, n_train: int):
    from .probes import EvalSpec

    if cfg["finetune.mode"] == "linear":
        return EvalSpec("linear", cfg["finetune.probe_epochs"], cfg["finetune.probe_lr"])
    return EvalSpec("finetune", finetune=cfg.finetune_optim(steps_per_epoch(n_train, cfg["finetune.batch_size"])),
                    layer_decay=cfg["finetune.layer_decay"], label_smoothing=cfg["finetune.label_smoothing"],
                    ema_decay=cfg["finetune.ema_decay"])


def cmd_finetune(cfg: RunConfig, args) -> int:
    from .probes import evaluate_encoder
    from .training import finetune

    train, test = build_data(cfg)
    model = build_model(cfg)
    if cfg["finetune.checkpoint"]:
        load_encoder(model, cfg["finetune.checkpoint"])
    out = prepare_output(cfg)
    result = {"mode": cfg["finetune.mode"], "checkpoint": cfg["finetune.checkpoint"]}
    if cfg["finetune.mode"] == "linear":
        result["accuracy"] = evaluate_encoder(model.encoder_params(), model.vit, train, test,
                                              _eval_spec(cfg, len(train)), seed=cfg.seed)
    else:
        spec = cfg.finetune_optim(steps_per_epoch(len(train), cfg["finetune.batch_size"]))
        res = finetune(model.encoder_params(), model.vit, train, test, spec, cfg["finetune.layer_decay"],
                       cfg["finetune.label_smoothing"], cfg["finetune.ema_decay"], seed=cfg.seed)
        result["accuracy"], result["ema_accuracy"] = res.accuracy, res.ema_accuracy
        with open(out / "metrics.jsonl", "w") as fh:
            for r in res.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out / "finetune.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
    print(f"accuracy {result['accuracy']:.4f}")
    return EXIT_OK


def cmd_probe_reinit(cfg: RunConfig, args) -> int:
    from .probes import reinit_sweep

    vit = cfg.vit
    bad = [k for k in cfg["probe.ks"] if not 0 <= k <= vit.depth]
    if bad:
        raise ConfigError(f"probe.ks contains {bad[0]}, beyond model.depth={vit.depth}")
    train, test = build_data(cfg)
    model = build_model(cfg)
    if cfg["finetune.checkpoint"]:
        load_encoder(model, cfg["finetune.checkpoint"])
    out = prepare_output(cfg)
    res = reinit_sweep(model.encoder_params(), vit, cfg["probe.ks"], train, test, _eval_spec(cfg, len(train)),
                       cfg["probe.seeds"])
    res.to_csv(out / "reinit.csv")
    for k, s in res.summary().items():
        print(f"k={k}: mean {s['mean']:.4f} var {s['var']:.2e} (n={s['n']})")
    return EXIT_OK


def cmd_probe_truncate(cfg: RunConfig, args) -> int:
    from .probes import truncated_pretrain
    from .training import save_checkpoint

    vit = cfg.vit
    keep = cfg["probe.keep"]
    if not 1 <= keep <= vit.depth:
        raise ConfigError(f"probe.keep={keep} outside 1..model.depth={vit.depth}")
    train, test = build_data(cfg)
    spec = cfg.optim(steps_per_epoch(len(train), cfg["optim.batch_size"]))
    out = prepare_output(cfg)
    run = truncated_pretrain(vit, keep, cfg["probe.truncate_mode"], train, test, spec, cfg["optim.steps"],
                             cfg.seed, cfg.decoder, _eval_spec(cfg, len(train)), np.dtype(cfg["run.dtype"]),
                             augment_scale=crop_scale(cfg))
    run.result.to_csv(out / "truncate.csv")
    save_checkpoint(out / "checkpoint.mirl", run.expanded, step=len(run.records), config=dict(cfg.values))
    print(f"keep={keep} ({cfg['probe.truncate_mode']}): accuracy {run.result.rows[0][2]:.4f}")
    return EXIT_OK


def cmd_probe_gradnorm(cfg: RunConfig, args) -> int:
    from dataclasses import replace

    from .probes import grad_norm_probe

    train, _ = build_data(cfg)
    spec = cfg.optim(steps_per_epoch(len(train), cfg["optim.batch_size"]))
    steps = cfg["probe.steps"]
    if steps > spec.total_steps:
        raise ConfigError(f"probe.steps={steps} exceeds the optim schedule ({spec.total_steps} steps)")
    out = prepare_output(cfg)
    traces = [grad_norm_probe(build_model(cfg), train, spec, steps, cfg.seed, label=cfg["objective.mode"],
                              augment_scale=crop_scale(cfg))]
    if cfg["probe.compare"] and cfg["objective.mode"] != "mae":
        base = replace(cfg.objective, mode="mae", lambdas=None, dagger_omega=None)
        model = build_model(cfg, replace(cfg.vit, segments=1), base)
        traces.append(grad_norm_probe(model, train, spec, steps, cfg.seed, label="mae",
                                      augment_scale=crop_scale(cfg)))
    path = out / "gradnorm.csv"
    traces[0].to_csv(path)
    for t in traces[1:]:
        tmp = out / f"gradnorm.{t.label}.csv"
        t.to_csv(tmp)
        with open(path, "a") as fh:
            fh.writelines(tmp.read_text().splitlines(keepends=True)[1:])
        tmp.unlink()
    print(f"wrote {path}")
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    from .probes import reconstruction_dump
    from .training import load_checkpoint

    _, test = build_data(cfg)
    model = build_model(cfg)
    if cfg["reconstruct.checkpoint"]:
        ckpt = load_checkpoint(cfg["reconstruct.checkpoint"])
        ckpt.load_into(model.state_params())
    out = prepare_output(cfg)
    res = reconstruction_dump(model, test.values[: cfg["reconstruct.count"]], out / "reconstructions",
                              seed=cfg.seed, pair=cfg["reconstruct.pair"], fmt=cfg["reconstruct.format"])
    print(f"wrote {len(res.paths)} images to {out / 'reconstructions'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .diffcore import grad_check, jitter_params

    vit = cfg.vit
    model = build_model(cfg)
    model = type(model)(vit, cfg.decoder, cfg.objective, seed=cfg.seed, dtype=np.float64,
                        extractor=model.extractor)
    jitter_params(model.trainable(), np.random.default_rng(cfg.seed + 1))
    images = np.random.default_rng(cfg.seed).random((2, vit.channels, vit.image_size, vit.image_size))
    plan = model.sample_plan(2, np.random.default_rng(cfg.seed))
    report = grad_check(lambda: model.loss(images, plan)[0].total, model.trainable(),
                        tol=cfg["gradcheck.tol"], max_entries=cfg["gradcheck.max_entries"], seed=cfg.seed)
    worst = max(report.errors, key=report.errors.get)
    print(f"max relative error {report.max_error:.3e} ({worst}); tolerance {cfg['gradcheck.tol']:.1e}; "
          f"{sum(report.checked.values())} entries checked")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


HANDLERS = {
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "probe-reinit": cmd_probe_reinit,
    "probe-truncate": cmd_probe_truncate, "probe-gradnorm": cmd_probe_gradnorm,
    "reconstruct": cmd_reconstruct, "gradcheck": cmd_gradcheck, "selftest": cmd_selftest,
}


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mirl", description="Masked image residual learning experiments.")
    p.add_argument("--list-keys", action="store_true", help="print every config key with its default")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="config file or bundled preset name (tiny, imagenet-reference)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        s.add_argument("--output", help="shorthand for --set run.output_dir=...")
        s.add_argument("--seed", type=int, help="shorthand for --set run.seed=...")
        if name == "pretrain":
            s.add_argument("--force", action="store_true", help="run presets marked non-runnable")
    return p


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    if args.list_keys:
        print(describe())
        return EXIT_OK
    if not args.command:
        parser().print_help()
        return EXIT_CONFIG
    overrides = list(args.set)
    if args.output:
        overrides.append(f"run.output_dir={args.output}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    try:
        cfg = resolve(args.config, overrides)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
