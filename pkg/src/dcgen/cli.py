"""Command-line driver for the full adaptation workflow.

One subcommand per stage plus sampling, probes, the step benchmark, paired-run
comparison, and the three canned ablation experiments. All artifacts live
under one output root (--out, else $DCGEN_OUT, else ./out) in per-stage
directories, so later stages find earlier checkpoints by convention.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys

import numpy as np

from .checkpoint import load_ema_state, load_model_checkpoint
from .config import Config
from .data import DatasetSpec, ShapesDataset
from .diagnostics import (
    bench_step,
    compare_runs,
    corrected_velocity_error,
    layer_gap_probe,
    trunk_drift,
)
from .errors import ConfigError, DcgenError, StateError
from .imageio import tile_images, write_ppm
from .models import LatentSpec
from .pipeline import (
    align_output_head,
    align_patch_embedder,
    apply_ema,
    distill_guidance,
    export_dataset,
    finetune_lora,
    sample_euler,
    train_autoencoder,
    train_base_dit,
)
from .rng import Rng

_SPEC_TAG = re.compile(r"^f(\d+)p(\d+)c(\d+)$")


def parse_spec_tag(tag: str) -> LatentSpec:
    m = _SPEC_TAG.match(tag)
    if not m:
        raise ConfigError(f"bad latent spec tag '{tag}'; expected like f8p2c16")
    return LatentSpec(f=int(m.group(1)), p=int(m.group(2)), c=int(m.group(3)))


def _load_config(args) -> Config:
    cfg = Config.from_file(args.config) if args.config else Config()
    cfg.apply_overrides(args.set or [])
    return cfg


def _out_root(args, cfg: Config) -> str:
    return args.out or cfg.get("out_dir") or os.environ.get("DCGEN_OUT") or "out"


def _datasets(cfg: Config):
    classes = cfg.get("data.classes", 8)
    per_class = cfg.get("data.per_class", 64)
    image_size = cfg.get("data.image_size", 32)
    seed = cfg.get("data.seed", cfg.get("seed", 0))
    train = ShapesDataset(DatasetSpec(classes=classes, per_class=per_class,
                                      image_size=image_size, seed=seed))
    val = ShapesDataset(DatasetSpec(classes=classes,
                                    per_class=max(4, per_class // 4),
                                    image_size=image_size, seed=seed + 1))
    return train, val


def _space_spec(cfg: Config, which: str) -> LatentSpec:
    defaults = {"low": (4, 2, 4), "high": (8, 2, 16)}[which]
    return LatentSpec(f=cfg.get(f"space.{which}.f", defaults[0]),
                      p=cfg.get(f"space.{which}.p", defaults[1]),
                      c=cfg.get(f"space.{which}.c", defaults[2]))


def _model_kw(cfg: Config) -> dict:
    return dict(hidden=cfg.get("model.hidden", 128), depth=cfg.get("model.depth", 4),
                heads=cfg.get("model.heads", 4), mlp_ratio=cfg.get("model.mlp_ratio", 4))


def _ckpt_path(out: str, stage_dir: str) -> str:
    return os.path.join(out, stage_dir, "checkpoint.dcgn")


def _load_ckpt(path: str):
    if not os.path.exists(path):
        raise StateError(f"no checkpoint at {path}; run the producing stage first")
    return load_model_checkpoint(path)


def _ae_for(model, out: str, cfg: Config):
    """Pick the codec whose latent geometry matches the model's."""
    for which, stage_dir in (("low", "ae_low"), ("high", "ae_high")):
        if _space_spec(cfg, which) == model.spec:
            ae, _, _ = _load_ckpt(_ckpt_path(out, stage_dir))
            return ae
    raise StateError(f"no trained codec matches latent space {model.spec.tag()}")


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _result_summary(result) -> dict:
    out = {"stage": result.stage, "steps": result.steps,
           "final_loss": result.final_loss, "wall_s": round(result.wall_s, 3)}
    if result.final_val is not None:
        out["final_val"] = result.final_val
    if result.initial_val is not None:
        out["initial_val"] = result.initial_val
    return out


# -- subcommand handlers -----------------------------------------------------------


def _cmd_gen_data(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, _ = _datasets(cfg)
    target = os.path.join(out, "data")
    count = export_dataset(train, target)
    _emit({"command": "gen-data", "count": count, "dir": target})
    return 0


def _cmd_train_ae(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    spec = _space_spec(cfg, args.space)
    hidden = cfg.get(f"space.{args.space}.ae_hidden", 64 if args.space == "low" else 96)
    stage = cfg.stage(f"train_ae_{args.space}")
    record = cfg.get("metrics.record_time", False)
    _, result = train_autoencoder(train, val, spec, hidden, stage,
                                  out_dir=os.path.join(out, f"ae_{args.space}"),
                                  record_time=record, cfg_hash=cfg.hash())
    _emit({"command": "train-ae", "space": args.space, "spec": spec.tag(),
           **_result_summary(result)})
    return 0


def _cmd_train_base(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    ae, _, _ = _load_ckpt(_ckpt_path(out, "ae_low"))
    stage = cfg.stage("train_base")
    _, result = train_base_dit(train, val, ae, stage, **_model_kw(cfg),
                               out_dir=os.path.join(out, "base"),
                               record_time=cfg.get("metrics.record_time", False),
                               cfg_hash=cfg.hash())
    _emit({"command": "train-base", **_result_summary(result)})
    return 0


def _cmd_distill(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    teacher, _, _ = _load_ckpt(_ckpt_path(out, "base"))
    ae, _, _ = _load_ckpt(_ckpt_path(out, "ae_low"))
    stage = cfg.stage("distill")
    _, result = distill_guidance(teacher, ae, train, val, stage,
                                 out_dir=os.path.join(out, "distill"),
                                 record_time=cfg.get("metrics.record_time", False),
                                 cfg_hash=cfg.hash())
    _emit({"command": "distill", **_result_summary(result)})
    return 0


def _cmd_align_embed(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    base, _, _ = _load_ckpt(_ckpt_path(out, "base"))
    ae_low, _, _ = _load_ckpt(_ckpt_path(out, "ae_low"))
    ae_high, _, _ = _load_ckpt(_ckpt_path(out, "ae_high"))
    stage = cfg.stage("align_embed")
    _, result = align_patch_embedder(base, ae_low, ae_high, train, val, stage,
                                     out_dir=os.path.join(out, "align_embed"),
                                     record_time=cfg.get("metrics.record_time", False),
                                     cfg_hash=cfg.hash())
    _emit({"command": "align-embed", **_result_summary(result)})
    return 0


def _cmd_align_head(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    model, _, _ = _load_ckpt(args.source or _ckpt_path(out, "align_embed"))
    ae = _ae_for(model, out, cfg)
    stage = cfg.stage("align_head")
    result = align_output_head(model, ae, train, val, stage,
                               out_dir=os.path.join(out, "align_head"),
                               record_time=cfg.get("metrics.record_time", False),
                               cfg_hash=cfg.hash())
    _emit({"command": "align-head", **_result_summary(result)})
    return 0


def _cmd_finetune(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    stage = cfg.stage("finetune")
    if args.resume:
        model, _, _ = _load_ckpt(args.resume)
        ae = _ae_for(model, out, cfg)
        model, result = finetune_lora(None, ae, train, val, stage,
                                      out_dir=os.path.join(out, "finetune"),
                                      record_time=cfg.get("metrics.record_time", False),
                                      cfg_hash=cfg.hash(), resume_from=args.resume)
    else:
        model, _, _ = _load_ckpt(args.source or _ckpt_path(out, "align_head"))
        ae = _ae_for(model, out, cfg)
        model, result = finetune_lora(model, ae, train, val, stage,
                                      out_dir=os.path.join(out, "finetune"),
                                      record_time=cfg.get("metrics.record_time", False),
                                      cfg_hash=cfg.hash())
    payload = {"command": "finetune", "objective": result.extras.get("objective"),
               **_result_summary(result)}
    if "lora" in result.extras:
        payload["trainable_fraction"] = result.extras["lora"]["fraction"]
    _emit(payload)
    return 0


def _cmd_sample(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    source = args.source
    if source is None:
        for stage_dir in ("finetune", "align_head", "base"):
            candidate = _ckpt_path(out, stage_dir)
            if os.path.exists(candidate):
                source = candidate
                break
        if source is None:
            raise StateError(f"no checkpoint found under {out}; train something first")
    model, meta, tensors = _load_ckpt(source)
    use_ema = args.use_ema or bool(cfg.get("sample.use_ema", False))
    if use_ema:
        ema = load_ema_state(tensors, meta)
        if ema is None:
            raise StateError(f"{source} holds no EMA state")
        apply_ema(model, ema)
    ae = _ae_for(model, out, cfg)
    count = args.count if args.count is not None else cfg.get("sample.count", 8)
    guidance = args.guidance if args.guidance is not None else cfg.get("sample.guidance", 1.5)
    steps = args.steps if args.steps is not None else cfg.get("sample.steps", 32)
    if args.classes:
        labels = np.array([int(v) for v in args.classes.split(",")], dtype=np.int64)
    else:
        labels = np.arange(count, dtype=np.int64) % model.num_classes
    images = sample_euler(model, ae, labels, Rng(cfg.get("seed", 0)).child("sample"),
                          guidance=guidance, steps=steps)
    target = os.path.join(out, "samples")
    os.makedirs(target, exist_ok=True)
    for i, img in enumerate(images):
        write_ppm(os.path.join(target, f"sample_{i:03d}.ppm"), img)
    write_ppm(os.path.join(target, "sheet.ppm"), tile_images(images))
    _emit({"command": "sample", "count": len(images), "guidance": guidance,
           "steps": steps, "dir": target, "source": source})
    return 0


def _cmd_gap_probe(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    base, _, _ = _load_ckpt(_ckpt_path(out, "base"))
    adapted, _, _ = _load_ckpt(args.adapted or _ckpt_path(out, "align_embed"))
    ae_low, _, _ = _load_ckpt(_ckpt_path(out, "ae_low"))
    ae_high, _, _ = _load_ckpt(_ckpt_path(out, "ae_high"))
    _, val = _datasets(cfg)
    report = layer_gap_probe(base, adapted, ae_low, ae_high, val,
                             batch=args.batch, metric=args.metric)
    payload = {"command": "gap-probe", "metric": report.metric, "batch": report.batch,
               "grid_ref": report.grid_ref, "grid_new": report.grid_new,
               "layers": report.layers}
    target = os.path.join(out, "gap")
    os.makedirs(target, exist_ok=True)
    with open(os.path.join(target, "report.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    _emit(payload)
    return 0


def _cmd_bench(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    spec = parse_spec_tag(args.spec)
    size = args.size if args.size is not None else cfg.get("bench.image_size", 128)
    record = bench_step(spec, size, **_model_kw(cfg),
                        batch=args.batch if args.batch is not None else cfg.get("bench.batch", 1),
                        repeats=cfg.get("bench.repeats", 5),
                        warmup=cfg.get("bench.warmup", 2),
                        seed=cfg.get("seed", 0))
    payload = {"command": "bench", **record.as_dict()}
    target = os.path.join(out, "bench")
    os.makedirs(target, exist_ok=True)
    with open(os.path.join(target, f"{record.tag}_{size}.json"), "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
    _emit(payload)
    return 0


def _cmd_compare(args):
    verdict = compare_runs(args.run_a, args.run_b, column=args.column,
                           warmup_steps=args.warmup)
    _emit({"command": "compare", "column": verdict["column"],
           "final_a": verdict["final_a"], "final_b": verdict["final_b"],
           "final_ratio": verdict["final_ratio"],
           "a_le_b_after_warmup": verdict["a_le_b_after_warmup"]})
    return 0


def _cmd_ablate(args):
    cfg = _load_config(args)
    out = _out_root(args, cfg)
    train, val = _datasets(cfg)
    record = cfg.get("metrics.record_time", False)
    adir = os.path.join(out, "ablate", args.experiment)

    if args.experiment == "alignment":
        base, _, _ = _load_ckpt(_ckpt_path(out, "base"))
        ae_low, _, _ = _load_ckpt(_ckpt_path(out, "ae_low"))
        ae_high, _, _ = _load_ckpt(_ckpt_path(out, "ae_high"))
        st_align = cfg.stage("align_embed")
        st_head = cfg.stage("align_head")
        st_ft = cfg.stage("finetune")
        aligned, _ = align_patch_embedder(base, ae_low, ae_high, train, val, st_align,
                                          out_dir=os.path.join(adir, "align_embed"),
                                          record_time=record)
        align_output_head(aligned, ae_high, train, val, st_head,
                          out_dir=os.path.join(adir, "align_head"), record_time=record)
        _, r_a = finetune_lora(aligned, ae_high, train, val, st_ft,
                               out_dir=os.path.join(adir, "aligned"), record_time=record)
        # scratch arm starts from the identical embedder/head re-initialization
        scratch = base.with_latent_spec(ae_high.spec, Rng(st_align.seed).child("swap"))
        _, r_b = finetune_lora(scratch, ae_high, train, val, st_ft,
                               out_dir=os.path.join(adir, "scratch"), record_time=record)
        verdict = compare_runs(os.path.join(adir, "aligned", "metrics.csv"),
                               os.path.join(adir, "scratch", "metrics.csv"),
                               column="val_loss", warmup_steps=st_ft.warmup_steps)
        _emit({"command": "ablate", "experiment": "alignment",
               "final_aligned": verdict["final_a"], "final_scratch": verdict["final_b"],
               "final_ratio": verdict["final_ratio"],
               "aligned_le_scratch_after_warmup": verdict["a_le_b_after_warmup"],
               "pass": verdict["final_ratio"] <= 0.8 and verdict["a_le_b_after_warmup"]})
        return 0

    if args.experiment == "adapters":
        src = args.source or _ckpt_path(out, "align_head")
        start, _, _ = _load_ckpt(src)
        model_a, _, _ = _load_ckpt(src)
        model_b, _, _ = _load_ckpt(src)
        ae = _ae_for(start, out, cfg)
        st = cfg.stage("finetune")
        _, r_a = finetune_lora(model_a, ae, train, val,
                               dataclasses.replace(st, mode="lora"),
                               out_dir=os.path.join(adir, "lora"), record_time=record)
        _, r_b = finetune_lora(model_b, ae, train, val,
                               dataclasses.replace(st, mode="full"),
                               out_dir=os.path.join(adir, "full"), record_time=record)
        drift_lora = trunk_drift(start, model_a)
        drift_full = trunk_drift(start, model_b)
        fraction = r_a.extras["lora"]["fraction"]
        _emit({"command": "ablate", "experiment": "adapters",
               "trainable_fraction": fraction, "drift_lora": drift_lora,
               "drift_full": drift_full,
               "pass": fraction < 0.15 and drift_lora < drift_full})
        return 0

    if args.experiment == "objective":
        teacher, _, _ = _load_ckpt(_ckpt_path(out, "base"))
        ae, _, _ = _load_ckpt(_ckpt_path(out, "ae_low"))
        st = cfg.stage("finetune")
        arms = {}
        for objective in ("guided", "naive"):
            model, _, _ = _load_ckpt(_ckpt_path(out, "distill"))
            _, _res = finetune_lora(model, ae, train, val,
                                    dataclasses.replace(st, objective=objective),
                                    out_dir=os.path.join(adir, objective),
                                    record_time=record)
            arms[objective] = corrected_velocity_error(
                model, teacher, ae, val, w_min=st.w_min, w_max=st.w_max)
        _emit({"command": "ablate", "experiment": "objective",
               "error_guided": arms["guided"], "error_naive": arms["naive"],
               "pass": arms["guided"] <= arms["naive"]})
        return 0

    raise ConfigError(f"unknown ablation '{args.experiment}'")


# -- argument parsing ----------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="config file of key = value lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--out", help="output root (default $DCGEN_OUT or ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dcgen",
        description="adapt a pretrained toy diffusion transformer to a deeply "
                    "compressed latent space")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize the shapes dataset as images")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-ae", help="train one latent codec")
    _add_common(p)
    p.add_argument("--space", choices=("low", "high"), required=True)
    p.set_defaults(func=_cmd_train_ae)

    p = sub.add_parser("train-base", help="pretrain the velocity model (low space)")
    _add_common(p)
    p.set_defaults(func=_cmd_train_base)

    p = sub.add_parser("distill", help="fold guidance into a w-conditioned student")
    _add_common(p)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("align-embed", help="align the new patch embedder")
    _add_common(p)
    p.set_defaults(func=_cmd_align_embed)

    p = sub.add_parser("align-head", help="warm up the new output head")
    _add_common(p)
    p.add_argument("--source", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_align_head)

    p = sub.add_parser("finetune", help="low-rank fine-tune in the new space")
    _add_common(p)
    p.add_argument("--source", help="checkpoint to fine-tune")
    p.add_argument("--resume", help="interior checkpoint to resume from")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("sample", help="draw images from a trained model")
    _add_common(p)
    p.add_argument("--source", help="model checkpoint (default: newest stage)")
    p.add_argument("--count", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--classes", help="comma-separated class ids")
    p.add_argument("--use-ema", action="store_true")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("gap-probe", help="per-layer feature gap between pathways")
    _add_common(p)
    p.add_argument("--adapted", help="adapted checkpoint (default align_embed)")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--metric", choices=("mse", "cosine"), default="mse")
    p.set_defaults(func=_cmd_gap_probe)

    p = sub.add_parser("bench", help="median forward time at a latent geometry")
    _add_common(p)
    p.add_argument("--spec", required=True, help="latent tag like f8p2c16")
    p.add_argument("--size", type=int, help="image size (default from config)")
    p.add_argument("--batch", type=int)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("compare", help="compare a metrics column across two runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--column", default="val_loss")
    p.add_argument("--warmup", type=int, default=0)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("ablate", help="run a canned paired experiment")
    _add_common(p)
    p.add_argument("experiment", choices=("alignment", "adapters", "objective"),
                   help="alignment: aligned vs from-scratch fine-tune; adapters: "
                        "low-rank vs full fine-tune drift; objective: corrected "
                        "vs naive loss on a distilled model")
    p.add_argument("--source", help="adapters: checkpoint to fine-tune from")
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: ConfigError: {e}", file=sys.stderr)
        return 2
    except StateError as e:
        print(f"error: StateError: {e}", file=sys.stderr)
        return 3
    except DcgenError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: FileNotFoundError: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
