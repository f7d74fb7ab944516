"""Session-scoped artifacts shared across the behavior and acceptance tests.

The full chain (two codecs, base model, guidance distillation, both alignment
stages, and the paired fine-tune / ablation arms) is expensive relative to the
rest of the suite, so it runs once per session at the budgets frozen in
configs/toy32.cfg. Per-stage wall times are recorded so runtime-bound
assertions can check the stage that actually produced their artifact.
"""

from __future__ import annotations

import dataclasses
import os
import time

import pytest

from dcgen.config import Config, StageConfig
from dcgen.data import DatasetSpec, ShapesDataset
from dcgen.models import LatentSpec
from dcgen.rng import Rng
from dcgen import pipeline as pl

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CFG_PATH = os.path.join(REPO_ROOT, "configs", "toy32.cfg")


class ChainBuild:
    """Everything the reference chain produced, keyed for the tests.

    Models are mutated in place by the stages, so each downstream consumer
    gets its own clone here; tests must treat every attribute as read-only
    and clone before training anything further.
    """

    def __init__(self):
        self.cfg = None
        self.cfg_hash = ""
        self.dirs = {}
        self.times = {}
        self.data = None
        self.val = None
        self.ae_low = None
        self.ae_high = None
        self.base = None
        self.distilled = None
        self.aligned_embed = None   # after embedder alignment only
        self.head_aligned = None    # after both alignment stages
        self.fresh_swap = None      # same swap rng, no alignment training
        self.ft_start = None        # head_aligned snapshot before fine-tuning
        self.tuned = None           # alignment-experiment aligned arm (LoRA)
        self.scratch_tuned = None   # alignment-experiment scratch arm (LoRA)
        self.full_tuned = None      # adapters-experiment full fine-tune arm
        self.guided_tuned = None    # objective-experiment corrected arm
        self.naive_tuned = None     # objective-experiment naive arm
        self.results = {}


def _timed(build: ChainBuild, key: str, fn):
    t0 = time.perf_counter()
    out = fn()
    build.times[key] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def tiny():
    """Miniature chain for contract tests: 16px data, width-32 models."""
    data = ShapesDataset(DatasetSpec(classes=2, per_class=8, image_size=16, seed=3))
    val = ShapesDataset(DatasetSpec(classes=2, per_class=4, image_size=16, seed=4))
    low = LatentSpec(f=4, p=2, c=4)
    high = LatentSpec(f=8, p=2, c=16)
    st = StageConfig(name="train_ae_low", steps=40, batch_size=8, lr=3e-3,
                     warmup_steps=5, mse_target=1.0, val_batch=8,
                     eval_interval=20, log_interval=20)
    ae_low, _ = pl.train_autoencoder(data, val, low, hidden=16, stage=st)
    ae_high, _ = pl.train_autoencoder(
        data, val, high, hidden=32, stage=dataclasses.replace(st, name="train_ae_high"))
    st_base = dataclasses.replace(st, name="train_base", steps=60, lr=2e-3,
                                  warmup_steps=10, eval_interval=30, log_interval=30)
    base, _ = pl.train_base_dit(data, val, ae_low, st_base,
                                hidden=32, depth=1, heads=2)
    return dict(data=data, val=val, low=low, high=high, ae_low=ae_low,
                ae_high=ae_high, base=base, st_base=st_base)


@pytest.fixture(scope="session")
def chain(tmp_path_factory) -> ChainBuild:
    root = tmp_path_factory.mktemp("chain")
    b = ChainBuild()
    cfg = Config.from_file(CFG_PATH)
    b.cfg = cfg
    b.cfg_hash = cfg.hash()
    for name in ("ae_low", "ae_high", "base", "distill", "align_embed",
                 "align_head", "alignment/aligned", "alignment/scratch", "adapters/full",
                 "objective/guided", "objective/naive"):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        b.dirs[name] = str(d)

    b.data = ShapesDataset(DatasetSpec(
        classes=cfg.require("data.classes"), per_class=cfg.require("data.per_class"),
        image_size=cfg.require("data.image_size"), seed=cfg.require("data.seed")))
    b.val = ShapesDataset(DatasetSpec(
        classes=b.data.spec.classes, per_class=max(4, b.data.spec.per_class // 4),
        image_size=b.data.spec.image_size, seed=b.data.spec.seed + 1))

    low = LatentSpec(f=cfg.require("space.low.f"), p=cfg.require("space.low.p"),
                     c=cfg.require("space.low.c"))
    high = LatentSpec(f=cfg.require("space.high.f"), p=cfg.require("space.high.p"),
                      c=cfg.require("space.high.c"))

    b.ae_low, b.results["ae_low"] = _timed(b, "ae_low", lambda: pl.train_autoencoder(
        b.data, b.val, low, hidden=cfg.require("space.low.ae_hidden"),
        stage=cfg.stage("train_ae_low"), out_dir=b.dirs["ae_low"], cfg_hash=b.cfg_hash))
    b.ae_high, b.results["ae_high"] = _timed(b, "ae_high", lambda: pl.train_autoencoder(
        b.data, b.val, high, hidden=cfg.require("space.high.ae_hidden"),
        stage=cfg.stage("train_ae_high"), out_dir=b.dirs["ae_high"], cfg_hash=b.cfg_hash))

    b.base, b.results["base"] = _timed(b, "base", lambda: pl.train_base_dit(
        b.data, b.val, b.ae_low, cfg.stage("train_base"),
        hidden=cfg.require("model.hidden"), depth=cfg.require("model.depth"),
        heads=cfg.require("model.heads"), mlp_ratio=cfg.require("model.mlp_ratio"),
        out_dir=b.dirs["base"], cfg_hash=b.cfg_hash))

    b.distilled, b.results["distill"] = _timed(b, "distill", lambda: pl.distill_guidance(
        b.base, b.ae_low, b.data, b.val, cfg.stage("distill"),
        out_dir=b.dirs["distill"], cfg_hash=b.cfg_hash))

    st_align = cfg.stage("align_embed")
    aligned, b.results["align_embed"] = _timed(b, "align_embed",
        lambda: pl.align_patch_embedder(b.base, b.ae_low, b.ae_high, b.data, b.val,
                                        st_align, out_dir=b.dirs["align_embed"],
                                        cfg_hash=b.cfg_hash))
    b.aligned_embed = aligned.clone()
    # identical re-randomization to the aligned arm's swap: the only difference
    # between fresh_swap and head_aligned is the alignment training itself
    b.fresh_swap = b.base.with_latent_spec(high, Rng(st_align.seed).child("swap"))

    b.results["align_head"] = _timed(b, "align_head", lambda: pl.align_output_head(
        aligned, b.ae_high, b.data, b.val, cfg.stage("align_head"),
        out_dir=b.dirs["align_head"], cfg_hash=b.cfg_hash))
    b.head_aligned = aligned
    b.ft_start = aligned.clone()

    st_ft = cfg.stage("finetune")
    arm_a = aligned.clone()
    b.tuned, b.results["tuned"] = _timed(b, "tuned", lambda: pl.finetune_lora(
        arm_a, b.ae_high, b.data, b.val, st_ft,
        out_dir=b.dirs["alignment/aligned"], cfg_hash=b.cfg_hash))
    arm_b = b.base.with_latent_spec(high, Rng(st_align.seed).child("swap"))
    b.scratch_tuned, b.results["scratch"] = _timed(b, "scratch", lambda: pl.finetune_lora(
        arm_b, b.ae_high, b.data, b.val, st_ft,
        out_dir=b.dirs["alignment/scratch"], cfg_hash=b.cfg_hash))

    arm_full = b.ft_start.clone()
    b.full_tuned, b.results["full"] = _timed(b, "full", lambda: pl.finetune_lora(
        arm_full, b.ae_high, b.data, b.val, dataclasses.replace(st_ft, mode="full"),
        out_dir=b.dirs["adapters/full"], cfg_hash=b.cfg_hash))

    arm_g = b.distilled.clone()
    b.guided_tuned, b.results["guided"] = _timed(b, "guided", lambda: pl.finetune_lora(
        arm_g, b.ae_low, b.data, b.val, dataclasses.replace(st_ft, objective="guided"),
        out_dir=b.dirs["objective/guided"], cfg_hash=b.cfg_hash))
    arm_n = b.distilled.clone()
    b.naive_tuned, b.results["naive"] = _timed(b, "naive", lambda: pl.finetune_lora(
        arm_n, b.ae_low, b.data, b.val, dataclasses.replace(st_ft, objective="naive"),
        out_dir=b.dirs["objective/naive"], cfg_hash=b.cfg_hash))

    return b
