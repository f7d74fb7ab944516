"""Training stages, run bookkeeping, and the Euler sampler.

Every stage follows the same discipline:

  * all randomness flows through `Rng(stage.seed).child(tag, step)`, so a
    trajectory is a pure function of (seed, step) and an interrupted run
    resumed from a checkpoint replays the exact remaining draws;
  * parameters that a stage must not touch are frozen (`requires_grad=False`)
    and additionally hash-guarded, so a leak shows up as a TrainingError, not
    as silently corrupted science;
  * metrics go to one CSV per stage; wall time is recorded only on request so
    two identical runs produce byte-identical files.
"""

from __future__ import annotations

import math
import os
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from hashlib import sha256

import numpy as np

from . import tensor as T
from .checkpoint import (
    load_ema_state,
    load_model_checkpoint,
    load_optimizer_state,
    save_model_checkpoint,
)
from .config import StageConfig
from .errors import ContractViolation, NumericError, StateError, TrainingError
from .imageio import write_ppm
from .metrics import MetricsWriter
from .models import DiTModel, LatentSpec, ToyAutoencoder, attach_lora, downsample_ratio
from .objectives import (
    alignment_loss,
    cfg_combine,
    distill_loss,
    flow_matching_loss,
    guide_flow_matching_loss,
    make_flow_sample,
    make_guidance_sample,
)
from .optim import AdamW, EmaState, ema_update
from .rng import Rng
from .tensor import Tensor, eval_with_grad

# -- parameter freezing utilities ----------------------------------------------


def freeze_params(model):
    for p in model.named_params().values():
        p.requires_grad = False
    return model


@contextmanager
def frozen(*models):
    """Temporarily disable gradient tracking (cheap inference calls)."""
    saved = []
    for m in models:
        params = m.named_params()
        saved.append((params, {k: p.requires_grad for k, p in params.items()}))
        for p in params.values():
            p.requires_grad = False
    try:
        yield
    finally:
        for params, flags in saved:
            for k, p in params.items():
                p.requires_grad = flags[k]


def apply_ema(model, ema: EmaState):
    """Copy EMA shadows over the matching live parameters (in place)."""
    params = model.named_params()
    for name, arr in ema.shadow.items():
        if name in params:
            params[name].data = arr.copy()
    return model


class FreezeGuard:
    """Hash snapshot of tensors that must stay bitwise fixed during a stage."""

    def __init__(self, tensors: dict):
        self._tracked = dict(tensors)
        self._digests = {name: self._digest(t) for name, t in self._tracked.items()}

    @staticmethod
    def _digest(t) -> str:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        return sha256(arr.tobytes()).hexdigest()

    def check(self, step: int | None = None):
        for name, t in self._tracked.items():
            if self._digest(t) != self._digests[name]:
                raise TrainingError(f"frozen parameter '{name}' changed", step=step)


# -- shared loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    stage: str
    steps: int
    final_loss: float
    initial_val: float | None = None
    final_val: float | None = None
    wall_s: float = 0.0
    extras: dict = field(default_factory=dict)


def run_training(stage: StageConfig, params: dict, loss_fn, *, val_fn=None, guard=None,
                 metrics_path=None, record_time=False, checkpoint_fn=None,
                 start_step=0, opt_state=None, ema=None) -> TrainResult:
    """Drive `loss_fn(step)` with AdamW from start_step+1 through stage.steps."""
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    if not trainable:
        raise ContractViolation(f"stage '{stage.name}' has no trainable parameters")
    opt = AdamW(trainable, lr=stage.lr, weight_decay=stage.weight_decay,
                warmup_steps=stage.warmup_steps)
    if opt_state is not None:
        opt.state = opt_state
    if ema is None and stage.ema_decay > 0.0:
        ema = EmaState(decay=stage.ema_decay)

    writer = None
    if metrics_path is not None:
        writer = MetricsWriter(metrics_path, stage.name, record_time=record_time)
    t_start = time.perf_counter()
    last_loss = math.nan
    final_val = None
    try:
        for step in range(start_step + 1, stage.steps + 1):
            try:
                loss = loss_fn(step)
                grads = eval_with_grad(loss, trainable)
            except NumericError as e:
                raise TrainingError(f"non-finite values in training graph: {e}", step=step) from e
            last_loss = float(loss.data)
            if not math.isfinite(last_loss) or abs(last_loss) > 1e8:
                raise TrainingError(f"loss diverged to {last_loss!r}", step=step)
            opt.step(grads)
            if ema is not None:
                ema_update(ema, trainable)
            if guard is not None and stage.freeze_check_interval > 0 \
                    and step % stage.freeze_check_interval == 0:
                guard.check(step)
            extras = {}
            if val_fn is not None and (step % stage.eval_interval == 0 or step == stage.steps):
                extras = val_fn(step)
                if "val_loss" in extras:
                    final_val = float(extras["val_loss"])
            if writer is not None and (extras or step % stage.log_interval == 0
                                       or step == stage.steps):
                writer.log(step, last_loss, opt.last_lr, extras)
            if checkpoint_fn is not None and stage.checkpoint_interval > 0 \
                    and step % stage.checkpoint_interval == 0 and step < stage.steps:
                checkpoint_fn(step, opt.state, ema)
        if guard is not None:
            guard.check(stage.steps)
    finally:
        if writer is not None:
            writer.close()
    result = TrainResult(stage=stage.name, steps=stage.steps, final_loss=last_loss,
                         final_val=final_val, wall_s=time.perf_counter() - t_start)
    result.extras["opt_state"] = opt.state
    result.extras["ema"] = ema
    return result


def _stage_meta(stage: StageConfig, step: int, cfg_hash: str) -> dict:
    meta = {"stage": stage.name, "step": str(step), "seed": str(stage.seed)}
    if cfg_hash:
        meta["config_hash"] = cfg_hash
    return meta


def _final_checkpoint(out_dir, model, stage, cfg_hash, result):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "checkpoint.dcgn")
    save_model_checkpoint(path, model, _stage_meta(stage, result.steps, cfg_hash),
                          opt_state=result.extras.get("opt_state"),
                          ema=result.extras.get("ema"))
    return path


def _interior_checkpointer(out_dir, model, stage, cfg_hash):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)

    def write(step, opt_state, ema):
        path = os.path.join(out_dir, f"step{step:06d}.dcgn")
        save_model_checkpoint(path, model, _stage_meta(stage, step, cfg_hash),
                              opt_state=opt_state, ema=ema)

    return write


def _metrics_path(out_dir):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, "metrics.csv")


# -- batching and validation probes ----------------------------------------------


def encode_batch(ae: ToyAutoencoder, images: np.ndarray) -> np.ndarray:
    """Images -> latents as plain arrays (the AE acts as a fixed codec here)."""
    with frozen(ae):
        return ae.encode(Tensor(np.asarray(images, dtype=np.float32))).data


def _train_batch(data, stage: StageConfig, step: int):
    idx = Rng(stage.seed).child("data", step).integers(0, len(data), (stage.batch_size,))
    return data.batch(idx)


def _probe_batch(data, batch: int):
    return data.batch(np.arange(min(batch, len(data))))


def flow_val_loss(model: DiTModel, ae: ToyAutoencoder, data, batch: int) -> float:
    """Plain flow-matching loss on a fixed probe batch with fixed draws."""
    images, labels = _probe_batch(data, batch)
    x1 = encode_batch(ae, images)
    sample = make_flow_sample(x1, Rng(data.spec.seed).child("val_flow"))
    with frozen(model):
        return float(flow_matching_loss(model, sample, labels).data)


def guided_val_loss(model: DiTModel, ae: ToyAutoencoder, data, batch: int,
                    w_min: float, w_max: float) -> float:
    """Corrected-objective loss on a fixed probe (guidance-conditioned models)."""
    images, labels = _probe_batch(data, batch)
    x1 = encode_batch(ae, images)
    gs = make_guidance_sample(x1, Rng(data.spec.seed).child("val_guided"), w_min, w_max)
    with frozen(model):
        return float(guide_flow_matching_loss(model, gs, labels).data)


def alignment_probe_loss(adapted: DiTModel, base: DiTModel, ae_high: ToyAutoencoder,
                         ae_low: ToyAutoencoder, data, batch: int, ratio: int) -> float:
    """Embedder-output distance on a fixed clean-latent probe batch."""
    images, _ = _probe_batch(data, batch)
    with frozen(adapted, base):
        e_new = adapted.embed_grid(encode_batch(ae_high, images))
        e_ref = base.embed_grid(encode_batch(ae_low, images))
        return float(alignment_loss(e_new, e_ref, ratio).data)


# -- stage 0: dataset export ------------------------------------------------------


def export_dataset(data, out_dir: str) -> int:
    """Materialize a dataset as PPM files plus a labels.csv manifest."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labels.csv"), "w") as f:
        f.write("index,class\n")
        for i in range(len(data)):
            image, cls = data.sample(i)
            write_ppm(os.path.join(out_dir, f"img_{i:05d}.ppm"), image)
            f.write(f"{i},{cls}\n")
    return len(data)


# -- stage 1: autoencoder ---------------------------------------------------------


def train_autoencoder(data, val_data, spec: LatentSpec, hidden: int, stage: StageConfig,
                      out_dir=None, record_time=False, cfg_hash="") -> tuple:
    """Fit one latent codec by plain reconstruction; fails if the target MSE is missed."""
    ae = ToyAutoencoder(spec, hidden=hidden, rng=Rng(stage.seed).child("init"))
    params = ae.named_params()

    def loss_fn(step):
        images, _ = _train_batch(data, stage, step)
        x = Tensor(images)
        return T.mse(ae.reconstruct(x), x)

    def val_fn(step):
        images, _ = _probe_batch(val_data, stage.val_batch)
        with frozen(ae):
            x = Tensor(images)
            return {"val_loss": float(T.mse(ae.reconstruct(x), x).data)}

    result = run_training(stage, params, loss_fn, val_fn=val_fn,
                          metrics_path=_metrics_path(out_dir), record_time=record_time)
    if result.final_val is None or result.final_val > stage.mse_target:
        raise TrainingError(
            f"autoencoder ({spec.tag()}) held-out MSE {result.final_val} "
            f"missed target {stage.mse_target}", step=result.steps)
    _final_checkpoint(out_dir, ae, stage, cfg_hash, result)
    return ae, result


# -- stage 2: base diffusion model ------------------------------------------------


def train_base_dit(data, val_data, ae: ToyAutoencoder, stage: StageConfig, *,
                   hidden: int, depth: int, heads: int, mlp_ratio: int = 4,
                   out_dir=None, record_time=False, cfg_hash="") -> tuple:
    """Pretrain the class-conditional velocity model in the AE's latent space."""
    freeze_params(ae)
    model = DiTModel(ae.spec, image_size=data.spec.image_size,
                     rng=Rng(stage.seed).child("init"), hidden=hidden, depth=depth,
                     heads=heads, mlp_ratio=mlp_ratio, num_classes=data.spec.classes)
    params = model.named_params()

    def loss_fn(step):
        images, labels = _train_batch(data, stage, step)
        x1 = encode_batch(ae, images)
        sample = make_flow_sample(x1, Rng(stage.seed).child("flow", step))
        # whole-batch condition dropout keeps the null branch trained for CFG
        drop = Rng(stage.seed).child("cfg_drop", step).uniform((1,))[0] < stage.cfg_dropout
        return flow_matching_loss(model, sample, None if drop else labels)

    def val_fn(step):
        return {"val_loss": flow_val_loss(model, ae, val_data, stage.val_batch)}

    result = run_training(stage, params, loss_fn, val_fn=val_fn,
                          metrics_path=_metrics_path(out_dir), record_time=record_time,
                          checkpoint_fn=_interior_checkpointer(out_dir, model, stage, cfg_hash))
    _final_checkpoint(out_dir, model, stage, cfg_hash, result)
    return model, result


# -- stage 3: guidance distillation -----------------------------------------------


def distill_guidance(teacher: DiTModel, ae: ToyAutoencoder, data, val_data,
                     stage: StageConfig, out_dir=None, record_time=False,
                     cfg_hash="") -> tuple:
    """Fold CFG into a student that takes the guidance scale as an input.

    The student starts as a weight copy of the teacher with a zeroed guidance
    branch, so at step 0 it reproduces the teacher's conditional field exactly.
    """
    freeze_params(ae)
    freeze_params(teacher)
    student = DiTModel(teacher.spec, image_size=teacher.image_size,
                       rng=Rng(stage.seed).child("init"), hidden=teacher.hidden,
                       depth=len(teacher.blocks), heads=teacher.heads,
                       mlp_ratio=teacher.mlp_ratio, num_classes=teacher.num_classes,
                       guidance_embed=True)
    tparams = teacher.named_params()
    sparams = student.named_params()
    for name, p in sparams.items():
        if name in tparams:
            p.data = tparams[name].data.copy()
    for name in ("cond.wmlp.fc2.weight", "cond.wmlp.fc2.bias"):
        sparams[name].data = np.zeros_like(sparams[name].data)

    guard = FreezeGuard({f"teacher.{k}": p for k, p in tparams.items()})

    def loss_fn(step):
        images, labels = _train_batch(data, stage, step)
        x1 = encode_batch(ae, images)
        gs = make_guidance_sample(x1, Rng(stage.seed).child("flow", step),
                                  stage.w_min, stage.w_max)
        with frozen(teacher):
            return distill_loss(student, teacher, gs, labels)

    def val_fn(step):
        images, labels = _probe_batch(val_data, stage.val_batch)
        x1 = encode_batch(ae, images)
        gs = make_guidance_sample(x1, Rng(data.spec.seed).child("val_distill"),
                                  stage.w_min, stage.w_max)
        with frozen(teacher, student):
            v = float(distill_loss(student, teacher, gs, labels).data)
            vs = student.velocity(gs.flow.x_t, gs.flow.t, labels,
                                  w=np.zeros(len(labels), dtype=np.float32)).data
            vt = teacher.velocity(gs.flow.x_t, gs.flow.t, labels).data
        gap = float(np.linalg.norm(vs - vt) / max(np.linalg.norm(vt), 1e-12))
        return {"val_loss": v, "w0_gap": gap}

    result = run_training(stage, sparams, loss_fn, val_fn=val_fn, guard=guard,
                          metrics_path=_metrics_path(out_dir), record_time=record_time)
    _final_checkpoint(out_dir, student, stage, cfg_hash, result)
    return student, result


# -- stage 4: patch-embedder alignment --------------------------------------------


def align_patch_embedder(base: DiTModel, ae_low: ToyAutoencoder, ae_high: ToyAutoencoder,
                         data, val_data, stage: StageConfig, out_dir=None,
                         record_time=False, cfg_hash="") -> tuple:
    """Swap in the deep-compression embedder and pull it toward the old one.

    Only the new patch embedder (with its positional encodings) trains; the
    trunk, conditioning, head, and the whole reference model are hash-guarded.
    The stage fails unless the probe alignment loss drops at least 10x.
    """
    freeze_params(ae_low)
    freeze_params(ae_high)
    freeze_params(base)
    adapted = base.with_latent_spec(ae_high.spec, Rng(stage.seed).child("swap"))
    for group in ("cond", "trunk", "head"):
        adapted.set_group_trainable(group, False)
    adapted.set_group_trainable("embed", True)
    ratio = downsample_ratio(base.spec, ae_high.spec)

    frozen_map = {f"base.{k}": p for k, p in base.named_params().items()}
    for k, p in adapted.named_params().items():
        if not k.startswith("embed."):
            frozen_map[f"adapted.{k}"] = p
    guard = FreezeGuard(frozen_map)

    def loss_fn(step):
        images, _ = _train_batch(data, stage, step)
        x_low = encode_batch(ae_low, images)
        x_high = encode_batch(ae_high, images)
        if stage.alignment_input == "mixed":
            r = Rng(stage.seed).child("mix", step)
            t = r.child("t").uniform((images.shape[0],))
            x_low = make_flow_sample(x_low, r.child("low"), t=t).x_t
            x_high = make_flow_sample(x_high, r.child("high"), t=t).x_t
        target = base.embed_grid(x_low)
        return alignment_loss(adapted.embed_grid(x_high), target, ratio)

    def val_fn(step):
        return {"val_loss": alignment_probe_loss(adapted, base, ae_high, ae_low,
                                                 val_data, stage.val_batch, ratio)}

    initial = alignment_probe_loss(adapted, base, ae_high, ae_low, val_data,
                                   stage.val_batch, ratio)
    result = run_training(stage, adapted.named_params(), loss_fn, val_fn=val_fn,
                          guard=guard, metrics_path=_metrics_path(out_dir),
                          record_time=record_time)
    result.initial_val = initial
    result.extras["ratio"] = ratio
    if result.final_val is None or result.final_val > initial / 10.0:
        raise TrainingError(
            f"alignment loss only moved {initial} -> {result.final_val}; "
            "expected at least a 10x reduction", step=result.steps)
    _final_checkpoint(out_dir, adapted, stage, cfg_hash, result)
    return adapted, result


# -- stage 5: output-head alignment -----------------------------------------------


def align_output_head(model: DiTModel, ae: ToyAutoencoder, data, val_data,
                      stage: StageConfig, out_dir=None, record_time=False,
                      cfg_hash="") -> TrainResult:
    """Short flow-matching warm-up of the new head (embedder keeps training)."""
    freeze_params(ae)
    model.set_group_trainable("trunk", False)
    model.set_group_trainable("cond", False)
    model.set_group_trainable("embed", True)
    model.set_group_trainable("head", True)
    guard = FreezeGuard({k: p for k, p in model.named_params().items()
                         if k.startswith(("trunk.", "cond."))})

    def loss_fn(step):
        images, labels = _train_batch(data, stage, step)
        x1 = encode_batch(ae, images)
        sample = make_flow_sample(x1, Rng(stage.seed).child("flow", step))
        drop = Rng(stage.seed).child("cfg_drop", step).uniform((1,))[0] < stage.cfg_dropout
        return flow_matching_loss(model, sample, None if drop else labels)

    def val_fn(step):
        return {"val_loss": flow_val_loss(model, ae, val_data, stage.val_batch)}

    result = run_training(stage, model.named_params(), loss_fn, val_fn=val_fn,
                          guard=guard, metrics_path=_metrics_path(out_dir),
                          record_time=record_time)
    _final_checkpoint(out_dir, model, stage, cfg_hash, result)
    return result


# -- stage 6: fine-tuning ----------------------------------------------------------


def _resolve_objective(stage: StageConfig, model: DiTModel) -> str:
    objective = stage.objective
    if objective == "auto":
        return "guided" if model.guidance_embed else "plain"
    if objective in ("guided", "naive") and not model.guidance_embed:
        raise ContractViolation(
            f"objective '{objective}' needs a guidance-conditioned model")
    return objective


def finetune_lora(model: DiTModel, ae: ToyAutoencoder, data, val_data,
                  stage: StageConfig, out_dir=None, record_time=False, cfg_hash="",
                  resume_from=None) -> tuple:
    """Final adaptation pass: low-rank adapters on the trunk, full embed/head.

    Guidance-conditioned models train with the corrected objective by default;
    `stage.objective = "naive"` selects the uncorrected loss (ablation arm).
    `stage.mode = "full"` unfreezes everything instead of attaching adapters.
    With `resume_from`, the model is rebuilt from that checkpoint and training
    continues at the recorded step with restored optimizer and EMA state.
    """
    freeze_params(ae)
    start_step = 0
    opt_state = None
    ema = None
    report = None
    if resume_from is not None:
        model, meta, tensors = load_model_checkpoint(resume_from)
        if cfg_hash and meta.get("config_hash") and meta["config_hash"] != cfg_hash:
            raise StateError(
                f"resume config hash {cfg_hash} does not match checkpoint's "
                f"{meta['config_hash']}")
        start_step = int(meta.get("step", "0"))
        opt_state = load_optimizer_state(tensors, meta)
        ema = load_ema_state(tensors, meta)
        if stage.mode == "full":
            for group in ("embed", "cond", "trunk", "head"):
                model.set_group_trainable(group, True)
    elif stage.mode == "lora":
        report = attach_lora(model, rank=stage.lora_rank, alpha=stage.lora_alpha,
                             targets=stage.lora_target_patterns(),
                             rng=Rng(stage.seed).child("lora"))
    else:
        for group in ("embed", "cond", "trunk", "head"):
            model.set_group_trainable(group, True)

    objective = _resolve_objective(stage, model)
    if stage.mode == "lora":
        guard = FreezeGuard({k: p for k, p in model.named_params().items()
                             if k.startswith(("trunk.", "cond."))})
    else:
        guard = None

    def loss_fn(step):
        images, labels = _train_batch(data, stage, step)
        x1 = encode_batch(ae, images)
        step_rng = Rng(stage.seed).child("flow", step)
        if objective == "plain":
            sample = make_flow_sample(x1, step_rng)
            drop = Rng(stage.seed).child("cfg_drop", step).uniform((1,))[0] < stage.cfg_dropout
            return flow_matching_loss(model, sample, None if drop else labels)
        gs = make_guidance_sample(x1, step_rng, stage.w_min, stage.w_max)
        if objective == "guided":
            return guide_flow_matching_loss(model, gs, labels)
        # naive: regress the guided output directly onto the plain flow target
        v = model.velocity(gs.flow.x_t, gs.flow.t, labels, w=gs.w)
        return T.mse(v, Tensor(gs.flow.v_t))

    def val_fn(step):
        if objective == "plain":
            return {"val_loss": flow_val_loss(model, ae, val_data, stage.val_batch)}
        return {"val_loss": guided_val_loss(model, ae, val_data, stage.val_batch,
                                            stage.w_min, stage.w_max)}

    result = run_training(stage, model.named_params(), loss_fn, val_fn=val_fn,
                          guard=guard, metrics_path=_metrics_path(out_dir),
                          record_time=record_time,
                          checkpoint_fn=_interior_checkpointer(out_dir, model, stage, cfg_hash),
                          start_step=start_step, opt_state=opt_state, ema=ema)
    if report is not None:
        result.extras["lora"] = report
    result.extras["objective"] = objective
    _final_checkpoint(out_dir, model, stage, cfg_hash, result)
    return model, result


# -- sampling ----------------------------------------------------------------------


def sample_euler(model: DiTModel, ae: ToyAutoencoder, labels, rng: Rng, *,
                 guidance: float = 0.0, steps: int = 32,
                 warn_stream=None) -> np.ndarray:
    """Integrate the learned velocity field from noise and decode to images.

    Fixed-step Euler on t in [0, 1): x <- x + v(x, t_k)/steps. Plain models
    apply classifier-free guidance with two calls per step; guidance-embedded
    models take the scale as an input and need one call. A negative scale on
    a plain model extrapolates away from the condition; that is allowed but
    warned about.
    """
    if steps < 1:
        raise ContractViolation(f"sampler needs steps >= 1, got {steps}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b = labels.size
    side = model.image_size // model.spec.f
    stream = warn_stream if warn_stream is not None else sys.stderr
    if not model.guidance_embed and guidance < 0.0:
        print(f"warning: negative guidance scale {guidance} steers away from the "
              "condition; proceeding anyway", file=stream)
    x = rng.child("noise").normal((b, model.spec.c, side, side))
    with frozen(model, ae):
        for k in range(steps):
            t = np.full(b, k / steps, dtype=np.float32)
            if model.guidance_embed:
                v = model.velocity(x, t, labels, w=np.full(b, guidance, dtype=np.float32)).data
            elif guidance == 0.0:
                v = model.velocity(x, t, labels).data
            else:
                v_c = model.velocity(x, t, labels).data
                v_u = model.velocity(x, t, None).data
                v = cfg_combine(v_c, v_u, guidance)
            x = x + v / np.float32(steps)
        images = ae.decode(Tensor(x)).data
    return np.clip(images, -1.0, 1.0)
