"""Flow-matching targets, guidance algebra, and alignment losses.

The guidance pieces keep two exactness properties by construction:
`cfg_combine(v, v, w) == v` bitwise for any w, and `corrected_velocity(v, u, 0)
== v` bitwise, because the combine is computed as `v_cond + w*(v_cond -
v_uncond)` rather than the distributed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .rng import Rng
from . import tensor as T
from .tensor import Tensor


@dataclass
class FlowSample:
    """A batch of linear-interpolation flow samples.

    x_t = (1-t)*x0 + t*x1 and v_t = x1 - x0, so x_t equals x0 at t=0 and x1 at
    t=1 bitwise, and dx_t/dt = v_t for every t.
    """

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_t: np.ndarray


@dataclass
class GuidanceSample:
    """A FlowSample plus a guidance scale per item."""

    flow: FlowSample
    w: np.ndarray


def _expand(t: np.ndarray, ndim: int) -> np.ndarray:
    return t.reshape(t.shape + (1,) * (ndim - 1))


def make_flow_sample(x1, rng: Rng, t=None) -> FlowSample:
    """Draw noise and a time for each item of `x1` ([B, ...])."""
    x1 = np.asarray(x1, dtype=np.float32)
    if x1.ndim < 2:
        raise ContractViolation(f"x1 must be batched, got shape {x1.shape}")
    x0 = rng.child("x0").normal(x1.shape)
    if t is None:
        t = rng.child("t").uniform([x1.shape[0]])
    else:
        t = np.asarray(t, dtype=np.float32).reshape(-1)
        if t.size == 1:
            t = np.full(x1.shape[0], float(t[0]), dtype=np.float32)
        if t.size != x1.shape[0]:
            raise ContractViolation(f"t batch {t.size} does not match x1 batch {x1.shape[0]}")
    te = _expand(t, x1.ndim)
    x_t = (1.0 - te) * x0 + te * x1
    v_t = x1 - x0
    return FlowSample(x0=x0, x1=x1, t=t, x_t=x_t, v_t=v_t)


def make_guidance_sample(x1, rng: Rng, w_min: float, w_max: float, t=None, w=None) -> GuidanceSample:
    flow = make_flow_sample(x1, rng, t=t)
    if w is None:
        w = rng.child("w").uniform([flow.x1.shape[0]], low=w_min, high=w_max)
    else:
        w = np.asarray(w, dtype=np.float32).reshape(-1)
        if w.size == 1:
            w = np.full(flow.x1.shape[0], float(w[0]), dtype=np.float32)
    return GuidanceSample(flow=flow, w=w)


def flow_matching_loss(velocity_fn, sample: FlowSample, cond) -> Tensor:
    """Mean squared error between predicted and target velocity."""
    out = velocity_fn(sample.x_t, sample.t, cond)
    if tuple(out.shape) != sample.v_t.shape:
        raise ContractViolation(f"model output {tuple(out.shape)} vs target {sample.v_t.shape}")
    return T.mse(out, Tensor(sample.v_t))


def _check_w(w, ndim: int):
    w = np.asarray(w, dtype=np.float32)
    if np.any(np.abs(1.0 + w) < 1e-8):
        raise ContractViolation("guidance scale w = -1 is outside the domain of the correction")
    if w.ndim == 0:
        return float(w)
    return _expand(w.reshape(-1), ndim)


def cfg_combine(v_cond, v_uncond, w):
    """Classifier-free-guided velocity: v_cond + w * (v_cond - v_uncond).

    Works on Tensors and plain arrays; w may be a scalar or a per-item vector.
    """
    ndim = v_cond.ndim
    w = np.asarray(w, dtype=np.float32)
    wb = float(w) if w.ndim == 0 else _expand(w.reshape(-1), ndim)
    return v_cond + (v_cond - v_uncond) * wb


def corrected_velocity(v_combined, v_uncond, w):
    """Recover the raw conditional velocity from a guided output.

    Inverts cfg_combine: (v_combined + w*v_uncond) / (1+w). Undefined at
    w = -1, which raises a contract error.
    """
    wb = _check_w(w, v_combined.ndim)
    return (v_combined + v_uncond * wb) / (1.0 + wb)


def guide_flow_matching_loss(velocity_fn, gsample: GuidanceSample, cond) -> Tensor:
    """Flow-matching loss for a guidance-conditioned model.

    The model is called twice at the same state and time (conditional and
    null), the guided pair is inverted back to a raw velocity estimate, and
    that estimate regresses onto the plain flow target.
    """
    flow = gsample.flow
    v_c = velocity_fn(flow.x_t, flow.t, cond, gsample.w)
    v_u = velocity_fn(flow.x_t, flow.t, None, gsample.w)
    v_hat = corrected_velocity(v_c, v_u, gsample.w)
    return T.mse(v_hat, Tensor(flow.v_t))


def distill_loss(student_fn, teacher_fn, gsample: GuidanceSample, cond) -> Tensor:
    """Train a guidance-conditioned student to match the teacher's CFG output.

    Teacher outputs are treated as constants; no gradient reaches the teacher.
    """
    flow = gsample.flow
    t_c = teacher_fn(flow.x_t, flow.t, cond)
    t_u = teacher_fn(flow.x_t, flow.t, None)
    if isinstance(t_c, Tensor):
        t_c = t_c.detach()
    if isinstance(t_u, Tensor):
        t_u = t_u.detach()
    target = cfg_combine(t_c, t_u, gsample.w)
    if isinstance(target, Tensor):
        target = target.detach()
    student = student_fn(flow.x_t, flow.t, cond, gsample.w)
    return T.mse(student, target if isinstance(target, Tensor) else Tensor(target))


def spatial_downsample(e, r: int):
    """Average non-overlapping r x r windows of a token grid [..., H, W, D]."""
    if isinstance(e, Tensor):
        return T.avg_pool_grid(e, r)
    return T.avg_pool_grid(Tensor(np.asarray(e)), r).data


def alignment_loss(e_phi, e, r: int) -> Tensor:
    """MSE between the new embedder's grid and the pooled pretrained grid.

    `e` (the pretrained-path grid) is treated as a constant target.
    """
    if not isinstance(e_phi, Tensor):
        e_phi = Tensor(np.asarray(e_phi, dtype=np.float32))
    target = spatial_downsample(e.detach() if isinstance(e, Tensor) else e, r)
    tdata = target.data if isinstance(target, Tensor) else target
    if tuple(e_phi.shape) != tuple(tdata.shape):
        raise ContractViolation(
            f"aligned grid {tuple(e_phi.shape)} vs pooled target {tuple(tdata.shape)}"
        )
    return T.mse(e_phi, Tensor(tdata))
