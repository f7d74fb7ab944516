"""Measurement tools: representation-gap probes, drift, throughput, run compare.

These functions only read models and metrics files; nothing here mutates
parameters or writes checkpoints.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InputError
from .metrics import metric_series, read_metrics
from .models import DiTModel, LatentSpec, ToyAutoencoder, capture_layer_features, token_count
from .objectives import corrected_velocity, make_guidance_sample, spatial_downsample
from .pipeline import _probe_batch, encode_batch, frozen
from .rng import Rng


@dataclass
class GapReport:
    """Per-block feature distance between two embedder pathways."""

    metric: str
    batch: int
    grid_ref: int
    grid_new: int
    layers: list = field(default_factory=list)

    def layer1(self) -> float:
        return self.layers[0]


def _pool_to(feats: np.ndarray, grid_from: int, grid_to: int) -> np.ndarray:
    """[B, T, D] token features -> [B, g_to*g_to, D] by window averaging."""
    b, t, d = feats.shape
    if grid_from * grid_from != t:
        raise ContractViolation(f"feature count {t} is not a {grid_from}x{grid_from} grid")
    if grid_from == grid_to:
        return feats
    if grid_from % grid_to:
        raise ContractViolation(f"grid {grid_from} does not pool to {grid_to}")
    r = grid_from // grid_to
    grid = feats.reshape(b, grid_from, grid_from, d)
    pooled = spatial_downsample(grid, r)
    return pooled.reshape(b, grid_to * grid_to, d)


def _feature_distance(a: np.ndarray, b: np.ndarray, metric: str) -> float:
    if metric == "mse":
        return float(np.mean((a - b) ** 2))
    if metric == "cosine":
        num = np.sum(a * b, axis=-1)
        den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + 1e-12
        return float(np.mean(1.0 - num / den))
    raise ContractViolation(f"unknown gap metric '{metric}'")


def layer_gap_probe(base: DiTModel, adapted: DiTModel, ae_base: ToyAutoencoder,
                    ae_adapted: ToyAutoencoder, data, *, batch: int = 16,
                    metric: str = "mse") -> GapReport:
    """Feature distance per trunk block between the two latent pathways.

    Both models must carry bitwise-identical trunk and conditioning weights;
    the probe isolates what the embedder swap did to the representations, so
    any trunk difference would make the comparison meaningless. Features from
    the finer token grid are window-averaged down to the coarser one.
    """
    pa = base.named_params()
    pb = adapted.named_params()
    for name in pa:
        if not name.startswith(("trunk.", "cond.")):
            continue
        if name not in pb or pa[name].data.tobytes() != pb[name].data.tobytes():
            raise ContractViolation(
                f"trunk/conditioning weights differ at '{name}'; the gap probe "
                "requires an identical trunk on both paths")

    images, labels = _probe_batch(data, batch)
    n = images.shape[0]
    t = np.ones(n, dtype=np.float32)
    with frozen(base, adapted):
        x_ref = encode_batch(ae_base, images)
        x_new = encode_batch(ae_adapted, images)
        w_ref = np.zeros(n, dtype=np.float32) if base.guidance_embed else None
        w_new = np.zeros(n, dtype=np.float32) if adapted.guidance_embed else None
        feats_ref = capture_layer_features(base, x_ref, t, labels, w=w_ref)
        feats_new = capture_layer_features(adapted, x_new, t, labels, w=w_new)
    if len(feats_ref) != len(feats_new):
        raise ContractViolation("models have different trunk depths")

    g_ref, g_new = base.grid_side, adapted.grid_side
    g_common = min(g_ref, g_new)
    report = GapReport(metric=metric, batch=n, grid_ref=g_ref, grid_new=g_new)
    for fr, fn in zip(feats_ref, feats_new):
        a = _pool_to(fr.data, g_ref, g_common)
        b = _pool_to(fn.data, g_new, g_common)
        report.layers.append(_feature_distance(a, b, metric))
    return report


def trunk_drift(model_ref: DiTModel, model_new: DiTModel, *, batch: int = 8,
                tokens: int = 8, probes: int = 4, seed: int = 0) -> float:
    """Mean relative change of trunk outputs on fixed synthetic probes.

    The probes bypass both embedder and conditioning networks, so the number
    only moves when trunk weights (or their adapters) move.
    """
    if model_ref.hidden != model_new.hidden:
        raise ContractViolation("models have different hidden widths")
    total = 0.0
    with frozen(model_ref, model_new):
        for i in range(probes):
            rng = Rng(seed).child("drift", i)
            seq = rng.child("seq").normal((batch, tokens, model_ref.hidden))
            cvec = rng.child("cvec").normal((batch, model_ref.hidden))
            fa = model_ref.trunk_forward(seq, cvec).data
            fb = model_new.trunk_forward(seq, cvec).data
            total += float(np.linalg.norm(fb - fa) / max(np.linalg.norm(fa), 1e-12))
    return total / probes


def corrected_velocity_error(student: DiTModel, teacher: DiTModel, ae: ToyAutoencoder,
                             data, *, batch: int = 32, w_min: float = 1.0,
                             w_max: float = 4.0) -> float:
    """Distance between the student's implied raw velocity and the teacher's.

    The guidance-conditioned student is inverted back to a conditional
    velocity estimate; the frozen teacher's conditional output on the same
    probe states is the oracle. Fixed draws make the number comparable across
    models trained in the same space.
    """
    if not student.guidance_embed:
        raise ContractViolation("student must be guidance-conditioned")
    images, labels = _probe_batch(data, batch)
    x1 = encode_batch(ae, images)
    gs = make_guidance_sample(x1, Rng(data.spec.seed).child("cve_probe"), w_min, w_max)
    with frozen(student, teacher):
        v_c = student.velocity(gs.flow.x_t, gs.flow.t, labels, w=gs.w).data
        v_u = student.velocity(gs.flow.x_t, gs.flow.t, None, w=gs.w).data
        oracle = teacher.velocity(gs.flow.x_t, gs.flow.t, labels).data
    v_hat = corrected_velocity(v_c, v_u, gs.w)
    return float(np.mean((v_hat - oracle) ** 2))


# -- throughput ---------------------------------------------------------------


@dataclass
class BenchRecord:
    tag: str
    image_size: int
    tokens: int
    batch: int
    repeats: int
    warmup: int
    median_s: float
    mean_s: float

    @property
    def steps_per_s(self) -> float:
        return 1.0 / self.median_s if self.median_s > 0 else float("inf")

    def as_dict(self) -> dict:
        return {
            "tag": self.tag, "image_size": self.image_size, "tokens": self.tokens,
            "batch": self.batch, "repeats": self.repeats, "warmup": self.warmup,
            "median_s": self.median_s, "mean_s": self.mean_s,
            "steps_per_s": self.steps_per_s,
        }


def bench_step(spec: LatentSpec, image_size: int, *, hidden: int = 128, depth: int = 4,
               heads: int = 4, mlp_ratio: int = 4, batch: int = 1, repeats: int = 5,
               warmup: int = 2, seed: int = 0) -> BenchRecord:
    """Median wall time of one velocity forward at the given latent geometry."""
    if repeats < 1 or warmup < 0:
        raise ContractViolation("bench needs repeats >= 1 and warmup >= 0")
    model = DiTModel(spec, image_size=image_size, rng=Rng(seed), hidden=hidden,
                     depth=depth, heads=heads, mlp_ratio=mlp_ratio, num_classes=4)
    side = image_size // spec.f
    x = Rng(seed).child("x").normal((batch, spec.c, side, side))
    t = np.full(batch, 0.5, dtype=np.float32)
    labels = np.zeros(batch, dtype=np.int64)
    times = []
    with frozen(model):
        for _ in range(warmup):
            model.velocity(x, t, labels)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.velocity(x, t, labels)
            times.append(time.perf_counter() - t0)
    return BenchRecord(tag=spec.tag(), image_size=image_size,
                       tokens=token_count(image_size, image_size, spec), batch=batch,
                       repeats=repeats, warmup=warmup,
                       median_s=statistics.median(times),
                       mean_s=sum(times) / len(times))


# -- paired-run comparison -------------------------------------------------------


def compare_runs(path_a: str, path_b: str, column: str = "val_loss",
                 warmup_steps: int = 0) -> dict:
    """Inner-join two metrics files on step and compare one column.

    Returns the joined series plus two verdicts: the final-value ratio a/b and
    whether a <= b at every common step after `warmup_steps`.
    """
    series = {}
    for tag, path in (("a", path_a), ("b", path_b)):
        records = read_metrics(path)
        steps, values = metric_series(records, column)
        if not steps:
            raise InputError(f"{path} has no values for column '{column}'")
        series[tag] = dict(zip(steps, values))
    common = sorted(set(series["a"]) & set(series["b"]))
    if not common:
        raise InputError(
            f"runs share no logged steps for '{column}'; cannot compare them")
    a = [series["a"][s] for s in common]
    b = [series["b"][s] for s in common]
    after = [i for i, s in enumerate(common) if s > warmup_steps]
    if not after:
        raise InputError(f"no common steps after warmup {warmup_steps}")
    final_ratio = a[-1] / b[-1] if b[-1] != 0 else float("inf")
    return {
        "column": column,
        "steps": common,
        "a": a,
        "b": b,
        "final_a": a[-1],
        "final_b": b[-1],
        "final_ratio": final_ratio,
        "a_le_b_after_warmup": all(a[i] <= b[i] for i in after),
    }
