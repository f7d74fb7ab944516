"""Latent spaces, toy autoencoder, diffusion transformer, LoRA surgery.

The transformer trunk is latent-space agnostic: only the patch embedder (in)
and the output head (out) touch latent geometry, so swapping the latent space
replaces exactly those two groups and leaves the trunk parameter count
unchanged. Parameter names are dotted; the leading segment is the freeze group
(embed / cond / trunk / head / lora).
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, StateError
from .nn import Linear, LoraAdapter, Mlp, sinusoidal_embedding
from .rng import Rng
from . import tensor as T
from .tensor import Tensor

DEFAULT_LORA_TARGETS = ("trunk.b*.attn.*.weight", "trunk.b*.mlp.*.weight")


@dataclass(frozen=True)
class LatentSpec:
    """Geometry of a latent space: AE downsample f, patch size p, channels c."""

    f: int
    p: int
    c: int

    def __post_init__(self):
        for field in ("f", "p", "c"):
            v = getattr(self, field)
            if not isinstance(v, int) or v < 1:
                raise ContractViolation(f"LatentSpec.{field} must be a positive int, got {v!r}")

    @property
    def stride(self) -> int:
        """Pixels consumed per transformer token along each axis."""
        return self.f * self.p

    @property
    def token_dim(self) -> int:
        return self.p * self.p * self.c

    def tag(self) -> str:
        return f"f{self.f}p{self.p}c{self.c}"


def token_count(h: int, w: int, spec: LatentSpec) -> int:
    """Transformer sequence length for an h x w image under `spec`."""
    s = spec.stride
    if h % s or w % s:
        raise ContractViolation(f"image {h}x{w} not divisible by f*p = {s}")
    return (h // s) * (w // s)


def downsample_ratio(low: LatentSpec, high: LatentSpec) -> int:
    """Token-grid shrink factor when moving from `low` to `high`."""
    if high.stride % low.stride:
        raise ContractViolation(
            f"high-space stride {high.stride} is not a multiple of low-space stride {low.stride}"
        )
    return high.stride // low.stride


# -- autoencoder ---------------------------------------------------------------


class ToyAutoencoder:
    """Per-patch autoencoder: a linear path plus a one-hidden-layer correction.

    encode: [B, 3, H, W] -> [B, c, H/f, W/f];  decode mirrors it back. The
    linear path lets the AE represent the identity exactly whenever
    c >= 3*f*f, which pins the near-lossless capacity check.
    """

    def __init__(self, spec: LatentSpec, hidden: int, rng: Rng, image_channels: int = 3):
        self.spec = spec
        self.hidden = hidden
        self.image_channels = image_channels
        d = spec.f * spec.f * image_channels
        r = rng.child("ae")
        self.enc_skip = Linear(d, spec.c, r.child("enc_skip"))
        self.enc_mlp = Mlp(d, hidden, spec.c, r.child("enc_mlp"), act="silu")
        self.dec_skip = Linear(spec.c, d, r.child("dec_skip"))
        self.dec_mlp = Mlp(spec.c, hidden, d, r.child("dec_mlp"), act="silu")

    def named_params(self) -> dict:
        params: dict = {}
        self.enc_skip.register(params, "enc.skip")
        self.enc_mlp.register(params, "enc.mlp")
        self.dec_skip.register(params, "dec.skip")
        self.dec_mlp.register(params, "dec.mlp")
        return params

    def _check_image(self, x):
        f = self.spec.f
        if x.ndim != 4 or x.shape[1] != self.image_channels:
            raise ContractViolation(f"expected [B, {self.image_channels}, H, W], got {x.shape}")
        if x.shape[2] % f or x.shape[3] % f:
            raise ContractViolation(f"image {x.shape[2]}x{x.shape[3]} not divisible by f={f}")

    def encode(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        self._check_image(x)
        b, ch, h, w = x.shape
        f = self.spec.f
        grid = T.reshape(x, (b, ch, h // f, f, w // f, f))
        grid = T.permute(grid, (0, 2, 4, 1, 3, 5))
        flat = T.reshape(grid, (b, h // f, w // f, ch * f * f))
        z = T.add(self.enc_skip(flat), self.enc_mlp(flat))
        return T.permute(z, (0, 3, 1, 2))

    def decode(self, z) -> Tensor:
        if not isinstance(z, Tensor):
            z = Tensor(np.asarray(z, dtype=np.float32))
        if z.ndim != 4 or z.shape[1] != self.spec.c:
            raise ContractViolation(f"expected [B, {self.spec.c}, h, w], got {z.shape}")
        b, c, h, w = z.shape
        f = self.spec.f
        zz = T.permute(z, (0, 2, 3, 1))
        flat = T.add(self.dec_skip(zz), self.dec_mlp(zz))
        grid = T.reshape(flat, (b, h, w, self.image_channels, f, f))
        grid = T.permute(grid, (0, 3, 1, 4, 2, 5))
        return T.reshape(grid, (b, self.image_channels, h * f, w * f))

    def reconstruct(self, x) -> Tensor:
        return self.decode(self.encode(x))

    def hyperparams(self) -> dict:
        return {
            "kind": "autoencoder",
            "f": self.spec.f,
            "p": self.spec.p,
            "c": self.spec.c,
            "hidden": self.hidden,
            "image_channels": self.image_channels,
        }


# -- diffusion transformer -------------------------------------------------------


class _Attention:
    def __init__(self, dim: int, heads: int, rng: Rng):
        if dim % heads:
            raise ContractViolation(f"hidden dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng.child("wq"))
        self.wk = Linear(dim, dim, rng.child("wk"))
        self.wv = Linear(dim, dim, rng.child("wv"))
        self.wo = Linear(dim, dim, rng.child("wo"))

    def __call__(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(t):
            return T.permute(T.reshape(t, (b, n, h, hd)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / float(np.sqrt(hd)))
        attn = T.softmax(scores)
        out = T.matmul(attn, v)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (b, n, d))
        return self.wo(out)

    def register(self, params: dict, prefix: str):
        for name in ("wq", "wk", "wv", "wo"):
            getattr(self, name).register(params, f"{prefix}.{name}")

    def linears(self, prefix: str) -> dict:
        return {f"{prefix}.{n}": getattr(self, n) for n in ("wq", "wk", "wv", "wo")}


class _Block:
    """Pre-norm transformer block with conditioned modulation and gating.

    The modulation projection is zero-init, so a fresh block is the identity
    map and training opens it up gradually.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: Rng):
        self.dim = dim
        self.mod = Linear(dim, 6 * dim, rng.child("mod"), init="zero")
        self.attn = _Attention(dim, heads, rng.child("attn"))
        self.mlp = Mlp(dim, mlp_ratio * dim, dim, rng.child("mlp"), act="gelu")

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b = x.shape[0]
        d = self.dim
        mod = self.mod(T.silu(cond))

        def part(i):
            return T.reshape(mod[:, i * d:(i + 1) * d], (b, 1, d))

        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = (part(i) for i in range(6))
        h = T.layer_norm(x)
        h = T.add(T.mul(h, T.add(scale_a, 1.0)), shift_a)
        x = T.add(x, T.mul(gate_a, self.attn(h)))
        h = T.layer_norm(x)
        h = T.add(T.mul(h, T.add(scale_m, 1.0)), shift_m)
        x = T.add(x, T.mul(gate_m, self.mlp(h)))
        return x

    def register(self, params: dict, prefix: str):
        self.mod.register(params, f"{prefix}.mod")
        self.attn.register(params, f"{prefix}.attn")
        self.mlp.register(params, f"{prefix}.mlp")

    def linears(self, prefix: str) -> dict:
        out = {f"{prefix}.mod": self.mod}
        out.update(self.attn.linears(f"{prefix}.attn"))
        out.update({f"{prefix}.mlp.fc1": self.mlp.fc1, f"{prefix}.mlp.fc2": self.mlp.fc2})
        return out


class DiTModel:
    """Flow-velocity transformer with conditioned modulation.

    Predicts the flow velocity for a latent `x_t` at time `t` under a class
    condition; models built with `guidance_embed=True` additionally condition
    on a guidance scale `w` (the distilled-model interface).
    """

    GROUPS = ("embed", "cond", "trunk", "head")

    def __init__(self, spec: LatentSpec, image_size: int, rng: Rng, hidden: int = 128,
                 depth: int = 4, heads: int = 4, mlp_ratio: int = 4, num_classes: int = 8,
                 guidance_embed: bool = False, image_channels: int = 3):
        if image_size % spec.stride:
            raise ContractViolation(f"image size {image_size} not divisible by f*p = {spec.stride}")
        self.spec = spec
        self.image_size = image_size
        self.hidden = hidden
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.num_classes = num_classes
        self.guidance_embed = guidance_embed
        self.image_channels = image_channels
        self.grid_side = image_size // spec.stride
        self.tokens = self.grid_side * self.grid_side
        self.lora_merged = False

        r = rng.child("dit")
        self._build_embed_head(r)
        self.class_table = Tensor(r.child("classes").normal([num_classes + 1, hidden], std=0.02),
                                  requires_grad=True)
        self.t_mlp = Mlp(hidden, hidden, hidden, r.child("tmlp"), act="silu")
        self.w_mlp = Mlp(hidden, hidden, hidden, r.child("wmlp"), act="silu") if guidance_embed else None
        self.blocks = [_Block(hidden, heads, mlp_ratio, r.child("block", i)) for i in range(depth)]
        self.final_mod = Linear(hidden, 2 * hidden, r.child("final_mod"), init="zero")

    def _build_embed_head(self, r: Rng):
        self.patch = Linear(self.spec.token_dim, self.hidden, r.child("patch"))
        self.pos = Tensor(r.child("pos").normal([self.tokens, self.hidden], std=0.02),
                          requires_grad=True)
        self.head = Linear(self.hidden, self.spec.token_dim, r.child("head"), init="normal")

    # -- parameters ----------------------------------------------------------

    def named_params(self) -> dict:
        params: dict = {}
        self.patch.register(params, "embed.patch")
        params["embed.pos"] = self.pos
        params["cond.table"] = self.class_table
        self.t_mlp.register(params, "cond.tmlp")
        if self.w_mlp is not None:
            self.w_mlp.register(params, "cond.wmlp")
        for i, blk in enumerate(self.blocks):
            blk.register(params, f"trunk.b{i}")
        self.final_mod.register(params, "trunk.final_mod")
        self.head.register(params, "head.out")
        for name, lin in sorted(self._linears().items()):
            if lin.lora is not None:
                params[f"lora.{name}.a"] = lin.lora.a
                params[f"lora.{name}.b"] = lin.lora.b
        return params

    def _linears(self) -> dict:
        out = {"embed.patch": self.patch, "head.out": self.head,
               "cond.tmlp.fc1": self.t_mlp.fc1, "cond.tmlp.fc2": self.t_mlp.fc2,
               "trunk.final_mod": self.final_mod}
        if self.w_mlp is not None:
            out.update({"cond.wmlp.fc1": self.w_mlp.fc1, "cond.wmlp.fc2": self.w_mlp.fc2})
        for i, blk in enumerate(self.blocks):
            out.update(blk.linears(f"trunk.b{i}"))
        return out

    def trainable_params(self) -> dict:
        return {k: p for k, p in self.named_params().items() if p.requires_grad}

    def set_group_trainable(self, group: str, flag: bool):
        hit = False
        for name, p in self.named_params().items():
            if name.split(".", 1)[0] == group:
                p.requires_grad = flag
                hit = True
        if not hit:
            raise ContractViolation(f"no parameter group '{group}'")

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def trainable_count(self) -> int:
        return sum(p.size for p in self.named_params().values() if p.requires_grad)

    # -- forward -------------------------------------------------------------

    def _null_index(self) -> int:
        return self.num_classes

    def _cond_ids(self, cond, batch: int) -> np.ndarray:
        if cond is None:
            return np.full(batch, self._null_index(), dtype=np.int64)
        ids = np.asarray(cond, dtype=np.int64).reshape(-1)
        if ids.size == 1 and batch > 1:
            ids = np.full(batch, int(ids[0]), dtype=np.int64)
        if ids.size != batch:
            raise ContractViolation(f"cond batch {ids.size} does not match input batch {batch}")
        ids = np.where(ids < 0, self._null_index(), ids)
        if ids.max() > self._null_index():
            raise ContractViolation(f"class id {ids.max()} out of range (classes={self.num_classes})")
        return ids

    def cond_vector(self, t, cond, w=None, batch: int | None = None) -> Tensor:
        if isinstance(t, Tensor):
            t = t.data
        if isinstance(w, Tensor):
            w = w.data
        t = np.asarray(t, dtype=np.float32).reshape(-1)
        b = batch if batch is not None else t.size
        if t.size == 1 and b > 1:
            t = np.full(b, float(t[0]), dtype=np.float32)
        if t.size != b:
            raise ContractViolation(f"t batch {t.size} does not match input batch {b}")
        vec = self.t_mlp(Tensor(sinusoidal_embedding(t, self.hidden)))
        ids = self._cond_ids(cond, b)
        vec = T.add(vec, T.embedding(self.class_table, ids))
        if self.guidance_embed:
            if w is None:
                raise ContractViolation("this model conditions on a guidance scale; w is required")
            wv = np.asarray(w, dtype=np.float32).reshape(-1)
            if wv.size == 1 and b > 1:
                wv = np.full(b, float(wv[0]), dtype=np.float32)
            if wv.size != b:
                raise ContractViolation(f"w batch {wv.size} does not match input batch {b}")
            vec = T.add(vec, self.w_mlp(Tensor(sinusoidal_embedding(wv, self.hidden))))
        elif w is not None:
            raise ContractViolation("this model has no guidance embedding; pass w=None")
        return vec

    def _check_latent(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        side = self.image_size // self.spec.f
        if x.ndim != 4 or x.shape[1] != self.spec.c or x.shape[2] != side or x.shape[3] != side:
            raise ContractViolation(
                f"expected latent [B, {self.spec.c}, {side}, {side}], got {tuple(x.shape)}"
            )
        return x

    def embed_sequence(self, x) -> Tensor:
        """Patchify + project + positional offsets: [B,c,h,w] -> [B,T,hidden]."""
        x = self._check_latent(x)
        b, c, h, w = x.shape
        p = self.spec.p
        grid = T.reshape(x, (b, c, h // p, p, w // p, p))
        grid = T.permute(grid, (0, 2, 4, 1, 3, 5))
        tokens = T.reshape(grid, (b, self.tokens, self.spec.token_dim))
        return T.add(self.patch(tokens), self.pos)

    def embed_grid(self, x) -> Tensor:
        """Embedder output in spatial layout [B, Ht, Wt, hidden]."""
        seq = self.embed_sequence(x)
        g = self.grid_side
        return T.reshape(seq, (seq.shape[0], g, g, self.hidden))

    def trunk_forward(self, seq, cvec) -> Tensor:
        """Run only the transformer blocks on a prepared token sequence.

        Probe entry point: feeding identical (seq, cvec) pairs to two models
        isolates trunk-weight differences from embedder/conditioning drift.
        Adapters attached to trunk weights participate.
        """
        if not isinstance(seq, Tensor):
            seq = Tensor(np.asarray(seq, dtype=np.float32))
        if not isinstance(cvec, Tensor):
            cvec = Tensor(np.asarray(cvec, dtype=np.float32))
        if seq.ndim != 3 or seq.shape[2] != self.hidden:
            raise ContractViolation(f"expected [B, T, {self.hidden}] sequence, got {tuple(seq.shape)}")
        if cvec.ndim != 2 or cvec.shape != (seq.shape[0], self.hidden):
            raise ContractViolation(f"expected [B, {self.hidden}] conditioning, got {tuple(cvec.shape)}")
        h = seq
        for blk in self.blocks:
            h = blk(h, cvec)
        return h

    def _unpatchify(self, y: Tensor, batch: int) -> Tensor:
        p, c = self.spec.p, self.spec.c
        g = self.grid_side
        grid = T.reshape(y, (batch, g, g, c, p, p))
        grid = T.permute(grid, (0, 3, 1, 4, 2, 5))
        return T.reshape(grid, (batch, c, g * p, g * p))

    def velocity(self, x, t, cond, w=None, capture: bool = False):
        """Predicted flow velocity; optionally also per-block trunk features.

        Features are recorded after each block's second residual addition.
        """
        x = self._check_latent(x)
        b = x.shape[0]
        cvec = self.cond_vector(t, cond, w, batch=b)
        h = self.embed_sequence(x)
        feats = []
        for blk in self.blocks:
            h = blk(h, cvec)
            if capture:
                feats.append(h)
        mod = self.final_mod(T.silu(cvec))
        d = self.hidden
        shift = T.reshape(mod[:, :d], (b, 1, d))
        scale = T.reshape(mod[:, d:], (b, 1, d))
        out = T.layer_norm(h)
        out = T.add(T.mul(out, T.add(scale, 1.0)), shift)
        out = self.head(out)
        out = self._unpatchify(out, b)
        return (out, feats) if capture else out

    def __call__(self, x, t, cond, w=None):
        return self.velocity(x, t, cond, w)

    # -- persistence / cloning -------------------------------------------------

    def hyperparams(self) -> dict:
        return {
            "kind": "dit",
            "f": self.spec.f, "p": self.spec.p, "c": self.spec.c,
            "image_size": self.image_size, "hidden": self.hidden, "depth": self.depth,
            "heads": self.heads, "mlp_ratio": self.mlp_ratio,
            "num_classes": self.num_classes, "guidance_embed": int(self.guidance_embed),
            "image_channels": self.image_channels,
        }

    def clone(self) -> "DiTModel":
        other = DiTModel(self.spec, self.image_size, Rng(0), hidden=self.hidden,
                         depth=self.depth, heads=self.heads, mlp_ratio=self.mlp_ratio,
                         num_classes=self.num_classes, guidance_embed=self.guidance_embed,
                         image_channels=self.image_channels)
        if any(lin.lora is not None for lin in self._linears().values()):
            mine = self._linears()
            for name, lin in other._linears().items():
                src = mine[name].lora
                if src is not None:
                    lin.lora = LoraAdapter(src.target, src.rank, src.alpha,
                                           Tensor(src.a.data.copy(), requires_grad=src.a.requires_grad),
                                           Tensor(src.b.data.copy(), requires_grad=src.b.requires_grad))
        theirs = other.named_params()
        for name, p in self.named_params().items():
            theirs[name].data = p.data.copy()
            theirs[name].requires_grad = p.requires_grad
        other.lora_merged = self.lora_merged
        return other

    def with_latent_spec(self, spec: LatentSpec, rng: Rng) -> "DiTModel":
        """Clone with a fresh random embedder + head sized for `spec`.

        Trunk and conditioning weights are copied; the trunk parameter count is
        unchanged by construction (only latent-facing groups depend on spec).
        """
        other = DiTModel(spec, self.image_size, rng, hidden=self.hidden, depth=self.depth,
                         heads=self.heads, mlp_ratio=self.mlp_ratio, num_classes=self.num_classes,
                         guidance_embed=self.guidance_embed, image_channels=self.image_channels)
        theirs = other.named_params()
        for name, p in self.named_params().items():
            if name.split(".", 1)[0] in ("trunk", "cond"):
                theirs[name].data = p.data.copy()
        return other


def guidance_accepting(model: DiTModel) -> bool:
    return model.guidance_embed


# -- LoRA surgery ----------------------------------------------------------------


def attach_lora(model: DiTModel, rank: int, alpha: float,
                targets=DEFAULT_LORA_TARGETS, rng: Rng | None = None) -> dict:
    """Install adapters on matching 2-D weights and set stage-3 freeze flags.

    All base parameters freeze except the embedder and head groups; adapters
    train. Returns a report with resolved targets and the trainable fraction.
    """
    if rng is None:
        rng = Rng(0)
    if rank < 1:
        raise ConfigError(f"lora rank must be >= 1, got {rank}")
    linears = model._linears()
    resolved: list[str] = []
    for name, lin in sorted(linears.items()):
        wname = f"{name}.weight"
        if any(fnmatch.fnmatch(wname, pat) for pat in targets):
            if lin.lora is not None:
                raise StateError(f"adapter already attached to '{name}'")
            resolved.append(name)
    if not resolved:
        raise ConfigError(f"lora target patterns {list(targets)} matched no 2-D weights")
    for name in resolved:
        lin = linears[name]
        if rank > min(lin.in_dim, lin.out_dim):
            raise ConfigError(
                f"lora rank {rank} exceeds min dim {min(lin.in_dim, lin.out_dim)} of '{name}'"
            )
        a = Tensor(rng.child("lora_a", name).normal([rank, lin.in_dim], std=1.0 / np.sqrt(lin.in_dim)),
                   requires_grad=True)
        b = Tensor(np.zeros((lin.out_dim, rank), dtype=np.float32), requires_grad=True)
        lin.lora = LoraAdapter(target=name, rank=rank, alpha=alpha, a=a, b=b)
    for pname, p in model.named_params().items():
        group = pname.split(".", 1)[0]
        p.requires_grad = group in ("embed", "head", "lora")
    model.lora_merged = False
    total = model.param_count()
    trainable = model.trainable_count()
    return {
        "targets": resolved,
        "rank": rank,
        "alpha": alpha,
        "trainable": trainable,
        "total": total,
        "fraction": trainable / total,
    }


def merge_lora(model: DiTModel) -> DiTModel:
    """Fold every adapter into its base weight and drop the adapters.

    The merged forward matches the adapted forward to float rounding. Merging
    a model without adapters (or twice) is a state error.
    """
    if model.lora_merged:
        raise StateError("adapters already merged into this model")
    merged_any = False
    for name, lin in model._linears().items():
        ad = lin.lora
        if ad is None:
            continue
        delta = ad.scale * (ad.b.data @ ad.a.data)  # [out, in]
        lin.weight.data += delta.T.astype(lin.weight.data.dtype)
        lin.lora = None
        merged_any = True
    if not merged_any:
        raise StateError("no adapters attached; nothing to merge")
    model.lora_merged = True
    return model


def capture_layer_features(model: DiTModel, x, t, cond, w=None) -> list:
    """Per-block trunk features for probe inputs (no gradients retained)."""
    _, feats = model.velocity(x, t, cond, w, capture=True)
    return [f.detach() for f in feats]
