"""Conviformer network: convolutional front-end + GPSA transformer + heads.

Parameters live in a flat, ordered ``name -> Tensor`` map so they serialize
directly into checkpoints. Naming schema (``<i>`` is a layer index)::

    frontend.down.<i>.conv.{w,b}   stride-f downsampling conv (one per prime factor of d_s)
    frontend.down.<i>.norm.{g,b}   per-sample norm over (C, H, W) after it
    frontend.out.conv.{w,b}        stride-1 3x3 conv to conv_channels
    patch_embed.proj.{w,b}         non-overlapping patch projection to d_emb
    gpsa.<i>.norm1.{g,b}  gpsa.<i>.attn.{wq,wk,wv,wo,bo}
    gpsa.<i>.attn.pos.{w,b}        relative-position scorer, (3, H) and (H,)
    gpsa.<i>.attn.gate             per-head gating logit, (H,)
    gpsa.<i>.norm2.{g,b}  gpsa.<i>.ffn.{w1,b1,w2,b2}
    sa.<i>.*                       same as gpsa minus pos/gate
    cls_token  norm.{g,b}
    head.tax.{w,b}  head.gen.{w1,b1,w2,b2}  head.fam.{w1,b1,w2,b2}
    head.emb_tax.{w,b}  head.emb_gen.{w,b}  head.emb_fam.{w,b}

Linear weights are stored (in_features, out_features). A ``convit`` mode
model has no ``frontend.*`` and its patch projection reads raw RGB.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Optional

import numpy as np
import yaml

from . import ops
from .errors import ConfigError, DimensionError
from .rng import stream
from .tensor import Tensor

MODES = ("conviformer", "convit")


@dataclass
class ConviformerConfig:
    """Architecture hyperparameters. Defaults describe the full-size base model."""

    n_heads: int = 12
    d_emb: int = 768
    n_gpsa_layers: int = 10
    n_sa_layers: int = 2
    patch_size: int = 16
    base_res: int = 224
    conv_channels: int = 64
    ffn_expansion: int = 4
    n_taxa: int = 15501
    n_genus: int = 2564
    n_family: int = 272
    emb_dims: tuple = (512, 128, 128)
    head_hidden: int = 512
    mode: str = "conviformer"
    dropout: float = 0.0
    locality_strength: float = 1.0
    gate_init: float = 1.0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.emb_dims = tuple(int(d) for d in self.emb_dims)
        if self.d_emb != 64 * self.n_heads:
            raise ConfigError(f"d_emb must equal 64 * n_heads ({64 * self.n_heads}), got {self.d_emb}")
        if self.base_res % self.patch_size:
            raise ConfigError(f"base_res {self.base_res} is not divisible by patch_size {self.patch_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.emb_dims) != 3:
            raise ConfigError("emb_dims needs three entries (taxa, genus, family)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for name in ("n_heads", "n_gpsa_layers", "patch_size", "base_res", "conv_channels",
                     "ffn_expansion", "n_taxa", "n_genus", "n_family", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_sa_layers < 0:
            raise ConfigError("n_sa_layers must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_emb // self.n_heads

    @classmethod
    def tiny(cls, **overrides) -> "ConviformerConfig":
        """Desk-scale variant used throughout the tests."""
        base = dict(n_heads=4, d_emb=256, n_gpsa_layers=2, n_sa_layers=1, patch_size=8, base_res=32,
                    n_taxa=36, n_genus=12, n_family=4)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ConviformerConfig":
        return ConviformerConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["emb_dims"] = list(self.emb_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConviformerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ConviformerConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data.get("model", data))


@dataclass(frozen=True)
class PatchGrid:
    h_prime: int
    w_prime: int
    d_s: int
    patch_size: int
    grid_h: int = field(init=False)
    grid_w: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "grid_h", self.h_prime // self.patch_size)
        object.__setattr__(self, "grid_w", self.w_prime // self.patch_size)

    @property
    def t_p(self) -> int:
        return self.grid_h * self.grid_w


def downsample_factor(h: int, base_res: int = 224) -> int:
    """``max(1, floor(h / base_res))``."""
    if h < 1:
        raise DimensionError("image extent must be >= 1")
    return max(1, h // base_res)


def patch_grid(h: int, w: int, cfg: ConviformerConfig, mode: Optional[str] = None) -> PatchGrid:
    mode = mode or cfg.mode
    d_s = downsample_factor(h, cfg.base_res) if mode == "conviformer" else 1
    if h < cfg.patch_size * d_s or w < cfg.patch_size * d_s:
        raise DimensionError(f"{h}x{w} input is smaller than one {cfg.patch_size * d_s}px patch")
    return PatchGrid(h // d_s, w // d_s, d_s, cfg.patch_size)


def patch_count(h: int, w: int, cfg: ConviformerConfig, mode: Optional[str] = None) -> int:
    """Token (sequence) count ``floor(h'/p) * floor(w'/p)``."""
    return patch_grid(h, w, cfg, mode).t_p


def attention_footprint(h: int, w: int, cfg: ConviformerConfig, mode: Optional[str] = None) -> int:
    """Attention-matrix memory proxy ``t_p ** 2``."""
    return patch_count(h, w, cfg, mode) ** 2


def downsample_stages(d_s: int) -> list[int]:
    """Strides of the front-end downsampling blocks: the prime factors of ``d_s``."""
    stages, n, f = [], d_s, 2
    while n > 1:
        while n % f == 0:
            stages.append(f)
            n //= f
        f += 1
    return stages


def _stage_kernel(stride: int) -> int:
    return 3 if stride == 2 else stride | 1


@lru_cache(maxsize=32)
def relative_indices(grid_h: int, grid_w: int) -> np.ndarray:
    """(T, T, 3) array of ``(dx, dy, dx^2 + dy^2)`` from token i to token j (row-major grid)."""
    ys, xs = np.divmod(np.arange(grid_h * grid_w), grid_w)
    dx = (xs[None, :] - xs[:, None]).astype(np.float64)
    dy = (ys[None, :] - ys[:, None]).astype(np.float64)
    rel = np.stack([dx, dy, dx * dx + dy * dy], axis=-1)
    rel.setflags(write=False)
    return rel


def head_offsets(n_heads: int) -> np.ndarray:
    """Integer (dx, dy) offset per head on a ceil(sqrt(H)) grid around 0."""
    k = math.ceil(math.sqrt(n_heads))
    centre = k // 2
    cells = [(c - centre, r - centre) for r in range(k) for c in range(k)]
    return np.array(cells[:n_heads], dtype=np.float64)


def local_position_weights(n_heads: int, strength: float) -> np.ndarray:
    """Convolutional init of the positional scorer: column h is ``strength * (2dx_h, 2dy_h, -1)``."""
    off = head_offsets(n_heads)
    w = np.empty((3, n_heads))
    w[0] = 2.0 * off[:, 0]
    w[1] = 2.0 * off[:, 1]
    w[2] = -1.0
    return strength * w


class Conviformer:
    """The full network with a flat parameter map."""

    def __init__(self, cfg: ConviformerConfig, input_res: int):
        self.cfg = cfg
        self.input_res = int(input_res)
        self.dtype = np.dtype(cfg.dtype)
        self.grid = patch_grid(self.input_res, self.input_res, cfg)
        self.stages = downsample_stages(self.grid.d_s) if cfg.mode == "conviformer" else []
        self.params: dict[str, Tensor] = {}
        self._build()

    # ------------------------------------------------------------ parameters

    def _param(self, name: str, shape: tuple, init: str, **kw) -> None:
        rng = stream(self.cfg.seed, "init", name)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "const":
            data = np.full(shape, kw["value"], dtype=np.float64)
        elif init == "trunc_normal":
            data = np.clip(rng.standard_normal(shape), -2.0, 2.0) * kw.get("std", 0.02)
        elif init == "he":
            data = rng.standard_normal(shape) * math.sqrt(2.0 / kw["fan_in"])
        elif init == "array":
            data = np.asarray(kw["value"], dtype=np.float64).reshape(shape)
        else:
            raise ValueError(init)
        self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True, name=name)

    def _linear(self, prefix: str, n_in: int, n_out: int, bias: bool = True, weight: str = "w",
                bias_name: str = "b") -> None:
        self._param(f"{prefix}.{weight}", (n_in, n_out), "trunc_normal")
        if bias:
            self._param(f"{prefix}.{bias_name}", (n_out,), "zeros")

    def _norm(self, prefix: str, n: int) -> None:
        self._param(f"{prefix}.g", (n,), "ones")
        self._param(f"{prefix}.b", (n,), "zeros")

    def _block(self, prefix: str, positional: bool) -> None:
        cfg, D = self.cfg, self.cfg.d_emb
        self._norm(f"{prefix}.norm1", D)
        for w in ("wq", "wk"):
            self._param(f"{prefix}.attn.{w}", (D, D), "trunc_normal")
        if positional:
            self._param(f"{prefix}.attn.wv", (D, D), "array", value=np.eye(D))
        else:
            self._param(f"{prefix}.attn.wv", (D, D), "trunc_normal")
        self._param(f"{prefix}.attn.wo", (D, D), "trunc_normal")
        self._param(f"{prefix}.attn.bo", (D,), "zeros")
        if positional:
            self._param(f"{prefix}.attn.pos.w", (3, cfg.n_heads), "array",
                        value=local_position_weights(cfg.n_heads, cfg.locality_strength))
            self._param(f"{prefix}.attn.pos.b", (cfg.n_heads,), "zeros")
            self._param(f"{prefix}.attn.gate", (cfg.n_heads,), "const", value=cfg.gate_init)
        self._norm(f"{prefix}.norm2", D)
        hidden = D * cfg.ffn_expansion
        self._linear(f"{prefix}.ffn", D, hidden, weight="w1", bias_name="b1")
        self._linear(f"{prefix}.ffn", hidden, D, weight="w2", bias_name="b2")

    def _build(self) -> None:
        cfg = self.cfg
        C, D, p = cfg.conv_channels, cfg.d_emb, cfg.patch_size
        if cfg.mode == "conviformer":
            c_in = 3
            for i, s in enumerate(self.stages):
                k = _stage_kernel(s)
                self._param(f"frontend.down.{i}.conv.w", (C, c_in, k, k), "he", fan_in=c_in * k * k)
                self._param(f"frontend.down.{i}.conv.b", (C,), "zeros")
                self._norm(f"frontend.down.{i}.norm", C)
                c_in = C
            self._param("frontend.out.conv.w", (C, c_in, 3, 3), "he", fan_in=c_in * 9)
            self._param("frontend.out.conv.b", (C,), "zeros")
            embed_in = C
        else:
            embed_in = 3
        self._param("patch_embed.proj.w", (D, embed_in, p, p), "trunc_normal")
        self._param("patch_embed.proj.b", (D,), "zeros")
        for i in range(cfg.n_gpsa_layers):
            self._block(f"gpsa.{i}", positional=True)
        self._param("cls_token", (1, D), "zeros")
        for i in range(cfg.n_sa_layers):
            self._block(f"sa.{i}", positional=False)
        self._norm("norm", D)
        e_tax, e_gen, e_fam = cfg.emb_dims
        self._linear("head.tax", D, cfg.n_taxa)
        for name, n_out in (("gen", cfg.n_genus), ("fam", cfg.n_family)):
            self._linear(f"head.{name}", D, cfg.head_hidden, weight="w1", bias_name="b1")
            self._linear(f"head.{name}", cfg.head_hidden, n_out, weight="w2", bias_name="b2")
        self._linear("head.emb_tax", D, e_tax)
        self._linear("head.emb_gen", D, e_gen)
        self._linear("head.emb_fam", D, e_fam)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> tuple[list[str], list[str]]:
        """Copy matching entries in. Returns ``(missing, unexpected)`` name lists."""
        missing = [k for k in self.params if k not in state]
        unexpected = [k for k in state if k not in self.params]
        if strict and (missing or unexpected):
            raise ConfigError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for k, arr in state.items():
            if k not in self.params:
                continue
            p = self.params[k]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)
        return missing, unexpected

    # ------------------------------------------------------------ forward pieces

    def _drop(self, x: Tensor, rng) -> Tensor:
        return ops.dropout(x, self.cfg.dropout, rng) if rng is not None else x

    def conv_frontend(self, x: Tensor) -> Tensor:
        """(B, 3, h, w) -> (B, conv_channels, h', w')."""
        P = self.params
        B, C, h, w = x.shape
        if C != 3 or h != w:
            raise DimensionError(f"front-end expects a square RGB batch, got {x.shape}")
        if h != self.input_res:
            raise DimensionError(f"model built for {self.input_res}px input, got {h}px")
        for i, s in enumerate(self.stages):
            hc = (x.shape[2] // s) * s
            if hc != x.shape[2]:
                x = x[:, :, :hc, :hc]
            k = _stage_kernel(s)
            x = ops.conv2d(x, P[f"frontend.down.{i}.conv.w"], P[f"frontend.down.{i}.conv.b"],
                           stride=s, padding=k // 2)
            x = ops.group_norm(x, P[f"frontend.down.{i}.norm.g"], P[f"frontend.down.{i}.norm.b"])
            x = ops.gelu(x)
        x = ops.conv2d(x, P["frontend.out.conv.w"], P["frontend.out.conv.b"], stride=1, padding=1)
        g = self.grid
        if x.shape[2:] != (g.h_prime, g.w_prime):
            raise DimensionError(f"front-end produced {x.shape[2:]}, expected {(g.h_prime, g.w_prime)}")
        return x

    def patch_embed(self, z: Tensor) -> Tensor:
        """(B, C, h', w') -> (B, t_p, d_emb) via non-overlapping patch projection."""
        p = self.cfg.patch_size
        if z.shape[2] < p or z.shape[3] < p:
            raise DimensionError(f"feature map {z.shape[2:]} is smaller than one {p}px patch")
        y = ops.conv2d(z, self.params["patch_embed.proj.w"], self.params["patch_embed.proj.b"], stride=p)
        B, D, gh, gw = y.shape
        return ops.transpose(ops.reshape(y, (B, D, gh * gw)), (0, 2, 1))

    def _split_heads(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        H = self.cfg.n_heads
        return ops.transpose(ops.reshape(x, (B, T, H, D // H)), (0, 2, 1, 3))

    def content_scores(self, x: Tensor, prefix: str) -> tuple[Tensor, Tensor]:
        """Content attention probabilities (B, H, T, T) and values (B, H, T, dh)."""
        P = self.params
        q = self._split_heads(ops.matmul(x, P[f"{prefix}.attn.wq"]))
        k = self._split_heads(ops.matmul(x, P[f"{prefix}.attn.wk"]))
        v = self._split_heads(ops.matmul(x, P[f"{prefix}.attn.wv"]))
        scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.cfg.head_dim))
        return ops.softmax(scores, axis=-1), v

    def positional_scores(self, prefix: str, grid: PatchGrid) -> Tensor:
        """softmax over j of ``v_pos^h . r_ij + b_h``, shape (H, T, T)."""
        P = self.params
        rel = Tensor(relative_indices(grid.grid_h, grid.grid_w).astype(self.dtype))
        s = ops.linear(rel, P[f"{prefix}.attn.pos.w"], P[f"{prefix}.attn.pos.b"])  # (T, T, H)
        return ops.softmax(ops.transpose(s, (2, 0, 1)), axis=-1)

    def _attend(self, attn: Tensor, v: Tensor, prefix: str, rng) -> Tensor:
        B, H, T, dh = v.shape
        out = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, T, H * dh))
        out = ops.linear(out, self.params[f"{prefix}.attn.wo"], self.params[f"{prefix}.attn.bo"])
        return self._drop(out, rng)

    def self_attention(self, x: Tensor, prefix: str, rng=None, return_attn: bool = False):
        attn, v = self.content_scores(x, prefix)
        out = self._attend(attn, v, prefix, rng)
        return (out, attn) if return_attn else out

    def gpsa_attention(self, x: Tensor, prefix: str, grid: Optional[PatchGrid] = None,
                       gate_override: Optional[float] = None, rng=None, return_attn: bool = False):
        """Gated positional self-attention over patch tokens (no class token)."""
        grid = grid or self.grid
        if x.shape[1] != grid.t_p:
            raise DimensionError(f"GPSA got {x.shape[1]} tokens for a {grid.grid_h}x{grid.grid_w} grid")
        content, v = self.content_scores(x, prefix)
        positional = self.positional_scores(prefix, grid)
        attn = ops.head_gate_mix(content, positional, self.params[f"{prefix}.attn.gate"], gate_override)
        out = self._attend(attn, v, prefix, rng)
        return (out, attn) if return_attn else out

    def _ffn(self, x: Tensor, prefix: str, rng) -> Tensor:
        P = self.params
        h = ops.gelu(ops.linear(x, P[f"{prefix}.ffn.w1"], P[f"{prefix}.ffn.b1"]))
        h = self._drop(h, rng)
        return self._drop(ops.linear(h, P[f"{prefix}.ffn.w2"], P[f"{prefix}.ffn.b2"]), rng)

    def block(self, x: Tensor, prefix: str, positional: bool, rng=None) -> Tensor:
        P = self.params
        y = ops.layer_norm(x, P[f"{prefix}.norm1.g"], P[f"{prefix}.norm1.b"])
        y = self.gpsa_attention(y, prefix, rng=rng) if positional else self.self_attention(y, prefix, rng=rng)
        x = ops.add(x, y)
        y = ops.layer_norm(x, P[f"{prefix}.norm2.g"], P[f"{prefix}.norm2.b"])
        return ops.add(x, self._ffn(y, prefix, rng))

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        """Image batch -> (out_feat (B, d_emb), final token states (B, 1 + t_p, d_emb)).

        Passing ``rng`` enables dropout (training mode).
        """
        cfg, P = self.cfg, self.params
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.ndim != 4:
            raise DimensionError(f"expected (B, 3, h, w) input, got {x.shape}")
        if cfg.mode == "conviformer":
            z = self.conv_frontend(x)
        else:
            if x.shape[1] != 3 or x.shape[2] != x.shape[3] or x.shape[2] != self.input_res:
                raise DimensionError(f"expected square {self.input_res}px RGB input, got {x.shape}")
            z = x
        t = self.patch_embed(z)
        for i in range(cfg.n_gpsa_layers):
            t = self.block(t, f"gpsa.{i}", positional=True, rng=rng)
        B = t.shape[0]
        cls = ops.reshape(ops.concat([P["cls_token"]] * B, axis=0), (B, 1, cfg.d_emb))
        t = ops.concat([cls, t], axis=1)
        for i in range(cfg.n_sa_layers):
            t = self.block(t, f"sa.{i}", positional=False, rng=rng)
        t = ops.layer_norm(t, P["norm.g"], P["norm.b"])
        return t[:, 0], t

    def heads(self, feat: Tensor) -> dict[str, Tensor]:
        P = self.params
        out = {"label_tax": ops.linear(feat, P["head.tax.w"], P["head.tax.b"])}
        for name in ("gen", "fam"):
            h = ops.gelu(ops.linear(feat, P[f"head.{name}.w1"], P[f"head.{name}.b1"]))
            out[f"label_{name}"] = ops.linear(h, P[f"head.{name}.w2"], P[f"head.{name}.b2"])
        for name in ("tax", "gen", "fam"):
            out[f"emb_{name}"] = ops.linear(feat, P[f"head.emb_{name}.w"], P[f"head.emb_{name}.b"])
        return out

    def __call__(self, x, rng: Optional[np.random.Generator] = None) -> dict[str, Tensor]:
        feat, _ = self.forward(x, rng=rng)
        out = self.heads(feat)
        out["feat"] = feat
        return out
