"""Rotation-equivariant denoising U-Net.

Data flow for ``depth = D``::

    concat(I_A, I_B, F_t) -> lift conv -> GN -> SiLU
    -> D x [ResBlock, ResBlock, maxpool]          (inputs to the pool kept as skips)
    -> ResBlock, ResBlock                         (mid)
    -> D x [bilinear up, concat skip, ResBlock, ResBlock]

``skip_mode="post_pool"`` keeps the pooled outputs as skips instead and runs
each UpBlock as ``[concat skip, ResBlock, ResBlock, bilinear up]``.  No
full-resolution feature then reaches the output, which caps how much of a
per-pixel noise map the network can predict.
    -> GN -> SiLU -> group conv to 1 channel -> mean over orientations

With ``dc_anchor`` on, :class:`Denoiser` and training replace the spatial mean
of that output by its closed form (see :func:`rediffuse.diffusion.dc_anchor`).

Channel counts in :class:`UNetConfig` are *unrolled* (orientation x field
channel), matching how a plain convolution of the same width would be sized.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import dc_anchor, make_schedule
from .eqops import GN_EPS


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    m: int = 4
    depth: int = 2
    gn_groups: int = 8
    kernel_size: int = 3
    time_dim: int = 32
    T: int = 100
    max_mult: int = 4
    in_channels: int = 3
    equivariant: bool = True
    head_order: str = "conv_first"
    skip_mode: str = "pre_pool"
    # replace the spatial mean of the prediction by its closed form (see diffusion.dc_anchor)
    dc_anchor: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.base_channels % self.m:
            raise ValueError(f"base_channels {self.base_channels} not divisible by m={self.m}")
        if self.base_channels % self.gn_groups:
            raise ValueError("base_channels must be divisible by gn_groups")
        if self.head_order not in ("conv_first", "norm_first"):
            raise ValueError(f"unknown head_order {self.head_order!r}")
        if self.skip_mode not in ("pre_pool", "post_pool"):
            raise ValueError(f"unknown skip_mode {self.skip_mode!r}")
        for c in self.level_fields() + [f for _, f in self.up_specs()]:
            if c % self.gn_groups:
                raise ValueError(f"{c} field channels not divisible by gn_groups={self.gn_groups}; "
                                 "each norm group must hold whole orientation orbits")

    @property
    def fields(self) -> int:
        return self.base_channels // self.m

    def level_fields(self) -> list[int]:
        return [self.fields * min(2 ** i, self.max_mult) for i in range(self.depth)]

    def up_specs(self) -> list[tuple[int, int]]:
        """(input fields after skip concat, output fields) for each UpBlock, deepest first."""
        lv = self.level_fields()
        cur = lv[-1]
        specs = []
        for i in reversed(range(self.depth)):
            out = lv[i - 1] if i > 0 else self.fields
            specs.append((cur + lv[i], out))
            cur = out
        return specs

    def to_dict(self) -> dict:
        return asdict(self)


def check_input_size(h: int, w: int, depth: int):
    q = 2 ** depth
    if h % q or w % q:
        need_h, need_w = -(-h // q) * q, -(-w // q) * q
        raise ValueError(f"input {h}x{w} not divisible by 2^depth={q}; pad to {need_h}x{need_w} "
                         f"or crop to {h // q * q}x{w // q * q}")


# ---------------------------------------------------------------------------
# parameters

@dataclass
class ConvSpec:
    name: str
    kind: str
    cin: int
    cout: int
    p: int

    def shape(self, m, shared):
        core = (self.cout, self.cin) + ((m,) if self.kind == "group" else ()) + (self.p, self.p)
        return core if shared else (m,) + core

    def regular_count(self, m):
        cin = self.cin * (m if self.kind == "group" else 1)
        return m * self.cout * cin * self.p * self.p


@dataclass
class Layout:
    convs: list[ConvSpec] = field(default_factory=list)
    norms: dict[str, int] = field(default_factory=dict)
    dense: dict[str, tuple[int, int]] = field(default_factory=dict)


def _resblock_layout(lay, prefix, cin, cout, cfg):
    p = cfg.kernel_size
    lay.norms[f"{prefix}.gn1"] = cin
    lay.convs.append(ConvSpec(f"{prefix}.conv1", "group", cin, cout, p))
    lay.dense[f"{prefix}.temb"] = (cfg.time_dim, cout)
    lay.norms[f"{prefix}.gn2"] = cout
    lay.convs.append(ConvSpec(f"{prefix}.conv2", "group", cout, cout, p))
    if cin != cout:
        lay.convs.append(ConvSpec(f"{prefix}.skip", "group", cin, cout, 1))


def layout(cfg: UNetConfig) -> Layout:
    lay = Layout()
    c0 = cfg.fields
    lay.dense["time.fc1"] = (cfg.time_dim, cfg.time_dim)
    lay.dense["time.fc2"] = (cfg.time_dim, cfg.time_dim)
    if cfg.head_order == "norm_first":
        lay.norms["head.gn"] = cfg.in_channels
    else:
        lay.norms["head.gn"] = c0
    lay.convs.append(ConvSpec("head.conv", "lifting", cfg.in_channels, c0, cfg.kernel_size))
    cur = c0
    for i, c in enumerate(cfg.level_fields()):
        _resblock_layout(lay, f"down{i}.res0", cur, c, cfg)
        _resblock_layout(lay, f"down{i}.res1", c, c, cfg)
        cur = c
    _resblock_layout(lay, "mid.res0", cur, cur, cfg)
    _resblock_layout(lay, "mid.res1", cur, cur, cfg)
    for i, (cin, cout) in enumerate(cfg.up_specs()):
        _resblock_layout(lay, f"up{i}.res0", cin, cout, cfg)
        _resblock_layout(lay, f"up{i}.res1", cout, cout, cfg)
    lay.norms["out.gn"] = cfg.fields
    lay.convs.append(ConvSpec("out.conv", "group", cfg.fields, 1, cfg.kernel_size))
    return lay


def init_params(cfg: UNetConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-style normal initialization; norm scales 1, shifts and biases 0."""
    params = {}
    for c in layout(cfg).convs:
        fan_in = c.cin * c.p * c.p * (cfg.m if c.kind == "group" else 1)
        std = math.sqrt(2.0 / fan_in)
        params[c.name] = (rng.standard_normal(c.shape(cfg.m, cfg.equivariant)) * std).astype(dtype)
    lay = layout(cfg)
    for name, ch in lay.norms.items():
        params[f"{name}.gamma"] = np.ones(ch, dtype=dtype)
        params[f"{name}.beta"] = np.zeros(ch, dtype=dtype)
    for name, (a, b) in lay.dense.items():
        params[f"{name}.w"] = (rng.standard_normal((a, b)) * math.sqrt(1.0 / a)).astype(dtype)
        params[f"{name}.b"] = np.zeros(b, dtype=dtype)
    return params


def conv_parameter_table(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    """(layer, learnable parameters, plain-conv parameters) per convolution."""
    rows = []
    for c in layout(cfg).convs:
        count = int(np.prod(c.shape(cfg.m, cfg.equivariant)))
        rows.append((c.name, count, c.regular_count(cfg.m)))
    return rows


def count_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# forward

def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """``[sin(t w_i), cos(t w_i)]`` with ``w_i`` log-spaced from 1 down to 1/10000."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def time_embedding(tape: ad.Tape, P, t, cfg: UNetConfig, dtype=np.float32) -> ad.Node:
    e = tape.const(sinusoidal_embedding(t, cfg.time_dim).astype(dtype))
    h = ad.silu(ad.dense(e, P["time.fc1.w"], P["time.fc1.b"]))
    return ad.dense(h, P["time.fc2.w"], P["time.fc2.b"])


def _gn(f, P, name, cfg):
    return ad.group_norm(f, P[f"{name}.gamma"], P[f"{name}.beta"], cfg.gn_groups, GN_EPS)


def _conv(f, P, name, cfg):
    return ad.group_conv(f, P[name], cfg.m, cfg.equivariant)


def resblock_forward(f: ad.Node, t_act: ad.Node, P, prefix: str, cfg: UNetConfig) -> ad.Node:
    """``shortcut(f) + stage2(stage1(f) + time_bias)``, each stage GN -> SiLU -> group conv.

    ``t_act`` is the SiLU-activated time embedding ``(N, time_dim)``; its
    projection is broadcast over space and orientation.
    """
    h = _conv(ad.silu(_gn(f, P, f"{prefix}.gn1", cfg)), P, f"{prefix}.conv1", cfg)
    bias = ad.dense(t_act, P[f"{prefix}.temb.w"], P[f"{prefix}.temb.b"])
    n, c = bias.value.shape
    h = ad.add(h, ad.reshape(bias, (n, 1, 1, 1, c)))
    h = _conv(ad.silu(_gn(h, P, f"{prefix}.gn2", cfg)), P, f"{prefix}.conv2", cfg)
    skip = f if f"{prefix}.skip" not in P else _conv(f, P, f"{prefix}.skip", cfg)
    return ad.add(skip, h)


def unet_forward(tape: ad.Tape, P: dict[str, ad.Node], I_A, I_B, F_t, t, cfg: UNetConfig) -> ad.Node:
    """Noise prediction ``(N, H, W, 1)`` for batched planar inputs ``(N, H, W, 1)``."""
    I_A, I_B, F_t = (np.asarray(a) for a in (I_A, I_B, F_t))
    if not (I_A.shape == I_B.shape == F_t.shape):
        raise ValueError(f"input shapes differ: {I_A.shape}, {I_B.shape}, {F_t.shape}")
    check_input_size(F_t.shape[1], F_t.shape[2], cfg.depth)
    dtype = P["head.conv"].value.dtype
    x = tape.const(np.concatenate([I_A, I_B, F_t], axis=-1).astype(dtype, copy=False))
    if x.value.shape[-1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} stacked input channels, got {x.value.shape[-1]}")
    t_act = ad.silu(time_embedding(tape, P, t, cfg, dtype))

    if cfg.head_order == "norm_first":
        n, h, w, c = x.value.shape
        x5 = ad.reshape(x, (n, h, w, 1, c))
        x5 = ad.silu(ad.group_norm(x5, P["head.gn.gamma"], P["head.gn.beta"], 1, GN_EPS))
        f = ad.lift_conv(ad.reshape(x5, (n, h, w, c)), P["head.conv"], cfg.m, cfg.equivariant)
    else:
        f = ad.lift_conv(x, P["head.conv"], cfg.m, cfg.equivariant)
        f = ad.silu(_gn(f, P, "head.gn", cfg))

    pre = cfg.skip_mode == "pre_pool"
    skips = []
    for i in range(cfg.depth):
        f = resblock_forward(f, t_act, P, f"down{i}.res0", cfg)
        f = resblock_forward(f, t_act, P, f"down{i}.res1", cfg)
        if pre:
            skips.append(f)
        f = ad.maxpool(f)
        if not pre:
            skips.append(f)
    f = resblock_forward(f, t_act, P, "mid.res0", cfg)
    f = resblock_forward(f, t_act, P, "mid.res1", cfg)
    for i in range(cfg.depth):
        if pre:
            f = ad.upsample(f)
        f = ad.concat([f, skips.pop()], axis=-1)
        f = resblock_forward(f, t_act, P, f"up{i}.res0", cfg)
        f = resblock_forward(f, t_act, P, f"up{i}.res1", cfg)
        if not pre:
            f = ad.upsample(f)
    f = _conv(ad.silu(_gn(f, P, "out.gn", cfg)), P, "out.conv", cfg)
    return ad.group_pool(f)


class Denoiser:
    """Frozen-parameter noise predictor usable as a plain ``model(I_A, I_B, F_t, t)`` callable."""

    def __init__(self, params: dict[str, np.ndarray], cfg: UNetConfig, sched=None):
        self.params = {k: v.copy() for k, v in params.items()}
        self.cfg = cfg
        self._predict = self._raw
        if cfg.dc_anchor:
            self._predict = dc_anchor(self._raw, sched or make_schedule(cfg.T))

    def _raw(self, I_A, I_B, F_t, t):
        tape = ad.Tape(record=False)
        P = tape.params(self.params)
        return unet_forward(tape, P, I_A, I_B, F_t, t, self.cfg).value

    def __call__(self, I_A, I_B, F_t, t):
        t = np.broadcast_to(np.asarray(t), (np.shape(F_t)[0],))
        return self._predict(I_A, I_B, F_t, t)
