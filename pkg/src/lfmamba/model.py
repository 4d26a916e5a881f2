"""Network assembly: sub-blocks, stacked blocks, full model, checkpointing,
and the analytic parameter/FLOP auditor.

Pipeline: per-view 3x3 stem -> learnable angular embedding (one C-vector
per view, broadcast over space) -> K blocks, each a chain of three scan
sub-blocks (per-view, view-sequential, macro-pixel-sequential) -> 3x3
aggregation over the concatenated block outputs -> refinement convs ->
1x1 expansion + pixel shuffle + 3x3 to one channel -> added to the bicubic
upsample of the input (residual learning on the luma plane).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .autograd import Parameter, Tensor, no_grad
from .imageops import bicubic_resize
from .layouts import Layout, LightFieldTensor
from .nn import DTYPE, Conv2d, DepthwiseConv3x3, LayerNorm, Linear, Module
from .scanpaths import Family, paths_for
from .ssm import Ss2d


@dataclass
class ModelConfig:
    c: int = 64          # feature width
    k: int = 4           # number of stacked blocks
    d_state: int = 16    # SSM state size per channel
    ssm_ratio: float = 1.0
    scale: int = 2       # super-resolution factor
    u: int = 5           # angular rows
    v: int = 5           # angular cols
    ffn_expand: int = 4
    dt_rank: int = 0     # 0 -> ceil(c / 16)

    def __post_init__(self):
        if min(self.c, self.k, self.d_state, self.u, self.v, self.ffn_expand) < 1:
            raise ValueError("config extents must be positive")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.ssm_ratio <= 0:
            raise ValueError("ssm_ratio must be positive")

    @property
    def dt_rank_eff(self) -> int:
        return self.dt_rank if self.dt_rank > 0 else math.ceil(self.c / 16)

    @property
    def d_inner(self) -> int:
        return int(round(self.ssm_ratio * self.c))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _tokens_from_views(x: Tensor, uv: int, c: int, h: int, w: int) -> Tensor:
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (uv, h * w, c))


def _views_from_tokens(t: Tensor, uv: int, c: int, h: int, w: int) -> Tensor:
    return ops.transpose(ops.reshape(t, (uv, h, w, c)), (0, 3, 1, 2))


class SubBlock(Module):
    """One scan sub-block: LN -> SS2D -> residual, then LN -> FFN with a
    learnable residual gate.

    The per-view family keeps a depthwise conv inside the scan unit; the
    view-sequential and macro-pixel families drop it (convolving mosaics
    smears values across tile seams).  The FFN's depthwise conv always runs
    per view, after conversion back to the view stack.
    """

    def __init__(self, kind: Family, cfg: ModelConfig, rng):
        self.kind = kind
        c = cfg.c
        self.ln1 = LayerNorm(c)
        self.ss2d = Ss2d(
            channels=c,
            d_state=cfg.d_state,
            dt_rank=cfg.dt_rank_eff,
            ssm_ratio=cfg.ssm_ratio,
            with_dwconv=(kind is Family.INTRA),
            rng=rng,
        )
        self.ln2 = LayerNorm(c)
        f = cfg.ffn_expand * c
        self.ffn_expand = Linear(c, f, rng)
        self.ffn_dw = DepthwiseConv3x3(f, rng)
        self.ffn_proj = Linear(f, c, rng)
        self.lam = Parameter(np.ones((), dtype=DTYPE))

    def __call__(self, x: Tensor, u: int, v: int, h: int, w: int) -> Tensor:
        uv = u * v
        c = x.data.shape[1]
        paths = paths_for(self.kind, u, v, h, w)
        tokens = _tokens_from_views(x, uv, c, h, w)
        if self.kind is Family.INTRA:
            seq_tokens = tokens  # (UV, H*W, C): each view is its own sequence
        else:
            # composite scans address the whole field; the paths encode the
            # mosaic orders in view-stack token ids, so no data move is needed
            seq_tokens = ops.reshape(tokens, (1, uv * h * w, c))
        z = ops.add(self.ss2d(self.ln1(seq_tokens), paths, (h, w)), seq_tokens)
        z_tok = ops.reshape(z, (uv, h * w, c))

        t = self.ffn_expand(self.ln2(z_tok))
        f = t.data.shape[-1]
        t = _views_from_tokens(t, uv, f, h, w)
        t = ops.gelu(self.ffn_dw(t))
        t = self.ffn_proj(_tokens_from_views(t, uv, f, h, w))
        out = ops.add(t, ops.mul(self.lam, z_tok))
        return _views_from_tokens(out, uv, c, h, w)


class LfVssmBlock(Module):
    """Progressive feature extraction: per-view, then across views, then
    across the angular samples of each spatial site."""

    def __init__(self, cfg: ModelConfig, rng):
        self.intra = SubBlock(Family.INTRA, cfg, rng)
        self.inter = SubBlock(Family.INTER, cfg, rng)
        self.macpi = SubBlock(Family.MACPI, cfg, rng)

    def __call__(self, x: Tensor, u: int, v: int, h: int, w: int) -> Tensor:
        x = self.intra(x, u, v, h, w)
        x = self.inter(x, u, v, h, w)
        x = self.macpi(x, u, v, h, w)
        return x


class Upsampler(Module):
    """Pixel-shuffle residual upsampling head: three 3x3 refinement convs,
    1x1 expansion to C*scale^2, shuffle, 3x3 down to one channel."""

    def __init__(self, cfg: ModelConfig, rng):
        c = cfg.c
        self.refine = [Conv2d(c, c, 3, rng) for _ in range(3)]
        self.expand = Conv2d(c, c * cfg.scale * cfg.scale, 1, rng)
        self.final = Conv2d(c, 1, 3, rng)
        self.scale = cfg.scale

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.refine:
            x = ops.gelu(conv(x))
        x = self.expand(x)
        x = ops.pixel_shuffle(x, self.scale)
        return self.final(x)


class L2FMamba(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None):
        self.cfg = cfg
        c, k = cfg.c, cfg.k
        self.spa_conv = Conv2d(1, c, 3, rng)
        if rng is None:
            p_ang = np.zeros((cfg.u * cfg.v, c, 1, 1), dtype=DTYPE)
        else:
            p_ang = rng.normal(0.0, 0.02, size=(cfg.u * cfg.v, c, 1, 1)).astype(DTYPE)
        self.p_ang = Parameter(p_ang)
        self.blocks = [LfVssmBlock(cfg, rng) for _ in range(k)]
        self.agg_conv = Conv2d(k * c, c, 3, rng)
        self.upsampler = Upsampler(cfg, rng)

    def forward_tensor(self, x, h: int, w: int) -> Tensor:
        """Differentiable path: x is (U*V, 1, H, W) luma in [0, 1]."""
        cfg = self.cfg
        u, v = cfg.u, cfg.v
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))
        feat = ops.add(self.spa_conv(xt), self.p_ang)
        outs = []
        cur = feat
        for block in self.blocks:
            cur = block(cur, u, v, h, w)
            outs.append(cur)
        agg = self.agg_conv(ops.concat(outs, axis=1))
        residual = self.upsampler(agg)
        base = bicubic_resize(np.asarray(xt.data, dtype=DTYPE), cfg.scale, antialias=True)
        return ops.add(residual, base)

    def forward(self, lf_lr: LightFieldTensor) -> LightFieldTensor:
        """Super-resolve a luma light field; pure function of the inputs."""
        cfg = self.cfg
        if lf_lr.layout is not Layout.SAI_STACK:
            lf_lr = lf_lr.convert(Layout.SAI_STACK)
        if lf_lr.c != 1:
            raise ValueError(f"expected a single luma channel, got {lf_lr.c}")
        if (lf_lr.u, lf_lr.v) != (cfg.u, cfg.v):
            raise ValueError(
                f"angular extents {(lf_lr.u, lf_lr.v)} do not match model {(cfg.u, cfg.v)}"
            )
        if not np.isfinite(lf_lr.data).all():
            raise ValueError("non-finite input")
        with no_grad():
            y = self.forward_tensor(lf_lr.data.astype(DTYPE), lf_lr.h, lf_lr.w)
        a = cfg.scale
        return LightFieldTensor(
            lf_lr.u, lf_lr.v, 1, lf_lr.h * a, lf_lr.w * a, Layout.SAI_STACK, y.data
        )


def init_model(cfg: ModelConfig, seed: int) -> L2FMamba:
    """Deterministic construction: the same seed gives bit-identical tables."""
    return L2FMamba(cfg, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# auditor


def count_params(model: L2FMamba) -> tuple[int, dict[str, int]]:
    """Exact learnable-scalar census, keyed by dotted parameter path."""
    breakdown = {name: int(p.data.size) for name, p in model.named_parameters()}
    return sum(breakdown.values()), breakdown


def group_params(breakdown: dict[str, int], depth: int = 2) -> dict[str, int]:
    grouped: dict[str, int] = {}
    for name, n in breakdown.items():
        key = ".".join(name.split(".")[:depth])
        grouped[key] = grouped.get(key, 0) + n
    return grouped


# FLOP convention, calibrated against the published efficiency tables:
# the auditor is a multiply-accumulate census with 1 MAC = 1 FLOP (the
# 2-FLOPs-per-MAC reading overshoots the tables by ~2x).  Convs/linears
# cost out_elems * fan_in (+ out_elems for a bias), the selective scan is
# charged the standard 9*L*D*N per direction (which covers discretization,
# recurrence and readout), and the residual bicubic costs its 4-tap
# separable passes.  Normalizations, activations, gating and residual
# adds are not multiply-accumulates and are excluded; data movement
# (permutation, shuffle, layout) is free.
FLOP_CONVENTION = "mac=1; scan=9*L*D*N per direction; norm/activation/add excluded"
_BICUBIC_COST = 8  # two separable 4-tap passes


def count_flops(cfg: ModelConfig, h: int = 32, w: int = 32) -> tuple[int, dict[str, int]]:
    """Analytic multiply-accumulate census of one forward pass on a
    (u x v) x h x w luma input, under the calibrated convention."""
    c, k, n = cfg.c, cfg.k, cfg.d_state
    d = cfg.d_inner
    r = cfg.dt_rank_eff
    f = cfg.ffn_expand * c
    t = cfg.u * cfg.v * h * w  # tokens
    hr = t * cfg.scale * cfg.scale

    def conv_cost(elems_out, cin, ksize):
        return elems_out * cin * ksize * ksize + elems_out

    sub = 0
    sub += t * c * 2 * d + t * 2 * d             # in_proj
    per_dir = t * d * (r + 2 * n)                # x -> (dt latent, B, C)
    per_dir += t * r * d + t * d                 # dt projection + bias
    per_dir += 9 * t * d * n                     # the scan itself
    sub += 4 * per_dir
    sub += t * d * c + t * c                     # out_proj
    sub += t * c * f + t * f                     # ffn expand
    sub += 9 * t * f + t * f                     # ffn depthwise
    sub += t * f * c + t * c                     # ffn project

    intra_extra = 9 * t * d + t * d              # internal depthwise conv
    block = 3 * sub + intra_extra

    breakdown = {
        "spa_conv": conv_cost(t * c, 1, 3),
        "blocks": k * block,
        "agg_conv": conv_cost(t * c, k * c, 3),
        "upsampler.refine": 3 * conv_cost(t * c, c, 3),
        "upsampler.expand": conv_cost(t * c * cfg.scale**2, c, 1),
        "upsampler.final": conv_cost(hr, c, 3),
        "bicubic_residual": _BICUBIC_COST * hr,
    }
    return sum(breakdown.values()), breakdown


# ---------------------------------------------------------------------------
# checkpoint container
#
# magic "L2FM" | u16 version | u32 header length | JSON header
# (config + parameter index) | raw little-endian float32 blobs in index
# order | 32-byte sha256 of everything preceding.

CKPT_MAGIC = b"L2FM"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ExtraParameterError(CheckpointError):
    pass


def save_checkpoint(model: L2FMamba, path) -> None:
    entries = []
    blobs = []
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "dtype": "float32", "shape": list(p.data.shape), "nbytes": len(raw)})
        blobs.append(raw)
    header = json.dumps(
        {"format_version": CKPT_VERSION, "config": asdict(model.cfg), "params": entries},
        sort_keys=True,
    ).encode()
    body = CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)) + header + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path, expected_cfg: ModelConfig | None = None) -> L2FMamba:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 42 or raw[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointDigestError("content digest mismatch (truncated or corrupted file)")
    version, hlen = struct.unpack("<HI", body[4:10])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    header = json.loads(body[10 : 10 + hlen].decode())
    cfg = ModelConfig(**header["config"])
    if expected_cfg is not None:
        for fname, want in asdict(expected_cfg).items():
            have = getattr(cfg, fname)
            if have != want:
                raise ConfigMismatchError(f"config field {fname!r}: checkpoint has {have}, expected {want}")
    model = L2FMamba(cfg, rng=None)
    table = {}
    offset = 10 + hlen
    for entry in header["params"]:
        nbytes = entry["nbytes"]
        table[entry["name"]] = (entry, body[offset : offset + nbytes])
        offset += nbytes
    model_names = [name for name, _ in model.named_parameters()]
    for name, p in model.named_parameters():
        if name not in table:
            raise MissingParameterError(f"checkpoint lacks parameter {name!r}")
        entry, blob = table.pop(name)
        arr = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).astype(DTYPE)
        if arr.shape != p.data.shape:
            raise CheckpointFormatError(
                f"parameter {name!r} shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data = arr.copy()
    if table:
        raise ExtraParameterError(f"checkpoint has unknown parameters: {sorted(table)}")
    del model_names
    return model
