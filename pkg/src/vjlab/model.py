"""Token encoder, masked predictor, auxiliary heads, EMA, checkpoints.

The encoder is a small pre-norm transformer over tubelet-patch tokens with
fixed sinusoidal position codes. Clips and single-frame images share the
transformer trunk; images enter through their own tubelet-1 embedding.
Masked encoding physically drops non-visible tokens, so attention can only
ever mix visible content.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .masking import MaskSpec
from .synth import VideoClip
from .tensor import Tensor, concat, gather_rows, matmul, no_grad, softmax

LN_EPS = 1e-5
INIT_SCALE = 0.02
_ATTN_CLIP = (-30.0, 30.0)


@dataclass
class ModelConfig:
    patch: int = 8
    tubelet: int = 2
    dim: int = 32
    heads: int = 2
    layers: int = 2
    ff: int = 64
    pred_layers: int = 2
    pred_heads: int = 2
    dyn_hidden: int = 64
    ham_hidden: int = 32
    channels: int = 1

    def __post_init__(self):
        if self.dim % 8:
            raise ValueError(f"dim must be a multiple of 8 for position codes, got {self.dim}")
        if self.dim % self.heads or self.dim % self.pred_heads:
            raise ValueError("heads must divide dim")
        if min(self.patch, self.tubelet, self.layers + 1, self.pred_layers + 1) < 1:
            raise ValueError("bad model dims")


# -- parameters ----------------------------------------------------------


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in self.__dataclass_fields__}


def _init_block(rng: np.random.Generator, dim: int, ff: int, train: bool) -> Block:
    def w(shape):
        return Tensor(rng.standard_normal(shape) * INIT_SCALE, requires_grad=train)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=train)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=train)

    return Block(
        ln1_g=ones(dim), ln1_b=zeros(dim),
        wq=w((dim, dim)), bq=zeros(dim),
        wk=w((dim, dim)), bk=zeros(dim),
        wv=w((dim, dim)), bv=zeros(dim),
        wo=w((dim, dim)), bo=zeros(dim),
        ln2_g=ones(dim), ln2_b=zeros(dim),
        w1=w((dim, ff)), b1=zeros(ff),
        w2=w((ff, dim)), b2=zeros(dim),
    )


@dataclass
class EncoderParams:
    cfg: ModelConfig
    embed_w: Tensor
    embed_b: Tensor
    embed_img_w: Tensor
    embed_img_b: Tensor
    blocks: list[Block]
    ln_g: Tensor
    ln_b: Tensor

    def named(self, prefix: str = "enc") -> dict[str, Tensor]:
        out = {
            f"{prefix}.embed_w": self.embed_w,
            f"{prefix}.embed_b": self.embed_b,
            f"{prefix}.embed_img_w": self.embed_img_w,
            f"{prefix}.embed_img_b": self.embed_img_b,
        }
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.block{i}"))
        out[f"{prefix}.ln_g"] = self.ln_g
        out[f"{prefix}.ln_b"] = self.ln_b
        return out


@dataclass
class PredictorParams:
    cfg: ModelConfig
    mask_token: Tensor
    blocks: list[Block]
    ln_g: Tensor
    ln_b: Tensor
    out_w: Tensor
    out_b: Tensor

    def named(self, prefix: str = "pred") -> dict[str, Tensor]:
        out = {f"{prefix}.mask_token": self.mask_token}
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"{prefix}.block{i}"))
        out.update({
            f"{prefix}.ln_g": self.ln_g,
            f"{prefix}.ln_b": self.ln_b,
            f"{prefix}.out_w": self.out_w,
            f"{prefix}.out_b": self.out_b,
        })
        return out


@dataclass
class HamiltonianParams:
    """Scalar energy net: two-layer tanh MLP plus a learned diagonal
    quadratic term, so hand-set kinetic-energy forms are representable."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    quad: Tensor

    def named(self, prefix: str = "ham") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class HeadParams:
    predictor: PredictorParams
    dyn_w1: Tensor
    dyn_b1: Tensor
    dyn_w2: Tensor
    dyn_b2: Tensor
    act_w: Tensor
    act_b: Tensor
    ham: HamiltonianParams | None = None

    def named(self, prefix: str = "heads") -> dict[str, Tensor]:
        out = self.predictor.named(f"{prefix}.pred")
        for k in ["dyn_w1", "dyn_b1", "dyn_w2", "dyn_b2", "act_w", "act_b"]:
            out[f"{prefix}.{k}"] = getattr(self, k)
        if self.ham is not None:
            out.update(self.ham.named(f"{prefix}.ham"))
        return out


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, train: bool = True) -> EncoderParams:
    p_vid = cfg.tubelet * cfg.patch * cfg.patch * cfg.channels
    p_img = cfg.patch * cfg.patch * cfg.channels
    return EncoderParams(
        cfg=cfg,
        embed_w=Tensor(rng.standard_normal((p_vid, cfg.dim)) * INIT_SCALE, requires_grad=train),
        embed_b=Tensor(np.zeros(cfg.dim), requires_grad=train),
        embed_img_w=Tensor(rng.standard_normal((p_img, cfg.dim)) * INIT_SCALE, requires_grad=train),
        embed_img_b=Tensor(np.zeros(cfg.dim), requires_grad=train),
        blocks=[_init_block(rng, cfg.dim, cfg.ff, train) for _ in range(cfg.layers)],
        ln_g=Tensor(np.ones(cfg.dim), requires_grad=train),
        ln_b=Tensor(np.zeros(cfg.dim), requires_grad=train),
    )


def init_heads(cfg: ModelConfig, rng: np.random.Generator, dyn_in: int | None = None,
               act_in: int | None = None, with_ham: bool = False) -> HeadParams:
    d = cfg.dim
    dyn_in = d if dyn_in is None else dyn_in
    act_in = d if act_in is None else act_in
    pred = PredictorParams(
        cfg=cfg,
        mask_token=Tensor(rng.standard_normal(d) * INIT_SCALE, requires_grad=True),
        blocks=[_init_block(rng, d, cfg.ff, True) for _ in range(cfg.pred_layers)],
        ln_g=Tensor(np.ones(d), requires_grad=True),
        ln_b=Tensor(np.zeros(d), requires_grad=True),
        out_w=Tensor(rng.standard_normal((d, d)) * INIT_SCALE, requires_grad=True),
        out_b=Tensor(np.zeros(d), requires_grad=True),
    )
    ham = None
    if with_ham:
        ham = HamiltonianParams(
            w1=Tensor(rng.standard_normal((d, cfg.ham_hidden)) * INIT_SCALE, requires_grad=True),
            b1=Tensor(np.zeros(cfg.ham_hidden), requires_grad=True),
            w2=Tensor(rng.standard_normal(cfg.ham_hidden) * INIT_SCALE, requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
            quad=Tensor(np.zeros(d), requires_grad=True),
        )
    return HeadParams(
        predictor=pred,
        dyn_w1=Tensor(rng.standard_normal((dyn_in, cfg.dyn_hidden)) * INIT_SCALE, requires_grad=True),
        dyn_b1=Tensor(np.zeros(cfg.dyn_hidden), requires_grad=True),
        dyn_w2=Tensor(rng.standard_normal((cfg.dyn_hidden, d)) * INIT_SCALE, requires_grad=True),
        dyn_b2=Tensor(np.zeros(d), requires_grad=True),
        act_w=Tensor(rng.standard_normal((act_in, cfg.channels)) * INIT_SCALE, requires_grad=True),
        act_b=Tensor(np.zeros(cfg.channels), requires_grad=True),
        ham=ham,
    )


def clone_frozen(params: EncoderParams) -> EncoderParams:
    """Value copy with gradients off; the teacher starts equal to the student."""
    src = params.named("x")
    cfg = params.cfg
    frozen = init_encoder(cfg, np.random.default_rng(0), train=False)
    dst = frozen.named("x")
    for k, t in dst.items():
        t.data = src[k].data.copy()
        t.requires_grad = False
    return frozen


# -- position codes and patch extraction --------------------------------


def _sincos(n_pos: int, dim: int) -> np.ndarray:
    half = dim // 2
    pos = np.arange(n_pos)[:, None]
    freq = 1.0 / (10_000.0 ** (np.arange(half) / half))
    ang = pos * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


_pos_cache: dict[tuple[int, int, int, int], np.ndarray] = {}


def pos_table(t_blocks: int, gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed [T'*gh*gw, dim] sinusoidal codes: half time, quarter row, quarter col."""
    key = (t_blocks, gh, gw, dim)
    if key not in _pos_cache:
        dt, dr = dim // 2, dim // 4
        dc = dim - dt - dr
        time = _sincos(t_blocks, dt)
        row = _sincos(gh, dr)
        col = _sincos(gw, dc)
        out = np.zeros((t_blocks, gh, gw, dim))
        out[..., :dt] = time[:, None, None, :]
        out[..., dt:dt + dr] = row[None, :, None, :]
        out[..., dt + dr:] = col[None, None, :, :]
        _pos_cache[key] = out.reshape(-1, dim)
    return _pos_cache[key]


def extract_patches(pixels: np.ndarray, patch: int, tubelet: int) -> np.ndarray:
    """[T, H, W, C] -> [T', gh, gw, tubelet*patch*patch*C], scan order."""
    t, h, w, c = pixels.shape
    if t % tubelet or h % patch or w % patch:
        raise ValueError(
            f"clip {pixels.shape} not divisible by tubelet {tubelet} / patch {patch}"
        )
    tp, gh, gw = t // tubelet, h // patch, w // patch
    x = pixels.reshape(tp, tubelet, gh, patch, gw, patch, c)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)  # [T', gh, gw, tubelet, patch, patch, C]
    return np.ascontiguousarray(x.reshape(tp, gh, gw, -1))


def token_grid(params: EncoderParams, clip: VideoClip) -> tuple[int, int, int]:
    cfg = params.cfg
    t, h, w, _ = clip.shape
    tubelet = 1 if t == 1 else cfg.tubelet
    return t // tubelet, h // cfg.patch, w // cfg.patch


# -- forward passes ------------------------------------------------------


def _row_bias(b: Tensor, n: int) -> Tensor:
    return b.reshape(1, b.shape[0]).broadcast_to((n, b.shape[0]))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + _row_bias(b, x.shape[0])


def layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    m = x.mean(axis=1, keepdims=True).broadcast_to(x.shape)
    d = x - m
    v = (d * d).mean(axis=1, keepdims=True)
    y = d / (v + LN_EPS).sqrt().broadcast_to(x.shape)
    return y * _row_bias(g, x.shape[0]) + _row_bias(b, x.shape[0])


def slice_cols(x: Tensor, a: int, b: int) -> Tensor:
    return gather_rows(x.transpose(), range(a, b)).transpose()


def _attention(blk: Block, x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    dh = d // heads
    q = linear(x, blk.wq, blk.bq)
    k = linear(x, blk.wk, blk.bk)
    v = linear(x, blk.wv, blk.bv)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        scores = matmul(qh, kh.transpose()) * (1.0 / math.sqrt(dh))
        outs.append(matmul(softmax(scores, clip=_ATTN_CLIP, axis=-1), vh))
    return linear(concat(outs, axis=1), blk.wo, blk.bo)


def _trunk(blocks: list[Block], heads: int, x: Tensor) -> Tensor:
    for blk in blocks:
        x = x + _attention(blk, layer_norm(x, blk.ln1_g, blk.ln1_b), heads)
        x = x + linear(linear(layer_norm(x, blk.ln2_g, blk.ln2_b), blk.w1, blk.b1).gelu(),
                       blk.w2, blk.b2)
    return x


def embed_clip(params: EncoderParams, clip: VideoClip) -> Tensor:
    """All tokens of a clip embedded to [N, dim] with position codes added."""
    cfg = params.cfg
    t = clip.shape[0]
    if t == 1:
        patches = extract_patches(clip.pixels, cfg.patch, 1)
        w, b = params.embed_img_w, params.embed_img_b
    else:
        patches = extract_patches(clip.pixels, cfg.patch, cfg.tubelet)
        w, b = params.embed_w, params.embed_b
    tp, gh, gw, _ = patches.shape
    flat = Tensor(patches.reshape(tp * gh * gw, -1))
    x = linear(flat, w, b)
    return x + Tensor(pos_table(tp, gh, gw, cfg.dim))


def encode_tokens(params: EncoderParams, x: Tensor) -> Tensor:
    x = _trunk(params.blocks, params.cfg.heads, x)
    return layer_norm(x, params.ln_g, params.ln_b)


def encode(params: EncoderParams, clip: VideoClip,
           visible: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Latents for the visible tokens only (all tokens when visible is None).

    Returns (latents [K, dim], flat token indices in scan order).
    """
    x = embed_clip(params, clip)
    n = x.shape[0]
    if visible is None:
        idx = np.arange(n)
    else:
        flat = np.asarray(visible, dtype=bool).reshape(-1)
        if flat.shape[0] != n:
            raise ValueError(f"visibility over {flat.shape[0]} tokens, clip has {n}")
        if not flat.any():
            raise ValueError("no visible tokens to encode")
        idx = np.flatnonzero(flat)
        x = gather_rows(x, idx)
    return encode_tokens(params, x), idx


@dataclass
class LatentGrid:
    """Encoder output on the full token grid, kept as [T', n_space, dim]."""

    values: Tensor
    grid: tuple[int, int, int]

    def __post_init__(self):
        tp, gh, gw = self.grid
        if self.values.shape != (tp, gh * gw, self.values.shape[2]):
            raise ValueError(
                f"latents {self.values.shape} do not match grid {self.grid}"
            )

    @property
    def t_blocks(self) -> int:
        return self.grid[0]

    @property
    def n_space(self) -> int:
        return self.grid[1] * self.grid[2]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def flat(self) -> Tensor:
        return self.values.reshape(self.t_blocks * self.n_space, self.dim)


def full_grid(params: EncoderParams, clip: VideoClip) -> LatentGrid:
    latents, _ = encode(params, clip)
    tp, gh, gw = token_grid(params, clip)
    return LatentGrid(values=latents.reshape(tp, gh * gw, params.cfg.dim), grid=(tp, gh, gw))


def predict_masked(pred: PredictorParams, z_vis: Tensor, mask: MaskSpec) -> Tensor:
    """Predictor outputs, one row per target token, in scan order of targets."""
    tp, gh, gw = mask.grid
    d = pred.cfg.dim
    pos = pos_table(tp, gh, gw, d)
    targets = mask.target_indices
    k = len(targets)
    if k == 0:
        raise ValueError("mask has no targets to predict")
    queries = pred.mask_token.reshape(1, d).broadcast_to((k, d)) + Tensor(pos[targets])
    seq = concat([z_vis, queries], axis=0)
    seq = _trunk(pred.blocks, pred.cfg.pred_heads, seq)
    seq = layer_norm(seq, pred.ln_g, pred.ln_b)
    out = linear(seq, pred.out_w, pred.out_b)
    return gather_rows(out, range(z_vis.shape[0], z_vis.shape[0] + k))


def teacher_targets(teacher: EncoderParams, clip: VideoClip) -> np.ndarray:
    """Full-clip teacher latents as plain values, [N, dim]."""
    with no_grad():
        latents, _ = encode(teacher, clip)
    return latents.data


# -- heads ---------------------------------------------------------------


def split_channels(x: Tensor, app_ratio: float) -> tuple[Tensor, Tensor]:
    """Split the channel axis into appearance/dynamics halves (last axis)."""
    d = x.shape[-1]
    d_app = app_ratio * d
    if abs(d_app - round(d_app)) > 1e-9:
        raise ValueError(f"app_ratio {app_ratio} does not split {d} channels integrally")
    d_app = int(round(d_app))
    if not 0 < d_app < d:
        raise ValueError(f"appearance split {d_app} of {d} leaves an empty side")
    flat = x if x.ndim == 2 else x.reshape(-1, d)
    app = slice_cols(flat, 0, d_app)
    dyn = slice_cols(flat, d_app, d)
    if x.ndim == 2:
        return app, dyn
    lead = x.shape[:-1]
    return app.reshape(*lead, d_app), dyn.reshape(*lead, d - d_app)


def dyn_head(heads: HeadParams, x: Tensor) -> Tensor:
    """Two-layer GELU MLP mapping per-token latents to a full-width delta."""
    return linear(linear(x, heads.dyn_w1, heads.dyn_b1).gelu(), heads.dyn_w2, heads.dyn_b2)


def action_head(heads: HeadParams, x: Tensor) -> Tensor:
    """Per-token prediction of the patch-mean pixel change, [N, channels]."""
    return linear(x, heads.act_w, heads.act_b)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float) -> None:
    """theta_bar <- momentum * theta_bar + (1 - momentum) * theta, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    if teacher.keys() != student.keys():
        raise ValueError("teacher/student parameter sets differ")
    for k in teacher:
        teacher[k].data = momentum * teacher[k].data + (1.0 - momentum) * student[k].data


def quantize_params(named: dict[str, Tensor]) -> None:
    """Round values to float32 grid; keeps the float32 checkpoint lossless."""
    for t in named.values():
        t.data = t.data.astype(np.float32).astype(np.float64)


# -- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"JPCK"
CKPT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, records: dict[str, np.ndarray]) -> None:
    """Named float32 arrays, little-endian, written atomically (tmp+rename)."""
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        for name in sorted(records):
            arr = np.asarray(records[name])
            name_b = name.encode("utf-8")
            f.write(struct.pack("<I", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError("not a checkpoint file: bad magic")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            payload = f.read(4 * count)
            if len(payload) < 4 * count:
                raise ValueError(f"truncated checkpoint record '{name}'")
            records[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    return records


def load_into(named: dict[str, Tensor], records: dict[str, np.ndarray], prefix: str = "") -> None:
    for k, t in named.items():
        key = prefix + k
        if key not in records:
            raise ValueError(f"checkpoint missing record '{key}'")
        if records[key].shape != t.data.shape:
            raise ValueError(
                f"checkpoint record '{key}' shape {records[key].shape} vs {t.data.shape}"
            )
        t.data = records[key].copy()
