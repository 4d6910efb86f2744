"""Pretraining loop: LR schedule, AdamW, EMA teacher, per-step RNG streams.

Reproducibility contract: every random draw comes from a fresh
``default_rng([seed, stream, step, ...])`` so no generator state has to live
in checkpoints, and all persistent state (parameters, Adam moments, teacher)
is rounded to the float32 grid after each update so the float32 checkpoint
is lossless and resume is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, save_config
from .masking import (
    MaskSpec,
    motion_energy,
    sample_future_predictive,
    sample_motion_guided,
    sample_tube_mask,
)
from .model import (
    EncoderParams,
    HeadParams,
    LatentGrid,
    clone_frozen,
    ema_update,
    encode,
    full_grid,
    init_encoder,
    init_heads,
    load_checkpoint,
    load_into,
    predict_masked,
    quantize_params,
    save_checkpoint,
    teacher_targets,
    token_grid,
)
from .objectives import (
    ObjectiveConfig,
    ac_loss,
    compose_total,
    delta_loss,
    fwm_losses,
    hamiltonian_loss,
    hw_jepa_loss,
    jepa_loss,
    kinematic_loss,
    ld_errors,
    ld_hw_loss,
    ltc_loss,
    per_token_errors,
    sigreg_loss,
    spectral_loss,
    velgate_loss,
)
from .synth import Dataset, VideoClip, gen_motion_dataset
from .tensor import Tensor, backward, stack_scalars

# Disjoint RNG stream tags; synth owns its own keying.
STREAM_INIT = 0
STREAM_BATCH = 1
STREAM_MASK = 2
STREAM_SIGREG = 3

CHECKPOINT_NAME = "checkpoint.jpck"
METRICS_NAME = "metrics.jsonl"


def _q32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


# -- schedule ------------------------------------------------------------


def lr_at(step: int, total: int, warmup_frac: float = 0.1,
          lr_start: float = 1e-4, lr_peak: float = 6e-4) -> float:
    """Linear warmup from lr_start to lr_peak, then cosine decay to 0."""
    if total < 1:
        raise ValueError("total steps must be at least 1")
    if not 0.0 <= warmup_frac < 1.0:
        raise ValueError("warmup_frac must lie in [0, 1)")
    warmup = int(math.floor(warmup_frac * total))
    if step < warmup:
        return lr_start + (lr_peak - lr_start) * (step / warmup)
    progress = min((step - warmup) / (total - warmup), 1.0)
    return lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer -----------------------------------------------------------


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_opt(params: dict[str, Tensor]) -> OptState:
    return OptState(
        m={k: np.zeros_like(t.data) for k, t in params.items()},
        v={k: np.zeros_like(t.data) for k, t in params.items()},
    )


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               opt: OptState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.04) -> None:
    """Decoupled weight decay first, then the bias-corrected Adam update.

    Parameters and moments are rounded to the float32 grid afterwards.
    Parameters without a gradient this step keep their values and moments.
    """
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        theta = p.data - lr * weight_decay * p.data
        m = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = beta2 * opt.v[name] + (1.0 - beta2) * (g * g)
        theta = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = _q32(theta)
        opt.m[name] = _q32(m)
        opt.v[name] = _q32(v)


# -- state ---------------------------------------------------------------


@dataclass
class TrainState:
    cfg: RunConfig
    student: EncoderParams
    heads: HeadParams
    teacher: EncoderParams | None
    opt: OptState
    step: int = 0

    def trainable(self) -> dict[str, Tensor]:
        return {**self.student.named("enc"), **self.heads.named("heads")}


def init_state(cfg: RunConfig) -> TrainState:
    cfg.validate()
    obj = cfg.to_objective()
    spec = obj.spec
    mcfg = cfg.to_model()
    rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    student = init_encoder(mcfg, rng)
    d_app = int(round(obj.app_ratio * mcfg.dim))
    head_in = (mcfg.dim - d_app) if spec.fwm else mcfg.dim
    heads = init_heads(mcfg, rng, dyn_in=head_in, act_in=head_in,
                       with_ham="ham" in spec.components)
    quantize_params(student.named("enc"))
    quantize_params(heads.named("heads"))
    teacher = clone_frozen(student) if obj.ema else None
    opt = init_opt({**student.named("enc"), **heads.named("heads")})
    return TrainState(cfg=cfg, student=student, heads=heads, teacher=teacher, opt=opt)


# -- data / masks --------------------------------------------------------


def draw_batch(dataset: Dataset, batch_size: int, seed: int, step: int) -> list[VideoClip]:
    rng = np.random.default_rng([seed, STREAM_BATCH, step])
    idx = rng.integers(0, len(dataset.clips), size=batch_size)
    return [dataset.clips[int(j)] for j in idx]


def sample_clip_mask(obj: ObjectiveConfig, clip: VideoClip, grid: tuple[int, int, int],
                     patch: int, rng: np.random.Generator) -> MaskSpec:
    energy = motion_energy(clip, patch) if obj.motion_guided else None
    if obj.full_complement or obj.max_temporal_keep < 1.0:
        return sample_future_predictive(
            grid, obj.mask_ratio, obj.max_temporal_keep, obj.full_complement, rng,
            energy=energy, alpha=obj.motion_guided_strength,
            motion_guided=obj.motion_guided,
            fallback_rate=obj.motion_guided_random_rate,
        )
    if obj.motion_guided:
        return sample_motion_guided(grid, obj.mask_ratio, energy,
                                    obj.motion_guided_strength,
                                    obj.motion_guided_random_rate, rng)
    return sample_tube_mask(grid, obj.mask_ratio, rng)


# -- loss assembly -------------------------------------------------------


def clip_parts(state: TrainState, clip: VideoClip, mask: MaskSpec,
               sig_rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """All loss parts for one clip under the configured variant."""
    cfg = state.cfg
    obj = cfg.to_objective()
    spec = obj.spec
    needs = spec.components

    z_vis, _ = encode(state.student, clip, visible=mask.visible)
    pred = predict_masked(state.heads.predictor, z_vis, mask)

    z_full: LatentGrid | None = None
    if needs:
        z_full = full_grid(state.student, clip)

    if obj.ema:
        h_flat = teacher_targets(state.teacher, clip)
    elif z_full is not None:
        h_flat = z_full.values.data.reshape(-1, cfg.dim)  # detached student
    else:
        h_flat = teacher_targets(state.student, clip)
    targets = h_flat[mask.target_indices]

    parts = {"jepa": jepa_loss(pred, targets, mask.distance_weight)}
    if not needs:
        return parts

    grid = token_grid(state.student, clip)
    h_grid = h_flat.reshape(grid[0], grid[1] * grid[2], cfg.dim)

    if "kin" in needs:
        parts["kin"] = kinematic_loss(z_full, spec.kin_kind, obj.huber_delta)
    if "sigreg" in needs:
        if sig_rng is None:
            raise ValueError("sigreg variant needs a projection rng")
        parts["sigreg"] = sigreg_loss(z_full, obj.sigreg_projections, sig_rng)
    if "ham" in needs:
        parts["ham"] = hamiltonian_loss(z_full, state.heads.ham)
    if "velgate" in needs:
        parts["velgate"] = velgate_loss(z_full)
    if "delta" in needs:
        parts["delta"] = delta_loss(z_full, h_grid)
    if "ld" in needs:
        parts["ld"] = ld_loss_part(state.heads, z_full, h_grid, spec.fwm, obj.app_ratio)
    if "ld_hw" in needs:
        e = ld_errors(state.heads, z_full, h_grid, spec.fwm, obj.app_ratio)
        parts["ld_hw"] = Tensor(0.0) if e is None else ld_hw_loss(e, obj.tau)
    if "spectral" in needs:
        parts["spectral"] = spectral_loss(z_full, h_grid)
    if "ltc" in needs:
        parts["ltc"] = ltc_loss(z_full, h_grid, obj.ltc_margin)
    if "static" in needs or "orth" in needs:
        static, orth = fwm_losses(z_full, obj.app_ratio)
        if "static" in needs:
            parts["static"] = static
        if "orth" in needs:
            parts["orth"] = orth
    if "hw_jepa" in needs:
        parts["hw_jepa"] = hw_jepa_loss(per_token_errors(pred, targets), obj.tau)
    if "ac" in needs:
        parts["ac"] = ac_loss(state.heads, z_full, clip, cfg.patch, cfg.tubelet,
                              spec.fwm, obj.app_ratio)
    return parts


def ld_loss_part(heads: HeadParams, z: LatentGrid, h_grid: np.ndarray,
                 fwm: bool, app_ratio: float) -> Tensor:
    e = ld_errors(heads, z, h_grid, fwm, app_ratio)
    return Tensor(0.0) if e is None else e.mean()


def batch_bundle(state: TrainState, clips: list[VideoClip],
                 masks: list[MaskSpec] | None = None):
    """Average loss parts over the batch, composed once at this step."""
    cfg = state.cfg
    obj = cfg.to_objective()
    step = state.step
    collected: dict[str, list[Tensor]] = {}
    for i, clip in enumerate(clips):
        if masks is None:
            mask_rng = np.random.default_rng([cfg.seed, STREAM_MASK, step, i])
            mask = sample_clip_mask(obj, clip, token_grid(state.student, clip),
                                    cfg.patch, mask_rng)
        else:
            mask = masks[i]
        sig_rng = np.random.default_rng([cfg.seed, STREAM_SIGREG, step, i])
        for name, part in clip_parts(state, clip, mask, sig_rng).items():
            collected.setdefault(name, []).append(part)
    averaged = {name: stack_scalars(vals).mean() for name, vals in collected.items()}
    return compose_total(obj, averaged, step)


# -- steps and loop ------------------------------------------------------


def train_step(state: TrainState, clips: list[VideoClip],
               masks: list[MaskSpec] | None = None) -> dict:
    cfg = state.cfg
    try:
        bundle = batch_bundle(state, clips, masks)
    except FloatingPointError as err:
        raise FloatingPointError(f"step {state.step}: {err}") from None

    params = state.trainable()
    for p in params.values():
        p.grad = None
    backward(bundle.total_node)
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"step {state.step}: non-finite gradient for '{name}'")

    lr = lr_at(state.step, cfg.steps, cfg.warmup_frac, cfg.lr_start, cfg.lr_peak)
    adamw_step(params, grads, state.opt, lr, weight_decay=cfg.weight_decay)

    if state.teacher is not None:
        t_named = state.teacher.named("enc")
        ema_update(t_named, state.student.named("enc"), cfg.ema_momentum)
        quantize_params(t_named)

    state.step += 1
    metrics = {"step": state.step, "lr": lr, "total": bundle.total}
    for name, val in bundle.components.items():
        metrics[f"loss_{name}"] = val
    return metrics


def save_train_state(state: TrainState, path) -> None:
    records: dict[str, np.ndarray] = {}
    for name, t in state.trainable().items():
        records[name] = t.data
    if state.teacher is not None:
        for name, t in state.teacher.named("teacher").items():
            records[name] = t.data
    for name in state.opt.m:
        records[f"opt.m.{name}"] = state.opt.m[name]
        records[f"opt.v.{name}"] = state.opt.v[name]
    records["meta.step"] = np.array([float(state.step)])
    save_checkpoint(path, records)


def load_train_state(cfg: RunConfig, path) -> TrainState:
    state = init_state(cfg)
    records = load_checkpoint(path)
    load_into(state.trainable(), records)
    if state.teacher is not None:
        load_into(state.teacher.named("teacher"), records)
    for name in state.opt.m:
        for slot, store in (("m", state.opt.m), ("v", state.opt.v)):
            key = f"opt.{slot}.{name}"
            if key not in records:
                raise ValueError(f"checkpoint missing record '{key}'")
            store[name] = records[key].copy()
    state.step = int(records["meta.step"][0])
    state.opt.step = state.step
    return state


def run_pretrain(cfg: RunConfig, dataset: Dataset | None = None,
                 resume: bool = False, stop_after: int | None = None,
                 log=None) -> TrainState:
    """Full pretraining run; writes metrics.jsonl and a final checkpoint.

    ``stop_after`` checkpoints and returns early while keeping the schedule
    keyed to cfg.steps, so a later ``resume=True`` call continues bit-exactly.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.lab")
    if dataset is None:
        dataset = gen_motion_dataset(cfg.n_per_class, cfg.seed, t=cfg.frames,
                                     h=cfg.height, w=cfg.width)

    ckpt = out / CHECKPOINT_NAME
    if resume:
        state = load_train_state(cfg, ckpt)
        mode = "a"
    else:
        state = init_state(cfg)
        mode = "w"

    end = cfg.steps if stop_after is None else min(stop_after, cfg.steps)
    with open(out / METRICS_NAME, mode) as f:
        for step in range(state.step, end):
            clips = draw_batch(dataset, cfg.batch_size, cfg.seed, step)
            metrics = train_step(state, clips)
            f.write(json.dumps(metrics, sort_keys=True) + "\n")
            if log is not None and (step + 1) % 50 == 0:
                log(f"[{cfg.variant}] step {step + 1}/{cfg.steps} "
                    f"total {metrics['total']:.4f}")
    save_train_state(state, ckpt)
    return state
