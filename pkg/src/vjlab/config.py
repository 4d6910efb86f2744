"""Flat run configuration: one dataclass, `key = value` files, canonical dump.

Parsing resolves variant-dependent defaults first (hard-weight coefficient,
masking flags), then applies the remaining keys, so a file containing just
``variant = AMG-JEPA`` picks up that recipe's sampler settings.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .objectives import ObjectiveConfig, VARIANTS, resolve_objective


@dataclass
class RunConfig:
    # run identity
    variant: str = "Baseline"
    seed: int = 0
    out: str = "runs/baseline"

    # synthetic data
    n_per_class: int = 8
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1

    # encoder / predictor geometry
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

    # optimization schedule
    steps: int = 500
    batch_size: int = 8
    warmup_frac: float = 0.1
    lr_start: float = 1e-4
    lr_peak: float = 6e-4
    weight_decay: float = 0.04
    ema_momentum: float = 0.99925

    # masking
    mask_ratio: float = 0.5
    motion_guided: bool = False
    motion_guided_strength: float = 2.0
    motion_guided_random_rate: float = 0.1
    full_complement: bool = False
    max_temporal_keep: float = 1.0

    # loss coefficients
    lambda_kin: float = 0.1
    lambda_s: float = 0.05
    lambda_o: float = 0.01
    lambda_d: float = 1.0
    lambda_hw: float = 0.3
    lambda_ac: float = 1.0
    lambda_delta: float = 0.5
    lambda_spec: float = 1.0
    lambda_ltc: float = 0.5
    tau: float = 1.0
    huber_delta: float = 1.0
    ltc_margin: float = 0.5
    app_ratio: float = 0.5
    anneal_horizon: int = 500
    sigreg_projections: int = 8

    # probing
    probe_kind: str = "linear"
    probe_epochs: int = 50
    probe_batch: int = 16
    probe_lr: float = 1e-3

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        for name in ["seed"]:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ["n_per_class", "steps", "batch_size", "probe_epochs", "probe_batch"]:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.lr_start <= 0.0 or self.lr_peak <= 0.0 or self.probe_lr <= 0.0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0.0 < self.max_temporal_keep <= 1.0:
            raise ValueError("max_temporal_keep must lie in (0, 1]")
        if not 0.0 <= self.motion_guided_random_rate <= 1.0:
            raise ValueError("motion_guided_random_rate must lie in [0, 1]")
        if self.motion_guided_strength < 0.0:
            raise ValueError("motion_guided_strength must be non-negative")
        if self.frames % self.tubelet or self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"clip {self.frames}x{self.height}x{self.width} not divisible by "
                f"tubelet {self.tubelet} / patch {self.patch}"
            )
        if self.probe_kind not in ("linear", "attentive"):
            raise ValueError(f"probe_kind must be linear or attentive, got '{self.probe_kind}'")
        self.to_model()      # geometry invariants
        self.to_objective()  # coefficient invariants
        return self

    def to_model(self) -> ModelConfig:
        return ModelConfig(
            patch=self.patch, tubelet=self.tubelet, dim=self.dim, heads=self.heads,
            layers=self.layers, ff=self.ff, pred_layers=self.pred_layers,
            pred_heads=self.pred_heads, dyn_hidden=self.dyn_hidden,
            ham_hidden=self.ham_hidden, channels=self.channels,
        )

    def to_objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(
            variant=self.variant,
            lambda_kin=self.lambda_kin, lambda_s=self.lambda_s, lambda_o=self.lambda_o,
            lambda_d=self.lambda_d, lambda_hw=self.lambda_hw, lambda_ac=self.lambda_ac,
            lambda_delta=self.lambda_delta, lambda_spec=self.lambda_spec,
            lambda_ltc=self.lambda_ltc, tau=self.tau, huber_delta=self.huber_delta,
            ltc_margin=self.ltc_margin, app_ratio=self.app_ratio,
            anneal_horizon=self.anneal_horizon, sigreg_projections=self.sigreg_projections,
            ema=VARIANTS[self.variant].ema, mask_ratio=self.mask_ratio,
            motion_guided=self.motion_guided,
            motion_guided_strength=self.motion_guided_strength,
            motion_guided_random_rate=self.motion_guided_random_rate,
            full_complement=self.full_complement,
            max_temporal_keep=self.max_temporal_keep,
        )


def variant_defaults(variant: str) -> RunConfig:
    """Baseline defaults overlaid with the variant's recipe settings."""
    obj = resolve_objective(variant)
    return RunConfig(
        variant=variant,
        lambda_hw=obj.lambda_hw,
        motion_guided=obj.motion_guided,
        motion_guided_strength=obj.motion_guided_strength,
        motion_guided_random_rate=obj.motion_guided_random_rate,
        full_complement=obj.full_complement,
        max_temporal_keep=obj.max_temporal_keep,
        out=f"runs/{_slug(variant)}",
    )


def _slug(variant: str) -> str:
    out = []
    for ch in variant.lower():
        out.append(ch if ch.isalnum() else "-")
    text = "".join(out)
    while "--" in text:
        text = text.replace("--", "-")
    return text.strip("-")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str, lineno: int):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"line {lineno}: bad {kind} value '{raw}' for key '{name}'") from None


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; '#' lines are comments; unknown keys fail."""
    pairs: list[tuple[int, str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown key '{key}'")
        if not raw:
            raise ValueError(f"line {lineno}: empty value for key '{key}'")
        pairs.append((lineno, key, raw))

    seen: dict[str, int] = {}
    for lineno, key, _ in pairs:
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key '{key}' (first on line {seen[key]})")
        seen[key] = lineno

    variant = "Baseline"
    for lineno, key, raw in pairs:
        if key == "variant":
            if raw not in VARIANTS:
                raise ValueError(f"line {lineno}: unknown variant '{raw}'")
            variant = raw
    cfg = variant_defaults(variant)
    for lineno, key, raw in pairs:
        if key == "variant":
            continue
        setattr(cfg, key, _coerce(key, raw, lineno))
    return cfg.validate()


def serialize_config(cfg: RunConfig) -> str:
    """Canonical full dump; parse(serialize(cfg)) reproduces cfg exactly."""
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(serialize_config(cfg))


def apply_overrides(cfg: RunConfig, seed: int | None = None, out: str | None = None,
                    **extra) -> RunConfig:
    updates = dict(extra)
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out"] = out
    return dataclasses.replace(cfg, **updates).validate() if updates else cfg
