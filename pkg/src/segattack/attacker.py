"""Sign-gradient L-inf attacks: FGSM, PGD and the feature-similarity attack.

Images are ``(H, W, C)`` tensors in ``[0, 1]``. The feature-similarity attack
*descends* the similarity objective (clean vs. adversarial features, and
among same-object pixels of the adversarial features).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from . import simcore
from .adapters import recommended_layer
from .errors import ConfigError, ShapeError

LOSS_MODES = ("fspgd_dynamic", "ex_only", "in_only", "ex_plus_scaled_in")


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iterations: int = 20
    tau: float = math.cos(math.pi / 3)
    layer_id: str | None = None
    seed: int = 0
    loss_mode: str = "fspgd_dynamic"
    in_weight: float = 1.0  # only for ex_plus_scaled_in
    pixel_clamp: bool = True

    def validate(self) -> "AttackConfig":
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.alpha > 2 * self.epsilon and self.epsilon > 0:
            raise ConfigError(f"alpha={self.alpha} exceeds the ball diameter 2*epsilon")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not self.tau < 1:
            raise ConfigError("tau must be < 1")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown attack keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class AttackTrace:
    x_adv: torch.Tensor
    records: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_json(self) -> dict:
        return {"records": self.records, "warnings": self.warnings}


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def random_init(x: torch.Tensor, epsilon: float, seed: int = 0, pixel_clamp: bool = True) -> torch.Tensor:
    """``x + U(-eps, eps)``, clamped to ``[0, 1]``."""
    if epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    if epsilon == 0:
        return x.detach().clone()
    u = torch.rand(x.shape, generator=_generator(seed), dtype=x.dtype) * (2 * epsilon) - epsilon
    out = x.detach() + u
    return out.clamp(0, 1) if pixel_clamp else out


def project_linf(x_adv: torch.Tensor, x: torch.Tensor, epsilon: float, pixel_clamp: bool = True) -> torch.Tensor:
    if x_adv.shape != x.shape:
        raise ShapeError(f"shape mismatch {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    out = torch.maximum(torch.minimum(x_adv, x + epsilon), x - epsilon)
    return out.clamp(0, 1) if pixel_clamp else out


def _ce_loss(y: torch.Tensor, ignore_index: int):
    def loss(logits):
        return F.cross_entropy(
            logits.permute(2, 0, 1).unsqueeze(0), y.unsqueeze(0).long(), ignore_index=ignore_index
        )

    return loss


def _extent(x_adv, x) -> dict:
    """Ball radius and pixel range of an iterate, for the trace."""
    if not x_adv.numel():
        return {"linf": 0.0, "pixel_min": 0.0, "pixel_max": 0.0}
    return {"linf": _linf(x_adv, x), "pixel_min": float(x_adv.min()), "pixel_max": float(x_adv.max())}


def _linf(a, b) -> float:
    return float((a - b).abs().max()) if a.numel() else 0.0


def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon: float, ignore_index: int = 255,
         pixel_clamp: bool = True) -> torch.Tensor:
    """Single step ``x + eps * sign(grad CE)``; ``sign(0) = 0``."""
    if epsilon == 0:
        return x.detach().clone()
    grad, _ = model.input_gradient(x, _ce_loss(y, ignore_index), context="(fgsm)")
    out = x.detach() + epsilon * grad.sign().to(x.dtype)
    return out.clamp(0, 1) if pixel_clamp else out


def pgd(model, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig, ignore_index: int = 255) -> AttackTrace:
    """Random start, then ``T`` ascent steps on pixel-wise cross-entropy."""
    cfg.validate()
    x = x.detach()
    x_adv = project_linf(random_init(x, cfg.epsilon, cfg.seed, cfg.pixel_clamp), x, cfg.epsilon, cfg.pixel_clamp)
    loss_fn = _ce_loss(y, ignore_index)
    trace = AttackTrace(x_adv)
    for t in range(cfg.iterations):
        grad, loss = model.input_gradient(x_adv, loss_fn, context=f"(pgd, iteration {t})")
        x_adv = project_linf(x_adv + cfg.alpha * grad.sign().to(x.dtype), x, cfg.epsilon, cfg.pixel_clamp)
        trace.records.append({"t": t, "loss": float(loss), **_extent(x_adv, x)})
    trace.x_adv = x_adv
    return trace


def objective(br: simcore.LossBreakdown, mode: str, in_weight: float = 1.0) -> torch.Tensor:
    """Pick the scalar to descend from a loss breakdown."""
    if mode == "fspgd_dynamic":
        return br.combined
    if mode == "ex_only":
        return br.l_ex
    if mode == "in_only":
        return br.l_in
    if mode == "ex_plus_scaled_in":
        return br.l_ex + in_weight * br.l_in
    raise ConfigError(f"unknown loss_mode {mode!r}")


def fspgd(model, x: torch.Tensor, cfg: AttackConfig) -> AttackTrace:
    """Feature-similarity PGD. Needs no labels.

    Clean features are captured once (no gradient) and the binarized mask is
    built from them up front. Each step descends the configured similarity
    objective at ``cfg.layer_id``.
    """
    cfg.validate()
    layer = cfg.layer_id or recommended_layer(model.architecture)
    x = x.detach()
    with torch.no_grad():
        _, f_x = model.forward_with_features(x, layer)
    f_x = f_x.detach()
    mask = simcore.build_mask(f_x, cfg.tau) if f_x.pixels <= simcore.DEFAULT_N_MAX else None
    trace = AttackTrace(x)
    if mask is not None and mask.count_k == 0:
        trace.warnings.append(f"empty similarity mask at tau={cfg.tau}; L_in treated as 0")

    x_adv = project_linf(random_init(x, cfg.epsilon, cfg.seed, cfg.pixel_clamp), x, cfg.epsilon, cfg.pixel_clamp)
    T = cfg.iterations
    for t in range(T):
        holder = {}

        def loss_fn(_logits, f_a, t=t):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", simcore.EmptyMaskWarning)
                br = simcore.combined_loss(f_x, f_a, t, T, cfg.tau, mask=mask)
            holder["br"] = br
            return objective(br, cfg.loss_mode, cfg.in_weight)

        grad, _ = model.input_gradient(x_adv, loss_fn, layer_id=layer, context=f"(fspgd, iteration {t})")
        x_adv = project_linf(x_adv - cfg.alpha * grad.sign().to(x.dtype), x, cfg.epsilon, cfg.pixel_clamp)
        br = holder["br"]
        if br.empty_mask and not trace.warnings:
            trace.warnings.append(f"empty similarity mask at tau={cfg.tau}; L_in treated as 0")
        rec = {"t": t, **br.as_record(), **_extent(x_adv, x)}
        trace.records.append(rec)
    trace.x_adv = x_adv
    return trace


# --- registry used by the evaluation harness ---------------------------------

AttackFn = Callable[..., AttackTrace]
ATTACKS: dict[str, AttackFn] = {}


def register_attack(name: str):
    """Register ``fn(model, x, y, cfg, ignore_index) -> AttackTrace``."""

    def deco(fn):
        ATTACKS[name] = fn
        return fn

    return deco


@register_attack("fgsm")
def _run_fgsm(model, x, y, cfg, ignore_index=255):
    cfg.validate()
    x_adv = fgsm(model, x, y, cfg.epsilon, ignore_index, cfg.pixel_clamp)
    return AttackTrace(x_adv, [{"t": 0, **_extent(x_adv, x)}])


@register_attack("pgd")
def _run_pgd(model, x, y, cfg, ignore_index=255):
    return pgd(model, x, y, cfg, ignore_index)


@register_attack("fspgd")
def _run_fspgd(model, x, y, cfg, ignore_index=255):
    return fspgd(model, x, cfg)


def get_attack(name: str) -> AttackFn:
    if name not in ATTACKS:
        raise ConfigError(f"unknown attack {name!r}; registered: {sorted(ATTACKS)}")
    return ATTACKS[name]
