"""Feature-similarity kernels.

Feature maps are ``(C, N)`` tensors: one column per spatial pixel, flattened
row-major over ``(h, w)``. All functions are differentiable in torch and hold
no state.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Union

import torch
from torch.utils.checkpoint import checkpoint

from .errors import ConfigError, InvalidInputError, ShapeError

EPS_NORM = 1e-12
DEFAULT_TAU = math.cos(math.pi / 3)
DEFAULT_N_MAX = 16384
DEFAULT_TILE = 1024


class EmptyMaskWarning(UserWarning):
    """Raised (as a warning) when the binarized mask has no ones."""


@dataclass
class FeatureMap:
    values: torch.Tensor  # (C, N)
    height: int
    width: int

    def __post_init__(self):
        if self.values.dim() != 2:
            raise ShapeError(f"feature values must be 2-D (C, N), got {tuple(self.values.shape)}")
        if self.height * self.width != self.values.shape[1]:
            raise ShapeError(
                f"spatial {self.height}x{self.width} does not match N={self.values.shape[1]}"
            )

    @classmethod
    def from_activation(cls, act: torch.Tensor) -> "FeatureMap":
        """Flatten a ``(C, h, w)`` or ``(1, C, h, w)`` activation."""
        if act.dim() == 4:
            if act.shape[0] != 1:
                raise ShapeError("expected a single-image activation")
            act = act[0]
        c, h, w = act.shape
        return cls(act.reshape(c, h * w), h, w)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def pixels(self) -> int:
        return self.values.shape[1]

    def detach(self) -> "FeatureMap":
        return FeatureMap(self.values.detach(), self.height, self.width)


@dataclass
class SimilarityMask:
    values: torch.Tensor  # (N, N) bool
    count_k: int


@dataclass
class LossBreakdown:
    l_ex: torch.Tensor
    l_in: torch.Tensor
    lambda_t: float
    combined: torch.Tensor
    empty_mask: bool = False

    def as_record(self) -> dict:
        return {
            "lambda_t": self.lambda_t,
            "l_ex": float(self.l_ex.detach()),
            "l_in": float(self.l_in.detach()),
            "combined": float(self.combined.detach()),
        }


FeatureLike = Union[FeatureMap, torch.Tensor]


def _values(f: FeatureLike) -> torch.Tensor:
    v = f.values if isinstance(f, FeatureMap) else f
    if v.dim() != 2:
        raise ShapeError(f"expected (C, N) features, got {tuple(v.shape)}")
    return v


def _check_pair(f_x: torch.Tensor, f_a: torch.Tensor):
    if f_x.shape != f_a.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_x.shape)} vs {tuple(f_a.shape)}")


def _check_tau(tau: float):
    if not tau < 1:
        raise ConfigError(f"tau must be < 1 (got {tau}); the mask would be empty")


def normalize_pixels(f: FeatureLike, eps_norm: float = EPS_NORM) -> torch.Tensor:
    """Divide each column by ``max(||column||, eps_norm)``."""
    if eps_norm <= 0:
        raise ConfigError("eps_norm must be positive")
    v = _values(f)
    if not torch.isfinite(v).all():
        raise InvalidInputError("feature map contains non-finite values")
    norms = v.norm(dim=0, keepdim=True).clamp_min(eps_norm)
    return v / norms


def external_similarity(f_x: FeatureLike, f_a: FeatureLike) -> torch.Tensor:
    """Mean per-pixel cosine between clean and adversarial features."""
    vx, va = _values(f_x), _values(f_a)
    _check_pair(vx, va)
    nx, na = normalize_pixels(vx), normalize_pixels(va)
    return (nx * na).sum(dim=0).mean()


def gram(f: FeatureLike) -> torch.Tensor:
    """All-pairs pixel cosine similarity, ``(N, N)``."""
    n = normalize_pixels(f)
    return n.T @ n


def build_mask(f_x: FeatureLike, tau: float = DEFAULT_TAU) -> SimilarityMask:
    _check_tau(tau)
    with torch.no_grad():
        m = gram(_values(f_x).detach()) > tau
    return SimilarityMask(m, int(m.sum()))


def _tile_terms(nx_rows, nx, na_rows, na, tau):
    mask = (nx_rows.T @ nx) > tau
    s = na_rows.T @ na
    return (s * mask).sum(), mask.sum().to(s.dtype)


def _tiled_masked_sum(nx: torch.Tensor, na: torch.Tensor, tau: float, tile: int):
    total = na.new_zeros(())
    count = 0
    n = na.shape[1]
    for start in range(0, n, tile):
        sl = slice(start, min(start + tile, n))
        args = (nx[:, sl], nx, na[:, sl], na, tau)
        if na.requires_grad:
            # recompute the tile in backward so peak memory stays O(N * tile)
            part, k = checkpoint(_tile_terms, *args, use_reentrant=False)
        else:
            part, k = _tile_terms(*args)
        total = total + part
        count += int(k)
    return total, count


def internal_similarity(
    f_x: FeatureLike,
    f_a: FeatureLike,
    tau: float = DEFAULT_TAU,
    *,
    mask: SimilarityMask | None = None,
    n_max: int = DEFAULT_N_MAX,
    tile: int = DEFAULT_TILE,
) -> torch.Tensor:
    """Masked mean of the adversarial Gram matrix, halved.

    The mask is built from ``f_x`` alone and carries no gradient. A
    precomputed ``mask`` may be passed to skip rebuilding it. Above ``n_max``
    pixels the sum is accumulated in row tiles of width ``tile``.

    Returns 0 and emits :class:`EmptyMaskWarning` when the mask is empty.
    """
    vx, va = _values(f_x), _values(f_a)
    _check_pair(vx, va)
    _check_tau(tau)
    n = va.shape[1]
    na = normalize_pixels(va)
    if mask is not None:
        if mask.values.shape != (n, n):
            raise ShapeError("mask does not match feature pixel count")
        k = mask.count_k
        total = (na.T @ na * mask.values).sum() if k else None
    elif n <= n_max:
        mask = build_mask(vx, tau)
        k = mask.count_k
        total = (na.T @ na * mask.values).sum() if k else None
    else:
        nx = normalize_pixels(vx.detach())
        total, k = _tiled_masked_sum(nx, na, tau, tile)
    if k == 0:
        warnings.warn(f"similarity mask is empty at tau={tau}; L_in set to 0", EmptyMaskWarning)
        return va.sum() * 0.0
    return 0.5 * total / k


def combined_loss(
    f_x: FeatureLike,
    f_a: FeatureLike,
    t: int,
    T: int,
    tau: float = DEFAULT_TAU,
    *,
    mask: SimilarityMask | None = None,
) -> LossBreakdown:
    """Blend the two similarities with ``lambda_t = t / T``."""
    if T <= 0 or not 0 <= t < T:
        raise ConfigError(f"need 0 <= t < T, got t={t}, T={T}")
    lam = t / T
    l_ex = external_similarity(f_x, f_a)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyMaskWarning)
        l_in = internal_similarity(f_x, f_a, tau, mask=mask)
    empty = any(issubclass(w.category, EmptyMaskWarning) for w in caught)
    combined = lam * l_ex + (1 - lam) * l_in
    return LossBreakdown(l_ex, l_in, lam, combined, empty)
