"""Multi-scale channel attention (MS-CAM) and its single-scale variants.

An :class:`MSCAM` owns two bottleneck context branches. Each branch is
``PWConv(C -> C/r) -> BN -> ReLU -> PWConv(C/r -> C) -> BN``; a *global*
branch first squeezes the input with global average pooling, a *local*
branch runs per pixel. The attention map is ``sigmoid(ctx_1 (+) ctx_2)``
with broadcasting addition.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as A
from .autodiff import Var
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import ConfigError

__all__ = [
    "SCALES",
    "ContextBranch",
    "MSCAM",
    "global_channel_context",
    "local_channel_context",
    "ms_cam_weights",
    "ms_cam_refine",
]

SCALES = ("global", "local")


class ContextBranch(Module):
    """Point-wise bottleneck producing a channel context at one scale."""

    def __init__(self, channels: int, r: int, scale: str, use_bn: bool = True,
                 zero_init: bool = False, rng: Optional[np.random.Generator] = None):
        if scale not in SCALES:
            raise ConfigError(f"branch scale must be one of {SCALES}, got {scale!r}")
        if r < 1 or channels % r:
            raise ConfigError(f"channels ({channels}) must be divisible by r ({r})")
        init = "zeros" if zero_init else "kaiming"
        inner = channels // r
        self.scale = scale
        self.pw1 = Conv2d(channels, inner, 1, rng=rng, init=init)
        self.bn1 = BatchNorm2d(inner) if use_bn else None
        self.pw2 = Conv2d(inner, channels, 1, rng=rng, init=init)
        self.bn2 = BatchNorm2d(channels) if use_bn else None

    def forward(self, x: Var) -> Var:
        if self.scale == "global":
            x = A.global_avg_pool(x)
        h = self.pw1(x)
        if self.bn1 is not None:
            h = self.bn1(h)
        h = self.pw2(A.relu(h))
        if self.bn2 is not None:
            h = self.bn2(h)
        return h


class MSCAM(Module):
    """Attention-weight generator over two context branches.

    Parameters
    ----------
    channels : int
        Number of input channels ``C``.
    r : int
        Channel reduction ratio; ``C`` must be divisible by it.
    branch_scales : pair of {"global", "local"}
        ``("global", "local")`` is the multi-scale module; ``("global",
        "global")`` and ``("local", "local")`` are the single-scale
        ablations. All three have identical parameter shapes.
    use_bn : bool
        ``False`` bypasses every batch norm (identity), which some
        oracle tests rely on.
    zero_init : bool
        Zero all point-wise kernels so the module emits ``sigmoid(0) = 0.5``.
    """

    flops_category = "attention"

    def __init__(self, channels: int, r: int = 4, branch_scales: Sequence[str] = ("global", "local"),
                 use_bn: bool = True, zero_init: bool = False,
                 rng: Optional[np.random.Generator] = None):
        if len(branch_scales) != 2:
            raise ConfigError(f"branch_scales must be a pair, got {branch_scales!r}")
        self.channels = channels
        self.r = r
        self.branch_scales = tuple(branch_scales)
        self.branch1 = ContextBranch(channels, r, branch_scales[0], use_bn, zero_init, rng)
        self.branch2 = ContextBranch(channels, r, branch_scales[1], use_bn, zero_init, rng)
        # test hook: a constant post-sigmoid map replacing the computed one
        self.weight_override: Optional[float] = None

    def branch(self, scale: str) -> ContextBranch:
        for b in (self.branch1, self.branch2):
            if b.scale == scale:
                return b
        raise ConfigError(f"this MS-CAM has no {scale} branch (scales {self.branch_scales})")

    def contexts(self, x: Var) -> Tuple[Var, Var]:
        return self.branch1(x), self.branch2(x)

    def forward(self, x: Var) -> Var:
        """Attention weights ``M(x)``, shape ``N x C x H x W`` or ``N x C x 1 x 1``."""
        if self.weight_override is not None:
            shape = x.shape if "local" in self.branch_scales else x.shape[:2] + (1, 1)
            return Var(np.full(shape, self.weight_override, dtype=x.value.dtype))
        c1, c2 = self.contexts(x)
        return A.sigmoid(A.add(c1, c2))

    def refine(self, x: Var) -> Var:
        return A.mul(x, self(x))


def global_channel_context(x: Var, p: MSCAM) -> Var:
    """Pre-sigmoid global context ``B(W2 relu(B(W1 GAP(x))))``, ``N x C x 1 x 1``."""
    return p.branch("global")(A.constant(x))


def local_channel_context(x: Var, p: MSCAM) -> Var:
    """Pre-sigmoid local context, same shape as ``x``."""
    return p.branch("local")(A.constant(x))


def ms_cam_weights(x: Var, p: MSCAM) -> Var:
    return p(A.constant(x))


def ms_cam_refine(x: Var, p: MSCAM) -> Var:
    """Refined feature ``x * M(x)``."""
    return p.refine(A.constant(x))
