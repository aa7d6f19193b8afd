"""Feature fusion strategies.

Every strategy combines two same-shape maps ``X`` and ``Y`` (``Y`` being
the one with the larger receptive field) as::

    Z = W_x * X + W_y * Y

where the weight maps come from MS-CAM instances. ``add`` and ``concat``
are the context-unaware baselines; the attentional kinds differ in which
input the weights are computed from and whether ``W_x + W_y == 1``.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from . import autodiff as A
from .attention import MSCAM
from .autodiff import Var
from .layers import BatchNorm2d, Conv2d, Module
from .tensor import ConfigError, DimensionError

__all__ = [
    "KINDS",
    "ATTENTIONAL_KINDS",
    "SOFT_SELECTION_KINDS",
    "UnsupportedOperation",
    "Fusion",
    "fuse",
    "initial_integrate",
    "fusion_weight_map",
]

KINDS = (
    "add",
    "concat",
    "refine_ms_senet",
    "modulate_ms_gau",
    "soft_select_highway",
    "modulate_ms_sa",
    "aff",
    "iaff",
    "half_aff",
    "concat_aff",
    "recursive_aff",
)
ATTENTIONAL_KINDS = KINDS[2:]
SOFT_SELECTION_KINDS = ("soft_select_highway", "aff", "iaff", "half_aff", "concat_aff", "recursive_aff")


class UnsupportedOperation(ConfigError):
    """The requested operation does not apply to this fusion kind."""


class _ContextProjection(Module):
    """Point-wise ``2C -> C`` mix of local and global contexts (concat_aff)."""

    flops_category = "attention"

    def __init__(self, channels, zero_init, rng):
        self.proj = Conv2d(2 * channels, channels, 1, rng=rng, init="zeros" if zero_init else "kaiming")

    def forward(self, c_local: Var, c_global: Var) -> Var:
        if c_global.shape != c_local.shape:
            c_global = A.broadcast_to(c_global, c_local.shape)
        return self.proj(A.concat_channels(c_local, c_global))


class Fusion(Module):
    """A fusion strategy with its own parameters.

    ``zero_init`` zeroes the attention kernels so every MS-CAM emits 0.5.
    """

    flops_category = "fusion"
    # when set, forward keeps the latest attention map in ``captured``
    capture = False
    captured = None

    def __init__(self, kind: str, channels: int, r: int = 4,
                 branch_scales: Sequence[str] = ("global", "local"), use_bn: bool = True,
                 zero_init: bool = False, rng: Optional[np.random.Generator] = None):
        if kind not in KINDS:
            raise ConfigError(f"unknown fusion kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.channels = channels
        if rng is None:
            rng = np.random.default_rng(0)

        def cam():
            return MSCAM(channels, r, branch_scales, use_bn=use_bn, zero_init=zero_init, rng=rng)

        if kind == "concat":
            self.proj = Conv2d(2 * channels, channels, 1, rng=rng)
            self.bn = BatchNorm2d(channels) if use_bn else None
        elif kind != "add":
            self.mscam = cam()
        if kind == "iaff":
            self.mscam2 = cam()
        elif kind == "recursive_aff":
            self.inner = cam()
        elif kind == "concat_aff":
            self.ctx_proj = _ContextProjection(channels, zero_init, rng)

    def _check(self, x: Var, y: Var) -> None:
        if x.shape != y.shape:
            raise DimensionError(f"fuse({self.kind}): X {x.shape} and Y {y.shape} differ")

    @property
    def cams(self) -> Tuple[MSCAM, ...]:
        return tuple(getattr(self, n) for n in ("mscam", "mscam2", "inner") if hasattr(self, n))

    def weights(self, x: Var, y: Var) -> Tuple[Optional[Var], Optional[Var]]:
        """Weight maps ``(W_x, W_y)`` applied to ``X`` and ``Y``; ``None`` means 1."""
        k = self.kind
        if k in ("add", "concat"):
            raise UnsupportedOperation(f"fusion kind {k!r} has no attention weights")
        if k == "refine_ms_senet":
            return None, self.mscam(y)
        if k == "modulate_ms_gau":
            return self.mscam(y), None
        if k == "soft_select_highway":
            m = self.mscam(x)
            return m, A.one_minus(m)
        if k == "modulate_ms_sa":
            return self.mscam(A.add(x, y)), None
        if k == "aff":
            m = self.mscam(A.add(x, y))
            return m, A.one_minus(m)
        if k == "iaff":
            m1 = self.mscam(A.add(x, y))
            integrated = A.add(A.mul(m1, x), A.mul(A.one_minus(m1), y))
            m = self.mscam2(integrated)
            return m, A.one_minus(m)
        s = A.add(x, y)
        if self.mscam.weight_override is not None:
            m = self.mscam(s)
            return m, A.one_minus(m)
        c1, c2 = self.mscam.contexts(s)
        local_first = self.mscam.branch_scales[0] == "local" or self.mscam.branch_scales[1] == "global"
        c_loc, c_glob = (c1, c2) if local_first else (c2, c1)
        if k == "half_aff":
            # each branch drives its own sigmoid; the two halves average
            m = A.scale(A.add(A.sigmoid(c_loc), A.sigmoid(c_glob)), 0.5)
        elif k == "concat_aff":
            m = A.sigmoid(self.ctx_proj(c_loc, c_glob))
        else:  # recursive_aff
            # Inner wiring is an interpretation: a second MS-CAM over the summed
            # contexts soft-selects between them, then the outer sigmoid applies.
            w = self.inner(A.add(c_loc, c_glob))
            mixed = A.add(A.mul(w, c_loc), A.mul(A.one_minus(w), c_glob))
            m = A.sigmoid(mixed)
        return m, A.one_minus(m)

    def forward(self, x: Var, y: Var) -> Var:
        self._check(x, y)
        if self.kind == "add":
            return A.add(x, y)
        if self.kind == "concat":
            z = self.proj(A.concat_channels(x, y))
            return self.bn(z) if self.bn is not None else z
        wx, wy = self.weights(x, y)
        if self.capture:
            self.captured = (wx if wx is not None else wy).value
        zx = x if wx is None else A.mul(wx, x)
        zy = y if wy is None else A.mul(wy, y)
        return A.add(zx, zy)

    def weight_map(self, x: Var, y: Var) -> Var:
        """The attention map ``M`` produced for this pair (weights on X when present)."""
        self._check(x, y)
        wx, wy = self.weights(x, y)
        return wx if wx is not None else wy


def fuse(strategy: Fusion, x, y) -> Var:
    return strategy(A.constant(x), A.constant(y))


def fusion_weight_map(strategy: Fusion, x, y) -> Var:
    return strategy.weight_map(A.constant(x), A.constant(y))


def initial_integrate(x, y, mode: str = "sum", cam: Optional[MSCAM] = None) -> Var:
    """Combine ``x`` and ``y`` before they are fed to an attention module.

    ``"sum"`` is plain addition; ``"aff_stage"`` is the first-stage
    attentional fusion used by iAFF and needs its own ``cam``.
    """
    x, y = A.constant(x), A.constant(y)
    if x.shape != y.shape:
        raise DimensionError(f"initial_integrate: X {x.shape} and Y {y.shape} differ")
    if mode == "sum":
        return A.add(x, y)
    if mode == "aff_stage":
        if cam is None:
            raise ConfigError("aff_stage integration needs an MS-CAM")
        m = cam(A.add(x, y))
        return A.add(A.mul(m, x), A.mul(A.one_minus(m), y))
    raise ConfigError(f"unknown integration mode {mode!r}")
