"""Parameter counting and FLOPs accounting.

FLOPs follow the multiply-and-add convention: every multiply-accumulate
(MAC) counts as two FLOPs. A 3x3 convolution with ``C`` input and output
channels on an ``H x W`` map therefore costs ``2 * 9 * C^2 * H * W =
18 C^2 HW`` FLOPs.

Costs are gathered by tracing a real forward pass: an op hook records the
shape of every primitive the network executes together with the module
path it was called from. Entries fall into three categories:

``conv``
    Convolutions and fully connected layers of the host network.
``attention``
    Convolutions inside attention-weight generators (MS-CAM and friends).
``pointwise``
    Activations, batch norm, pooling and elementwise arithmetic (one MAC
    per output element). Reported, but excluded from the overhead ratio.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as A
from .fusion import Fusion
from .layers import Module, current_path
from .networks import NetworkSpec, ResBlock
from .tensor import ConfigError, get_dtype

__all__ = [
    "ParamCount",
    "FlopsEntry",
    "FlopsReport",
    "count_params",
    "count_flops",
    "conv_flops",
    "overhead_ratio",
    "block_overhead",
]

# one MAC per output element; pure data movement costs nothing
_POINTWISE_OPS = {"batch_norm", "relu", "sigmoid", "add", "sub", "mul", "one_minus", "scale", "xent"}
_MOVEMENT_OPS = {"concat", "broadcast", "upsample2x"}


@dataclass
class ParamCount:
    """Trainable scalar counts: network total plus the recursive total of every module."""

    total: int
    per_module: Dict[str, int]

    def __int__(self) -> int:
        return self.total


def count_params(network: Module) -> ParamCount:
    """Count trainable scalars; batch-norm gamma/beta count, running statistics do not.

    >>> from affuse.layers import Conv2d
    >>> count_params(Conv2d(8, 8, 3)).total
    576
    """
    per = {}
    for path, mod in network.modules():
        per[path] = mod.num_parameters()
    return ParamCount(network.num_parameters(), per)


def conv_flops(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    """FLOPs of one convolution producing a ``c_out x h_out x w_out`` map (bias ignored)."""
    return 2 * k * k * c_in * c_out * h_out * w_out


@dataclass
class FlopsEntry:
    layer: str
    kind: str
    macs: int
    category: str
    block: str

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass
class FlopsReport:
    """Per-layer cost entries of one forward pass.

    ``overhead_percent`` is attention conv FLOPs over host conv FLOPs, in
    percent; pointwise work is excluded from both.
    """

    entries: List[FlopsEntry]
    input_shape: Tuple[int, ...]

    def total(self, category: Optional[str] = None) -> int:
        return sum(e.flops for e in self.entries if category is None or e.category == category)

    @property
    def macs(self) -> int:
        """MACs of convolutions and fully connected layers (host plus attention)."""
        return sum(e.macs for e in self.entries if e.category != "pointwise")

    @property
    def flops(self) -> int:
        """Accounted FLOPs: host plus attention convolutions; pointwise work is separate."""
        return self.conv_flops + self.attention_flops

    @property
    def all_flops(self) -> int:
        return self.total()

    @property
    def conv_flops(self) -> int:
        return self.total("conv")

    @property
    def attention_flops(self) -> int:
        return self.total("attention")

    @property
    def pointwise_flops(self) -> int:
        return self.total("pointwise")

    @property
    def overhead_percent(self) -> float:
        host = self.conv_flops
        return 100.0 * self.attention_flops / host if host else 0.0

    def block_subtotals(self) -> Dict[str, Dict[str, int]]:
        """FLOPs per block, split by category (insertion-ordered)."""
        out: Dict[str, Dict[str, int]] = {}
        for e in self.entries:
            d = out.setdefault(e.block, {"conv": 0, "attention": 0, "pointwise": 0})
            d[e.category] += e.flops
        return out

    def filter(self, prefix: str) -> "FlopsReport":
        """Entries whose layer path starts with ``prefix``."""
        return FlopsReport([e for e in self.entries if e.layer.startswith(prefix)], self.input_shape)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "entries": [{"layer": e.layer, "kind": e.kind, "category": e.category, "block": e.block,
                         "macs": e.macs, "flops": e.flops} for e in self.entries],
            "blocks": [{"layer": name, "subtotal": sum(d.values()), **{f"{k}_flops": v for k, v in d.items()}}
                       for name, d in self.block_subtotals().items()],
            "subtotal": {"conv": self.conv_flops, "attention": self.attention_flops,
                         "pointwise": self.pointwise_flops, "total": self.flops,
                         "total_with_pointwise": self.all_flops},
            "overhead_percent": round(self.overhead_percent, 2),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, layers: bool = True) -> str:
        lines = []
        if layers:
            lines.append(f"{'layer':<48} {'kind':<11} {'category':<10} {'macs':>14} {'flops':>14}")
            for e in self.entries:
                if e.category != "pointwise":
                    lines.append(f"{e.layer:<48} {e.kind:<11} {e.category:<10} {e.macs:>14,} {e.flops:>14,}")
            lines.append("")
        lines.append(f"{'block':<48} {'conv':>14} {'attention':>14} {'pointwise':>14}")
        for name, d in self.block_subtotals().items():
            lines.append(f"{name:<48} {d['conv']:>14,} {d['attention']:>14,} {d['pointwise']:>14,}")
        lines.append("")
        lines.append(f"conv FLOPs       {self.conv_flops:>16,}")
        lines.append(f"attention FLOPs  {self.attention_flops:>16,}")
        lines.append(f"pointwise FLOPs  {self.pointwise_flops:>16,}")
        lines.append(f"overhead         {self.overhead_percent:>15.2f}%")
        return "\n".join(lines)


_BLOCK_RE = re.compile(r"^(.*?blocks\d+)(\.|$)")


def _block_of(path: str) -> str:
    m = _BLOCK_RE.match(path)
    if m:
        return m.group(1)
    return path.split(".", 1)[0] if path else "<network>"


def _macs(op: str, value: np.ndarray, parents: Sequence[A.Var]) -> Optional[int]:
    if op == "conv2d":
        w = parents[1].value
        n, _, ho, wo = value.shape
        return int(n * w.size * ho * wo)
    if op == "fc":
        w = parents[1].value
        return int(value.shape[0] * w.size)
    if op == "gap":
        return int(parents[0].value.size)
    if op in _POINTWISE_OPS:
        return int(value.size)
    if op in _MOVEMENT_OPS:
        return 0
    return None


def count_flops(network: Module, input_shape: Sequence[int]) -> FlopsReport:
    """Trace one eval-mode forward pass on zeros of ``input_shape`` and tabulate its cost.

    MAC counts scale with the batch size ``input_shape[0]``. Training
    flags and batch-norm running statistics are left untouched.
    """
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 4:
        raise ConfigError(f"input_shape must be N x C x H x W, got {input_shape}")
    entries: List[FlopsEntry] = []

    def hook(op, value, parents):
        macs = _macs(op, value, parents)
        if macs is None:
            return
        path, cat = current_path()
        if op in ("conv2d", "fc"):
            category = "attention" if cat == "attention" else "conv"
            layer = path
        else:
            category = "pointwise"
            layer = f"{path}:{op}" if path else op
        entries.append(FlopsEntry(layer, op, macs, category, _block_of(path)))

    modes = [(m, m.training) for _, m in network.modules()]
    network.eval()
    prev = A.set_op_hook(hook)
    try:
        network(A.Var(np.zeros(input_shape, dtype=get_dtype())))
    finally:
        A.set_op_hook(prev)
        for m, t in modes:
            m.training = t
    return FlopsReport(entries, input_shape)


def block_overhead(block: ResBlock, input_shape: Sequence[int]) -> Tuple[int, int]:
    """(host conv FLOPs, per-pixel attention FLOPs) of one basic block.

    The host count covers the two 3x3 convolutions (the shortcut
    projection is left out); the attention count covers the point-wise
    convolutions of every local (per-pixel) context branch. Global
    branches act on a 1x1 map, so their cost does not grow with ``H W``
    and is left out as well.
    """
    rep = count_flops(block, input_shape)
    host = sum(e.flops for e in rep.entries
               if e.category == "conv" and e.layer.split(".")[-1] in ("conv1", "conv2"))
    local = {m._path for _, fus in block.modules() if isinstance(fus, Fusion)
             for cam in fus.cams for _, m in cam.modules() if getattr(m, "scale", None) == "local"}
    att = sum(e.flops for e in rep.entries
              if e.category == "attention" and any(e.layer.startswith(p + ".") for p in local))
    return host, att


def _basic_ratio(doubling: bool, r: int) -> float:
    c = 4 * r  # smallest width that keeps both C and 2C divisible by r
    h = 8
    spec = NetworkSpec(fusion="aff", r=r, base_channels=c)
    c_out, stride = (2 * c, 2) if doubling else (c, 1)
    from .networks import build_resblock
    blk = build_resblock(spec, c, c_out, stride)
    host, att = block_overhead(blk, (1, c, h, h))
    return 100.0 * att / host


def _bottleneck_ratio(doubling: bool, r: int) -> float:
    # Analytic layout with inner width C and output width 4C: 1x1 reduce,
    # 3x3 (stride 2 when doubling), 1x1 expand; shortcut projections excluded.
    # MACs are in units of C^2 HW of the block input.
    if doubling:
        c_in, spatial_out = 2, 0.25
    else:
        c_in, spatial_out = 4, 1.0
    host = c_in * 1.0 + 9 * spatial_out + 4 * spatial_out
    att = 2 * 4 * (4 / r) * spatial_out  # two point-wise layers 4C <-> 4C/r per output pixel
    return 100.0 * att / host


def overhead_ratio(block_kind: str, doubling: bool, r: int = 4) -> float:
    """Attention overhead of one fusion module relative to its host block, in percent (2 decimals).

    ``"basic"`` is measured on a real residual block; ``"bottleneck"``
    uses an analytic layout (inner width ``C``, output ``4C``).

    >>> overhead_ratio("basic", doubling=True, r=4)
    3.7
    >>> overhead_ratio("basic", doubling=False, r=4)
    2.78
    """
    if r <= 0:
        raise ConfigError(f"r must be positive, got {r}")
    if block_kind == "basic":
        return round(_basic_ratio(doubling, r), 2)
    if block_kind == "bottleneck":
        return round(_bottleneck_ratio(doubling, r), 2)
    raise ConfigError(f"block_kind must be 'basic' or 'bottleneck', got {block_kind!r}")
