"""Host networks for the three fusion scenarios.

* ``short_skip`` -- ResNet-20-b: fusion joins identity (X) and residual (Y).
* ``same_layer`` -- Inception-ResNet-20-b: fusion joins a 3x3 branch (X)
  and a 5x5 branch (Y) inside each block.
* ``long_skip`` -- ResNet-20-b + FPN: fusion joins the lateral low-level
  map (X) and the upsampled high-level map (Y) on the top-down path.

The Inception-ResNet-20-b interior is a reconstruction: the ResNet-20-b
skeleton with each block's second 3x3 conv replaced by parallel 3x3/5x5
branches.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as A
from .autodiff import Var
from .fusion import KINDS, Fusion
from .layers import BatchNorm2d, Conv2d, Linear, Module
from .tensor import ConfigError, DimensionError

__all__ = [
    "SCENARIOS",
    "POLICIES",
    "NetworkSpec",
    "BlockInfo",
    "ResBlock",
    "InceptionBlock",
    "Classifier",
    "FPNSegmenter",
    "build_resblock",
    "build_inception_block",
    "build_classifier",
    "build_fpn_segmenter",
    "build_network",
    "forward_classify",
    "count_blocks",
]

SCENARIOS = ("same_layer", "short_skip", "long_skip")
POLICIES = ("all", "last_two_stages", "none")


@dataclass
class NetworkSpec:
    """Declarative description of a host network."""

    scenario: str = "short_skip"
    b: int = 1
    base_channels: int = 16
    multipliers: Tuple[int, ...] = (1, 2, 4)
    fusion: str = "add"
    r: int = 4
    num_classes: int = 20
    policy: str = "all"
    in_channels: int = 3
    branch_scales: Tuple[str, str] = ("global", "local")
    zero_init_attention: bool = False

    def __post_init__(self):
        self.multipliers = tuple(int(m) for m in self.multipliers)
        self.branch_scales = tuple(self.branch_scales)
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.fusion not in KINDS:
            raise ConfigError(f"fusion must be one of {KINDS}, got {self.fusion!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        for name in ("b", "base_channels", "r", "num_classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.multipliers:
            raise ConfigError("multipliers must name at least one stage")
        widths = self.stage_channels
        if self.scenario == "long_skip":
            widths = [self.base_channels]
        for c in widths:
            if c % self.r:
                raise ConfigError(f"stage width {c} is not divisible by r={self.r}")

    @property
    def stage_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.multipliers]

    @property
    def num_stages(self) -> int:
        return len(self.multipliers)

    def stage_is_attentional(self, stage: int) -> bool:
        if self.policy == "none":
            return False
        if self.policy == "last_two_stages":
            return stage >= self.num_stages - 2
        return True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["multipliers"] = list(self.multipliers)
        d["branch_scales"] = list(self.branch_scales)
        return d


@dataclass
class BlockInfo:
    name: str
    kind: str
    stage: int
    in_channels: int
    out_channels: int
    stride: int
    fusion: str
    active: bool


def _fusion(spec: NetworkSpec, kind: str, channels: int, rng) -> Fusion:
    return Fusion(kind, channels, spec.r, spec.branch_scales,
                  zero_init=spec.zero_init_attention, rng=rng)


class _Shortcut(Module):
    """Identity, or 1x1 projection + BN when channels/resolution change."""

    def __init__(self, c_in, c_out, stride, rng):
        if c_in != c_out or stride != 1:
            self.conv = Conv2d(c_in, c_out, 1, stride=stride, padding=0, rng=rng)
            self.bn = BatchNorm2d(c_out)
        else:
            self.conv = None

    def forward(self, x):
        return x if self.conv is None else self.bn(self.conv(x))


class ResBlock(Module):
    """Basic block: ``relu(fuse(shortcut(x), bn(conv(relu(bn(conv(x)))))))``."""

    def __init__(self, c_in: int, c_out: int, stride: int, fusion: Fusion, rng=None):
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng=rng)
        self.bn2 = BatchNorm2d(c_out)
        self.shortcut = _Shortcut(c_in, c_out, stride, rng)
        self.fusion = fusion

    def residual(self, x: Var) -> Var:
        return self.bn2(self.conv2(A.relu(self.bn1(self.conv1(x)))))

    def forward(self, x: Var) -> Var:
        return A.relu(self.fusion(self.shortcut(x), self.residual(x)))


class InceptionBlock(Module):
    """Same-layer block: a 3x3 branch (X) and a 5x5 branch (Y) fused, inside a residual wrapper."""

    def __init__(self, c_in: int, c_out: int, stride: int, fusion: Fusion, rng=None):
        if stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {stride}")
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, rng=rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv3 = Conv2d(c_out, c_out, 3, rng=rng)
        self.bn3 = BatchNorm2d(c_out)
        self.conv5 = Conv2d(c_out, c_out, 5, rng=rng)
        self.bn5 = BatchNorm2d(c_out)
        self.shortcut = _Shortcut(c_in, c_out, stride, rng)
        self.fusion = fusion

    def branches(self, x: Var) -> Tuple[Var, Var]:
        h = A.relu(self.bn1(self.conv1(x)))
        return A.relu(self.bn3(self.conv3(h))), A.relu(self.bn5(self.conv5(h)))

    def forward(self, x: Var) -> Var:
        bx, by = self.branches(x)
        return A.relu(A.add(self.shortcut(x), self.fusion(bx, by)))


class _Stem(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv = Conv2d(c_in, c_out, 3, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return A.relu(self.bn(self.conv(x)))


def _stages(spec: NetworkSpec, block_cls, rng, fusion_for_stage) -> List[List[Module]]:
    stages = []
    c_in = spec.base_channels
    for s, c_out in enumerate(spec.stage_channels):
        blocks = []
        for i in range(spec.b):
            stride = 2 if (s > 0 and i == 0) else 1
            blocks.append(block_cls(c_in, c_out, stride, fusion_for_stage(s, c_out), rng))
            c_in = c_out
        stages.append(blocks)
    return stages


class Classifier(Module):
    """stem -> stages of blocks -> GAP -> FC."""

    def __init__(self, spec: NetworkSpec, rng: Optional[np.random.Generator] = None):
        if spec.scenario not in ("short_skip", "same_layer"):
            raise ConfigError(f"classifier needs short_skip or same_layer, got {spec.scenario!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        block_cls = ResBlock if spec.scenario == "short_skip" else InceptionBlock
        self.stem = _Stem(spec.in_channels, spec.base_channels, rng)

        def fusion_for(stage, c):
            kind = spec.fusion if spec.stage_is_attentional(stage) else "add"
            return _fusion(spec, kind, c, rng)

        self.stages = [_Sequence(blocks) for blocks in _stages(spec, block_cls, rng, fusion_for)]
        self.head = Linear(spec.stage_channels[-1], spec.num_classes, rng=rng)
        self.assign_names()

    def forward(self, x: Var) -> Var:
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"input has {x.shape[1]} channels, network expects {self.spec.in_channels}")
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
        return self.head(A.global_avg_pool(h))


class _Sequence(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


class _Lateral(Module):
    """1x1 channel projection of a backbone level onto the pyramid width."""

    def __init__(self, c_in, c_out, rng):
        self.conv = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return self.bn(self.conv(x))


class FPNSegmenter(Module):
    """ResNet-20-b backbone with a top-down pyramid; per-pixel logits at input resolution.

    Backbone blocks use plain addition; the strategy under test fuses each
    lateral map (X) with the upsampled coarser map (Y).
    """

    def __init__(self, spec: NetworkSpec, rng: Optional[np.random.Generator] = None):
        if spec.scenario != "long_skip":
            raise ConfigError(f"FPN segmenter needs scenario long_skip, got {spec.scenario!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        width = spec.base_channels
        self.stem = _Stem(spec.in_channels, width, rng)
        self.stages = [_Sequence(blocks) for blocks in
                       _stages(spec, ResBlock, rng, lambda s, c: _fusion(spec, "add", c, rng))]
        self.laterals = [_Lateral(c, width, rng) for c in spec.stage_channels]
        kind = spec.fusion if spec.policy != "none" else "add"
        self.merges = [_fusion(spec, kind, width, rng) for _ in range(spec.num_stages - 1)]
        self.head = Conv2d(width, spec.num_classes, 1, bias=True, rng=rng)
        self.assign_names()

    @property
    def reduction(self) -> int:
        return 2 ** (self.spec.num_stages - 1)

    def forward(self, x: Var) -> Var:
        h, w = x.shape[2:]
        if h % self.reduction or w % self.reduction:
            raise ConfigError(f"input size {h}x{w} must be divisible by {self.reduction}")
        feats = []
        h = self.stem(x)
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        p = self.laterals[-1](feats[-1])
        for level in range(len(feats) - 2, -1, -1):
            lateral = self.laterals[level](feats[level])
            p = self.merges[level](lateral, A.upsample2x(p))
        return self.head(p)


def build_resblock(spec: NetworkSpec, in_c: int, out_c: int, stride: int,
                   rng: Optional[np.random.Generator] = None) -> ResBlock:
    rng = rng if rng is not None else np.random.default_rng(0)
    return ResBlock(in_c, out_c, stride, _fusion(spec, spec.fusion, out_c, rng), rng).assign_names()


def build_inception_block(spec: NetworkSpec, c: int, in_c: Optional[int] = None, stride: int = 1,
                          rng: Optional[np.random.Generator] = None) -> InceptionBlock:
    if c % spec.r:
        raise ConfigError(f"channels {c} not divisible by r={spec.r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return InceptionBlock(in_c or c, c, stride, _fusion(spec, spec.fusion, c, rng), rng).assign_names()


def build_classifier(spec: NetworkSpec, rng: Optional[np.random.Generator] = None) -> Classifier:
    return Classifier(spec, rng)


def build_fpn_segmenter(spec: NetworkSpec, rng: Optional[np.random.Generator] = None) -> FPNSegmenter:
    return FPNSegmenter(spec, rng)


def build_network(spec: NetworkSpec, rng: Optional[np.random.Generator] = None) -> Module:
    if spec.scenario == "long_skip":
        return FPNSegmenter(spec, rng)
    return Classifier(spec, rng)


def forward_classify(network: Classifier, batch) -> np.ndarray:
    """Logits ``N x K`` for an ``N x C x H x W`` batch."""
    return network(A.constant(batch)).value[:, :, 0, 0]


def count_blocks(spec: NetworkSpec) -> List[BlockInfo]:
    """Inventory of every fusion site and whether attentional fusion is active there."""
    out = []
    attentional = spec.fusion not in ("add",)
    kind = "inception" if spec.scenario == "same_layer" else "resblock"
    c_in = spec.base_channels
    for s, c_out in enumerate(spec.stage_channels):
        for i in range(spec.b):
            stride = 2 if (s > 0 and i == 0) else 1
            if spec.scenario == "long_skip":
                fusion, active = "add", False
            else:
                active = attentional and spec.stage_is_attentional(s)
                fusion = spec.fusion if spec.stage_is_attentional(s) else "add"
            out.append(BlockInfo(f"stages{s}.blocks{i}", kind, s, c_in, c_out, stride, fusion, active))
            c_in = c_out
    if spec.scenario == "long_skip":
        w = spec.base_channels
        for level in range(spec.num_stages - 2, -1, -1):
            active = attentional and spec.policy != "none"
            out.append(BlockInfo(f"merges{level}", "fpn_merge", level, w, w, 1,
                                 spec.fusion if spec.policy != "none" else "add", active))
    return out
