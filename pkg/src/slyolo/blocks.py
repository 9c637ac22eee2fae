"""Building blocks for the detector family.

Every block follows the Conv→BN→SiLU convention of the YOLOv8 lineage.  The
lightweight pieces are DCB (standard 3x3 → depthwise 3x3 → pointwise 1x1 →
RepVGGDW), its C2f carrier C2fDCB, and the SCDown downsampler (pointwise
channel compression followed by a strided depthwise conv).  RepVGGDW trains
with parallel depthwise 3x3 + 1x1 + identity-BN branches and fuses into a
single depthwise 3x3 for deployment.

Blocks validate their shape contracts at forward time and expose
``out_spec(TensorSpec)`` so shape propagation can be checked against real
forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError, StateError

BN_EPS = 1e-3
BN_MOMENTUM = 0.03

BLOCK_KINDS = (
    "ConvBNAct",
    "C3",
    "C2f",
    "C2fDCB",
    "DCB",
    "RepVGGDW",
    "SCDown",
    "SPPF",
    "Upsample",
    "Concat",
    "DetectHead",
)


@dataclass(frozen=True)
class TensorSpec:
    """Channel/height/width descriptor used for shape propagation and FLOP accounting."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"TensorSpec.{name} must be a positive integer, got {v!r}")

    def downsample(self, stride: int) -> "TensorSpec":
        if self.height % stride or self.width % stride:
            raise ShapeError(
                f"spatial dims {self.height}x{self.width} not divisible by stride {stride}"
            )
        return TensorSpec(self.channels, self.height // stride, self.width // stride)

    def with_channels(self, channels: int) -> "TensorSpec":
        return TensorSpec(channels, self.height, self.width)

    @staticmethod
    def of(x: torch.Tensor) -> "TensorSpec":
        return TensorSpec(int(x.shape[-3]), int(x.shape[-2]), int(x.shape[-1]))


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one block, validated against the block invariants."""

    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    groups: int = 1
    repeat: int = 1
    shortcut: bool = True

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if min(self.in_channels, self.out_channels, self.stride, self.groups, self.repeat) < 1:
            raise ConfigError(f"non-positive field in {self}")
        if self.kernel not in (1, 3, 5, 7):
            raise ConfigError(f"kernel must be one of 1/3/5/7, got {self.kernel}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in={self.in_channels} and out={self.out_channels}"
            )

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels

    def build(self) -> nn.Module:
        """Materialize the described block."""
        k = self.kind
        if k == "ConvBNAct":
            return ConvBNAct(self.in_channels, self.out_channels, self.kernel, self.stride, g=self.groups)
        if k == "C3":
            return C3(self.in_channels, self.out_channels, n=self.repeat, shortcut=self.shortcut)
        if k == "C2f":
            return C2f(self.in_channels, self.out_channels, n=self.repeat, shortcut=self.shortcut)
        if k == "C2fDCB":
            return C2fDCB(self.in_channels, self.out_channels, n=self.repeat, shortcut=self.shortcut)
        if k == "DCB":
            if self.in_channels != self.out_channels:
                raise ConfigError("DCB is channel-preserving")
            return DCB(self.in_channels, shortcut=self.shortcut)
        if k == "RepVGGDW":
            if self.in_channels != self.out_channels:
                raise ConfigError("RepVGGDW is channel-preserving")
            return RepVGGDW(self.in_channels)
        if k == "SCDown":
            return SCDown(self.in_channels, self.out_channels, k=self.kernel, s=self.stride)
        if k == "SPPF":
            return SPPF(self.in_channels, self.out_channels, k=5)
        if k == "Upsample":
            return Upsample()
        if k == "Concat":
            return Concat()
        raise ConfigError(f"{k} is assembled by the model builder, not LayerSpec.build()")


def autopad(k: int) -> int:
    return k // 2


def fuse_conv_bn_tensors(weight, bn_mean, bn_var, bn_weight, bn_bias, eps, conv_bias=None):
    """Fold batch-norm statistics into conv weights.

    Returns ``(fused_weight, fused_bias)`` such that
    ``conv(x, fused_weight) + fused_bias == bn(conv(x, weight) + conv_bias)``.
    """
    var_eps = bn_var + eps
    if torch.any(var_eps <= 0):
        raise NumericError("variance + eps must be positive for bn folding")
    scale = bn_weight / torch.sqrt(var_eps)
    fused_weight = weight * scale.reshape(-1, *([1] * (weight.dim() - 1)))
    base = conv_bias if conv_bias is not None else torch.zeros_like(bn_mean)
    fused_bias = bn_bias + (base - bn_mean) * scale
    return fused_weight, fused_bias


def fuse_conv_bn(conv: nn.Conv2d, bn: nn.BatchNorm2d) -> nn.Conv2d:
    """Return a bias-carrying Conv2d equivalent to ``bn(conv(.))``."""
    fused = nn.Conv2d(
        conv.in_channels,
        conv.out_channels,
        conv.kernel_size,
        conv.stride,
        conv.padding,
        dilation=conv.dilation,
        groups=conv.groups,
        bias=True,
    ).to(dtype=conv.weight.dtype, device=conv.weight.device)
    w, b = fuse_conv_bn_tensors(
        conv.weight.data,
        bn.running_mean.data,
        bn.running_var.data,
        bn.weight.data,
        bn.bias.data,
        bn.eps,
        None if conv.bias is None else conv.bias.data,
    )
    fused.weight.data.copy_(w)
    fused.bias.data.copy_(b)
    return fused


class ConvBNAct(nn.Module):
    """Conv2d + BatchNorm + SiLU (activation optional for bn-only stages)."""

    def __init__(self, c1, c2, k=1, s=1, p=None, g=1, act=True):
        super().__init__()
        if c1 % g or c2 % g:
            raise ConfigError(f"groups={g} must divide c1={c1} and c2={c2}")
        self.conv = nn.Conv2d(c1, c2, k, s, autopad(k) if p is None else p, groups=g, bias=False)
        self.bn = nn.BatchNorm2d(c2, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.act = nn.SiLU() if act else nn.Identity()

    def _check(self, x):
        if x.shape[-3] != self.conv.in_channels:
            raise ConfigError(
                f"expected {self.conv.in_channels} input channels, got {x.shape[-3]}"
            )
        s = self.conv.stride[0]
        if s > 1 and (x.shape[-2] % s or x.shape[-1] % s):
            raise ShapeError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by stride {s}"
            )

    def forward(self, x):
        self._check(x)
        return self.act(self.bn(self.conv(x)))

    def fuse(self):
        """Fold bn into the conv in place."""
        if isinstance(self.bn, nn.Identity):
            raise StateError("ConvBNAct already fused")
        self.conv = fuse_conv_bn(self.conv, self.bn)
        self.bn = nn.Identity()
        return self

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        if spec.channels != self.conv.in_channels:
            raise ConfigError(f"expected {self.conv.in_channels} channels, got {spec.channels}")
        return spec.downsample(self.conv.stride[0]).with_channels(self.conv.out_channels)


class Bottleneck(nn.Module):
    """Two-conv residual bottleneck used inside C3/C2f."""

    def __init__(self, c1, c2, shortcut=True, k=(3, 3), e=1.0):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = ConvBNAct(c1, c_, k[0], 1)
        self.cv2 = ConvBNAct(c_, c2, k[1], 1)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        return self.cv2.out_spec(self.cv1.out_spec(spec))


class C2f(nn.Module):
    """Split / stack / concat / merge cross-stage block."""

    inner = staticmethod(lambda c, shortcut: Bottleneck(c, c, shortcut, k=(3, 3), e=1.0))

    def __init__(self, c1, c2, n=1, shortcut=False, e=0.5):
        super().__init__()
        self.c = int(c2 * e)
        self.cv1 = ConvBNAct(c1, 2 * self.c, 1, 1)
        self.cv2 = ConvBNAct((2 + n) * self.c, c2, 1, 1)
        self.m = nn.ModuleList(self.inner(self.c, shortcut) for _ in range(n))

    def forward(self, x):
        y = list(self.cv1(x).chunk(2, 1))
        y.extend(m(y[-1]) for m in self.m)
        return self.cv2(torch.cat(y, 1))

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        spec = self.cv1.out_spec(spec)
        return spec.with_channels(self.cv2.conv.out_channels)


class C3(nn.Module):
    """CSP block with three 1x1 convs and a sequential bottleneck stack."""

    def __init__(self, c1, c2, n=1, shortcut=True, e=0.5):
        super().__init__()
        c_ = int(c2 * e)
        self.cv1 = ConvBNAct(c1, c_, 1, 1)
        self.cv2 = ConvBNAct(c1, c_, 1, 1)
        self.cv3 = ConvBNAct(2 * c_, c2, 1, 1)
        self.m = nn.Sequential(*(Bottleneck(c_, c_, shortcut, k=(1, 3), e=1.0) for _ in range(n)))

    def forward(self, x):
        return self.cv3(torch.cat((self.m(self.cv1(x)), self.cv2(x)), 1))

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        return spec.with_channels(self.cv3.conv.out_channels)


class RepVGGDW(nn.Module):
    """Multi-branch depthwise block: 3x3 + 1x1 + identity BN, fusable into one 3x3.

    Training-time forward sums the three branches and applies SiLU.  ``fuse()``
    re-parameterizes the branches into a single biased depthwise 3x3, after
    which the branch modules are dropped.
    """

    def __init__(self, c, identity=True):
        super().__init__()
        self.c = c
        self.conv3 = ConvBNAct(c, c, 3, 1, g=c, act=False)
        self.conv1 = ConvBNAct(c, c, 1, 1, g=c, act=False)
        self.bn_id = nn.BatchNorm2d(c, eps=BN_EPS, momentum=BN_MOMENTUM) if identity else None
        self.act = nn.SiLU()
        self.fused_conv = None

    @property
    def is_fused(self) -> bool:
        return self.fused_conv is not None

    def forward(self, x):
        if self.is_fused:
            return self.act(self.fused_conv(x))
        y = self.conv3(x) + self.conv1(x)
        if self.bn_id is not None:
            y = y + self.bn_id(x)
        return self.act(y)

    def _fold_branch(self, branch: ConvBNAct):
        return fuse_conv_bn_tensors(
            branch.conv.weight.data,
            branch.bn.running_mean.data,
            branch.bn.running_var.data,
            branch.bn.weight.data,
            branch.bn.bias.data,
            branch.bn.eps,
        )

    def fuse(self):
        """Collapse the branches into a single depthwise 3x3 with bias."""
        if self.is_fused:
            raise StateError("RepVGGDW already fused")
        w3, b3 = self._fold_branch(self.conv3)
        w1, b1 = self._fold_branch(self.conv1)
        w = w3 + F.pad(w1, [1, 1, 1, 1])
        b = b3 + b1
        if self.bn_id is not None:
            id_kernel = torch.zeros_like(w3)
            id_kernel[:, :, 1, 1] = 1.0
            wi, bi = fuse_conv_bn_tensors(
                id_kernel,
                self.bn_id.running_mean.data,
                self.bn_id.running_var.data,
                self.bn_id.weight.data,
                self.bn_id.bias.data,
                self.bn_id.eps,
            )
            w = w + wi
            b = b + bi
        fused = nn.Conv2d(self.c, self.c, 3, 1, 1, groups=self.c, bias=True).to(
            dtype=w.dtype, device=w.device
        )
        fused.weight.data.copy_(w)
        fused.bias.data.copy_(b)
        self.fused_conv = fused
        del self.conv3, self.conv1, self.bn_id
        self.conv3 = self.conv1 = self.bn_id = None
        return self

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        if spec.channels != self.c:
            raise ConfigError(f"expected {self.c} channels, got {spec.channels}")
        return spec


class DCB(nn.Module):
    """Depthwise convolution block: 3x3 conv → depthwise 3x3 → pointwise 1x1 → RepVGGDW.

    Channel-preserving, stride 1 throughout.  The depthwise stage carries bn
    only; the standard and pointwise stages carry bn + SiLU.  A residual add
    is applied when ``shortcut`` is set (channels always match by design).
    """

    def __init__(self, c, shortcut=True):
        super().__init__()
        self.cv1 = ConvBNAct(c, c, 3, 1)
        self.dw = ConvBNAct(c, c, 3, 1, g=c, act=False)
        self.pw = ConvBNAct(c, c, 1, 1)
        self.rep = RepVGGDW(c)
        self.add = shortcut

    def forward(self, x):
        y = self.rep(self.pw(self.dw(self.cv1(x))))
        return x + y if self.add else y

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        return self.rep.out_spec(self.pw.out_spec(self.dw.out_spec(self.cv1.out_spec(spec))))


class C2fDCB(C2f):
    """C2f with DCB inner blocks in place of the bottlenecks."""

    inner = staticmethod(lambda c, shortcut: DCB(c, shortcut=shortcut))


class SCDown(nn.Module):
    """Downsampler: 1x1 conv compresses c1→c2, then a strided depthwise k x k conv."""

    def __init__(self, c1, c2, k=3, s=2):
        super().__init__()
        self.cv1 = ConvBNAct(c1, c2, 1, 1)
        self.cv2 = ConvBNAct(c2, c2, k, s, g=c2, act=False)

    def forward(self, x):
        return self.cv2(self.cv1(x))

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        return self.cv2.out_spec(self.cv1.out_spec(spec))


class SPPF(nn.Module):
    """Spatial pyramid pooling (fast): three chained max-pools over a 1x1-compressed map."""

    def __init__(self, c1, c2, k=5):
        super().__init__()
        c_ = c1 // 2
        self.cv1 = ConvBNAct(c1, c_, 1, 1)
        self.cv2 = ConvBNAct(c_ * 4, c2, 1, 1)
        self.m = nn.MaxPool2d(kernel_size=k, stride=1, padding=k // 2)

    def forward(self, x):
        y = [self.cv1(x)]
        y.extend(self.m(y[-1]) for _ in range(3))
        return self.cv2(torch.cat(y, 1))

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        return spec.with_channels(self.cv2.conv.out_channels)


class Upsample(nn.Module):
    """Nearest-neighbor x2 upsampling."""

    def forward(self, x):
        return F.interpolate(x, scale_factor=2.0, mode="nearest")

    def out_spec(self, spec: TensorSpec) -> TensorSpec:
        return TensorSpec(spec.channels, spec.height * 2, spec.width * 2)


class Concat(nn.Module):
    """Channel concatenation; all inputs must share spatial dims."""

    def forward(self, xs):
        h, w = xs[0].shape[-2:]
        for x in xs[1:]:
            if x.shape[-2:] != (h, w):
                raise ShapeError(
                    f"concat inputs disagree on spatial dims: {(h, w)} vs {tuple(x.shape[-2:])}"
                )
        return torch.cat(xs, 1)

    def out_spec(self, specs) -> TensorSpec:
        h, w = specs[0].height, specs[0].width
        for s in specs[1:]:
            if (s.height, s.width) != (h, w):
                raise ShapeError(f"concat specs disagree on spatial dims: {(h, w)} vs {(s.height, s.width)}")
        return TensorSpec(sum(s.channels for s in specs), h, w)
