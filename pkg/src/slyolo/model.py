"""Detector assembly: backbone, neck variants (PAN / BiFPN / HEPAN), detection head.

The baseline layout (``neck=pan, block=c2f, down=conv, p2=true``) reproduces
the YOLOv8s-p2 parameter/GFLOP budget.  The lightweight options swap modules
at designated slots:

* ``block`` selects the family of the deepest backbone stage block and the
  top-down P4 fusion node; all other stage/fusion blocks stay C2f.
* ``down`` selects the downsampler entering the deepest backbone stage; all
  other downsamples stay dense stride-2 convs.
* HEPAN adds 1x1 lateral convs on the mid-level backbone taps (B3, B4),
  residual edges from those laterals into the bottom-up P3/P4 fusion outputs,
  and one extra C2f fusion node on the bottom-up P4 path.
* BiFPN adds same-level skip edges from backbone taps into the bottom-up
  fusion nodes, each node combining its inputs with softplus-positive
  per-edge weights normalized by their sum.

These placements were sized so the measured parameter/GFLOP deltas of each
option match the published ablation budget of the architecture family.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .blocks import C2f, C3, C2fDCB, Concat, ConvBNAct, RepVGGDW, SCDown, SPPF, Upsample
from .errors import ConfigError, ShapeError, StateError

NECKS = ("pan", "bifpn", "hepan")
BLOCKS = ("c3", "c2f", "c2fdcb")
DOWNS = ("conv", "scdown")

# base (width-1.0) channel plan and stage repeats of the YOLOv8 lineage
BASE_STAGE_CHANNELS = (128, 256, 512, 1024)  # P2..P5
BASE_STAGE_REPEATS = (3, 6, 6, 3)
BASE_STEM_CHANNELS = 64
BASE_NECK_REPEATS = 3


@dataclass
class ModelConfig:
    neck: str = "hepan"
    block: str = "c2fdcb"
    down: str = "scdown"
    p2: bool = True
    width: float = 0.5
    depth: float = 0.33
    max_channels: int = 1024
    nc: int = 10
    reg_max: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.neck not in NECKS:
            raise ConfigError(f"neck must be one of {NECKS}, got {self.neck!r}")
        if self.block not in BLOCKS:
            raise ConfigError(f"block must be one of {BLOCKS}, got {self.block!r}")
        if self.down not in DOWNS:
            raise ConfigError(f"down must be one of {DOWNS}, got {self.down!r}")
        if not isinstance(self.p2, bool):
            raise ConfigError(f"p2 must be a boolean, got {self.p2!r}")
        if not 0 < self.width <= 1:
            raise ConfigError(f"width must lie in (0, 1], got {self.width}")
        if not 0 < self.depth <= 1:
            raise ConfigError(f"depth must lie in (0, 1], got {self.depth}")
        if int(self.max_channels) < 8:
            raise ConfigError(f"max_channels must be >= 8, got {self.max_channels}")
        if int(self.nc) < 1:
            raise ConfigError(f"nc must be >= 1, got {self.nc}")
        if int(self.reg_max) < 1:
            raise ConfigError(f"reg_max must be >= 1, got {self.reg_max}")
        self.max_channels = int(self.max_channels)
        self.nc = int(self.nc)
        self.reg_max = int(self.reg_max)

    def channels(self, base: int) -> int:
        """Scale a base channel count: clamp, multiply, round to nearest 8 (floor 8)."""
        scaled = min(base, self.max_channels) * self.width
        return max(8, int(round(scaled / 8)) * 8)

    def repeats(self, base: int) -> int:
        return max(1, math.ceil(base * self.depth))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "ModelConfig":
        with open(path) as f:
            try:
                doc = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"cannot parse {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a mapping of config keys")
        return cls.from_dict(doc)

    def to_yaml(self, path):
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    def apply_overrides(self, overrides: dict) -> "ModelConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            if key not in d:
                raise ConfigError(f"unknown override key {key!r}")
            current = d[key]
            if isinstance(current, bool):
                if str(value).lower() not in ("true", "false", "1", "0"):
                    raise ConfigError(f"override {key} expects a boolean, got {value!r}")
                value = str(value).lower() in ("true", "1")
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
            d[key] = value
        return ModelConfig.from_dict(d)


def _family(block: str):
    return {"c3": C3, "c2f": C2f, "c2fdcb": C2fDCB}[block]


def _down_conv(c1, c2):
    return ConvBNAct(c1, c2, 3, 2)


@dataclass(frozen=True)
class FeatureLevel:
    """One pyramid level; for a 640 input, map sizes are 160/80/40/20."""

    name: str
    stride: int

    def map_size(self, image_size: int) -> int:
        return image_size // self.stride


FEATURE_LEVELS = {
    "P2": FeatureLevel("P2", 4),
    "P3": FeatureLevel("P3", 8),
    "P4": FeatureLevel("P4", 16),
    "P5": FeatureLevel("P5", 32),
}


@dataclass
class RawPrediction:
    """Per-level head outputs: box-distribution logits and class logits."""

    box: list          # per level: (B, 4*reg_max, H, W)
    cls: list          # per level: (B, nc, H, W)
    strides: list
    reg_max: int
    nc: int

    def __post_init__(self):
        if not (len(self.box) == len(self.cls) == len(self.strides)):
            raise ConfigError("RawPrediction level counts disagree")


class Backbone(nn.Module):
    """Feature extractor emitting taps B2/B3/B4/B5 at strides 4/8/16/32."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_stem = cfg.channels(BASE_STEM_CHANNELS)
        cs = [cfg.channels(c) for c in BASE_STAGE_CHANNELS]
        ns = [cfg.repeats(r) for r in BASE_STAGE_REPEATS]
        family = _family(cfg.block)

        self.stem = ConvBNAct(3, c_stem, 3, 2)
        self.down2 = _down_conv(c_stem, cs[0])
        self.stage2 = C2f(cs[0], cs[0], n=ns[0], shortcut=True)
        self.down3 = _down_conv(cs[0], cs[1])
        self.stage3 = C2f(cs[1], cs[1], n=ns[1], shortcut=True)
        self.down4 = _down_conv(cs[1], cs[2])
        self.stage4 = C2f(cs[2], cs[2], n=ns[2], shortcut=True)
        # deepest stage: the lightweight slots
        self.down5 = SCDown(cs[2], cs[3], 3, 2) if cfg.down == "scdown" else _down_conv(cs[2], cs[3])
        self.stage5 = family(cs[3], cs[3], n=ns[3], shortcut=True)
        self.sppf = SPPF(cs[3], cs[3], k=5)
        self.tap_channels = (cs[0], cs[1], cs[2], cs[3])

    def forward(self, x):
        x = self.down2(self.stem(x))
        b2 = self.stage2(x)
        b3 = self.stage3(self.down3(b2))
        b4 = self.stage4(self.down4(b3))
        b5 = self.sppf(self.stage5(self.down5(b4)))
        return b2, b3, b4, b5


class FusionWeights(nn.Module):
    """Learnable non-negative per-edge weights, normalized by their sum + eps."""

    def __init__(self, n_edges, eps=1e-4):
        super().__init__()
        # softplus(raw) == 1 at init, one weight per incoming edge
        self.raw = nn.Parameter(torch.full((n_edges,), math.log(math.e - 1.0)))
        self.eps = eps

    def scales(self):
        w = F.softplus(self.raw)
        return w / (w.sum() + self.eps)

    def forward(self, xs):
        s = self.scales()
        return [x * s[i] for i, x in enumerate(xs)]


class PANNeck(nn.Module):
    """Path-aggregation neck: top-down then bottom-up fusion, optional P2 level."""

    def __init__(self, cfg: ModelConfig, tap_channels):
        super().__init__()
        self.p2 = cfg.p2
        c2, c3, c4, c5 = tap_channels
        n = cfg.repeats(BASE_NECK_REPEATS)
        family = _family(cfg.block)

        self.up = Upsample()
        self.cat = Concat()
        self.td4 = family(c5 + c4, c4, n=n, shortcut=False)   # lightweight slot
        self.td3 = C2f(c4 + c3, c3, n=n, shortcut=False)
        if self.p2:
            self.td2 = C2f(c3 + c2, c2, n=n, shortcut=False)
            self.down_n2 = _down_conv(c2, c2)
            self.bu3 = C2f(c2 + c3, c3, n=n, shortcut=False)
        self.down_n3 = _down_conv(c3, c3)
        self.bu4 = C2f(c3 + c4, c4, n=n, shortcut=False)
        self.down_n4 = _down_conv(c4, c4)
        self.bu5 = C2f(c4 + c5, c5, n=n, shortcut=False)
        self.out_channels = (c2, c3, c4, c5) if self.p2 else (c3, c4, c5)

    def forward(self, taps):
        b2, b3, b4, b5 = taps
        t4 = self.td4(self.cat([self.up(b5), b4]))
        t3 = self.td3(self.cat([self.up(t4), b3]))
        if self.p2:
            n2 = self.td2(self.cat([self.up(t3), b2]))
            n3 = self.bu3(self.cat([self.down_n2(n2), t3]))
        else:
            n3 = t3
        n4 = self.bu4(self.cat([self.down_n3(n3), t4]))
        n5 = self.bu5(self.cat([self.down_n4(n4), b5]))
        return (n2, n3, n4, n5) if self.p2 else (n3, n4, n5)


class BiFPNNeck(nn.Module):
    """PAN plus weighted same-level skip edges from backbone taps into bottom-up nodes."""

    def __init__(self, cfg: ModelConfig, tap_channels):
        super().__init__()
        self.p2 = cfg.p2
        c2, c3, c4, c5 = tap_channels
        n = cfg.repeats(BASE_NECK_REPEATS)
        family = _family(cfg.block)

        self.up = Upsample()
        self.cat = Concat()
        self.td4 = family(c5 + c4, c4, n=n, shortcut=False)
        self.td3 = C2f(c4 + c3, c3, n=n, shortcut=False)
        if self.p2:
            self.td2 = C2f(c3 + c2, c2, n=n, shortcut=False)
            self.down_n2 = _down_conv(c2, c2)
            self.w3 = FusionWeights(3)
            self.bu3 = C2f(c2 + c3 + c3, c3, n=n, shortcut=False)  # +skip from B3
        self.down_n3 = _down_conv(c3, c3)
        self.w4 = FusionWeights(3)
        self.bu4 = C2f(c3 + c4 + c4, c4, n=n, shortcut=False)      # +skip from B4
        self.down_n4 = _down_conv(c4, c4)
        self.w5 = FusionWeights(2)
        self.bu5 = C2f(c4 + c5, c5, n=n, shortcut=False)
        self.out_channels = (c2, c3, c4, c5) if self.p2 else (c3, c4, c5)

    def forward(self, taps):
        b2, b3, b4, b5 = taps
        t4 = self.td4(self.cat([self.up(b5), b4]))
        t3 = self.td3(self.cat([self.up(t4), b3]))
        if self.p2:
            n2 = self.td2(self.cat([self.up(t3), b2]))
            n3 = self.bu3(self.cat(self.w3([self.down_n2(n2), t3, b3])))
        else:
            n3 = t3
        n4 = self.bu4(self.cat(self.w4([self.down_n3(n3), t4, b4])))
        n5 = self.bu5(self.cat(self.w5([self.down_n4(n4), b5])))
        return (n2, n3, n4, n5) if self.p2 else (n3, n4, n5)


class HEPANNeck(nn.Module):
    """PAN plus mid-level lateral convs, residual cross edges, and an extra P4 fusion node."""

    def __init__(self, cfg: ModelConfig, tap_channels):
        super().__init__()
        self.p2 = cfg.p2
        c2, c3, c4, c5 = tap_channels
        n = cfg.repeats(BASE_NECK_REPEATS)
        family = _family(cfg.block)

        self.lat3 = ConvBNAct(c3, c3, 1, 1)
        self.lat4 = ConvBNAct(c4, c4, 1, 1)
        self.up = Upsample()
        self.cat = Concat()
        self.td4 = family(c5 + c4, c4, n=n, shortcut=False)
        self.td3 = C2f(c4 + c3, c3, n=n, shortcut=False)
        if self.p2:
            self.td2 = C2f(c3 + c2, c2, n=n, shortcut=False)
            self.down_n2 = _down_conv(c2, c2)
            self.bu3 = C2f(c2 + c3, c3, n=n, shortcut=False)
        self.down_n3 = _down_conv(c3, c3)
        self.bu4 = C2f(c3 + c4, c4, n=n, shortcut=False)
        self.aux4 = C2f(c4, c4, n=n, shortcut=False)
        self.down_n4 = _down_conv(c4, c4)
        self.bu5 = C2f(c4 + c5, c5, n=n, shortcut=False)
        self.out_channels = (c2, c3, c4, c5) if self.p2 else (c3, c4, c5)

    def forward(self, taps):
        b2, b3, b4, b5 = taps
        l3, l4 = self.lat3(b3), self.lat4(b4)
        t4 = self.td4(self.cat([self.up(b5), l4]))
        t3 = self.td3(self.cat([self.up(t4), l3]))
        if self.p2:
            n2 = self.td2(self.cat([self.up(t3), b2]))
            n3 = self.bu3(self.cat([self.down_n2(n2), t3])) + l3
        else:
            n3 = t3
        n4 = self.aux4(self.bu4(self.cat([self.down_n3(n3), t4])) + l4)
        n5 = self.bu5(self.cat([self.down_n4(n4), b5]))
        return (n2, n3, n4, n5) if self.p2 else (n3, n4, n5)


NECK_BUILDERS = {"pan": PANNeck, "bifpn": BiFPNNeck, "hepan": HEPANNeck}


class DetectHead(nn.Module):
    """Anchor-free head: per level, parallel box-distribution and class-logit stacks."""

    def __init__(self, nc, ch, reg_max=16):
        super().__init__()
        self.nc = nc
        self.reg_max = reg_max
        c_box = max(16, ch[0] // 4, 4 * reg_max)
        c_cls = max(ch[0], min(nc, 100))
        self.box_stems = nn.ModuleList(
            nn.Sequential(ConvBNAct(x, c_box, 3, 1), ConvBNAct(c_box, c_box, 3, 1),
                          nn.Conv2d(c_box, 4 * reg_max, 1))
            for x in ch
        )
        self.cls_stems = nn.ModuleList(
            nn.Sequential(ConvBNAct(x, c_cls, 3, 1), ConvBNAct(c_cls, c_cls, 3, 1),
                          nn.Conv2d(c_cls, nc, 1))
            for x in ch
        )

    def init_biases(self, strides, img_size=640):
        """Prior-aware bias init: keeps early training stable from scratch."""
        for stride, box, cls in zip(strides, self.box_stems, self.cls_stems):
            box[-1].bias.data.fill_(1.0)
            cls[-1].bias.data.fill_(math.log(5 / self.nc / (img_size / stride) ** 2))

    def forward(self, feats):
        return [(b(f), c(f)) for f, b, c in zip(feats, self.box_stems, self.cls_stems)]


class DetectionModel(nn.Module):
    """Backbone + neck + head assembled from a ModelConfig."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.neck = NECK_BUILDERS[cfg.neck](cfg, self.backbone.tap_channels)
        self.strides = (4, 8, 16, 32) if cfg.p2 else (8, 16, 32)
        self.head = DetectHead(cfg.nc, self.neck.out_channels, cfg.reg_max)
        self.head.init_biases(self.strides)
        self.fused = False

    def forward(self, x) -> RawPrediction:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input spatial dims {h}x{w} must be divisible by 32")
        feats = self.neck(self.backbone(x))
        levels = self.head(feats)
        return RawPrediction(
            box=[b for b, _ in levels],
            cls=[c for _, c in levels],
            strides=list(self.strides),
            reg_max=self.cfg.reg_max,
            nc=self.cfg.nc,
        )

    @property
    def feature_levels(self):
        names = ("P2", "P3", "P4", "P5") if self.cfg.p2 else ("P3", "P4", "P5")
        return tuple(FEATURE_LEVELS[n] for n in names)

    def level_index(self, name: str) -> int:
        """Index of a named level in the head outputs; P2 needs the P2 head enabled."""
        for i, level in enumerate(self.feature_levels):
            if level.name == name:
                return i
        raise ConfigError(f"level {name!r} not available (p2={self.cfg.p2})")

    def fuse(self):
        """Fold every conv+bn pair and re-parameterize every RepVGGDW branch set."""
        if self.fused:
            raise StateError("model already fused")
        for m in self.modules():
            if isinstance(m, (ConvBNAct, RepVGGDW)):
                m.fuse()
        self.fused = True
        return self


def build_model(cfg: ModelConfig, seed: int = 0) -> DetectionModel:
    """Construct a model with deterministic initialization."""
    torch.manual_seed(seed)
    return DetectionModel(cfg)


def fuse_model(model: DetectionModel) -> DetectionModel:
    return model.fuse()


def save_checkpoint(model: DetectionModel, path, extra: dict | None = None):
    """Single-file checkpoint: config document + flat dotted-path tensor map."""
    payload = {
        "config": model.cfg.to_dict(),
        "fused": model.fused,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, seed: int = 0):
    """Rebuild a model from a checkpoint; returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    for key in ("config", "fused", "state_dict"):
        if key not in payload:
            raise ConfigError(f"checkpoint {path} missing key {key!r}")
    model = build_model(ModelConfig.from_dict(payload["config"]), seed=seed)
    if payload["fused"]:
        model.fuse()  # reshape modules into deploy form before loading tensors
    model.load_state_dict(payload["state_dict"])
    return model, payload
