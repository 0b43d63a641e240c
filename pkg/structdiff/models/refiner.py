"""
Structure-guided refiner

A frozen RGB-only base UNet is steered by a trainable copy of its encoder
and middle block. Pose, depth and normal maps each pass through their own
condition embedder; the embeddings are summed coordinate-wise and added to
the guided copy after its first unit. Zero-initialized 1x1 convolutions
carry every guided encoder output and the guided middle output into the
frozen decoder, so a freshly built refiner reproduces its base exactly.
Attributes travel through the base's time-embedding pathway.
"""

import logging
from copy import deepcopy
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import torch
from torch import nn

from structdiff.models.blocks import zero_module
from structdiff.models.conditioning import NULL_ATTR, drop_mask
from structdiff.models.structural_unet import StructuralUNet, _encoder_layout
from structdiff.utils.errors import ConfigError, ResolutionMismatchError, ShapeMismatchError

logger = logging.getLogger(__name__)

STRUCTURAL_CONDITIONS = {"pose": 3, "depth": 1, "normal": 3}
CONDITIONS = ("attrs", "pose", "depth", "normal")
STRIDE_MODES = {"grid8": (2, 2, 2, 1), "strict16": (2, 2, 2, 2)}


class ZeroConv2d(nn.Module):
    """1x1 convolution initialized with all zeros."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = zero_module(nn.Conv2d(c_in, c_out, kernel_size=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class ConditionEmbedder(nn.Module):
    """Four 4x4 convolutions with ReLU between them (none after the last)."""

    def __init__(self, in_channels: int, channels: Sequence[int] = (16, 32, 96, 256), strides: Sequence[int] = STRIDE_MODES["grid8"]):
        super().__init__()
        if len(channels) != 4 or len(strides) != 4:
            raise ConfigError("condition embedders have exactly four layers")
        layers = []
        c_prev = in_channels
        for i, (c, s) in enumerate(zip(channels, strides)):
            if s == 2:
                layers.append(nn.Conv2d(c_prev, c, kernel_size=4, stride=2, padding=1))
            else:
                # 4x4 stride-1 needs asymmetric padding to keep the size
                layers.append(nn.ZeroPad2d((1, 2, 1, 2)))
                layers.append(nn.Conv2d(c_prev, c, kernel_size=4, stride=1))
            if i < 3:
                layers.append(nn.ReLU())
            c_prev = c
        self.layers = nn.Sequential(*layers)
        self.in_channels = int(in_channels)
        self.out_channels = int(channels[-1])
        self.total_stride = 1
        for s in strides:
            self.total_stride *= int(s)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


@dataclass
class ConditionSet:
    """Refiner guidance. Maps are [B, C, H', W']; dropout_mask[name] is a bool [B]."""

    pose_raster: Optional[torch.Tensor] = None
    depth_map: Optional[torch.Tensor] = None
    normal_map: Optional[torch.Tensor] = None
    attrs: Optional[torch.Tensor] = None
    sizecrop: Optional[torch.Tensor] = None
    dropout_mask: Dict[str, torch.Tensor] = field(default_factory=dict)

    def structural(self) -> Dict[str, Optional[torch.Tensor]]:
        return {"pose": self.pose_raster, "depth": self.depth_map, "normal": self.normal_map}

    @property
    def batch_size(self) -> int:
        for x in (self.pose_raster, self.depth_map, self.normal_map, self.attrs, self.sizecrop):
            if x is not None:
                return int(x.shape[0])
        raise ShapeMismatchError("condition set is empty")

    def mask(self, name: str) -> torch.Tensor:
        B = self.batch_size
        m = self.dropout_mask.get(name)
        return torch.zeros(B, dtype=torch.bool) if m is None else m

    def check(self, size: Optional[int] = None):
        sizes = {k: tuple(v.shape[-2:]) for k, v in self.structural().items() if v is not None}
        if len(set(sizes.values())) > 1:
            raise ResolutionMismatchError("condition maps must share H' x W'", {"sizes": sizes})
        if size is not None and any(s != (size, size) for s in sizes.values()):
            raise ResolutionMismatchError(f"condition maps must be {size}x{size}", {"sizes": sizes})

    @classmethod
    def from_batch(cls, batch: Dict[str, torch.Tensor]) -> "ConditionSet":
        return cls(
            pose_raster=batch.get("pose"),
            depth_map=batch.get("depth"),
            normal_map=batch.get("normal"),
            attrs=batch.get("attrs"),
            sizecrop=batch.get("sizecrop"),
        )

    @classmethod
    def unconditional(cls, like: "ConditionSet") -> "ConditionSet":
        """All conditions dropped: the rate=1 dropout configuration."""
        return dropout_conditions_stage2(like, rate=1.0)


def embed_condition(x: torch.Tensor, embedder: ConditionEmbedder) -> torch.Tensor:
    if x.ndim != 4 or x.shape[1] != embedder.in_channels:
        raise ShapeMismatchError("condition map has the wrong channel count", {"shape": list(x.shape)})
    H, W = x.shape[-2:]
    if H % embedder.total_stride or W % embedder.total_stride:
        raise ShapeMismatchError(
            f"condition map size must be divisible by {embedder.total_stride}", {"size": [H, W]}
        )
    return embedder(x)


def compose_conditions(cs: ConditionSet, embedders: nn.ModuleDict) -> Optional[torch.Tensor]:
    """Coordinate-wise sum of per-condition features; dropped conditions add exact zeros."""
    total = None
    for name, x in cs.structural().items():
        if name not in embedders or x is None:
            continue
        feat = embed_condition(x, embedders[name])
        keep = (~cs.mask(name)).to(device=feat.device, dtype=feat.dtype)
        feat = feat * keep[:, None, None, None]
        total = feat if total is None else total + feat
    return total


def dropout_conditions_stage2(cs: ConditionSet, rate: float = 0.5, generator: Optional[torch.Generator] = None) -> ConditionSet:
    """
    Independently drop attrs, pose, depth and normal per sample.
    Dropped maps become zero images and dropped attrs the null row.
    """
    B = cs.batch_size
    masks = {}
    for name in CONDITIONS:
        drawn = drop_mask(B, rate, generator)
        masks[name] = drawn | cs.mask(name)

    def zero(x, name):
        if x is None:
            return None
        keep = (~masks[name]).to(device=x.device, dtype=x.dtype)
        return x * keep[:, None, None, None]

    attrs = cs.attrs
    if attrs is not None:
        attrs = torch.where(masks["attrs"].to(attrs.device)[:, None], torch.full_like(attrs, NULL_ATTR), attrs)
    return replace(
        cs,
        pose_raster=zero(cs.pose_raster, "pose"),
        depth_map=zero(cs.depth_map, "depth"),
        normal_map=zero(cs.normal_map, "normal"),
        attrs=attrs,
        dropout_mask=masks,
    )


class StructureGuidedRefiner(nn.Module):
    def __init__(self, base: StructuralUNet, conditions: Sequence[str] = CONDITIONS, embedder_channels: Sequence[int] = (16, 32, 96, 256), stride_mode: str = "grid8"):
        super().__init__()
        if len(base.modalities) != 1:
            raise ConfigError("the refiner base must have exactly one modality", {"modalities": base.modalities})
        if base.cfg.pose_channels:
            raise ConfigError("the refiner base takes pose through the guided copy, not its input")
        if stride_mode not in STRIDE_MODES:
            raise ConfigError(f"unknown embedder stride mode '{stride_mode}'", {"allowed": list(STRIDE_MODES)})
        strides = STRIDE_MODES[stride_mode]
        total_stride = 1
        for s in strides:
            total_stride *= s
        if total_stride != base.codec.factor:
            raise ResolutionMismatchError(
                "condition embedder grid does not match the base network grid",
                {"embedder_stride": total_stride, "base_grid_factor": base.codec.factor},
            )
        unknown = [c for c in conditions if c not in CONDITIONS]
        if unknown:
            raise ConfigError(f"unknown conditions {unknown}", {"allowed": list(CONDITIONS)})

        self.base = base
        self.base.requires_grad_(False)
        self.base.eval()
        self.modality = base.modalities[0]
        self.conditions = list(conditions)
        self.stride_mode = stride_mode

        branch = base.branches[self.modality]
        self.guided_encoder = nn.ModuleList([deepcopy(u) for u in list(branch.encoder) + list(base.shared_encoder)])
        self.guided_mid = deepcopy(base.mid)
        self.guided_encoder.requires_grad_(True)
        self.guided_mid.requires_grad_(True)

        self.embedders = nn.ModuleDict(
            {
                name: ConditionEmbedder(STRUCTURAL_CONDITIONS[name], embedder_channels, strides)
                for name in STRUCTURAL_CONDITIONS
                if name in self.conditions
            }
        )
        _, skip_channels, mid_channels = _encoder_layout(base.cfg)
        self.cond_in = ZeroConv2d(embedder_channels[-1], skip_channels[0])
        self.skip_projections = nn.ModuleList([ZeroConv2d(c, c) for c in skip_channels])
        self.mid_projection = ZeroConv2d(mid_channels, mid_channels)

    def train(self, mode: bool = True):
        super().train(mode)
        self.base.eval()
        return self

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def trainable_state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("base.")}

    def _filtered(self, cs: ConditionSet) -> ConditionSet:
        """Conditions outside this refiner's subset are treated as dropped."""
        out = cs
        if "attrs" not in self.conditions and cs.attrs is not None:
            out = replace(out, attrs=torch.full_like(cs.attrs, NULL_ATTR))
        return out

    def forward(self, x_t: torch.Tensor, t: Union[int, torch.Tensor], cs: ConditionSet) -> torch.Tensor:
        H = x_t.shape[-1]
        cs.check(H)
        if cs.batch_size != x_t.shape[0]:
            raise ShapeMismatchError("one condition set entry per sample", {"conditions": cs.batch_size, "batch": x_t.shape[0]})
        cs = self._filtered(cs)
        B = x_t.shape[0]
        cond_emb = self.base.condition_embedding(B, cs.attrs, cs.sizecrop)
        temb = self.base._time(t, B, x_t.device) + cond_emb

        feat = compose_conditions(cs, self.embedders)
        h = self.base.codec.encode(x_t)
        if feat is not None and feat.shape[-2:] != h.shape[-2:]:
            raise ResolutionMismatchError(
                "condition features do not land on the guided encoder grid",
                {"features": list(feat.shape[-2:]), "grid": list(h.shape[-2:])},
            )
        residuals = []
        for i, unit in enumerate(self.guided_encoder):
            h = unit(h, temb)
            if i == 0 and feat is not None:
                h = h + self.cond_in(feat)
            residuals.append(self.skip_projections[i](h))
        mid = self.mid_projection(self.guided_mid(h, temb))
        out = self.base(
            {self.modality: x_t}, t, cond_emb=cond_emb, skip_residuals=residuals, mid_residual=mid
        )
        return out[self.modality]


def build_refiner(base: StructuralUNet, resolution: Optional[int] = None, conditions: Sequence[str] = CONDITIONS, embedder_channels: Sequence[int] = (16, 32, 96, 256), stride_mode: str = "grid8") -> StructureGuidedRefiner:
    """
    Wrap a trained single-modality base. With ``resolution`` given, the
    refiner resolution must land on the base grid.
    """
    if resolution is not None and resolution % base.down_factor:
        raise ResolutionMismatchError(
            f"refiner resolution {resolution} is not divisible by the base grid factor {base.down_factor}",
            {"resolution": resolution, "down_factor": base.down_factor},
        )
    refiner = StructureGuidedRefiner(base, conditions, embedder_channels, stride_mode)
    trainable = sum(p.numel() for p in refiner.trainable_parameters())
    frozen = sum(p.numel() for p in base.parameters())
    logger.info(f"Built refiner: conditions={refiner.conditions} trainable={trainable} frozen base={frozen}")
    return refiner
