"""
Structural UNet: a shared trunk with per-modality expert branches

The encoder is a flat list of units (conv_in, resnets, downsamples), each of
which pushes one skip tensor; the decoder pops one skip per unit. A branch
owns the first ``n`` encoder units and the last ``n - 1`` decoder units plus
its own conv_out, so skips pushed by a branch are only ever consumed by
that branch. The last branch encoder outputs are fused (mean or sum) and
the fused tensor is the first skip of the shared trunk.

Inputs and outputs are in pixel space; a space-to-depth codec (factor 1 is
the identity) maps them onto the network grid.
"""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import nn

from structdiff.models.blocks import (
    ConvIn,
    ConvOut,
    Downsample,
    MidBlock,
    ResUnit,
    TimestepEmbedding,
)
from structdiff.models.conditioning import AttributeEmbedding, SizeCropEmbedding
from structdiff.synth.figure import ATTRIBUTE_VOCAB
from structdiff.utils.errors import ConfigError, ShapeMismatchError, UnknownModalityError

logger = logging.getLogger(__name__)

REPLICATION_PRESETS = ("half", "one", "two")
DEFAULT_MODALITIES = (("rgb", 3), ("depth", 1), ("normal", 3))


@dataclass
class BranchConfig:
    modalities: List[Tuple[str, int]] = field(default_factory=lambda: [tuple(m) for m in DEFAULT_MODALITIES])
    replicate: str = "one"
    fusion: str = "mean"
    width: int = 32
    multipliers: List[int] = field(default_factory=lambda: [1, 2, 4])
    layers_per_block: int = 2
    attention_heads: int = 4
    padding_mode: str = "zeros"
    pose_channels: int = 3
    codec_factor: int = 1
    use_attrs: bool = True
    use_sizecrop: bool = True
    attr_vocab: Tuple[int, ...] = ATTRIBUTE_VOCAB
    attr_dim: Optional[int] = None

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["modalities"] = [list(m) for m in self.modalities]
        data["attr_vocab"] = list(self.attr_vocab)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "BranchConfig":
        data = dict(data)
        data["modalities"] = [tuple(m) for m in data.get("modalities", DEFAULT_MODALITIES)]
        if "attr_vocab" in data:
            data["attr_vocab"] = tuple(data["attr_vocab"])
        return cls(**data)

    @property
    def temb_dim(self) -> int:
        return 4 * self.width

    @property
    def modality_names(self) -> List[str]:
        return [name for name, _ in self.modalities]


class SpaceToDepthCodec(nn.Module):
    """Pixel arrays <-> network grid; factor 1 is the identity."""

    def __init__(self, factor: int = 1):
        super().__init__()
        self.factor = int(factor)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.factor == 1 else F.pixel_unshuffle(x, self.factor)

    def decode(self, x: torch.Tensor) -> torch.Tensor:
        return x if self.factor == 1 else F.pixel_shuffle(x, self.factor)

    def channels(self, c: int) -> int:
        return c * self.factor * self.factor


def _encoder_layout(cfg: BranchConfig):
    """Unit specs (name, kind, c_in, c_out, attention) and the skip channel stack."""
    levels = len(cfg.multipliers)
    units = [("conv_in", "conv_in", None, cfg.width, False)]
    skips = [cfg.width]
    ch = cfg.width
    for level, mult in enumerate(cfg.multipliers):
        out = cfg.width * mult
        attention = level == levels - 1
        for j in range(cfg.layers_per_block):
            units.append((f"down_blocks.{level}.resnets.{j}", "res", ch, out, attention))
            ch = out
            skips.append(ch)
        if level < levels - 1:
            units.append((f"down_blocks.{level}.downsample", "down", ch, ch, False))
            skips.append(ch)
    return units, skips, ch


def _decoder_layout(cfg: BranchConfig, skips: List[int], ch: int):
    levels = len(cfg.multipliers)
    skips = list(skips)
    units = []
    for k, level in enumerate(reversed(range(levels))):
        out = cfg.width * cfg.multipliers[level]
        attention = level == levels - 1
        for j in range(cfg.layers_per_block + 1):
            upsample = level > 0 and j == cfg.layers_per_block
            name = f"up_blocks.{k}.resnets.{j}"
            units.append((name, ch + skips.pop(), out, attention, upsample))
            ch = out
    return units, ch


def branch_unit_count(cfg: BranchConfig) -> int:
    """Encoder units owned by each branch for the replication preset."""
    per_level = cfg.layers_per_block + 1
    if cfg.replicate == "half":
        n = 2
    elif cfg.replicate == "one":
        n = 1 + per_level
    elif cfg.replicate == "two":
        n = 1 + 2 * per_level
    else:
        raise ConfigError(f"unknown replication preset '{cfg.replicate}'", {"allowed": list(REPLICATION_PRESETS)})
    total = len(_encoder_layout(cfg)[0])
    if n > total:
        raise ConfigError(
            f"replication preset '{cfg.replicate}' needs more encoder units than the model has",
            {"needed": n, "available": total},
        )
    return n


def fuse_branches(features: Sequence[torch.Tensor], fusion: str = "mean") -> torch.Tensor:
    """
    Merge the last branch encoder outputs into the shared-trunk input.

    "mean" averages, per sample, over the branches whose features are not
    identically zero, so a branch that outputs zeros leaves the fused tensor
    unchanged. "sum" adds all branches.
    """
    stacked = torch.stack(list(features))
    total = stacked.sum(dim=0)
    if fusion == "sum":
        return total
    active = stacked.flatten(2).ne(0).any(dim=2).to(stacked.dtype).sum(dim=0)
    return total / active.clamp_min(1.0).view(-1, *([1] * (total.ndim - 1)))


def _make_encoder_unit(spec, c_first: int, cfg: BranchConfig) -> nn.Module:
    name, kind, c_in, c_out, attention = spec
    if kind == "conv_in":
        return ConvIn(c_first, c_out, cfg.padding_mode)
    if kind == "down":
        return Downsample(c_in, cfg.padding_mode)
    return ResUnit(c_in, c_out, cfg.temb_dim, cfg.padding_mode, attention=attention, heads=cfg.attention_heads)


def _make_decoder_unit(spec, cfg: BranchConfig) -> nn.Module:
    _, c_in, c_out, attention, upsample = spec
    return ResUnit(c_in, c_out, cfg.temb_dim, cfg.padding_mode, attention=attention, heads=cfg.attention_heads, upsample=upsample)


class ExpertBranch(nn.Module):
    def __init__(self, channels: int, cfg: BranchConfig, enc_specs, dec_specs, out_ch: int, codec: SpaceToDepthCodec):
        super().__init__()
        c_first = codec.channels(channels + cfg.pose_channels)
        self.encoder = nn.ModuleList([_make_encoder_unit(s, c_first, cfg) for s in enc_specs])
        self.decoder = nn.ModuleList([_make_decoder_unit(s, cfg) for s in dec_specs])
        self.conv_out = ConvOut(out_ch, codec.channels(channels), cfg.padding_mode)


class StructuralUNet(nn.Module):
    def __init__(self, cfg: BranchConfig):
        super().__init__()
        if not cfg.modalities:
            raise ConfigError("at least one modality is required")
        names = cfg.modality_names
        if len(set(names)) != len(names):
            raise ConfigError("modality names must be unique", {"modalities": names})
        if cfg.fusion not in ("mean", "sum"):
            raise ConfigError(f"unknown fusion '{cfg.fusion}'", {"allowed": ["mean", "sum"]})
        self.cfg = cfg
        self.codec = SpaceToDepthCodec(cfg.codec_factor)

        enc_specs, skips, ch = _encoder_layout(cfg)
        dec_specs, out_ch = _decoder_layout(cfg, skips, ch)
        n = branch_unit_count(cfg)
        self.n_branch_units = n
        self.branch_encoder_names = [s[0] for s in enc_specs[:n]]
        self.branch_decoder_names = [s[0] for s in dec_specs[len(dec_specs) - (n - 1):]] if n > 1 else []
        self.encoder_names = [s[0] for s in enc_specs]

        self.time_embed = TimestepEmbedding(cfg.width, cfg.temb_dim)
        self.attr_embed = AttributeEmbedding(cfg.attr_vocab, cfg.attr_dim or cfg.temb_dim) if cfg.use_attrs else None
        self.attr_proj = (
            nn.Linear(cfg.attr_dim, cfg.temb_dim) if cfg.use_attrs and cfg.attr_dim and cfg.attr_dim != cfg.temb_dim else None
        )
        self.sizecrop_embed = SizeCropEmbedding(cfg.width, cfg.temb_dim) if cfg.use_sizecrop else None

        self.branches = nn.ModuleDict(
            OrderedDict(
                (name, ExpertBranch(c, cfg, enc_specs[:n], dec_specs[len(dec_specs) - (n - 1):] if n > 1 else [], out_ch, self.codec))
                for name, c in cfg.modalities
            )
        )
        self.shared_encoder = nn.ModuleList([_make_encoder_unit(s, 0, cfg) for s in enc_specs[n:]])
        self.mid = MidBlock(ch, cfg.temb_dim, cfg.padding_mode, cfg.attention_heads)
        self.shared_decoder = nn.ModuleList([_make_decoder_unit(s, cfg) for s in dec_specs[: len(dec_specs) - (n - 1)]])
        self.down_factor = cfg.codec_factor * 2 ** (len(cfg.multipliers) - 1)

    @property
    def modalities(self) -> List[str]:
        return self.cfg.modality_names

    @property
    def replicate_spec(self) -> List[str]:
        """Replicated blocks; a block whose units are only partly replicated is listed per unit."""
        names = list(self.branch_encoder_names) + list(self.branch_decoder_names)
        all_units = self.encoder_names + [f"up_blocks.{k}.resnets.{j}" for k in range(len(self.cfg.multipliers)) for j in range(self.cfg.layers_per_block + 1)]
        spec = ["conv_out"]
        blocks = OrderedDict()
        for unit in names:
            block = unit.rsplit(".resnets.", 1)[0].rsplit(".downsample", 1)[0]
            blocks.setdefault(block, []).append(unit)
        for block, units in blocks.items():
            members = [u for u in all_units if u == block or u.startswith(block + ".")]
            spec.extend([block] if len(units) == len(members) else units)
        return sorted(spec)

    # ------------------------------------------------------------------
    # embeddings
    # ------------------------------------------------------------------

    def condition_embedding(self, batch_size: int, attrs: Optional[torch.Tensor] = None, sizecrop: Optional[torch.Tensor] = None) -> torch.Tensor:
        dtype = self.time_embed.mlp[0].weight.dtype
        device = self.time_embed.mlp[0].weight.device
        emb = torch.zeros(batch_size, self.cfg.temb_dim, dtype=dtype, device=device)
        if self.attr_embed is not None:
            a = self.attr_embed(attrs, batch_size)
            emb = emb + (self.attr_proj(a) if self.attr_proj is not None else a)
        if self.sizecrop_embed is not None and sizecrop is not None:
            emb = emb + self.sizecrop_embed(sizecrop.to(device))
        return emb

    def _time(self, t: Union[int, torch.Tensor], batch_size: int, device) -> torch.Tensor:
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((batch_size,), float(t), device=device)
        return self.time_embed(t.to(device).float())

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _check_inputs(self, noisy: Dict[str, torch.Tensor], pose: Optional[torch.Tensor]):
        unknown = [k for k in noisy if k not in self.branches]
        if unknown:
            raise UnknownModalityError(f"unknown modality {unknown[0]!r}", {"expected": self.modalities})
        missing = [m for m in self.modalities if m not in noisy]
        if missing:
            raise UnknownModalityError(f"missing modality {missing[0]!r}", {"expected": self.modalities})
        shapes = {m: tuple(noisy[m].shape) for m in self.modalities}
        ref = noisy[self.modalities[0]]
        for name, c in self.cfg.modalities:
            x = noisy[name]
            if x.ndim != 4 or x.shape[0] != ref.shape[0] or x.shape[-2:] != ref.shape[-2:] or x.shape[1] != c:
                raise ShapeMismatchError("modality arrays must be [B, C_m, H, W] with shared B, H, W", {"shapes": shapes})
        H, W = ref.shape[-2:]
        if H % self.down_factor or W % self.down_factor:
            raise ShapeMismatchError(
                f"spatial size must be divisible by {self.down_factor}", {"size": [H, W]}
            )
        if self.cfg.pose_channels:
            if pose is None or pose.shape[0] != ref.shape[0] or pose.shape[1] != self.cfg.pose_channels or pose.shape[-2:] != ref.shape[-2:]:
                raise ShapeMismatchError(
                    "pose raster must be [B, pose_channels, H, W]",
                    {"pose": None if pose is None else list(pose.shape), "expected_channels": self.cfg.pose_channels},
                )

    def forward(
        self,
        noisy: Dict[str, torch.Tensor],
        t: Union[int, torch.Tensor],
        attrs: Optional[torch.Tensor] = None,
        pose: Optional[torch.Tensor] = None,
        sizecrop: Optional[torch.Tensor] = None,
        cond_emb: Optional[torch.Tensor] = None,
        branch_t: Optional[Dict[str, torch.Tensor]] = None,
        skip_residuals: Optional[Sequence[torch.Tensor]] = None,
        mid_residual: Optional[torch.Tensor] = None,
        trace: Optional[Dict] = None,
    ) -> Dict[str, torch.Tensor]:
        """
        Predict one output per modality, same shape as its input.

        Args:
            noisy: modality name -> [B, C_m, H, W]
            t: shared timestep (int or [B]); ignored for branches in branch_t
            attrs: [B, slots] attribute ids, NULL_ATTR rows are unconditional
            pose: [B, pose_channels, H, W] raster concatenated to every branch input
            sizecrop: [B, 4] (height, width, top, left)
            cond_emb: precomputed condition embedding, replaces attrs/sizecrop
            branch_t: optional per-modality timesteps
            skip_residuals: one tensor per encoder unit, added to the skips
            mid_residual: added to the middle-block output
            trace: when given, filled with the skip sources consumed per branch
        """
        self._check_inputs(noisy, pose)
        ref = noisy[self.modalities[0]]
        B, device = ref.shape[0], ref.device
        if cond_emb is None:
            cond_emb = self.condition_embedding(B, attrs, sizecrop)

        temb_shared = self._time(t, B, device) + cond_emb
        tembs = {}
        for m in self.modalities:
            if branch_t is not None and m in branch_t:
                tembs[m] = self._time(branch_t[m], B, device) + cond_emb
            else:
                tembs[m] = temb_shared
        if branch_t:
            temb_shared = torch.stack([tembs[m] for m in self.modalities]).mean(dim=0)

        pose_grid = self.codec.encode(pose) if self.cfg.pose_channels else None
        residuals = list(skip_residuals) if skip_residuals is not None else None
        n = self.n_branch_units

        branch_skips: Dict[str, List] = {}
        last = []
        for m in self.modalities:
            h = self.codec.encode(noisy[m])
            if pose_grid is not None:
                h = torch.cat([h, pose_grid], dim=1)
            skips = []
            for i, unit in enumerate(self.branches[m].encoder):
                h = unit(h, tembs[m])
                skips.append((f"{m}:{i}", h))
            last.append(skips.pop()[1])
            branch_skips[m] = skips

        fused = fuse_branches(last, self.cfg.fusion)
        h = fused
        shared_skips = [("shared:fused", fused)]
        for unit in self.shared_encoder:
            h = unit(h, temb_shared)
            shared_skips.append((f"shared:{n + len(shared_skips) - 1}", h))

        if residuals is not None:
            if len(residuals) != len(self.encoder_names):
                raise ShapeMismatchError(
                    "one skip residual per encoder unit expected",
                    {"got": len(residuals), "expected": len(self.encoder_names)},
                )
            shared_skips = [(k, v + residuals[n - 1 + i]) for i, (k, v) in enumerate(shared_skips)]
            branch_skips = {m: [(k, v + residuals[i]) for i, (k, v) in enumerate(s)] for m, s in branch_skips.items()}

        h = self.mid(h, temb_shared)
        if mid_residual is not None:
            h = h + mid_residual

        consumed = {"shared": []}
        for unit in self.shared_decoder:
            key, skip = shared_skips.pop()
            consumed["shared"].append(key)
            h = unit(torch.cat([h, skip], dim=1), temb_shared)

        out = {}
        for m in self.modalities:
            hm = h
            consumed[m] = []
            for unit in self.branches[m].decoder:
                key, skip = branch_skips[m].pop()
                consumed[m].append(key)
                hm = unit(torch.cat([hm, skip], dim=1), tembs[m])
            out[m] = self.codec.decode(self.branches[m].conv_out(hm))
        if trace is not None:
            trace["skips"] = consumed
            trace["fused"] = fused
        return out


class PlainUNet(nn.Module):
    """Single-modality UNet with the same units and no branch split."""

    def __init__(self, cfg: BranchConfig):
        super().__init__()
        if len(cfg.modalities) != 1:
            raise ConfigError("a plain UNet has exactly one modality", {"modalities": cfg.modality_names})
        self.cfg = cfg
        self.codec = SpaceToDepthCodec(cfg.codec_factor)
        name, channels = cfg.modalities[0]
        self.name = name
        enc_specs, skips, ch = _encoder_layout(cfg)
        dec_specs, out_ch = _decoder_layout(cfg, skips, ch)
        c_first = self.codec.channels(channels + cfg.pose_channels)
        self.time_embed = TimestepEmbedding(cfg.width, cfg.temb_dim)
        self.encoder = nn.ModuleList([_make_encoder_unit(s, c_first, cfg) for s in enc_specs])
        self.mid = MidBlock(ch, cfg.temb_dim, cfg.padding_mode, cfg.attention_heads)
        self.decoder = nn.ModuleList([_make_decoder_unit(s, cfg) for s in dec_specs])
        self.conv_out = ConvOut(out_ch, self.codec.channels(channels), cfg.padding_mode)

    def forward(self, x: torch.Tensor, t: Union[int, torch.Tensor], pose: Optional[torch.Tensor] = None, cond_emb: Optional[torch.Tensor] = None) -> torch.Tensor:
        B = x.shape[0]
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((B,), float(t), device=x.device)
        temb = self.time_embed(t.float())
        if cond_emb is not None:
            temb = temb + cond_emb
        h = self.codec.encode(x)
        if self.cfg.pose_channels:
            h = torch.cat([h, self.codec.encode(pose)], dim=1)
        skips = []
        for unit in self.encoder:
            h = unit(h, temb)
            skips.append(h)
        h = self.mid(h, temb)
        for unit in self.decoder:
            h = unit(torch.cat([h, skips.pop()], dim=1), temb)
        return self.codec.decode(self.conv_out(h))


def plain_unet_from_structural(net: StructuralUNet) -> PlainUNet:
    """Copy a single-branch structural net's weights into a PlainUNet."""
    plain = PlainUNet(net.cfg).to(next(net.parameters()).dtype)
    branch = net.branches[net.modalities[0]]
    plain.time_embed.load_state_dict(net.time_embed.state_dict())
    for dst, src in zip(plain.encoder, list(branch.encoder) + list(net.shared_encoder)):
        dst.load_state_dict(src.state_dict())
    plain.mid.load_state_dict(net.mid.state_dict())
    for dst, src in zip(plain.decoder, list(net.shared_decoder) + list(branch.decoder)):
        dst.load_state_dict(src.state_dict())
    plain.conv_out.load_state_dict(branch.conv_out.state_dict())
    return plain


def build_model(cfg: BranchConfig) -> StructuralUNet:
    net = StructuralUNet(cfg)
    report = branch_param_report(net)
    logger.info(
        f"Built structural UNet: {len(cfg.modalities)} branches ({', '.join(cfg.modality_names)}), "
        f"shared={report['shared']} embed={report['embed']} per-branch={report['branch']}"
    )
    return net


def parameter_group(key: str) -> str:
    """Checkpoint group of a state-dict key: shared/, branch/<m>/ or embed/."""
    if key.startswith("branches."):
        modality, rest = key[len("branches."):].split(".", 1)
        return f"branch/{modality}/{rest}"
    for prefix in ("time_embed.", "attr_embed.", "attr_proj.", "sizecrop_embed."):
        if key.startswith(prefix):
            return f"embed/{key}"
    return f"shared/{key}"


def grouped_state_dict(net: StructuralUNet) -> Dict[str, torch.Tensor]:
    return OrderedDict((parameter_group(k), v) for k, v in net.state_dict().items())


def ungroup_state_dict(grouped: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    out = OrderedDict()
    for key, value in grouped.items():
        group, rest = key.split("/", 1)
        if group == "branch":
            modality, rest = rest.split("/", 1)
            out[f"branches.{modality}.{rest}"] = value
        else:
            out[rest] = value
    return out


def _count(params) -> int:
    return sum(p.numel() for p in params)


def branch_param_report(net: StructuralUNet) -> Dict:
    """Shared vs per-branch parameter counts plus a single-storage check."""
    embed_modules = [net.time_embed, net.attr_embed, net.attr_proj, net.sizecrop_embed]
    embed = [p for m in embed_modules if m is not None for p in m.parameters()]
    shared = list(net.shared_encoder.parameters()) + list(net.mid.parameters()) + list(net.shared_decoder.parameters())
    branch = {m: list(b.parameters()) for m, b in net.branches.items()}

    ids_shared = [id(p) for p in shared]
    ids_branch = [id(p) for params in branch.values() for p in params]
    storages = [p.data_ptr() for p in shared] + [p.data_ptr() for params in branch.values() for p in params]
    single_storage = (
        len(set(ids_shared)) == len(ids_shared)
        and not set(ids_shared) & set(ids_branch)
        and len(set(ids_branch)) == len(ids_branch)
        and len(set(storages)) == len(storages)
    )
    total = _count(net.parameters())
    return {
        "shared": _count(shared),
        "embed": _count(embed),
        "branch": {m: _count(p) for m, p in branch.items()},
        "total": total,
        "replicate_spec": net.replicate_spec,
        "single_storage": bool(single_storage),
    }
