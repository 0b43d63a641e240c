"""
Conditioning pathways: attribute embedding, size/crop embedding and the
stage-1 condition dropout policy.

Attributes are a short integer vector (figure color, pose class,
background). A row of NULL_ATTR values selects the learned unconditional
embedding, which is also what classifier-free guidance uses.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import torch
from torch import nn

from structdiff.models.blocks import sinusoidal_embedding
from structdiff.utils.errors import InvalidRangeError, OutOfVocabularyError, ShapeMismatchError

logger = logging.getLogger(__name__)

NULL_ATTR = -1


def null_attrs(batch_size: int, slots: int = 3, device=None) -> torch.Tensor:
    return torch.full((batch_size, slots), NULL_ATTR, dtype=torch.long, device=device)


class AttributeEmbedding(nn.Module):
    """Sum of per-slot embeddings; null rows map to a learned vector."""

    def __init__(self, vocab: Sequence[int], dim: int):
        super().__init__()
        self.vocab = tuple(int(v) for v in vocab)
        self.tables = nn.ModuleList([nn.Embedding(v, dim) for v in self.vocab])
        self.null = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(self, attrs: Optional[torch.Tensor], batch_size: Optional[int] = None) -> torch.Tensor:
        if attrs is None:
            if batch_size is None:
                raise InvalidRangeError("batch_size is required when attrs is None")
            return self.null[None].expand(batch_size, -1)
        if attrs.ndim != 2 or attrs.shape[1] != len(self.vocab):
            raise ShapeMismatchError(
                "attrs must be [batch, slots]", {"shape": list(attrs.shape), "slots": len(self.vocab)}
            )
        is_null = (attrs == NULL_ATTR).all(dim=1)
        live = attrs[~is_null]
        for slot, size in enumerate(self.vocab):
            col = live[:, slot]
            if col.numel() and (int(col.min()) < 0 or int(col.max()) >= size):
                raise OutOfVocabularyError(
                    f"attribute slot {slot} outside vocabulary of size {size}",
                    {"slot": slot, "min": int(col.min()), "max": int(col.max())},
                )
        safe = torch.where(is_null[:, None], torch.zeros_like(attrs), attrs)
        emb = sum(table(safe[:, slot]) for slot, table in enumerate(self.tables))
        return torch.where(is_null[:, None], self.null[None].to(emb.dtype), emb)


class SizeCropEmbedding(nn.Module):
    """
    (height, width, crop_top, crop_left) -> sinusoidal features per scalar,
    concatenated, projected to the time-embedding width.
    """

    def __init__(self, freq_dim: int, out_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(4 * freq_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def features(self, sizecrop: torch.Tensor) -> torch.Tensor:
        if sizecrop.ndim != 2 or sizecrop.shape[1] != 4:
            raise ShapeMismatchError("sizecrop must be [batch, 4]", {"shape": list(sizecrop.shape)})
        parts = [sinusoidal_embedding(sizecrop[:, i], self.freq_dim) for i in range(4)]
        return torch.cat(parts, dim=-1)

    def forward(self, sizecrop: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(self.features(sizecrop).to(dtype))


def embed_attributes(embedding: AttributeEmbedding, attrs: Optional[torch.Tensor], batch_size: Optional[int] = None) -> torch.Tensor:
    return embedding(attrs, batch_size)


def embed_size_crop(embedding: SizeCropEmbedding, h: int, w: int, top: int, left: int) -> torch.Tensor:
    if min(h, w, top, left) < 0:
        raise InvalidRangeError("size/crop values must be nonnegative", {"h": h, "w": w, "top": top, "left": left})
    dtype = embedding.mlp[0].weight.dtype
    return embedding(torch.tensor([[h, w, top, left]], dtype=dtype))[0]


def drop_mask(batch_size: int, rate: float, generator: Optional[torch.Generator] = None, device=None) -> torch.Tensor:
    if not 0.0 <= rate <= 1.0:
        raise InvalidRangeError("dropout rate must lie in [0, 1]", {"rate": rate})
    if rate == 0.0:
        return torch.zeros(batch_size, dtype=torch.bool, device=device)
    if rate == 1.0:
        return torch.ones(batch_size, dtype=torch.bool, device=device)
    return torch.rand(batch_size, generator=generator, device=device) < rate


def dropout_conditions_stage1(attrs: torch.Tensor, pose_raster: Optional[torch.Tensor], rate: float = 0.15, generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, Optional[torch.Tensor], Dict[str, torch.Tensor]]:
    """
    Independently per sample and per signal, with probability ``rate``:
    attrs -> null row, pose raster -> zero image.

    Returns (attrs', pose', masks) where masks[name] is True where dropped.
    """
    B = attrs.shape[0]
    attr_drop = drop_mask(B, rate, generator)
    pose_drop = drop_mask(B, rate, generator)
    attrs = torch.where(attr_drop.to(attrs.device)[:, None], torch.full_like(attrs, NULL_ATTR), attrs)
    if pose_raster is not None:
        keep = (~pose_drop).to(device=pose_raster.device, dtype=pose_raster.dtype)
        pose_raster = pose_raster * keep[:, None, None, None]
    return attrs, pose_raster, {"attrs": attr_drop, "pose": pose_drop}
