"""
Per-modality, per-channel standardization

Depth and normal maps have very different value distributions from RGB;
every modality is standardized to zero mean and unit variance per channel
over a calibration split before diffusion, and mapped back after sampling.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional

import torch

from structdiff.utils.errors import DegenerateChannelError, InvalidRangeError, UnfittedError

logger = logging.getLogger(__name__)

MIN_STD = 1e-6


@dataclass
class ModalityStats:
    mean: Dict[str, torch.Tensor] = field(default_factory=dict)  # modality -> [C] float64
    std: Dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def fitted(self) -> bool:
        return bool(self.mean)

    def _coeffs(self, name: str, like: torch.Tensor):
        if name not in self.mean:
            raise UnfittedError(f"no statistics for modality '{name}'", {"fitted": sorted(self.mean)})
        shape = (1, -1, 1, 1) if like.ndim == 4 else (-1, 1, 1)
        mean = self.mean[name].to(device=like.device, dtype=like.dtype).view(shape)
        std = self.std[name].to(device=like.device, dtype=like.dtype).view(shape)
        return mean, std

    def normalize_tensor(self, name: str, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._coeffs(name, x)
        return (x - mean) / std

    def denormalize_tensor(self, name: str, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._coeffs(name, x)
        return x * std + mean

    def to_dict(self) -> Dict:
        return {
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "std": {k: v.tolist() for k, v in self.std.items()},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModalityStats":
        return cls(
            mean={k: torch.tensor(v, dtype=torch.float64) for k, v in data["mean"].items()},
            std={k: torch.tensor(v, dtype=torch.float64) for k, v in data["std"].items()},
        )


def fit_modality_stats(items: Iterable[Mapping[str, torch.Tensor]], modalities=("rgb", "depth", "normal")) -> ModalityStats:
    """
    Stream over calibration items (or batches) and compute channel moments.

    Raises:
        InvalidRangeError: empty calibration split
        DegenerateChannelError: a channel with std <= 1e-6
    """
    sums: Dict[str, torch.Tensor] = {}
    sq: Dict[str, torch.Tensor] = {}
    counts: Dict[str, int] = {}
    for item in items:
        for m in modalities:
            x = item[m].to(torch.float64)
            if x.ndim == 3:
                x = x[None]
            flat = x.transpose(0, 1).reshape(x.shape[1], -1)
            sums[m] = sums.get(m, 0) + flat.sum(dim=1)
            sq[m] = sq.get(m, 0) + (flat * flat).sum(dim=1)
            counts[m] = counts.get(m, 0) + flat.shape[1]
    if not counts:
        raise InvalidRangeError("calibration split is empty")

    stats = ModalityStats()
    for m in modalities:
        mean = sums[m] / counts[m]
        var = (sq[m] / counts[m] - mean * mean).clamp_min(0.0)
        std = var.sqrt()
        bad = (std <= MIN_STD).nonzero().flatten().tolist()
        if bad:
            raise DegenerateChannelError(
                f"modality '{m}' has constant channels {bad}", {"modality": m, "channels": bad}
            )
        stats.mean[m] = mean
        stats.std[m] = std
        logger.debug(f"Stats for {m}: mean={mean.tolist()} std={std.tolist()}")
    return stats


def normalize(bundle: Mapping[str, torch.Tensor], stats: ModalityStats) -> Dict[str, torch.Tensor]:
    """Standardize every fitted modality present in the bundle; other keys pass through."""
    if not stats.fitted:
        raise UnfittedError("modality statistics have not been fitted")
    return {k: stats.normalize_tensor(k, v) if k in stats.mean else v for k, v in bundle.items()}


def denormalize(bundle: Mapping[str, torch.Tensor], stats: ModalityStats) -> Dict[str, torch.Tensor]:
    if not stats.fitted:
        raise UnfittedError("modality statistics have not been fitted")
    return {k: stats.denormalize_tensor(k, v) if k in stats.mean else v for k, v in bundle.items()}
