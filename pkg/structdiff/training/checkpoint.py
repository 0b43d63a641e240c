"""
Checkpoint containers

Stage-1 files hold grouped parameters (shared/, branch/<m>/, embed/), EMA
weights, the noise schedule, modality statistics and the config echo, so a
model can be rebuilt exactly. Refiner files hold only the refiner/ group and
point at their frozen base by SHA-256.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import torch

from structdiff.diffusion.schedule import NoiseSchedule
from structdiff.models.refiner import StructureGuidedRefiner, build_refiner
from structdiff.models.structural_unet import (
    BranchConfig,
    StructuralUNet,
    grouped_state_dict,
    ungroup_state_dict,
)
from structdiff.training.stats import ModalityStats
from structdiff.utils.errors import DatasetIOError, SchemaError
from structdiff.utils.helpers import sha256_file

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


def save_stage1_checkpoint(path: Union[str, Path], net: StructuralUNet, ema_net: Optional[StructuralUNet], schedule: NoiseSchedule, stats: ModalityStats, config: Dict, step: int, prediction: str, optimizer: Optional[torch.optim.Optimizer] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "stage1",
        "step": int(step),
        "branch_config": net.cfg.to_dict(),
        "params": grouped_state_dict(net),
        "ema": grouped_state_dict(ema_net) if ema_net is not None else None,
        "schedule": schedule.to_dict(),
        "stats": stats.to_dict(),
        "prediction": prediction,
        "config": config,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint {path} (step {step})")
    return path


def _load(path: Union[str, Path], kind: str) -> Dict:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"checkpoint not found: {path}", {"path": str(path)})
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("kind") != kind:
        raise SchemaError(
            f"{path} is not a {kind} checkpoint",
            {"format": payload.get("format"), "kind": payload.get("kind")},
        )
    return payload


def load_stage1_checkpoint(path: Union[str, Path], use_ema: bool = True, device: str = "cpu") -> Tuple[StructuralUNet, NoiseSchedule, ModalityStats, Dict]:
    """Rebuild (net, schedule, stats, payload) from a stage-1 checkpoint."""
    payload = _load(path, "stage1")
    net = StructuralUNet(BranchConfig.from_dict(payload["branch_config"]))
    params = payload["ema"] if use_ema and payload.get("ema") is not None else payload["params"]
    net.load_state_dict(ungroup_state_dict(params))
    net.to(device).eval()
    return net, NoiseSchedule.from_dict(payload["schedule"]), ModalityStats.from_dict(payload["stats"]), payload


def save_refiner_checkpoint(path: Union[str, Path], refiner: StructureGuidedRefiner, base_path: Union[str, Path], schedule: NoiseSchedule, config: Dict, step: int, resolution: int, ema_refiner: Optional[StructureGuidedRefiner] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    source = ema_refiner if ema_refiner is not None else refiner
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "refiner",
        "step": int(step),
        "base_path": str(base_path),
        "base_sha256": sha256_file(base_path),
        "conditions": list(refiner.conditions),
        "stride_mode": refiner.stride_mode,
        "resolution": int(resolution),
        "params": {f"refiner/{k}": v for k, v in refiner.trainable_state_dict().items()},
        "ema": {f"refiner/{k}": v for k, v in source.trainable_state_dict().items()},
        "schedule": schedule.to_dict(),
        "config": config,
    }
    torch.save(payload, path)
    logger.info(f"Saved refiner checkpoint {path} (step {step})")
    return path


def load_refiner_checkpoint(path: Union[str, Path], base_path: Optional[Union[str, Path]] = None, use_ema: bool = True, device: str = "cpu") -> Tuple[StructureGuidedRefiner, NoiseSchedule, ModalityStats, Dict]:
    """
    Rebuild the refiner on top of its base. The base file must match the
    recorded SHA-256.
    """
    payload = _load(path, "refiner")
    base_path = Path(base_path or payload["base_path"])
    digest = sha256_file(base_path)
    if digest != payload["base_sha256"]:
        raise SchemaError(
            "refiner base checkpoint does not match the recorded hash",
            {"expected": payload["base_sha256"], "found": digest, "base_path": str(base_path)},
        )
    base, _, base_stats, _ = load_stage1_checkpoint(base_path, device=device)
    refiner_cfg = payload["config"].get("refiner", {})
    refiner = build_refiner(
        base,
        resolution=payload["resolution"],
        conditions=payload["conditions"],
        embedder_channels=refiner_cfg.get("embedder_channels", (16, 32, 96, 256)),
        stride_mode=payload["stride_mode"],
    )
    params = payload["ema"] if use_ema else payload["params"]
    state = {k[len("refiner/"):]: v for k, v in params.items()}
    missing, unexpected = refiner.load_state_dict(state, strict=False)
    unexpected = [k for k in unexpected if not k.startswith("base.")]
    missing = [k for k in missing if not k.startswith("base.")]
    if missing or unexpected:
        raise SchemaError("refiner checkpoint does not match the model", {"missing": missing, "unexpected": unexpected})
    refiner.to(device).eval()
    return refiner, NoiseSchedule.from_dict(payload["schedule"]), base_stats, payload
