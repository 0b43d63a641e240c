"""
Two-stage generation: joint structures at R, then structure-guided RGB at 2R
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from structdiff.diffusion.schedule import NoiseSchedule
from structdiff.models.refiner import ConditionSet, StructureGuidedRefiner
from structdiff.models.structural_unet import StructuralUNet
from structdiff.sampling.sampler import default_sizecrop, postprocess_structures, sample_stage1, sample_stage2
from structdiff.synth.figure import Keypoint, rasterize_skeleton, scale_keypoints
from structdiff.training.checkpoint import load_refiner_checkpoint, load_stage1_checkpoint
from structdiff.training.stats import ModalityStats
from structdiff.utils.errors import ResolutionMismatchError
from structdiff.utils.helpers import derive_seed

logger = logging.getLogger(__name__)


def upsample_structure(x: torch.Tensor, size: int) -> torch.Tensor:
    if x.shape[-1] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def pose_rasters(keypoints: Sequence[List[Keypoint]], resolution: int, factor: int = 1) -> torch.Tensor:
    """Rasterize a batch of skeletons given at ``resolution``, scaled by ``factor``."""
    size = resolution * factor
    rasters = [rasterize_skeleton(scale_keypoints(kps, factor, size) if factor != 1 else kps, size) for kps in keypoints]
    return torch.from_numpy(np.stack(rasters))


class GenerationPipeline:
    """
    Runs stage 1 (attrs + pose -> rgb, depth, normal at R) and hands the
    upsampled structures to the refiner (-> rgb at 2R).
    """

    def __init__(
        self,
        stage1: StructuralUNet,
        stage1_schedule: NoiseSchedule,
        stage1_stats: ModalityStats,
        refiner: StructureGuidedRefiner,
        refiner_schedule: NoiseSchedule,
        refiner_stats: Optional[ModalityStats] = None,
        steps: int = 50,
        cfg: float = 7.5,
        stage1_prediction: str = "v",
        resolution_factor: int = 2,
    ):
        self.stage1 = stage1
        self.stage1_schedule = stage1_schedule
        self.stage1_stats = stage1_stats
        self.refiner = refiner
        self.refiner_schedule = refiner_schedule
        self.refiner_stats = refiner_stats
        self.steps = steps
        self.cfg = cfg
        self.stage1_prediction = stage1_prediction
        self.resolution_factor = resolution_factor

    @classmethod
    def from_checkpoints(cls, stage1_path: Union[str, Path], refiner_path: Union[str, Path], base_path: Optional[Union[str, Path]] = None, device: str = "cpu", **kwargs) -> "GenerationPipeline":
        net, schedule, stats, payload = load_stage1_checkpoint(stage1_path, device=device)
        refiner, r_schedule, r_stats, r_payload = load_refiner_checkpoint(refiner_path, base_path, device=device)
        kwargs.setdefault("resolution_factor", r_payload["config"].get("refiner", {}).get("resolution_factor", 2))
        return cls(net, schedule, stats, refiner, r_schedule, r_stats, stage1_prediction=payload["prediction"], **kwargs)

    def run(
        self,
        attrs: torch.Tensor,
        pose: torch.Tensor,
        seed: int = 0,
        keypoints: Optional[Sequence[List[Keypoint]]] = None,
        override_depth: Optional[torch.Tensor] = None,
        override_normal: Optional[torch.Tensor] = None,
        trace: Optional[List] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Returns (rgb, depth, normal, rgb_high). User-supplied depth or normal
        maps replace the stage-1 predictions as refiner conditions.
        """
        R = pose.shape[-1]
        high = R * self.resolution_factor
        out = sample_stage1(
            self.stage1,
            self.stage1_schedule,
            self.stage1_stats,
            attrs,
            pose,
            steps=self.steps,
            cfg=self.cfg,
            seed=seed,
            prediction=self.stage1_prediction,
            trace=trace,
        )
        rgb, depth, normal = out.get("rgb"), out.get("depth"), out.get("normal")

        device = self.refiner.trainable_parameters()[0].device
        if keypoints is not None:
            pose_high = pose_rasters(keypoints, R, self.resolution_factor)
        else:
            pose_high = upsample_structure(pose, high)
        depth_high = override_depth if override_depth is not None else (upsample_structure(depth, high) if depth is not None else None)
        if override_normal is not None:
            normal_high = override_normal
        elif normal is not None:
            normal_high = postprocess_structures({"normal": upsample_structure(normal, high)})["normal"]
        else:
            normal_high = None
        for name, x in (("depth", depth_high), ("normal", normal_high)):
            if x is not None and x.shape[-1] != high:
                raise ResolutionMismatchError(f"{name} condition must be {high}x{high}", {"size": list(x.shape[-2:])})

        B = attrs.shape[0]
        cs = ConditionSet(
            pose_raster=pose_high.to(device),
            depth_map=depth_high.to(device) if depth_high is not None else None,
            normal_map=normal_high.to(device) if normal_high is not None else None,
            attrs=attrs.to(device),
            sizecrop=default_sizecrop(B, high).to(device),
        )
        rgb_high = sample_stage2(
            self.refiner,
            self.refiner_schedule,
            self.refiner_stats,
            cs,
            steps=self.steps,
            cfg=self.cfg,
            seed=seed,
        )
        logger.debug(f"Pipeline produced {B} samples at {R} and {high}")
        return rgb, depth, normal, rgb_high


def run_pipeline(pipeline: GenerationPipeline, attrs: torch.Tensor, pose: torch.Tensor, seed: int = 0, **kwargs):
    return pipeline.run(attrs, pose, seed=seed, **kwargs)


def keypoints_from_array(arr: torch.Tensor) -> List[Keypoint]:
    return [Keypoint(float(x), float(y), bool(v > 0.5)) for x, y, v in arr.tolist()]


def conditions_from_dataset(dataset, indices: Sequence[int]) -> Dict[str, torch.Tensor]:
    """Attributes, pose rasters and skeletons of dataset scenes, used as sampling conditions."""
    batch = dataset.stacked(list(indices))
    return {"attrs": batch["attrs"], "pose": batch["pose"], "keypoints": batch["keypoints"]}


def generate_stage1_set(net: StructuralUNet, schedule: NoiseSchedule, stats: ModalityStats, dataset, n: int, steps: int = 50, cfg: float = 7.5, seed: int = 0, batch_size: int = 8, prediction: str = "v") -> Dict[str, torch.Tensor]:
    """
    Sample ``n`` stage-1 outputs conditioned on the first ``n`` scenes of
    ``dataset``. Each batch gets its own seed derived from ``seed``.
    """
    n = min(n, len(dataset))
    parts: Dict[str, List[torch.Tensor]] = {}
    for b, start in enumerate(range(0, n, batch_size)):
        cond = conditions_from_dataset(dataset, range(start, min(start + batch_size, n)))
        out = sample_stage1(net, schedule, stats, cond["attrs"], cond["pose"], steps=steps, cfg=cfg, seed=derive_seed(seed, "batch", b), prediction=prediction)
        for k, v in {**cond, **out}.items():
            parts.setdefault(k, []).append(v.cpu())
    return {k: torch.cat(v) for k, v in parts.items()}


def generate_pipeline_set(pipeline: GenerationPipeline, dataset, n: int, seed: int = 0, batch_size: int = 8, use_ground_truth: bool = False) -> Dict[str, torch.Tensor]:
    """
    Two-stage samples for the first ``n`` scenes. With ``use_ground_truth``
    the dataset's own depth and normal (upsampled) replace stage-1 predictions.
    """
    n = min(n, len(dataset))
    parts: Dict[str, List[torch.Tensor]] = {}
    for b, start in enumerate(range(0, n, batch_size)):
        batch = dataset.stacked(list(range(start, min(start + batch_size, n))))
        high = batch["pose"].shape[-1] * pipeline.resolution_factor
        kwargs = {}
        if use_ground_truth:
            kwargs["override_depth"] = upsample_structure(batch["depth"], high)
            kwargs["override_normal"] = postprocess_structures({"normal": upsample_structure(batch["normal"], high)})["normal"]
        rgb, depth, normal, rgb_high = pipeline.run(
            batch["attrs"],
            batch["pose"],
            seed=derive_seed(seed, "batch", b),
            keypoints=[keypoints_from_array(k) for k in batch["keypoints"]],
            **kwargs,
        )
        out = {"attrs": batch["attrs"], "pose": batch["pose"], "keypoints": batch["keypoints"], "rgb": rgb, "depth": depth, "normal": normal, "rgb_high": rgb_high}
        for k, v in out.items():
            if v is not None:
                parts.setdefault(k, []).append(v.cpu())
    return {k: torch.cat(v) for k, v in parts.items()}
