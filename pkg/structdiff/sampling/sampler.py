"""
Classifier-free guided DDIM sampling for both stages
"""

import logging
from typing import Dict, List, Optional, Tuple

import torch

from structdiff.diffusion.schedule import NoiseSchedule, ddim_step, ddim_timesteps
from structdiff.models.conditioning import null_attrs
from structdiff.models.refiner import ConditionSet, StructureGuidedRefiner
from structdiff.models.structural_unet import StructuralUNet
from structdiff.synth.figure import SENTINEL_NORMAL
from structdiff.training.stats import ModalityStats
from structdiff.utils.errors import InvalidRangeError, ShapeMismatchError, UnfittedError
from structdiff.utils.helpers import make_generator

logger = logging.getLogger(__name__)

BACKGROUND_DEPTH = -0.9
MIN_NORMAL_NORM = 1e-6


def cfg_combine(cond: torch.Tensor, uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """uncond + scale * (cond - uncond); scale 1 and 0 return the inputs exactly."""
    if cond.shape != uncond.shape:
        raise ShapeMismatchError(
            "conditional and unconditional predictions differ in shape",
            {"cond": list(cond.shape), "uncond": list(uncond.shape)},
        )
    if scale == 1.0:
        return cond.clone()
    if scale == 0.0:
        return uncond.clone()
    return uncond + scale * (cond - uncond)


def default_sizecrop(batch_size: int, resolution: int) -> torch.Tensor:
    return torch.tensor([[resolution, resolution, 0, 0]] * batch_size, dtype=torch.float32)


def postprocess_structures(out: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """
    Clamp every modality to [-1, 1] and project normals back to unit vectors.
    Background pixels (depth below -0.9, or a vanishing normal) get the
    sentinel normal.
    """
    out = {m: x.clamp(-1.0, 1.0) for m, x in out.items()}
    if "normal" in out:
        n = out["normal"]
        norm = n.norm(dim=1, keepdim=True)
        unit = n / norm.clamp_min(MIN_NORMAL_NORM)
        background = norm < MIN_NORMAL_NORM
        if "depth" in out:
            background = background | (out["depth"] < BACKGROUND_DEPTH)
        sentinel = torch.tensor(SENTINEL_NORMAL, dtype=n.dtype, device=n.device).view(1, 3, 1, 1)
        out["normal"] = torch.where(background, sentinel.expand_as(unit), unit)
    return out


@torch.no_grad()
def sample_stage1(
    net: StructuralUNet,
    schedule: NoiseSchedule,
    stats: Optional[ModalityStats],
    attrs: torch.Tensor,
    pose: Optional[torch.Tensor] = None,
    steps: int = 50,
    cfg: float = 7.5,
    seed: int = 0,
    sizecrop: Optional[torch.Tensor] = None,
    resolution: Optional[int] = None,
    prediction: str = "v",
    trace: Optional[List[Dict]] = None,
) -> Dict[str, torch.Tensor]:
    """
    Jointly sample every modality of a structural UNet.

    All branches start from unit Gaussians and share one timestep per DDIM
    step. Returns denormalized, clamped outputs keyed by modality; ``trace``
    (when given) receives one {"step", "t"} record per step.
    """
    if stats is None or not stats.fitted:
        raise UnfittedError("sampling needs fitted modality statistics")
    if prediction == "v" and float(schedule.alpha[-1]) != 0.0:
        raise InvalidRangeError(
            "v-prediction sampling needs a schedule rescaled to zero terminal SNR",
            {"alpha_T": float(schedule.alpha[-1]), "rescaled": schedule.rescaled},
        )
    net.eval()
    device = next(net.parameters()).device
    B = attrs.shape[0]
    if pose is not None:
        resolution = pose.shape[-1]
    if resolution is None:
        raise InvalidRangeError("resolution is required when no pose raster is given")
    if sizecrop is None and net.sizecrop_embed is not None:
        sizecrop = default_sizecrop(B, resolution)

    attrs = attrs.to(device)
    sizecrop = sizecrop.to(device) if sizecrop is not None else None
    cond_pose = pose.to(device) if net.cfg.pose_channels else None
    uncond_attrs = null_attrs(B, attrs.shape[1], device=device)
    uncond_pose = torch.zeros_like(cond_pose) if cond_pose is not None else None

    generator = make_generator(seed)
    dtype = next(net.parameters()).dtype
    z = {
        name: torch.randn((B, c, resolution, resolution), generator=generator, dtype=dtype).to(device)
        for name, c in net.cfg.modalities
    }
    timesteps = ddim_timesteps(schedule.T, steps)
    for i in range(steps):
        t_from, t_to = int(timesteps[i]), int(timesteps[i + 1])
        cond = net(z, t_from, attrs=attrs, pose=cond_pose, sizecrop=sizecrop)
        if cfg != 1.0:
            uncond = net(z, t_from, attrs=uncond_attrs, pose=uncond_pose, sizecrop=sizecrop)
            guided = {m: cfg_combine(cond[m], uncond[m], cfg) for m in net.modalities}
        else:
            guided = cond
        z = {m: ddim_step(z[m], guided[m], t_from, t_to, schedule, prediction) for m in net.modalities}
        if trace is not None:
            trace.append({"step": i, "t": {m: t_from for m in net.modalities}})

    out = {m: stats.denormalize_tensor(m, z[m]) for m in net.modalities}
    return postprocess_structures(out)


@torch.no_grad()
def sample_stage2(
    refiner: StructureGuidedRefiner,
    schedule: NoiseSchedule,
    stats: Optional[ModalityStats],
    cs: ConditionSet,
    steps: int = 50,
    cfg: float = 7.5,
    seed: int = 0,
    resolution: Optional[int] = None,
) -> torch.Tensor:
    """Epsilon-parameterized guided DDIM at the refiner resolution; returns RGB in [-1, 1]."""
    if steps < 1:
        raise InvalidRangeError("need at least one sampling step", {"steps": steps})
    maps = [x for x in cs.structural().values() if x is not None]
    if maps:
        resolution = maps[0].shape[-1]
    if resolution is None:
        raise InvalidRangeError("resolution is required when no structural map is given")
    cs.check(resolution)
    refiner.eval()
    device = refiner.trainable_parameters()[0].device
    B = cs.batch_size
    uncond_cs = ConditionSet.unconditional(cs)

    generator = make_generator(seed)
    channels = refiner.base.cfg.modalities[0][1]
    z = torch.randn((B, channels, resolution, resolution), generator=generator).to(device)
    timesteps = ddim_timesteps(schedule.T, steps)
    for i in range(steps):
        t_from, t_to = int(timesteps[i]), int(timesteps[i + 1])
        eps = refiner(z, t_from, cs)
        if cfg != 1.0:
            eps = cfg_combine(eps, refiner(z, t_from, uncond_cs), cfg)
        z = ddim_step(z, eps, t_from, t_to, schedule, prediction="epsilon")
    if stats is not None and stats.fitted:
        z = stats.denormalize_tensor(refiner.modality, z)
    return z.clamp(-1.0, 1.0)


def stage1_tuple(out: Dict[str, torch.Tensor]) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor], Optional[torch.Tensor]]:
    return out.get("rgb"), out.get("depth"), out.get("normal")
