"""
Joint multi-modality diffusion training

Each step draws one timestep per sample shared by every modality, draws an
independent Gaussian noise per modality, and sums the per-modality squared
errors of the branch predictions against their targets (v by default).
"""

import csv
import logging
import math
import time
from copy import deepcopy
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from structdiff.config import MODALITY_CHANNELS, StructDiffConfig
from structdiff.diffusion.schedule import (
    NoiseSchedule,
    add_noise,
    build_linear_schedule,
    make_target,
    rescale_terminal_snr,
)
from structdiff.models.conditioning import dropout_conditions_stage1
from structdiff.models.structural_unet import BranchConfig, StructuralUNet, build_model
from structdiff.synth.dataset import SceneDataset
from structdiff.training.checkpoint import save_stage1_checkpoint
from structdiff.training.stats import ModalityStats, fit_modality_stats, normalize
from structdiff.utils.errors import InvalidRangeError, NonFiniteLossError
from structdiff.utils.helpers import make_generator

logger = logging.getLogger(__name__)

TIMESTEP_MODES = ("shared", "independent")


def schedule_from_config(cfg: StructDiffConfig) -> NoiseSchedule:
    s = build_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.beta_schedule)
    return rescale_terminal_snr(s) if cfg.schedule.rescale_terminal else s


def branch_config_from(cfg: StructDiffConfig) -> BranchConfig:
    m = cfg.model
    return BranchConfig(
        modalities=[(name, MODALITY_CHANNELS[name]) for name in m.modalities],
        replicate=m.replicate,
        fusion=m.fusion,
        width=m.width,
        multipliers=list(m.multipliers),
        layers_per_block=m.layers_per_block,
        attention_heads=m.attention_heads,
        padding_mode=m.padding_mode,
        pose_channels=m.pose_channels,
        codec_factor=m.codec_factor,
        attr_dim=m.attr_dim,
    )


def refiner_base_config(cfg: StructDiffConfig) -> StructDiffConfig:
    """RGB-only, epsilon-prediction, default-SNR variant at the refiner resolution."""
    return cfg.with_overrides(
        {
            "data.resolution": cfg.data.resolution * cfg.refiner.resolution_factor,
            "model.modalities": ["rgb"],
            "model.pose_channels": 0,
            "model.codec_factor": cfg.refiner.codec_factor,
            "model.width": cfg.refiner.base_width,
            "model.multipliers": list(cfg.refiner.base_multipliers),
            "schedule.prediction": "epsilon",
            "schedule.rescale_terminal": False,
            "train.steps": cfg.refiner.base_steps,
        }
    )


def sample_shared_timestep(batch_size: int, T: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One t per sample, uniform on [1, T]."""
    if T < 1:
        raise InvalidRangeError("T must be >= 1", {"T": T})
    return torch.randint(1, T + 1, (batch_size,), generator=generator)


def draw_timesteps(modalities: List[str], batch_size: int, T: int, mode: str = "shared", generator: Optional[torch.Generator] = None) -> Dict[str, torch.Tensor]:
    if mode == "shared":
        t = sample_shared_timestep(batch_size, T, generator)
        return {m: t for m in modalities}
    if mode == "independent":
        return {m: sample_shared_timestep(batch_size, T, generator) for m in modalities}
    raise InvalidRangeError(f"unknown timestep mode '{mode}'", {"allowed": list(TIMESTEP_MODES)})


def compute_losses(net: StructuralUNet, batch: Dict[str, torch.Tensor], timesteps: Dict[str, torch.Tensor], noises: Dict[str, torch.Tensor], schedule: NoiseSchedule, prediction: str = "v", loss_weights: Optional[Dict[str, float]] = None) -> Dict[str, torch.Tensor]:
    """
    Deterministic part of a training step.

    batch holds normalized modality tensors plus optional pose, attrs and
    sizecrop. Returns {"total": ..., <modality>: ...}; total is the
    (optionally weighted) sum of the per-modality mean squared errors.
    """
    modalities = net.modalities
    noisy = {m: add_noise(batch[m], noises[m], timesteps[m].to(batch[m].device), schedule) for m in modalities}
    first = timesteps[modalities[0]]
    shared = all(timesteps[m] is first or torch.equal(timesteps[m], first) for m in modalities)
    out = net(
        noisy,
        first,
        attrs=batch.get("attrs"),
        pose=batch.get("pose") if net.cfg.pose_channels else None,
        sizecrop=batch.get("sizecrop"),
        branch_t=None if shared else timesteps,
    )
    weights = loss_weights or {}
    losses = {}
    total = None
    for m in modalities:
        target = make_target(batch[m], noises[m], timesteps[m].to(batch[m].device), schedule, prediction)
        losses[m] = F.mse_loss(out[m], target)
        term = weights.get(m, 1.0) * losses[m]
        total = term if total is None else total + term
    losses["total"] = total
    return losses


class EMA:
    """Exponential moving average of a model's weights, starting from the raw weights."""

    def __init__(self, model: nn.Module, decay: float = 0.999):
        self.decay = decay
        self.model = deepcopy(model)
        self.model.requires_grad_(False)
        self.model.eval()

    @torch.no_grad()
    def update(self, model: nn.Module):
        for ema_p, p in zip(self.model.parameters(), model.parameters()):
            ema_p.lerp_(p.detach(), 1.0 - self.decay)
        for ema_b, b in zip(self.model.buffers(), model.buffers()):
            ema_b.copy_(b)


@dataclass
class StepResult:
    total: float
    losses: Dict[str, float]
    timesteps: Dict[str, torch.Tensor]
    dropped: Dict[str, torch.Tensor] = field(default_factory=dict)


def training_step(
    net: StructuralUNet,
    batch: Dict[str, torch.Tensor],
    schedule: NoiseSchedule,
    stats: Optional[ModalityStats],
    generator: torch.Generator,
    opt: torch.optim.Optimizer,
    ema: Optional[EMA] = None,
    dropout: float = 0.15,
    prediction: str = "v",
    timestep_mode: str = "shared",
    loss_weights: Optional[Dict[str, float]] = None,
) -> StepResult:
    """
    One optimizer step. Random draws come from ``generator`` in a fixed
    order (dropout, timesteps, then one noise per modality).
    """
    net.train()
    device = next(net.parameters()).device
    batch = {k: v.to(device) for k, v in batch.items()}
    if stats is not None:
        batch = normalize(batch, stats)
    modalities = net.modalities
    B = batch[modalities[0]].shape[0]

    attrs = batch.get("attrs")
    pose = batch.get("pose")
    dropped = {}
    if attrs is not None:
        attrs, pose, dropped = dropout_conditions_stage1(attrs, pose, dropout, generator)
        batch["attrs"] = attrs
        if pose is not None:
            batch["pose"] = pose

    timesteps = draw_timesteps(modalities, B, schedule.T, timestep_mode, generator)
    noises = {}
    for m in modalities:
        x = batch[m]
        noises[m] = torch.randn(x.shape, generator=generator, dtype=x.dtype).to(device)

    losses = compute_losses(net, batch, timesteps, noises, schedule, prediction, loss_weights)
    total = losses["total"]
    if not torch.isfinite(total):
        raise NonFiniteLossError(
            "training loss is not finite",
            {
                "losses": {k: float(v.detach()) for k, v in losses.items()},
                "timesteps": {m: t.tolist() for m, t in timesteps.items()},
            },
        )
    opt.zero_grad(set_to_none=True)
    total.backward()
    opt.step()
    if ema is not None:
        ema.update(net)
    return StepResult(
        total=float(total.detach()),
        losses={m: float(losses[m].detach()) for m in modalities},
        timesteps=timesteps,
        dropped=dropped,
    )


@dataclass
class TrainState:
    step: int
    optimizer: torch.optim.Optimizer
    ema: EMA
    loss_history: Dict[str, List[float]] = field(default_factory=dict)

    def record(self, result: StepResult):
        self.loss_history.setdefault("total", []).append(result.total)
        for m, v in result.losses.items():
            self.loss_history.setdefault(m, []).append(v)


def make_optimizer(params, cfg: StructDiffConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=cfg.train.lr, weight_decay=cfg.train.wd, betas=tuple(cfg.train.betas))


class Stage1Trainer:
    """
    Trains a structural UNet on a SceneDataset and writes checkpoints and a
    loss CSV under run_dir.
    """

    def __init__(self, cfg: StructDiffConfig, dataset: SceneDataset, run_dir: Optional[Union[str, Path]] = None, calibration: Optional[SceneDataset] = None):
        self.cfg = cfg
        self.dataset = dataset
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.device = torch.device(cfg.runtime.device)
        self.schedule = schedule_from_config(cfg)
        self.prediction = cfg.schedule.prediction
        torch.manual_seed(cfg.seed)
        self.net = build_model(branch_config_from(cfg)).to(self.device)
        calibration = calibration if calibration is not None else dataset
        self.stats = fit_modality_stats((calibration[i] for i in range(len(calibration))), self.net.modalities)
        self.generator = make_generator(cfg.seed)
        self.state = TrainState(
            step=0,
            optimizer=make_optimizer(self.net.parameters(), cfg),
            ema=EMA(self.net, cfg.train.ema_decay),
        )

    def _batch(self) -> Dict[str, torch.Tensor]:
        idx = torch.randint(0, len(self.dataset), (self.cfg.train.batch,), generator=self.generator)
        return self.dataset.stacked(idx.tolist())

    def step(self) -> StepResult:
        result = training_step(
            self.net,
            self._batch(),
            self.schedule,
            self.stats,
            self.generator,
            self.state.optimizer,
            ema=self.state.ema,
            dropout=self.cfg.train.dropout,
            prediction=self.prediction,
            timestep_mode=self.cfg.train.timestep_mode,
            loss_weights=self.cfg.train.loss_weights or None,
        )
        self.state.step += 1
        self.state.record(result)
        return result

    def save(self, name: Optional[str] = None) -> Optional[Path]:
        if self.run_dir is None:
            return None
        ckpt_dir = self.run_dir / "ckpt"
        path = save_stage1_checkpoint(
            ckpt_dir / (name or f"step_{self.state.step}.pt"),
            self.net,
            self.state.ema.model,
            self.schedule,
            self.stats,
            self.cfg.model_dump(mode="json"),
            self.state.step,
            self.prediction,
            self.state.optimizer,
        )
        return path

    def train(self, steps: Optional[int] = None) -> Dict:
        steps = steps or self.cfg.train.steps
        csv_file = None
        writer = None
        if self.run_dir is not None:
            csv_file = open(self.run_dir / "losses.csv", "w", newline="", encoding="utf-8")
            writer = csv.writer(csv_file)
            writer.writerow(["step", "total"] + list(self.net.modalities))
        start = time.time()
        try:
            progress = tqdm(range(steps), desc="train-stage1")
            for _ in progress:
                result = self.step()
                if writer is not None:
                    writer.writerow([self.state.step, f"{result.total:.8f}"] + [f"{result.losses[m]:.8f}" for m in self.net.modalities])
                progress.set_description(f"[step {self.state.step}] loss {result.total:.5f}")
                if self.state.step % self.cfg.train.log_every == 0:
                    logger.info(f"step {self.state.step}: total={result.total:.5f} " + " ".join(f"{m}={v:.5f}" for m, v in result.losses.items()))
                if self.state.step % self.cfg.train.checkpoint_every == 0:
                    self.save()
        finally:
            if csv_file is not None:
                csv_file.close()
        latest = self.save("latest.pt")
        elapsed = time.time() - start
        final = self.state.loss_history["total"][-1] if self.state.loss_history else math.nan
        logger.info(f"✅ Stage-1 training finished: {steps} steps in {elapsed:.1f}s, final loss {final:.5f}")
        return {
            "steps": self.state.step,
            "final_loss": final,
            "checkpoint": str(latest) if latest is not None else None,
            "elapsed_s": elapsed,
        }
