"""
Structure-guided refiner training

The frozen base predicts epsilon at 2R; only the guided encoder copy, the
condition embedders and the zero-initialized projections are optimized.
Conditions come from ground-truth structures with per-signal dropout.
"""

import csv
import logging
import time
from pathlib import Path
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F
from tqdm import tqdm

from structdiff.config import StructDiffConfig
from structdiff.diffusion.schedule import NoiseSchedule, add_noise
from structdiff.models.refiner import ConditionSet, StructureGuidedRefiner, build_refiner, dropout_conditions_stage2
from structdiff.synth.dataset import SceneDataset
from structdiff.training.checkpoint import load_stage1_checkpoint, save_refiner_checkpoint
from structdiff.training.stage1 import make_optimizer, sample_shared_timestep
from structdiff.training.stats import ModalityStats
from structdiff.utils.errors import NonFiniteLossError, ResolutionMismatchError
from structdiff.utils.helpers import make_generator

logger = logging.getLogger(__name__)


def refiner_loss(refiner: StructureGuidedRefiner, x0: torch.Tensor, cs: ConditionSet, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Epsilon-prediction MSE on the refined RGB."""
    x_t = add_noise(x0, eps, t, schedule)
    return F.mse_loss(refiner(x_t, t, cs), eps)


def training_step_refiner(
    refiner: StructureGuidedRefiner,
    batch: Dict[str, torch.Tensor],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    opt: torch.optim.Optimizer,
    dropout: float = 0.5,
    stats: Optional[ModalityStats] = None,
) -> float:
    refiner.train()
    device = refiner.trainable_parameters()[0].device
    batch = {k: v.to(device) for k, v in batch.items()}
    x0 = batch[refiner.modality]
    if stats is not None:
        x0 = stats.normalize_tensor(refiner.modality, x0)
    cs = dropout_conditions_stage2(ConditionSet.from_batch(batch), dropout, generator)
    t = sample_shared_timestep(x0.shape[0], schedule.T, generator).to(device)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype).to(device)

    loss = refiner_loss(refiner, x0, cs, t, eps, schedule)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("refiner loss is not finite", {"loss": float(loss.detach()), "timesteps": t.tolist()})
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return float(loss.detach())


class RefinerTrainer:
    """
    Wraps a trained base checkpoint in a refiner and trains it on scenes
    rendered at the refiner resolution.
    """

    def __init__(self, cfg: StructDiffConfig, base_path: Union[str, Path], dataset: SceneDataset, run_dir: Optional[Union[str, Path]] = None):
        self.cfg = cfg
        self.base_path = Path(base_path)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.device = torch.device(cfg.runtime.device)
        self.resolution = cfg.data.resolution * cfg.refiner.resolution_factor
        if dataset.resolution != self.resolution:
            raise ResolutionMismatchError(
                f"refiner dataset must be rendered at {self.resolution}",
                {"dataset": dataset.resolution, "expected": self.resolution},
            )
        self.dataset = dataset
        base, self.schedule, self.stats, _ = load_stage1_checkpoint(self.base_path, device=str(self.device))
        torch.manual_seed(cfg.seed)
        self.refiner = build_refiner(
            base,
            resolution=self.resolution,
            conditions=cfg.refiner.conditions,
            embedder_channels=cfg.refiner.embedder_channels,
            stride_mode=cfg.refiner.embedder_stride_mode,
        ).to(self.device)
        self.optimizer = make_optimizer(self.refiner.trainable_parameters(), cfg)
        self.generator = make_generator(cfg.seed)
        self.step_count = 0
        self.loss_history = []

    def step(self) -> float:
        idx = torch.randint(0, len(self.dataset), (self.cfg.train.batch,), generator=self.generator)
        loss = training_step_refiner(
            self.refiner,
            self.dataset.stacked(idx.tolist()),
            self.schedule,
            self.generator,
            self.optimizer,
            dropout=self.cfg.refiner.dropout,
            stats=self.stats,
        )
        self.step_count += 1
        self.loss_history.append(loss)
        return loss

    def save(self, name: Optional[str] = None) -> Optional[Path]:
        if self.run_dir is None:
            return None
        return save_refiner_checkpoint(
            self.run_dir / "ckpt" / (name or f"refiner_step_{self.step_count}.pt"),
            self.refiner,
            self.base_path,
            self.schedule,
            self.cfg.model_dump(mode="json"),
            self.step_count,
            self.resolution,
        )

    def train(self, steps: Optional[int] = None) -> Dict:
        steps = steps or self.cfg.train.steps
        start = time.time()
        csv_file = None
        writer = None
        if self.run_dir is not None:
            csv_file = open(self.run_dir / "refiner_losses.csv", "w", newline="", encoding="utf-8")
            writer = csv.writer(csv_file)
            writer.writerow(["step", "loss"])
        try:
            progress = tqdm(range(steps), desc="train-stage2")
            for _ in progress:
                loss = self.step()
                if writer is not None:
                    writer.writerow([self.step_count, f"{loss:.8f}"])
                progress.set_description(f"[step {self.step_count}] loss {loss:.5f}")
                if self.step_count % self.cfg.train.log_every == 0:
                    logger.info(f"refiner step {self.step_count}: loss={loss:.5f}")
                if self.step_count % self.cfg.train.checkpoint_every == 0:
                    self.save()
        finally:
            if csv_file is not None:
                csv_file.close()
        latest = self.save("refiner_latest.pt")
        elapsed = time.time() - start
        logger.info(f"✅ Refiner training finished: {steps} steps in {elapsed:.1f}s")
        return {
            "steps": self.step_count,
            "final_loss": self.loss_history[-1],
            "checkpoint": str(latest) if latest is not None else None,
            "elapsed_s": elapsed,
        }
