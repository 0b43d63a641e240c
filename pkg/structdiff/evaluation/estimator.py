"""
Supervised structure estimator

A small encoder-decoder trained on the exact labels of the synthetic world.
It predicts depth, surface normals and one heatmap per joint from RGB, and
its pooled bottleneck doubles as the feature extractor of the FID proxy.
An estimator may only be used for evaluation after it passes the
validation gate.
"""

import logging
import time
from pathlib import Path
from typing import Dict, Optional, Union

import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from structdiff.config import StructDiffConfig
from structdiff.synth.dataset import SceneDataset
from structdiff.synth.figure import JOINTS
from structdiff.utils.errors import DatasetIOError, GateFailureError, SchemaError, UnfittedError
from structdiff.utils.helpers import make_generator

logger = logging.getLogger(__name__)

ESTIMATOR_FORMAT = 1


def _conv(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.GroupNorm(min(8, c_out), c_out),
        nn.SiLU(),
    )


class EstimatorNet(nn.Module):
    def __init__(self, width: int = 32, joints: int = len(JOINTS)):
        super().__init__()
        self.width = width
        self.joints = joints
        self.enc1 = nn.Sequential(_conv(3, width), _conv(width, width))
        self.enc2 = nn.Sequential(_conv(width, 2 * width, stride=2), _conv(2 * width, 2 * width))
        self.enc3 = nn.Sequential(_conv(2 * width, 4 * width, stride=2), _conv(4 * width, 4 * width))
        self.dec2 = _conv(4 * width + 2 * width, 2 * width)
        self.dec1 = _conv(2 * width + width, width)
        self.depth_head = nn.Conv2d(width, 1, 3, padding=1)
        self.normal_head = nn.Conv2d(width, 3, 3, padding=1)
        self.heatmap_head = nn.Conv2d(width, joints, 3, padding=1)
        self.register_buffer("gate_passed", torch.tensor(False))

    @property
    def feature_dim(self) -> int:
        return 4 * self.width

    @property
    def gated(self) -> bool:
        return bool(self.gate_passed)

    def forward(self, rgb: torch.Tensor) -> Dict[str, torch.Tensor]:
        h1 = self.enc1(rgb)
        h2 = self.enc2(h1)
        h3 = self.enc3(h2)
        d2 = self.dec2(torch.cat([F.interpolate(h3, size=h2.shape[-2:], mode="nearest"), h2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=h1.shape[-2:], mode="nearest"), h1], dim=1))
        return {
            "depth": torch.tanh(self.depth_head(d1)),
            "normal": F.normalize(self.normal_head(d1), dim=1, eps=1e-6),
            "heatmaps": self.heatmap_head(d1),
            "features": h3.mean(dim=(-2, -1)),
        }


def require_gated(estimator: EstimatorNet):
    if not estimator.gated:
        raise UnfittedError("the estimator has not passed its validation gate")


def decode_keypoints(heatmaps: torch.Tensor) -> torch.Tensor:
    """Argmax pixel centers, [B, J, H, W] -> [B, J, 2] as (x, y)."""
    B, J, H, W = heatmaps.shape
    idx = heatmaps.reshape(B, J, H * W).argmax(dim=-1)
    ys = torch.div(idx, W, rounding_mode="floor")
    xs = idx - ys * W
    return torch.stack([xs, ys], dim=-1).to(torch.float32) + 0.5


def _keypoint_targets(keypoints: torch.Tensor, size: int):
    """Pixel index per joint and a visibility mask."""
    xy = keypoints[..., :2].floor().long().clamp(0, size - 1)
    visible = keypoints[..., 2] > 0.5
    return xy[..., 1] * size + xy[..., 0], visible


def estimator_loss(outputs: Dict[str, torch.Tensor], batch: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    depth = F.l1_loss(outputs["depth"], batch["depth"])
    normal = F.l1_loss(outputs["normal"], batch["normal"])
    B, J, H, W = outputs["heatmaps"].shape
    target, visible = _keypoint_targets(batch["keypoints"], W)
    logits = outputs["heatmaps"].reshape(B * J, H * W)
    ce = F.cross_entropy(logits, target.reshape(-1), reduction="none").reshape(B, J)
    mask = visible.to(ce.dtype)
    keypoint = (ce * mask).sum() / mask.sum().clamp_min(1.0)
    return {"total": depth + normal + 0.1 * keypoint, "depth": depth, "normal": normal, "keypoint": keypoint}


def pck(pred_xy: torch.Tensor, keypoints: torch.Tensor, threshold: float) -> float:
    visible = keypoints[..., 2] > 0.5
    if not bool(visible.any()):
        return 1.0
    dist = (pred_xy - keypoints[..., :2].to(pred_xy.dtype)).norm(dim=-1)
    return float((dist[visible] <= threshold).to(torch.float64).mean())


@torch.no_grad()
def validation_metrics(estimator: EstimatorNet, dataset: SceneDataset, batch_size: int = 64) -> Dict[str, float]:
    estimator.eval()
    device = next(estimator.parameters()).device
    depth_err, count = 0.0, 0
    hits = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset.stacked(range(start, min(start + batch_size, len(dataset))))
        out = estimator(batch["rgb"].to(device))
        depth_err += float((out["depth"].cpu() - batch["depth"]).abs().mean()) * batch["rgb"].shape[0]
        count += batch["rgb"].shape[0]
        hits.append(pck(decode_keypoints(out["heatmaps"]).cpu(), batch["keypoints"], 0.1 * dataset.resolution) * batch["rgb"].shape[0])
    return {"depth_l1": depth_err / max(count, 1), "pck": sum(hits) / max(count, 1), "n": count}


class EstimatorTrainer:
    """Supervised training followed by the validation gate."""

    def __init__(self, cfg: StructDiffConfig, train_set: SceneDataset, val_set: SceneDataset, run_dir: Optional[Union[str, Path]] = None, seed: Optional[int] = None):
        self.cfg = cfg
        self.train_set = train_set
        self.val_set = val_set
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.seed = cfg.seed if seed is None else seed
        self.device = torch.device(cfg.runtime.device)
        torch.manual_seed(self.seed)
        self.net = EstimatorNet(cfg.estimator.width).to(self.device)
        self.optimizer = torch.optim.AdamW(self.net.parameters(), lr=cfg.estimator.lr)
        self.generator = make_generator(self.seed)

    def train(self, steps: Optional[int] = None, enforce_gate: bool = True) -> Dict:
        steps = steps or self.cfg.estimator.steps
        start = time.time()
        self.net.train()
        progress = tqdm(range(steps), desc="train-estimator")
        for step in progress:
            idx = torch.randint(0, len(self.train_set), (self.cfg.estimator.batch,), generator=self.generator)
            batch = {k: v.to(self.device) for k, v in self.train_set.stacked(idx.tolist()).items()}
            losses = estimator_loss(self.net(batch["rgb"]), batch)
            self.optimizer.zero_grad(set_to_none=True)
            losses["total"].backward()
            self.optimizer.step()
            progress.set_description(f"[step {step + 1}] loss {float(losses['total']):.4f}")

        metrics = validation_metrics(self.net, self.val_set)
        metrics["elapsed_s"] = time.time() - start
        passed = metrics["depth_l1"] <= self.cfg.estimator.depth_l1_gate and metrics["pck"] >= self.cfg.estimator.pck_gate
        metrics["gate_passed"] = passed
        self.net.gate_passed.fill_(passed)
        logger.info(f"Estimator validation: depth_l1={metrics['depth_l1']:.4f} pck={metrics['pck']:.3f} gate={'pass' if passed else 'fail'}")
        if self.run_dir is not None:
            metrics["checkpoint"] = str(save_estimator(self.run_dir / "ckpt" / "estimator.pt", self.net, metrics))
        if enforce_gate and not passed:
            raise GateFailureError(
                "estimator failed its validation gate",
                {
                    "metrics": metrics,
                    "depth_l1_gate": self.cfg.estimator.depth_l1_gate,
                    "pck_gate": self.cfg.estimator.pck_gate,
                },
            )
        return metrics


def train_estimator(cfg: StructDiffConfig, train_set: SceneDataset, val_set: SceneDataset, run_dir=None, seed: Optional[int] = None) -> EstimatorNet:
    trainer = EstimatorTrainer(cfg, train_set, val_set, run_dir, seed)
    trainer.train()
    return trainer.net


def save_estimator(path: Union[str, Path], net: EstimatorNet, metrics: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"format": ESTIMATOR_FORMAT, "kind": "estimator", "width": net.width, "joints": net.joints, "params": net.state_dict(), "metrics": metrics or {}},
        path,
    )
    return path


def load_estimator(path: Union[str, Path], device: str = "cpu") -> EstimatorNet:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"estimator checkpoint not found: {path}", {"path": str(path)})
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "estimator" or payload.get("format") != ESTIMATOR_FORMAT:
        raise SchemaError(f"{path} is not an estimator checkpoint", {"kind": payload.get("kind")})
    net = EstimatorNet(payload["width"], payload["joints"])
    net.load_state_dict(payload["params"])
    return net.to(device).eval()
