"""
Evaluation metrics

Every metric is a pure function of its inputs and a gated estimator.
"""

import logging
import math
from typing import Dict, Optional

import numpy as np
import scipy.linalg
import torch

from structdiff.evaluation.estimator import EstimatorNet, decode_keypoints, pck, require_gated
from structdiff.utils.errors import InvalidRangeError, ShapeMismatchError

logger = logging.getLogger(__name__)

MIN_FID_SAMPLES = 64
DIAGONAL_LOADING = 1e-6


@torch.no_grad()
def estimate(estimator: EstimatorNet, rgb: torch.Tensor, batch_size: int = 64) -> Dict[str, torch.Tensor]:
    require_gated(estimator)
    estimator.eval()
    device = next(estimator.parameters()).device
    chunks = [estimator(rgb[i:i + batch_size].to(device=device, dtype=torch.float32)) for i in range(0, rgb.shape[0], batch_size)]
    return {k: torch.cat([c[k].cpu() for c in chunks]) for k in chunks[0]}


def _l2_error(estimator: EstimatorNet, rgb: torch.Tensor, structure: torch.Tensor, key: str) -> float:
    if rgb.shape[0] != structure.shape[0] or rgb.shape[-2:] != structure.shape[-2:]:
        raise ShapeMismatchError(f"rgb and {key} batches must align", {"rgb": list(rgb.shape), key: list(structure.shape)})
    pred = estimate(estimator, rgb)[key]
    return float(((structure.to(torch.float64) - pred.to(torch.float64)) ** 2).mean())


def l2_depth_error(estimator: EstimatorNet, samples: Dict[str, torch.Tensor]) -> float:
    """MSE between the generated depth and the estimator's depth from the generated RGB."""
    return _l2_error(estimator, samples["rgb"], samples["depth"], "depth")


def l2_normal_error(estimator: EstimatorNet, samples: Dict[str, torch.Tensor]) -> float:
    return _l2_error(estimator, samples["rgb"], samples["normal"], "normal")


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    w, v = scipy.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = DIAGONAL_LOADING) -> float:
    """
    ||m_a - m_b||^2 + Tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)

    Covariances get ``eps`` added to the diagonal; the square root is taken
    through symmetric eigendecompositions.
    """
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2 or feats_a.shape[1] != feats_b.shape[1]:
        raise ShapeMismatchError("feature sets must be [N, D] with the same D", {"a": list(feats_a.shape), "b": list(feats_b.shape)})
    eye = np.eye(feats_a.shape[1])
    m_a, m_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    c_a = np.cov(feats_a, rowvar=False) + eps * eye
    c_b = np.cov(feats_b, rowvar=False) + eps * eye
    root_a = _sqrt_psd(c_a)
    middle = root_a @ c_b @ root_a
    cross = np.sqrt(np.clip(scipy.linalg.eigvalsh((middle + middle.T) / 2.0), 0.0, None)).sum()
    value = float(np.sum((m_a - m_b) ** 2) + np.trace(c_a) + np.trace(c_b) - 2.0 * cross)
    return max(value, 0.0)


def fid_proxy(estimator: EstimatorNet, gen_rgb: torch.Tensor, real_rgb: torch.Tensor) -> float:
    """Frechet distance between estimator bottleneck features of two image sets."""
    for name, x in (("generated", gen_rgb), ("real", real_rgb)):
        if x.shape[0] < MIN_FID_SAMPLES:
            raise InvalidRangeError(f"{name} set needs at least {MIN_FID_SAMPLES} samples", {"n": int(x.shape[0])})
    feats_gen = estimate(estimator, gen_rgb)["features"].numpy()
    feats_real = estimate(estimator, real_rgb)["features"].numpy()
    return frechet_distance(feats_gen, feats_real)


def pck_keypoints(estimator: EstimatorNet, gen_rgb: torch.Tensor, keypoints: torch.Tensor, threshold: Optional[float] = None) -> float:
    """
    Fraction of visible conditioning joints found within ``threshold``
    pixels (default 0.1 * R) of the estimator's detection in the image.
    """
    if keypoints.shape[0] != gen_rgb.shape[0]:
        raise ShapeMismatchError("one skeleton per image", {"images": gen_rgb.shape[0], "skeletons": keypoints.shape[0]})
    if threshold is None:
        threshold = 0.1 * gen_rgb.shape[-1]
    pred = decode_keypoints(estimate(estimator, gen_rgb)["heatmaps"])
    if math.isinf(threshold):
        return 1.0
    return pck(pred, keypoints, threshold)


def evaluate_samples(estimator: EstimatorNet, samples: Dict[str, torch.Tensor], real_rgb: Optional[torch.Tensor] = None) -> Dict[str, float]:
    """All applicable metrics for one sample set."""
    report = {"n": int(samples["rgb"].shape[0])}
    if "depth" in samples:
        report["l2_depth"] = l2_depth_error(estimator, samples)
    if "normal" in samples:
        report["l2_normal"] = l2_normal_error(estimator, samples)
    if "keypoints" in samples:
        report["pck"] = pck_keypoints(estimator, samples["rgb"], samples["keypoints"])
    if real_rgb is not None and min(samples["rgb"].shape[0], real_rgb.shape[0]) >= MIN_FID_SAMPLES:
        report["fid_proxy"] = fid_proxy(estimator, samples["rgb"], real_rgb)
    return report
