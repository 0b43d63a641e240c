"""
Unit tests for the structure estimator, evaluation metrics and ablation harness
"""
import json
from unittest.mock import patch

import numpy as np
import pytest
import torch

from structdiff.evaluation.ablation import (
    REFINER_ABLATIONS,
    STRUCTURAL_ABLATIONS,
    AblationRunner,
    ordering_table,
)
from structdiff.evaluation.estimator import (
    EstimatorNet,
    EstimatorTrainer,
    decode_keypoints,
    estimator_loss,
    load_estimator,
    pck,
    save_estimator,
)
from structdiff.evaluation.metrics import (
    MIN_FID_SAMPLES,
    estimate,
    evaluate_samples,
    fid_proxy,
    frechet_distance,
    l2_depth_error,
    l2_normal_error,
    pck_keypoints,
)
from structdiff.synth.dataset import SceneDataset
from structdiff.utils.errors import GateFailureError, InvalidRangeError, ShapeMismatchError, UnfittedError


def _gated(width: int = 8) -> EstimatorNet:
    torch.manual_seed(0)
    net = EstimatorNet(width)
    net.gate_passed.fill_(True)
    return net.eval()


def test_frechet_distance_of_shifted_features():
    """
    Test the Frechet distance on features with known statistics.

    This test verifies:
    - identical sets are at distance ~0
    - a mean shift adds its squared norm
    - the value is never negative
    """
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 4))
    shift = np.array([1.0, -2.0, 0.5, 0.0])

    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)
    assert frechet_distance(a, a + shift) == pytest.approx(float(shift @ shift), rel=1e-4)
    assert frechet_distance(a, a + 1e-9) >= 0.0


def test_frechet_distance_of_scaled_gaussians():
    """Test that N(0, I) vs N(0, 4I) in D dims is about D."""
    rng = np.random.default_rng(1)
    a = rng.normal(size=(20000, 3))
    b = 2.0 * rng.normal(size=(20000, 3))
    assert frechet_distance(a, b) == pytest.approx(3.0, abs=0.2)
    with pytest.raises(ShapeMismatchError):
        frechet_distance(a, b[:, :2])


def test_decode_keypoints_and_pck():
    """
    Test heatmap decoding and the PCK score.

    This test verifies:
    - the argmax pixel decodes to its center
    - PCK counts only visible joints
    - no visible joints scores 1.0
    """
    heatmaps = torch.zeros(1, 2, 8, 8)
    heatmaps[0, 0, 5, 3] = 1.0
    heatmaps[0, 1, 0, 7] = 1.0
    pred = decode_keypoints(heatmaps)
    assert torch.equal(pred, torch.tensor([[[3.5, 5.5], [7.5, 0.5]]]))

    keypoints = torch.tensor([[[3.5, 5.5, 1.0], [0.5, 0.5, 1.0]]])
    assert pck(pred, keypoints, 1.0) == 0.5
    hidden = keypoints.clone()
    hidden[0, 1, 2] = 0.0
    assert pck(pred, hidden, 1.0) == 1.0
    hidden[0, 0, 2] = 0.0
    assert pck(pred, hidden, 1.0) == 1.0


def test_estimator_outputs_and_loss():
    net = _gated()
    data = SceneDataset.synthetic(4, 0, 16, val_fraction=0.0).stacked()
    out = net(data["rgb"])
    assert out["depth"].shape == (4, 1, 16, 16)
    assert torch.allclose(out["normal"].norm(dim=1), torch.ones(4, 16, 16), atol=1e-4)
    assert out["heatmaps"].shape == (4, 9, 16, 16)
    assert out["features"].shape == (4, net.feature_dim)
    losses = estimator_loss(out, data)
    assert torch.isfinite(losses["total"])
    assert set(losses) == {"total", "depth", "normal", "keypoint"}


def test_metrics_require_gate():
    """Test that an estimator that never passed its gate cannot score samples."""
    net = EstimatorNet(8)
    with pytest.raises(UnfittedError):
        estimate(net, torch.zeros(1, 3, 16, 16))


def test_l2_errors_are_zero_against_own_predictions():
    """
    Test the structural consistency errors.

    This test verifies:
    - structures equal to the estimator's predictions score 0
    - misaligned batches raise ShapeMismatchError
    """
    net = _gated()
    rgb = SceneDataset.synthetic(3, 0, 16, val_fraction=0.0).stacked()["rgb"]
    pred = estimate(net, rgb)
    samples = {"rgb": rgb, "depth": pred["depth"], "normal": pred["normal"]}

    assert l2_depth_error(net, samples) == pytest.approx(0.0, abs=1e-10)
    assert l2_normal_error(net, samples) == pytest.approx(0.0, abs=1e-10)
    assert l2_depth_error(net, {"rgb": rgb, "depth": pred["depth"] + 0.5}) == pytest.approx(0.25, rel=1e-5)
    with pytest.raises(ShapeMismatchError):
        l2_depth_error(net, {"rgb": rgb, "depth": pred["depth"][:2]})


def test_fid_proxy_sample_floor():
    net = _gated()
    small = torch.zeros(MIN_FID_SAMPLES - 1, 3, 16, 16)
    with pytest.raises(InvalidRangeError):
        fid_proxy(net, small, torch.zeros(MIN_FID_SAMPLES, 3, 16, 16))


def test_fid_proxy_identical_sets():
    net = _gated()
    rgb = SceneDataset.synthetic(MIN_FID_SAMPLES, 0, 16, val_fraction=0.0).stacked()["rgb"]
    assert fid_proxy(net, rgb, rgb) == pytest.approx(0.0, abs=1e-4)


def test_pck_keypoints_threshold():
    net = _gated()
    data = SceneDataset.synthetic(2, 0, 16, val_fraction=0.0).stacked()
    assert pck_keypoints(net, data["rgb"], data["keypoints"], threshold=float("inf")) == 1.0
    score = pck_keypoints(net, data["rgb"], data["keypoints"])
    assert 0.0 <= score <= 1.0
    with pytest.raises(ShapeMismatchError):
        pck_keypoints(net, data["rgb"], data["keypoints"][:1])


def test_evaluate_samples_reports_available_metrics():
    net = _gated()
    data = SceneDataset.synthetic(2, 0, 16, val_fraction=0.0).stacked()
    report = evaluate_samples(net, {"rgb": data["rgb"], "depth": data["depth"], "keypoints": data["keypoints"]})
    assert report["n"] == 2
    assert set(report) == {"n", "l2_depth", "pck"}


def test_estimator_gate_failure(tiny_config, tmp_path):
    """
    Test that an undertrained estimator fails its gate.

    This test verifies:
    - GateFailureError is raised with the validation metrics
    - without enforcement the metrics are returned and the checkpoint is written
    - the failed gate survives a save/load round trip
    """
    train = SceneDataset.synthetic(8, 0, 16, val_fraction=0.0)
    val = SceneDataset.synthetic(4, 1, 16, val_fraction=0.0)

    with pytest.raises(GateFailureError) as exc:
        EstimatorTrainer(tiny_config, train, val).train()
    assert "depth_l1" in exc.value.details["metrics"]

    metrics = EstimatorTrainer(tiny_config, train, val, run_dir=tmp_path).train(enforce_gate=False)
    assert metrics["gate_passed"] is False
    assert not load_estimator(metrics["checkpoint"]).gated


def test_estimator_checkpoint_keeps_gate(tmp_path):
    path = save_estimator(tmp_path / "est.pt", _gated(), {"pck": 1.0})
    restored = load_estimator(path)
    assert restored.gated
    assert restored.width == 8


def test_ablation_registries():
    """Test the variant tables of both suites."""
    assert len(STRUCTURAL_ABLATIONS) == 7
    assert len(REFINER_ABLATIONS) == 9
    assert STRUCTURAL_ABLATIONS["full"] == {} and REFINER_ABLATIONS["full"] == {}
    assert STRUCTURAL_ABLATIONS["denoise_rgb"] == {"model.modalities": ["rgb"]}
    assert REFINER_ABLATIONS["only_text"] == {"refiner.conditions": ["attrs"]}


def test_ordering_table_majority():
    results = {
        "full": {0: {"fid_proxy": 1.0}, 1: {"fid_proxy": 2.0}, 2: {"fid_proxy": 5.0}},
        "half_blocks": {0: {"fid_proxy": 2.0}, 1: {"fid_proxy": 3.0}, 2: {"fid_proxy": 4.0}},
    }
    rows = ordering_table(results)
    assert rows == [{"variant": "half_blocks", "metric": "fid_proxy", "seeds": 3, "full_wins": 2, "full_better": True}]


def test_ablation_runner_writes_reports(tiny_config, tmp_path):
    """
    Test the suite driver with stubbed variant runs.

    This test verifies:
    - the full model is always included
    - the JSON report and ordering CSV are written
    - unknown suites are rejected
    """
    runner = AblationRunner(tiny_config, tmp_path, estimator=_gated(), companion=_gated())
    scores = {"full": 1.0, "half_blocks": 2.0}
    with patch.object(AblationRunner, "run_structural_variant", side_effect=lambda name, seed: {"fid_proxy": scores[name]}):
        report = runner.run("structural", seeds=[0, 1], variants=["half_blocks"])

    assert report["variants"] == ["full", "half_blocks"]
    saved = json.loads((tmp_path / "ablation_structural.json").read_text())
    assert saved["results"]["half_blocks"]["1"] == {"fid_proxy": 2.0}
    assert saved["ordering"][0]["full_wins"] == 2
    assert (tmp_path / "ablation_structural_ordering.csv").exists()
    with pytest.raises(InvalidRangeError):
        runner.run("perceptual")


@pytest.mark.slow
def test_structural_ablation_end_to_end(tiny_config, tmp_path):
    """Test one real structural variant run with tiny models."""
    runner = AblationRunner(tiny_config, tmp_path, estimator=_gated(), companion=_gated())
    metrics = runner.run_structural_variant("denoise_rgb", 0)
    assert {"fid_proxy", "l2_depth", "l2_normal", "pck"} <= set(metrics)
