"""
Unit tests for guided sampling, the two-stage pipeline and sample outputs
"""
from unittest.mock import patch

import pytest
import torch
import torch.nn.functional as F
from torch import nn
from PIL import Image

from structdiff.diffusion.schedule import build_linear_schedule, make_target, rescale_terminal_snr, x0_to_eps
from structdiff.evaluation.estimator import EstimatorNet
from structdiff.evaluation.metrics import estimate
from structdiff.models.refiner import ConditionSet, build_refiner
from structdiff.models.structural_unet import BranchConfig, StructuralUNet
from structdiff.sampling.outputs import GRID_COLUMNS, HEADER_HEIGHT, load_samples, save_samples, write_labeled_grid
from structdiff.sampling.pipeline import (
    GenerationPipeline,
    generate_pipeline_set,
    generate_stage1_set,
    keypoints_from_array,
    pose_rasters,
    upsample_structure,
)
from structdiff.sampling.sampler import cfg_combine, postprocess_structures, sample_stage1, sample_stage2
from structdiff.synth.dataset import SceneDataset
from structdiff.training.stats import ModalityStats, fit_modality_stats, normalize
from structdiff.utils.errors import DatasetIOError, InvalidRangeError, ResolutionMismatchError, SchemaError, ShapeMismatchError, UnfittedError


@pytest.fixture
def scenes():
    return SceneDataset.synthetic(8, 0, 16, val_fraction=0.0)


@pytest.fixture
def stage1(scenes):
    torch.manual_seed(0)
    net = StructuralUNet(BranchConfig(width=8, multipliers=[1, 2], attention_heads=2))
    stats = fit_modality_stats(scenes[i] for i in range(len(scenes)))
    return net, rescale_terminal_snr(build_linear_schedule(50)), stats


@pytest.fixture
def refiner():
    torch.manual_seed(0)
    base = StructuralUNet(BranchConfig(modalities=[("rgb", 3)], width=8, multipliers=[1, 2], attention_heads=2, pose_channels=0, codec_factor=8))
    return build_refiner(base, resolution=32, embedder_channels=(4, 4, 8, 8))


def test_cfg_combine_exact_at_unit_and_zero():
    """
    Test the guidance combination.

    This test verifies:
    - scale 1 returns the conditional prediction exactly
    - scale 0 returns the unconditional prediction exactly
    - other scales extrapolate linearly
    """
    cond, uncond = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    assert torch.equal(cfg_combine(cond, uncond, 1.0), cond)
    assert torch.equal(cfg_combine(cond, uncond, 0.0), uncond)
    assert torch.allclose(cfg_combine(cond, uncond, 3.0), uncond + 3.0 * (cond - uncond))
    with pytest.raises(ShapeMismatchError):
        cfg_combine(cond, uncond[:1], 2.0)


def test_postprocess_structures():
    """
    Test clamping and normal re-projection.

    This test verifies:
    - values are clamped into [-1, 1]
    - foreground normals are unit length
    - background pixels get the sentinel (0, 0, 1)
    """
    depth = torch.full((1, 1, 2, 2), 0.5)
    depth[0, 0, 0, 0] = -0.95
    normal = torch.tensor([0.3, 0.4, 0.0]).view(1, 3, 1, 1).repeat(1, 1, 2, 2)
    normal[0, :, 1, 1] = 0.0
    out = postprocess_structures({"depth": depth * 3, "normal": normal})

    assert out["depth"].max() <= 1.0
    assert torch.allclose(out["normal"][0, :, 0, 1], torch.tensor([0.6, 0.8, 0.0]))
    assert torch.equal(out["normal"][0, :, 0, 0], torch.tensor([0.0, 0.0, 1.0]))
    assert torch.equal(out["normal"][0, :, 1, 1], torch.tensor([0.0, 0.0, 1.0]))


def test_stage1_sampling_is_seeded(stage1, scenes):
    """
    Test joint stage-1 sampling.

    This test verifies:
    - the same seed reproduces the same outputs
    - a different seed changes them
    - outputs are clamped and normals unit length
    - one trace record is written per DDIM step
    """
    net, schedule, stats = stage1
    batch = scenes.stacked([0, 1])
    trace = []

    a = sample_stage1(net, schedule, stats, batch["attrs"], batch["pose"], steps=3, cfg=2.0, seed=5, trace=trace)
    b = sample_stage1(net, schedule, stats, batch["attrs"], batch["pose"], steps=3, cfg=2.0, seed=5)
    c = sample_stage1(net, schedule, stats, batch["attrs"], batch["pose"], steps=3, cfg=2.0, seed=6)

    assert set(a) == {"rgb", "depth", "normal"}
    for m in a:
        assert torch.equal(a[m], b[m])
        assert a[m].abs().max() <= 1.0
    assert not torch.equal(a["rgb"], c["rgb"])
    assert torch.allclose(a["normal"].norm(dim=1), torch.ones(2, 16, 16), atol=1e-5)
    assert [r["step"] for r in trace] == [0, 1, 2]
    assert trace[0]["t"]["rgb"] == 50


def test_guidance_forward_count(stage1, scenes):
    """Test that guidance runs two passes per step and scale 1 runs one."""
    net, schedule, stats = stage1
    batch = scenes.stacked([0])
    with patch.object(net, "forward", wraps=net.forward) as forward:
        sample_stage1(net, schedule, stats, batch["attrs"], batch["pose"], steps=2, cfg=7.5)
        assert forward.call_count == 4
    with patch.object(net, "forward", wraps=net.forward) as forward:
        sample_stage1(net, schedule, stats, batch["attrs"], batch["pose"], steps=2, cfg=1.0)
        assert forward.call_count == 2


def test_stage1_needs_stats(stage1, scenes):
    net, schedule, _ = stage1
    batch = scenes.stacked([0])
    with pytest.raises(UnfittedError):
        sample_stage1(net, schedule, ModalityStats(), batch["attrs"], batch["pose"], steps=1)


def test_stage2_sampling(refiner):
    """
    Test structure-guided sampling at 2R.

    This test verifies:
    - output RGB is [B, 3, 32, 32] in [-1, 1]
    - sampling is reproducible for a seed
    - zero steps and mismatched maps are rejected
    """
    schedule = build_linear_schedule(50)
    cs = ConditionSet(
        pose_raster=torch.rand(2, 3, 32, 32),
        depth_map=torch.rand(2, 1, 32, 32),
        normal_map=torch.rand(2, 3, 32, 32),
        attrs=torch.tensor([[0, 1, 2], [3, 0, 1]]),
    )
    a = sample_stage2(refiner, schedule, None, cs, steps=2, cfg=3.0, seed=1)
    b = sample_stage2(refiner, schedule, None, cs, steps=2, cfg=3.0, seed=1)

    assert a.shape == (2, 3, 32, 32)
    assert a.abs().max() <= 1.0
    assert torch.equal(a, b)
    with pytest.raises(InvalidRangeError):
        sample_stage2(refiner, schedule, None, cs, steps=0)
    bad = ConditionSet(pose_raster=torch.rand(2, 3, 32, 32), depth_map=torch.rand(2, 1, 16, 16))
    with pytest.raises(ResolutionMismatchError):
        sample_stage2(refiner, schedule, None, bad, steps=1)


def test_pipeline_shapes(stage1, refiner, scenes):
    """
    Test the two-stage pipeline.

    This test verifies:
    - stage 1 returns R-resolution structures and RGB
    - the refiner returns RGB at 2R
    - user depth maps at the wrong size are rejected
    """
    net, schedule, stats = stage1
    pipeline = GenerationPipeline(net, schedule, stats, refiner, build_linear_schedule(50), steps=2, cfg=2.0)
    batch = scenes.stacked([0, 1])
    keypoints = [keypoints_from_array(k) for k in batch["keypoints"]]

    rgb, depth, normal, rgb_high = pipeline.run(batch["attrs"], batch["pose"], seed=0, keypoints=keypoints)

    assert rgb.shape == (2, 3, 16, 16)
    assert depth.shape == (2, 1, 16, 16)
    assert normal.shape == (2, 3, 16, 16)
    assert rgb_high.shape == (2, 3, 32, 32)
    with pytest.raises(ResolutionMismatchError):
        pipeline.run(batch["attrs"], batch["pose"], override_depth=torch.zeros(2, 1, 16, 16))


def test_pose_rasters_scale_keypoints(scenes):
    batch = scenes.stacked([0])
    keypoints = [keypoints_from_array(batch["keypoints"][0])]
    high = pose_rasters(keypoints, 16, factor=2)
    assert high.shape == (1, 3, 32, 32)
    assert high.sum() > 0
    assert pose_rasters(keypoints, 16).shape == (1, 3, 16, 16)


def test_generate_stage1_set(stage1, scenes):
    net, schedule, stats = stage1
    out = generate_stage1_set(net, schedule, stats, scenes, 3, steps=1, cfg=1.0, batch_size=2)
    assert out["rgb"].shape == (3, 3, 16, 16)
    assert out["keypoints"].shape == (3, 9, 3)


def test_labeled_grid(tmp_path):
    """Test that the grid has a header row and one row per sample."""
    pose = torch.rand(2, 3, 16, 16)
    path = write_labeled_grid(tmp_path / "grid.png", pose, torch.zeros(2, 3, 16, 16), torch.zeros(2, 1, 16, 16), torch.zeros(2, 3, 16, 16), torch.zeros(2, 3, 32, 32))
    with Image.open(path) as img:
        assert img.size == (72 * len(GRID_COLUMNS), HEADER_HEIGHT + 2 * 32)


def test_sample_bundle_files(tmp_path):
    path = save_samples(tmp_path / "s.npz", rgb=torch.zeros(1, 3, 4, 4), depth=None)
    loaded = load_samples(path)
    assert list(loaded) == ["rgb"]
    with pytest.raises(SchemaError):
        save_samples(tmp_path / "bad.npz", albedo=torch.zeros(1))
    with pytest.raises(DatasetIOError):
        load_samples(tmp_path / "missing.npz")


class ExactVNet(nn.Module):
    """Stands in for a structural UNet and returns the exact v target of known clean data."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.cfg = BranchConfig()
        self.sizecrop_embed = None
        self.anchor = nn.Parameter(torch.zeros(1))
        self.x0 = x0
        self.schedule = schedule

    @property
    def modalities(self):
        return self.cfg.modality_names

    def forward(self, noisy, t, attrs=None, pose=None, sizecrop=None):
        out = {}
        for m in self.modalities:
            eps = x0_to_eps(noisy[m], self.x0[m], t, self.schedule)
            out[m] = make_target(self.x0[m], eps, t, self.schedule, "v")
        return out


def test_exact_v_rollout_recovers_scene(scenes):
    """
    Test a full DDIM rollout driven by exact v predictions.

    This test verifies:
    - starting from pure noise, the sampler lands on the known scene
    - every modality matches within 1e-2 after denormalization
    """
    schedule = rescale_terminal_snr(build_linear_schedule(50))
    stats = fit_modality_stats(scenes[i] for i in range(len(scenes)))
    batch = scenes.stacked([0, 1])
    clean = normalize(batch, stats)
    net = ExactVNet({m: clean[m] for m in ("rgb", "depth", "normal")}, schedule)

    out = sample_stage1(net, schedule, stats, batch["attrs"], batch["pose"], steps=50, cfg=1.0, seed=3)

    expected = postprocess_structures({m: batch[m] for m in ("rgb", "depth", "normal")})
    for m in expected:
        assert (out[m] - expected[m]).abs().max() <= 1e-2, m


def test_v_sampling_requires_zero_terminal_snr(stage1, scenes):
    """
    Test that v-prediction sampling refuses a schedule with signal left at t = T.

    This test verifies:
    - a linear schedule without the terminal rescale raises InvalidRangeError for v
    - epsilon prediction still samples with that schedule
    """
    net, _, stats = stage1
    batch = scenes.stacked([0])
    plain = build_linear_schedule(50)

    with pytest.raises(InvalidRangeError):
        sample_stage1(net, plain, stats, batch["attrs"], batch["pose"], steps=1, cfg=1.0)
    out = sample_stage1(net, plain, stats, batch["attrs"], batch["pose"], steps=1, cfg=1.0, prediction="epsilon")
    assert out["rgb"].shape == (1, 3, 16, 16)


def test_override_maps_reach_the_refiner(stage1, refiner, scenes):
    """Test that user depth and normal maps replace the stage-1 predictions as conditions."""
    net, schedule, stats = stage1
    pipeline = GenerationPipeline(net, schedule, stats, refiner, build_linear_schedule(50), steps=1, cfg=1.0)
    batch = scenes.stacked([0, 1])
    depth = upsample_structure(batch["depth"], 32)
    normal = postprocess_structures({"normal": upsample_structure(batch["normal"], 32)})["normal"]

    with patch("structdiff.sampling.pipeline.sample_stage2", wraps=sample_stage2) as stage2:
        pipeline.run(batch["attrs"], batch["pose"], override_depth=depth, override_normal=normal)

    cs = stage2.call_args.args[3]
    assert torch.equal(cs.depth_map, depth)
    assert torch.equal(cs.normal_map, normal)


@pytest.mark.slow
def test_ground_truth_override_alignment(stage1, refiner):
    """
    Test the structure substitution on 64 paired samples.

    This test verifies:
    - with ground-truth depth and normal as refiner conditions, the median depth
      error of the refined images is no worse than with stage-1 predictions
    """
    net, schedule, stats = stage1
    data = SceneDataset.synthetic(64, 0, 16, val_fraction=0.0)
    pipeline = GenerationPipeline(net, schedule, stats, refiner, build_linear_schedule(50), steps=2, cfg=2.0)
    torch.manual_seed(0)
    estimator = EstimatorNet(8)
    estimator.gate_passed.fill_(True)
    truth = data.stacked()["depth"]

    def median_error(use_ground_truth: bool) -> float:
        samples = generate_pipeline_set(pipeline, data, 64, seed=0, batch_size=16, use_ground_truth=use_ground_truth)
        refined = F.interpolate(samples["rgb_high"], size=(16, 16), mode="area")
        pred = estimate(estimator, refined)["depth"]
        return float((pred - truth).pow(2).mean(dim=(1, 2, 3)).median())

    assert median_error(True) <= median_error(False)
