"""
Unit tests for stage-1 training
"""
import csv

import pytest
import torch

from structdiff.diffusion.schedule import build_linear_schedule, make_target, rescale_terminal_snr
from structdiff.models.structural_unet import BranchConfig, StructuralUNet
from structdiff.synth.dataset import SceneDataset
from structdiff.training.checkpoint import load_stage1_checkpoint
from structdiff.training.stage1 import (
    EMA,
    Stage1Trainer,
    branch_config_from,
    compute_losses,
    draw_timesteps,
    sample_shared_timestep,
    schedule_from_config,
    training_step,
)
from structdiff.training.stats import ModalityStats, fit_modality_stats, normalize
from structdiff.utils.errors import DegenerateChannelError, InvalidRangeError, NonFiniteLossError, UnfittedError


def _net(**kwargs) -> StructuralUNet:
    torch.manual_seed(0)
    cfg = dict(width=8, multipliers=[1, 2], attention_heads=2)
    cfg.update(kwargs)
    return StructuralUNet(BranchConfig(**cfg))


@pytest.fixture
def scenes():
    return SceneDataset.synthetic(8, 0, 16, val_fraction=0.0)


def test_modality_stats_standardize(scenes):
    """
    Test per-channel standardization of every modality.

    This test verifies:
    - normalized calibration data has zero mean and unit std per channel
    - denormalize inverts normalize
    - constant channels and unfitted stats raise
    """
    stats = fit_modality_stats(scenes[i] for i in range(len(scenes)))
    batch = scenes.stacked()
    normed = normalize(batch, stats)

    for m in ("rgb", "depth", "normal"):
        x = normed[m].to(torch.float64)
        assert torch.allclose(x.mean(dim=(0, 2, 3)), torch.zeros(x.shape[1], dtype=torch.float64), atol=1e-4)
        assert torch.allclose(x.std(dim=(0, 2, 3), unbiased=False), torch.ones(x.shape[1], dtype=torch.float64), atol=1e-3)
        restored = stats.denormalize_tensor(m, normed[m])
        assert torch.allclose(restored, batch[m], atol=1e-5)
    assert torch.equal(normed["attrs"], batch["attrs"])

    flat = [{"rgb": torch.ones(3, 4, 4)}]
    with pytest.raises(DegenerateChannelError):
        fit_modality_stats(flat, modalities=("rgb",))
    with pytest.raises(UnfittedError):
        normalize(batch, ModalityStats())
    with pytest.raises(InvalidRangeError):
        fit_modality_stats([], modalities=("rgb",))


def test_timestep_draws(generator):
    """
    Test shared and independent timestep sampling.

    This test verifies:
    - timesteps lie in [1, T]
    - shared mode gives every modality the same tensor
    - independent mode draws per modality
    """
    t = sample_shared_timestep(1000, 20, generator)
    assert int(t.min()) >= 1 and int(t.max()) <= 20
    assert int(t.min()) == 1 and int(t.max()) == 20

    shared = draw_timesteps(["rgb", "depth"], 64, 50, "shared", generator)
    assert shared["rgb"] is shared["depth"]
    independent = draw_timesteps(["rgb", "depth"], 64, 50, "independent", generator)
    assert not torch.equal(independent["rgb"], independent["depth"])

    with pytest.raises(InvalidRangeError):
        draw_timesteps(["rgb"], 2, 50, "staggered", generator)
    with pytest.raises(InvalidRangeError):
        sample_shared_timestep(2, 0)


def test_compute_losses_fits_fixed_batch(scenes):
    """
    Test that optimizing the v-loss on one fixed batch lowers it.

    This test verifies:
    - compute_losses returns per-modality terms and their sum
    - gradient steps on fixed (t, noise) reduce the total
    """
    net = _net()
    schedule = rescale_terminal_snr(build_linear_schedule(50))
    stats = fit_modality_stats(scenes[i] for i in range(len(scenes)))
    batch = normalize(scenes.stacked([0, 1]), stats)
    g = torch.Generator().manual_seed(3)
    t = torch.tensor([10, 35])
    timesteps = {m: t for m in net.modalities}
    noises = {m: torch.randn(batch[m].shape, generator=g) for m in net.modalities}
    opt = torch.optim.AdamW(net.parameters(), lr=2e-3)

    history = []
    for _ in range(25):
        losses = compute_losses(net, batch, timesteps, noises, schedule)
        assert torch.allclose(losses["total"], losses["rgb"] + losses["depth"] + losses["normal"])
        opt.zero_grad()
        losses["total"].backward()
        opt.step()
        history.append(float(losses["total"]))

    assert history[-1] < history[0]


def test_non_finite_loss_raises(scenes, generator):
    """Test that a NaN batch stops training with diagnostics."""
    net = _net()
    batch = scenes.stacked([0, 1])
    batch["rgb"] = torch.full_like(batch["rgb"], float("nan"))
    opt = torch.optim.AdamW(net.parameters())
    with pytest.raises(NonFiniteLossError) as exc:
        training_step(net, batch, build_linear_schedule(50), None, generator, opt)
    assert "timesteps" in exc.value.details


def test_independent_timesteps_step(scenes, generator):
    net = _net()
    opt = torch.optim.AdamW(net.parameters())
    result = training_step(net, scenes.stacked([0, 1, 2, 3]), build_linear_schedule(50), None, generator, opt, timestep_mode="independent")
    assert set(result.losses) == {"rgb", "depth", "normal"}
    assert result.timesteps["rgb"] is not result.timesteps["depth"]


def test_ema_tracks_model():
    """
    Test the EMA copy.

    This test verifies:
    - it starts at the raw weights
    - decay 0 copies the current weights on update
    - it never requires grad
    """
    net = _net()
    ema = EMA(net, decay=0.0)
    assert all(torch.equal(a, b) for a, b in zip(ema.model.parameters(), net.parameters()))
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1.0)
    ema.update(net)
    assert all(torch.equal(a, b) for a, b in zip(ema.model.parameters(), net.parameters()))
    assert not any(p.requires_grad for p in ema.model.parameters())


def test_config_mapping(tiny_config):
    cfg = branch_config_from(tiny_config)
    assert cfg.modality_names == ["rgb", "depth", "normal"]
    assert cfg.width == 8
    schedule = schedule_from_config(tiny_config)
    assert schedule.T == 50
    assert schedule.rescaled == tiny_config.schedule.rescale_terminal


def test_trainer_is_deterministic(tiny_config, golden):
    """
    Test that two trainers with the same config produce the same losses.

    This test verifies:
    - dataset sampling, dropout, timesteps and noise all follow the seed
    - the loss trace matches the stored golden values
    """
    data = SceneDataset.synthetic(8, 0, 16, val_fraction=0.0)
    a = Stage1Trainer(tiny_config, data)
    b = Stage1Trainer(tiny_config, data)
    a.train()
    b.train()

    assert a.state.loss_history["total"] == b.state.loss_history["total"]
    golden("stage1_tiny_losses", a.state.loss_history["total"], atol=1e-4)


def test_trainer_writes_checkpoint_and_log(tiny_config, tmp_path):
    """
    Test the trainer outputs.

    This test verifies:
    - losses.csv has one row per step
    - ckpt/latest.pt reloads into a network matching the EMA weights
    """
    data = SceneDataset.synthetic(8, 0, 16, val_fraction=0.0)
    trainer = Stage1Trainer(tiny_config, data, run_dir=tmp_path)
    result = trainer.train()

    with open(tmp_path / "losses.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "total", "rgb", "depth", "normal"]
    assert len(rows) == 1 + tiny_config.train.steps
    assert result["checkpoint"].endswith("latest.pt")

    net, schedule, stats, payload = load_stage1_checkpoint(result["checkpoint"])
    assert payload["step"] == tiny_config.train.steps
    assert payload["prediction"] == "v"
    for key, value in trainer.state.ema.model.state_dict().items():
        assert torch.equal(net.state_dict()[key], value)
    assert torch.allclose(stats.mean["rgb"], trainer.stats.mean["rgb"])


def test_loss_gradients_match_finite_differences(scenes):
    """
    Test the joint loss gradients in double precision.

    This test verifies:
    - autograd matches central differences on branch, trunk and head weights
    - a shared-trunk gradient is the sum of the per-modality gradients
    """
    net = _net().double().eval()
    g = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.02 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    schedule = rescale_terminal_snr(build_linear_schedule(50))
    stats = fit_modality_stats(scenes[i] for i in range(len(scenes)))
    batch = {k: v.double() if v.is_floating_point() else v for k, v in normalize(scenes.stacked([0, 1]), stats).items()}
    t = torch.tensor([12, 40])
    timesteps = {m: t for m in net.modalities}
    noises = {m: torch.randn(batch[m].shape, generator=g, dtype=torch.float64) for m in net.modalities}

    def total() -> torch.Tensor:
        return compute_losses(net, batch, timesteps, noises, schedule)["total"]

    named = dict(net.named_parameters())
    picks = [name for name in named if name.startswith("branches")][:1]
    picks += [name for name in named if name.startswith("mid.")][:1]
    picks += [next(reversed(named))]
    grads = torch.autograd.grad(total(), [named[n] for n in picks])

    eps = 1e-6
    for name, grad in zip(picks, grads):
        p = named[name]
        flat = p.data.view(-1)
        idx = int(grad.abs().view(-1).argmax())
        with torch.no_grad():
            flat[idx] += eps
            up = float(total())
            flat[idx] -= 2 * eps
            down = float(total())
            flat[idx] += eps
        numeric = (up - down) / (2 * eps)
        analytic = float(grad.view(-1)[idx])
        assert abs(numeric - analytic) <= 1e-3 * max(abs(analytic), 1e-8) + 1e-10, name

    shared = named[picks[1]]
    losses = compute_losses(net, batch, timesteps, noises, schedule)
    per_modality = sum(torch.autograd.grad(losses[m], shared, retain_graph=True)[0] for m in net.modalities)
    combined = torch.autograd.grad(losses["total"], shared)[0]
    assert torch.allclose(per_modality, combined, atol=1e-6)


def test_zero_output_loss_is_target_energy(scenes):
    """
    Test the loss of a net that predicts zeros everywhere.

    This test verifies:
    - each modality's loss is the mean squared v-target of the batch
    - the total is their sum
    """
    net = _net()
    with torch.no_grad():
        for branch in net.branches.values():
            for p in branch.conv_out.parameters():
                p.zero_()
    schedule = rescale_terminal_snr(build_linear_schedule(50))
    stats = fit_modality_stats(scenes[i] for i in range(len(scenes)))
    batch = normalize(scenes.stacked([0, 1, 2]), stats)
    g = torch.Generator().manual_seed(11)
    t = torch.tensor([1, 25, 50])
    timesteps = {m: t for m in net.modalities}
    noises = {m: torch.randn(batch[m].shape, generator=g) for m in net.modalities}

    with torch.no_grad():
        losses = compute_losses(net, batch, timesteps, noises, schedule)

    expected = {m: make_target(batch[m], noises[m], t, schedule, "v").pow(2).mean() for m in net.modalities}
    for m in net.modalities:
        assert torch.allclose(losses[m], expected[m], rtol=1e-5)
    assert torch.allclose(losses["total"], sum(expected.values()), rtol=1e-5)


@pytest.mark.slow
def test_hundred_step_losses_are_identical(tiny_config):
    """Test that two 100-step runs with the same seed give the same loss trajectory."""
    cfg = tiny_config.with_overrides({"train.steps": 100})
    data = SceneDataset.synthetic(8, 0, 16, val_fraction=0.0)
    a = Stage1Trainer(cfg, data)
    b = Stage1Trainer(cfg, data)
    a.train()
    b.train()

    assert len(a.state.loss_history["total"]) == 100
    assert a.state.loss_history["total"] == b.state.loss_history["total"]
