"""
Unit tests for the noise schedule and parameterization algebra
"""
import numpy as np
import pytest
import torch

from structdiff.diffusion.schedule import (
    NoiseSchedule,
    add_noise,
    build_linear_schedule,
    ddim_step,
    ddim_timesteps,
    eps_to_x0,
    make_target,
    make_v_target,
    rescale_terminal_snr,
    v_to_eps,
    v_to_x0,
)
from structdiff.utils.errors import DegenerateScheduleError, InvalidRangeError, OrderingError, ShapeMismatchError


def test_linear_schedule_is_variance_preserving():
    """
    Test that the linear schedule keeps alpha^2 + sigma^2 = 1.

    This test verifies:
    - alpha and sigma have one entry per training step
    - alpha decreases strictly while sigma increases
    - the clean index 0 has alpha = 1 and sigma = 0
    """
    s = build_linear_schedule(1000, 8.5e-4, 0.012)

    assert s.T == 1000
    assert np.allclose(s.alpha ** 2 + s.sigma ** 2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alpha) < 0)
    assert np.all(np.diff(s.sigma) > 0)
    assert s.alpha_at(0) == 1.0 and s.sigma_at(0) == 0.0
    assert s.alpha_at(1) == pytest.approx(np.sqrt(1 - 8.5e-4))


def test_scaled_linear_spacing():
    """Test that scaled_linear spaces sqrt(beta) evenly."""
    s = build_linear_schedule(10, 1e-4, 0.01, beta_schedule="scaled_linear")
    root = np.sqrt(s.betas)
    assert np.allclose(np.diff(root), np.diff(root)[0])


def test_rescale_reaches_zero_terminal_snr():
    """
    Test that rescaling pins alpha_1 and sends alpha_T to zero.

    This test verifies:
    - alpha_T == 0 exactly, so SNR at T is zero
    - alpha_1 is unchanged
    - the rescaled schedule stays variance preserving and monotone
    """
    s = build_linear_schedule(1000, 8.5e-4, 0.012)
    r = rescale_terminal_snr(s)

    assert r.rescaled
    assert r.alpha[-1] == 0.0
    assert r.sigma[-1] == pytest.approx(1.0)
    assert r.snr(1000) == 0.0
    assert r.alpha[0] == pytest.approx(s.alpha[0])
    assert np.allclose(r.alpha ** 2 + r.sigma ** 2, 1.0, atol=1e-12)
    assert np.all(np.diff(r.alpha) <= 0)


def test_rescale_rejects_flat_schedule():
    """Test that a zero-noise schedule cannot be rescaled."""
    s = build_linear_schedule(10, 0.0, 0.0)
    assert np.all(s.alpha == 1.0)
    with pytest.raises(DegenerateScheduleError):
        rescale_terminal_snr(s)


def test_invalid_schedule_arguments():
    """
    Test that malformed schedules are rejected.

    This test verifies:
    - T < 2 raises InvalidRangeError
    - beta_start > beta_end raises InvalidRangeError
    - alpha/sigma of different shapes raise ShapeMismatchError
    """
    with pytest.raises(InvalidRangeError):
        build_linear_schedule(1)
    with pytest.raises(InvalidRangeError):
        build_linear_schedule(10, 0.5, 0.1)
    with pytest.raises(ShapeMismatchError):
        NoiseSchedule(alpha=np.ones(3), sigma=np.zeros(4))


def test_ddim_timesteps_trailing():
    """
    Test the trailing DDIM timestep grid.

    This test verifies:
    - the grid starts at T and ends at the clean index 0
    - it holds steps + 1 strictly decreasing entries
    - invalid step counts raise InvalidRangeError
    """
    ts = ddim_timesteps(1000, 50)
    assert len(ts) == 51
    assert ts[0] == 1000 and ts[-1] == 0
    assert np.all(np.diff(ts) < 0)
    assert list(ddim_timesteps(4, 4)) == [4, 3, 2, 1, 0]
    with pytest.raises(InvalidRangeError):
        ddim_timesteps(10, 0)
    with pytest.raises(InvalidRangeError):
        ddim_timesteps(10, 11)


def test_v_parameterization_roundtrip(generator):
    """
    Test that the v target recovers both x0 and eps.

    This test verifies:
    - v_to_x0(add_noise(x, eps), v) == x
    - v_to_eps(add_noise(x, eps), v) == eps
    - per-sample timestep tensors broadcast over the batch
    """
    s = rescale_terminal_snr(build_linear_schedule(100))
    x = torch.randn(4, 3, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(4, 3, 8, 8, generator=generator, dtype=torch.float64)
    t = torch.tensor([1, 30, 70, 100])

    z = add_noise(x, eps, t, s)
    v = make_v_target(x, eps, t, s)

    assert torch.allclose(v_to_x0(z, v, t, s), x, atol=1e-10)
    assert torch.allclose(v_to_eps(z, v, t, s), eps, atol=1e-10)


def test_epsilon_undefined_at_terminal_step(generator):
    """Test that x0 from epsilon fails where alpha_T = 0."""
    s = rescale_terminal_snr(build_linear_schedule(20))
    z = torch.randn(1, 3, 4, 4, generator=generator)
    with pytest.raises(DegenerateScheduleError):
        eps_to_x0(z, torch.zeros_like(z), 20, s)


def test_make_target_rejects_unknown_prediction(generator):
    s = build_linear_schedule(10)
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(InvalidRangeError):
        make_target(x, x, 3, s, prediction="sample")


def test_ddim_step_with_exact_v_lands_on_x0(generator):
    """
    Test that a DDIM step to t = 0 with the true v returns the data.

    This test verifies:
    - eta = 0 updates are deterministic
    - stepping to the clean index reproduces x0
    - stepping the wrong way raises OrderingError
    """
    s = rescale_terminal_snr(build_linear_schedule(50))
    x = torch.randn(2, 3, 4, 4, generator=generator, dtype=torch.float64)
    eps = torch.randn(2, 3, 4, 4, generator=generator, dtype=torch.float64)
    z = add_noise(x, eps, 50, s)
    v = make_v_target(x, eps, 50, s)

    out = ddim_step(z, v, 50, 0, s)
    assert torch.allclose(out, x, atol=1e-10)

    mid = ddim_step(z, v, 50, 25, s)
    assert torch.allclose(mid, add_noise(x, eps, 25, s), atol=1e-10)

    with pytest.raises(OrderingError):
        ddim_step(z, v, 10, 10, s)


def test_schedule_serialization():
    s = rescale_terminal_snr(build_linear_schedule(30))
    restored = NoiseSchedule.from_dict(s.to_dict())
    assert np.allclose(restored.alpha, s.alpha)
    assert restored.rescaled


def test_schedule_is_immutable():
    s = build_linear_schedule(10)
    with pytest.raises(ValueError):
        s.alpha[0] = 0.5
