"""
Noise schedules and the parameterization algebra built on them.

A schedule stores per-timestep signal and noise coefficients (alpha_t,
sigma_t) for t = 1..T. Index 0 is the clean endpoint (alpha_0 = 1,
sigma_0 = 0) and is only ever used as the final target of a DDIM
trajectory; training draws t from [1, T].

All conversion helpers operate on torch tensors and accept either a python
int or a LongTensor of per-sample timesteps.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch

from structdiff.utils.errors import (
    DegenerateScheduleError,
    InvalidRangeError,
    OrderingError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

Timestep = Union[int, torch.Tensor]

BETA_SCHEDULES = ("linear", "scaled_linear")
PREDICTIONS = ("v", "epsilon")


@dataclass(frozen=True)
class NoiseSchedule:
    """
    Per-timestep coefficients of z_t = alpha_t * x + sigma_t * eps.

    alpha and sigma are float64 vectors of length T (entry t-1 holds step t).
    Immutable after construction.
    """

    alpha: np.ndarray
    sigma: np.ndarray
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    beta_schedule: Optional[str] = None
    rescaled: bool = False
    variance_preserving: bool = True
    _alpha_full: np.ndarray = field(init=False, repr=False, compare=False)
    _sigma_full: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64).copy()
        sigma = np.asarray(self.sigma, dtype=np.float64).copy()
        if alpha.ndim != 1 or alpha.shape != sigma.shape:
            raise ShapeMismatchError(
                "alpha and sigma must be 1-D vectors of equal length",
                {"alpha": list(alpha.shape), "sigma": list(sigma.shape)},
            )
        if alpha.size < 1:
            raise InvalidRangeError("schedule needs at least one timestep")
        if np.any(alpha < 0) or np.any(alpha > 1) or np.any(sigma < 0) or np.any(sigma > 1):
            raise InvalidRangeError("alpha and sigma must lie in [0, 1]")
        if self.variance_preserving:
            err = float(np.max(np.abs(alpha ** 2 + sigma ** 2 - 1.0)))
            if err > 1e-6:
                raise InvalidRangeError(
                    "alpha^2 + sigma^2 deviates from 1", {"max_abs_error": err}
                )
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        alpha_full = np.concatenate([[1.0], alpha])
        sigma_full = np.concatenate([[0.0], sigma])
        alpha_full.setflags(write=False)
        sigma_full.setflags(write=False)
        object.__setattr__(self, "_alpha_full", alpha_full)
        object.__setattr__(self, "_sigma_full", sigma_full)

    @property
    def T(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def betas(self) -> np.ndarray:
        alphas_cumprod = np.concatenate([[1.0], self.alpha ** 2])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(alphas_cumprod[:-1] > 0, alphas_cumprod[1:] / alphas_cumprod[:-1], 0.0)
        return 1.0 - ratio

    @classmethod
    def from_alphas(cls, alpha, **metadata) -> "NoiseSchedule":
        alpha = np.asarray(alpha, dtype=np.float64)
        sigma = np.sqrt(np.clip(1.0 - alpha ** 2, 0.0, 1.0))
        return cls(alpha=alpha, sigma=sigma, **metadata)

    def alpha_at(self, t: int) -> float:
        return float(self._alpha_full[_check_int_timestep(t, self.T)])

    def sigma_at(self, t: int) -> float:
        return float(self._sigma_full[_check_int_timestep(t, self.T)])

    def snr(self, t: int) -> float:
        a, s = self.alpha_at(t), self.sigma_at(t)
        return float("inf") if s == 0 else (a * a) / (s * s)

    def coefficients(self, t: Timestep, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """alpha_t, sigma_t shaped to broadcast against ``like`` (batch-first)."""
        alpha_full = torch.as_tensor(self._alpha_full, dtype=like.dtype, device=like.device)
        sigma_full = torch.as_tensor(self._sigma_full, dtype=like.dtype, device=like.device)
        if isinstance(t, torch.Tensor) and t.ndim > 0:
            idx = t.to(device=like.device, dtype=torch.long)
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) > self.T):
                raise InvalidRangeError(
                    f"timesteps must lie in [0, {self.T}]",
                    {"min": int(idx.min()), "max": int(idx.max())},
                )
            if idx.shape[0] != like.shape[0]:
                raise ShapeMismatchError(
                    "one timestep per batch element expected",
                    {"timesteps": idx.shape[0], "batch": like.shape[0]},
                )
            shape = (-1,) + (1,) * (like.ndim - 1)
            return alpha_full[idx].view(shape), sigma_full[idx].view(shape)
        idx = _check_int_timestep(int(t), self.T)
        return alpha_full[idx], sigma_full[idx]

    def to_dict(self) -> Dict:
        return {
            "T": self.T,
            "alpha": self.alpha.tolist(),
            "sigma": self.sigma.tolist(),
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "beta_schedule": self.beta_schedule,
            "rescaled": self.rescaled,
            "variance_preserving": self.variance_preserving,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NoiseSchedule":
        return cls(
            alpha=np.asarray(data["alpha"], dtype=np.float64),
            sigma=np.asarray(data["sigma"], dtype=np.float64),
            beta_start=data.get("beta_start"),
            beta_end=data.get("beta_end"),
            beta_schedule=data.get("beta_schedule"),
            rescaled=bool(data.get("rescaled", False)),
            variance_preserving=bool(data.get("variance_preserving", True)),
        )


def _check_int_timestep(t: int, T: int) -> int:
    if t < 0 or t > T:
        raise InvalidRangeError(f"timestep {t} outside [0, {T}]")
    return int(t)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, names: str):
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{names} must share a shape", {"left": list(a.shape), "right": list(b.shape)}
        )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def build_schedule_from_betas(betas, **metadata) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise InvalidRangeError("betas must be a non-empty vector")
    if np.any(betas < 0) or np.any(betas >= 1):
        raise InvalidRangeError("betas must lie in [0, 1)")
    alphas_cumprod = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        alpha=np.sqrt(alphas_cumprod),
        sigma=np.sqrt(1.0 - alphas_cumprod),
        **metadata,
    )


def build_linear_schedule(T: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 0.012, beta_schedule: str = "linear") -> NoiseSchedule:
    """
    Standard DDPM schedule: alpha_t = sqrt(prod_{s<=t}(1 - beta_s)).

    ``linear`` spaces beta evenly; ``scaled_linear`` spaces sqrt(beta)
    evenly. beta_start = 0 is accepted for the degenerate zero-noise case.
    """
    if int(T) != T or T < 2:
        raise InvalidRangeError("T must be an integer >= 2", {"T": T})
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise InvalidRangeError(
            "expected 0 <= beta_start <= beta_end < 1",
            {"beta_start": beta_start, "beta_end": beta_end},
        )
    if beta_schedule == "linear":
        betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    elif beta_schedule == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, int(T), dtype=np.float64) ** 2
    else:
        raise InvalidRangeError(f"unknown beta schedule '{beta_schedule}'", {"allowed": list(BETA_SCHEDULES)})
    return build_schedule_from_betas(
        betas, beta_start=float(beta_start), beta_end=float(beta_end), beta_schedule=beta_schedule
    )


def rescale_terminal_snr(s: NoiseSchedule) -> NoiseSchedule:
    """
    Affine map of the alpha sequence pinning alpha_1 and sending alpha_T to 0:
    alpha'_t = (alpha_t - alpha_T) * alpha_1 / (alpha_1 - alpha_T).
    """
    a_first = float(s.alpha[0])
    a_last = float(s.alpha[-1])
    if not a_first > a_last:
        raise DegenerateScheduleError(
            "terminal rescale needs alpha_1 > alpha_T", {"alpha_1": a_first, "alpha_T": a_last}
        )
    alpha = (s.alpha - a_last) * (a_first / (a_first - a_last))
    alpha = np.clip(alpha, 0.0, 1.0)
    alpha[0] = a_first
    alpha[-1] = 0.0
    rescaled = NoiseSchedule.from_alphas(
        alpha,
        beta_start=s.beta_start,
        beta_end=s.beta_end,
        beta_schedule=s.beta_schedule,
        rescaled=True,
    )
    logger.debug(f"Rescaled schedule to zero terminal SNR (alpha_1={a_first:.6f}, old alpha_T={a_last:.6f})")
    return rescaled


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """``steps + 1`` trailing-spaced indices from T down to the clean index 0."""
    if steps < 1:
        raise InvalidRangeError("need at least one sampling step", {"steps": steps})
    if steps > T:
        raise InvalidRangeError("more sampling steps than training steps", {"steps": steps, "T": T})
    return np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)


# ---------------------------------------------------------------------------
# parameterization algebra
# ---------------------------------------------------------------------------

def add_noise(x: torch.Tensor, eps: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(x, eps, "x and eps")
    a, sg = s.coefficients(t, x)
    return a * x + sg * eps


def make_v_target(x: torch.Tensor, eps: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    """v_t = alpha_t * eps - sigma_t * x"""
    _check_same_shape(x, eps, "x and eps")
    a, sg = s.coefficients(t, x)
    return a * eps - sg * x


def v_to_x0(z_t: torch.Tensor, v: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z_t, v, "z_t and v")
    a, sg = s.coefficients(t, z_t)
    return a * z_t - sg * v


def v_to_eps(z_t: torch.Tensor, v: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z_t, v, "z_t and v")
    a, sg = s.coefficients(t, z_t)
    return sg * z_t + a * v


def eps_to_x0(z_t: torch.Tensor, eps: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z_t, eps, "z_t and eps")
    a, sg = s.coefficients(t, z_t)
    if bool(torch.any(a == 0)):
        raise DegenerateScheduleError("epsilon parameterization is undefined where alpha_t = 0")
    return (z_t - sg * eps) / a


def x0_to_eps(z_t: torch.Tensor, x0: torch.Tensor, t: Timestep, s: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z_t, x0, "z_t and x0")
    a, sg = s.coefficients(t, z_t)
    if bool(torch.any(sg == 0)):
        raise DegenerateScheduleError("noise is undefined where sigma_t = 0")
    return (z_t - a * x0) / sg


def make_target(x: torch.Tensor, eps: torch.Tensor, t: Timestep, s: NoiseSchedule, prediction: str = "v") -> torch.Tensor:
    if prediction == "v":
        return make_v_target(x, eps, t, s)
    if prediction == "epsilon":
        _check_same_shape(x, eps, "x and eps")
        return eps
    raise InvalidRangeError(f"unknown prediction type '{prediction}'", {"allowed": list(PREDICTIONS)})


def prediction_to_x0_eps(z_t: torch.Tensor, out: torch.Tensor, t: Timestep, s: NoiseSchedule, prediction: str = "v") -> Tuple[torch.Tensor, torch.Tensor]:
    if prediction == "v":
        return v_to_x0(z_t, out, t, s), v_to_eps(z_t, out, t, s)
    if prediction == "epsilon":
        return eps_to_x0(z_t, out, t, s), out
    raise InvalidRangeError(f"unknown prediction type '{prediction}'", {"allowed": list(PREDICTIONS)})


def ddim_step(z_t: torch.Tensor, v_hat: torch.Tensor, t_from: int, t_to: int, s: NoiseSchedule, prediction: str = "v") -> torch.Tensor:
    """
    Deterministic (eta = 0) DDIM update from t_from to t_to < t_from:
    z_{t_to} = alpha_{t_to} * x0_hat + sigma_{t_to} * eps_hat.
    """
    if int(t_to) >= int(t_from):
        raise OrderingError("DDIM steps must move to a smaller timestep", {"t_from": int(t_from), "t_to": int(t_to)})
    x0_hat, eps_hat = prediction_to_x0_eps(z_t, v_hat, int(t_from), s, prediction)
    a_to, s_to = s.coefficients(int(t_to), z_t)
    return a_to * x0_hat + s_to * eps_hat
