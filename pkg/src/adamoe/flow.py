"""Conditional flow matching on the straight noise-to-action path.

Training regresses a velocity field onto the constant target (noise - clean)
along the interpolation noisy = (1 - tau) * clean + tau * noise. Inference
walks the learned field backwards from pure noise with fixed-step Euler;
because the true target field is constant along the path, Euler recovers the
clean chunk exactly for any step count when fed the analytic field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError
from .tensor import Tensor, mse


@dataclass(frozen=True)
class FlowSample:
    """One training draw: clean chunk, its noise, and the interpolated point."""

    clean: np.ndarray
    noise: np.ndarray
    tau: float
    noisy: np.ndarray
    target: np.ndarray


@dataclass(frozen=True)
class IntegrationConfig:
    n_steps: int = 10

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def d_tau(self) -> float:
        return 1.0 / self.n_steps


def make_flow_sample(clean: np.ndarray, rng: np.random.Generator,
                     tau: float | None = None) -> FlowSample:
    """Draw noise ~ N(0, I) and tau ~ U[0, 1), interpolate, and set the target."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = rng.standard_normal(clean.shape)
    if tau is None:
        tau = float(rng.uniform(0.0, 1.0))
    noisy = (1.0 - tau) * clean + tau * noise
    return FlowSample(clean=clean, noise=noise, tau=tau, noisy=noisy,
                      target=noise - clean)


def fm_loss(v_pred: Tensor, sample: FlowSample) -> Tensor:
    """Mean squared error between the predicted velocity and the flow target."""
    if v_pred.shape != sample.target.shape:
        raise DimensionError(
            f"velocity shape {v_pred.shape} does not match target {sample.target.shape}")
    return mse(v_pred, Tensor(sample.target))


def integrate(v_field: Callable[[np.ndarray, object, float], np.ndarray],
              obs, start: np.ndarray, cfg: IntegrationConfig) -> np.ndarray:
    """Euler-integrate the velocity field from tau=1 down to tau=0.

    Applies chunk <- chunk - d_tau * v(chunk, obs, tau) at
    tau = 1, 1 - d_tau, ..., d_tau and returns the tau=0 endpoint.
    """
    chunk = np.array(start, dtype=np.float64, copy=True)
    d_tau = cfg.d_tau
    for step in range(cfg.n_steps):
        tau = 1.0 - step * d_tau
        v = np.asarray(v_field(chunk, obs, tau), dtype=np.float64)
        if v.shape != chunk.shape:
            raise DimensionError(f"velocity shape {v.shape} does not match chunk {chunk.shape}")
        if not np.isfinite(v).all():
            raise NumericalError(f"non-finite velocity at integration step {step} (tau={tau:.4f})")
        chunk -= d_tau * v
    return chunk
