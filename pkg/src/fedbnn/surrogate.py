"""Training-aware sign surrogate, weight mixing, and their gradients.

The surrogate F(x) is a continuous odd ramp that anneals toward
k*sign(x) as training progresses; its sharpness t and gain k follow a
log-linear schedule over the flattened (round, epoch) index, shared by
all clients so local training stays consistent across the federation.

Weight mixing has two stages:
  1. fuse:   w = lam*w_client + (1-lam)*w_server,   lam = sigmoid(omega)
  2. adjust: wt = w + a*b*(w_rot - w) + a*(1-b)*(w_server - w)
with a = |sin(theta)|, b = |sin(gamma)|. The coefficients of
(w, w_rot, w_server) are (1-a, a*b, a*(1-b)) and always sum to 1.
All gradients are hand-coded; the rotation is treated as a constant
during SGD.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rotation import RotationPair, rotate_adjoint


def sigmoid(x: float) -> float:
    # branch keeps exp() from overflowing for large |x|
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class MixParams:
    """Per-layer trainable mixing state.

    omega is the fusion logit (lam = sigmoid(omega)); theta and gamma
    parameterize the rotated/server mixing weights. The train_* flags
    let ablations pin omega or gamma at fixed values.
    """

    omega: float = 0.0
    theta: float = 0.1
    gamma: float = 0.1
    train_omega: bool = True
    train_gamma: bool = True

    @property
    def lam(self) -> float:
        return sigmoid(self.omega)

    @property
    def alpha(self) -> float:
        return abs(math.sin(self.theta))

    @property
    def beta(self) -> float:
        return abs(math.sin(self.gamma))


@dataclass(frozen=True)
class SurrogateSchedule:
    """Log-linear anneal of (t, k) over the flattened round/epoch index."""

    n_rounds: int
    n_local_epochs: int
    t_min: float = -2.0
    t_max: float = 1.0


def schedule_tk(sched: SurrogateSchedule, round_idx: int, epoch: int) -> tuple[float, float]:
    """t = 10^(t_min + frac*(t_max - t_min)), k = max(1/t, 1)."""
    if not 0 <= round_idx < sched.n_rounds:
        raise ValueError(f"round {round_idx} outside [0, {sched.n_rounds})")
    if not 0 <= epoch < sched.n_local_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {sched.n_local_epochs})")
    total = sched.n_rounds * sched.n_local_epochs
    frac = (round_idx * sched.n_local_epochs + epoch) / total
    t = 10.0 ** (sched.t_min + frac * (sched.t_max - sched.t_min))
    return t, max(1.0 / t, 1.0)


def surrogate_forward(x: np.ndarray, t: float, k: float) -> np.ndarray:
    """F(x): quadratic ramp for |x| < sqrt(2)/t, saturated at +-k beyond."""
    if t <= 0 or k <= 0:
        raise ValueError("surrogate needs t > 0 and k > 0")
    x = np.asarray(x, dtype=np.float64)
    s = np.sign(x)
    ramp = k * (-s * (t * t * x * x) / 2.0 + math.sqrt(2.0) * t * x)
    return np.where(np.abs(x) < math.sqrt(2.0) / t, ramp, k * s)


def surrogate_backward(x: np.ndarray, t: float, k: float) -> np.ndarray:
    """F'(x) = max(k*(sqrt(2)*t - |t^2 x|), 0); continuous, zero when saturated."""
    if t <= 0 or k <= 0:
        raise ValueError("surrogate needs t > 0 and k > 0")
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(k * (math.sqrt(2.0) * t - t * t * np.abs(x)), 0.0)


def ste_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass the cotangent where |x| <= 1."""
    return grad * (np.abs(x) <= 1.0)


def fuse_weights(w_client: np.ndarray, w_server: np.ndarray, omega: float) -> np.ndarray:
    """Sigmoid-gated interpolation between client and server weights."""
    if w_client.shape != w_server.shape:
        raise ValueError(f"shape mismatch {w_client.shape} vs {w_server.shape}")
    lam = sigmoid(omega)
    return lam * w_client + (1.0 - lam) * w_server


def adjust_rotated(w: np.ndarray, w_rot: np.ndarray, w_server: np.ndarray,
                   theta: float, gamma: float) -> np.ndarray:
    """Convex recombination of the fused, rotated, and server weights."""
    if not (w.shape == w_rot.shape == w_server.shape):
        raise ValueError(f"shape mismatch {w.shape}, {w_rot.shape}, {w_server.shape}")
    a = abs(math.sin(theta))
    b = abs(math.sin(gamma))
    return w + a * b * (w_rot - w) + a * (1.0 - b) * (w_server - w)


def grad_mixed_weight(grad_wtilde: np.ndarray, rot: RotationPair,
                      theta: float, gamma: float) -> np.ndarray:
    """Pull a cotangent on the adjusted weight back to the fused weight.

    The Jacobian d(wt)/d(w) is (1-a)I + a*b*R^T; its adjoint is applied
    through the matricized rotation, never forming the n x n matrix.
    """
    a = abs(math.sin(theta))
    b = abs(math.sin(gamma))
    g = np.asarray(grad_wtilde, dtype=np.float64).reshape(-1)
    return (1.0 - a) * g + a * b * rotate_adjoint(g, rot)


def _d_abs_sin(angle: float) -> float:
    # subgradient 0 at the kink keeps angle = 0 a fixed point
    return float(np.sign(math.sin(angle)) * math.cos(angle))


def grad_alpha_beta(grad_wtilde: np.ndarray, w: np.ndarray, w_rot: np.ndarray,
                    w_server: np.ndarray, theta: float, gamma: float) -> tuple[float, float]:
    """Gradients w.r.t. theta and gamma of the adjusted-weight map.

    sigma_alpha = <g, b*(w_rot - w_server) + (w_server - w)>
    sigma_beta  = <g, a*(w_rot - w_server)>
    chained through d|sin(.)|/d(.).
    """
    if not (w.shape == w_rot.shape == w_server.shape == np.shape(grad_wtilde)):
        raise ValueError("grad_alpha_beta operands must share a shape")
    a = abs(math.sin(theta))
    b = abs(math.sin(gamma))
    g = np.asarray(grad_wtilde, dtype=np.float64).reshape(-1)
    diff_rs = (w_rot - w_server).reshape(-1)
    sigma_alpha = float(g @ (b * diff_rs + (w_server - w).reshape(-1)))
    sigma_beta = float(g @ (a * diff_rs))
    return sigma_alpha * _d_abs_sin(theta), sigma_beta * _d_abs_sin(gamma)


def grad_omega(grad_w: np.ndarray, w_client: np.ndarray, w_server: np.ndarray,
               omega: float) -> float:
    """Gradient w.r.t. the fusion logit.

    grad_w is the cotangent already pulled back to the fused weight
    (i.e. after grad_mixed_weight); the fusion contributes
    d(w)/d(lam) = w_client - w_server and d(lam)/d(omega) = lam*(1-lam).
    """
    if w_client.shape != w_server.shape:
        raise ValueError(f"shape mismatch {w_client.shape} vs {w_server.shape}")
    lam = sigmoid(omega)
    inner = float(np.asarray(grad_w).reshape(-1) @ (w_client - w_server).reshape(-1))
    return inner * lam * (1.0 - lam)
