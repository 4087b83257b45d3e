"""Cosine noise schedule, forward diffusion, velocity target and DDIM coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # index t = 0..T, alpha_bar[0] == 1
    a_coef: np.ndarray  # index t = 1..T (entry 0 unused, set to 1)
    b_coef: np.ndarray
    gamma: np.ndarray
    lam: np.ndarray
    num_steps: int
    offset: float = 0.008
    literal_lambda_sign: bool = False

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step out of range 1..{self.T}: {t}")

    def inference_steps(self, count: int | None = None) -> np.ndarray:
        """Uniform-stride sub-sequence of 1..T in descending order (ends with 1 <= t)."""
        count = self.T if count is None else int(count)
        if not 1 <= count <= self.T:
            raise ValueError(f"inference step count must be in 1..{self.T}, got {count}")
        steps = np.round(np.arange(1, count + 1) * self.T / count).astype(int)
        if np.any(np.diff(steps) <= 0):
            raise ValueError("inference steps must be strictly increasing")
        return steps[::-1]


def cosine_alpha_bar(T: int, offset: float = 0.008) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + offset) / (1 + offset) * np.pi / 2) ** 2
    ab = f / f[0]
    ab[0] = 1.0
    return np.maximum(ab, ALPHA_BAR_FLOOR)


def _coefficients(ab_t, ab_prev):
    ab_t = np.asarray(ab_t, dtype=np.float64)
    ab_prev = np.asarray(ab_prev, dtype=np.float64)
    a = np.sqrt(ab_prev * ab_t) + np.sqrt((1 - ab_prev) * (1 - ab_t))
    b = np.sqrt(ab_t * (1 - ab_prev)) - np.sqrt(ab_prev * (1 - ab_t))
    return a, b


def make_cosine_schedule(T: int, S: int = 4, offset: float = 0.008, literal_lambda_sign: bool = False) -> NoiseSchedule:
    """Cosine schedule with loss weights gamma_t = alpha_bar_t and lambda_t = |b_t| / S."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    ab = cosine_alpha_bar(T, offset)
    a, b = _coefficients(ab[1:], ab[:-1])
    a = np.concatenate([[1.0], a])
    b = np.concatenate([[0.0], b])
    lam = (b if literal_lambda_sign else np.abs(b)) / S
    return NoiseSchedule(T, ab, a, b, ab.copy(), lam, S, offset, literal_lambda_sign)


def ddim_coefficients(t: int, sched: NoiseSchedule, t_prev: int | None = None) -> tuple[float, float]:
    """(a_t, b_t) such that x_prev = a_t * x_t + b_t * v_hat for a velocity-predicting net.

    ``t_prev`` defaults to ``t - 1``; a strided sampler passes the next step of
    its sub-sequence (0 for the final step).
    """
    sched.check_step(t)
    if t_prev is None:
        return float(sched.a_coef[t]), float(sched.b_coef[t])
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must satisfy 0 <= t_prev < t, got {t_prev}, {t}")
    a, b = _coefficients(sched.alpha_bar[t], sched.alpha_bar[t_prev])
    return float(a), float(b)


def _ab(t, sched: NoiseSchedule, shape_like: np.ndarray) -> np.ndarray:
    sched.check_step(t)
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (shape_like.ndim - 1))
    return ab


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` may be a scalar or one step per batch row."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    ab = _ab(t, sched, x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(x0.dtype, copy=False)


def velocity_target(x0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) eps - sqrt(1 - ab_t) x0."""
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"velocity_target: x0 {x0.shape} vs eps {eps.shape}")
    ab = _ab(t, sched, x0)
    return (np.sqrt(ab) * eps - np.sqrt(1 - ab) * x0).astype(x0.dtype, copy=False)


def predict_x0(x_t, v, t, sched: NoiseSchedule):
    ab = _ab(t, sched, np.asarray(x_t))
    return np.sqrt(ab) * x_t - np.sqrt(1 - ab) * v


def predict_eps(x_t, v, t, sched: NoiseSchedule):
    ab = _ab(t, sched, np.asarray(x_t))
    return np.sqrt(1 - ab) * x_t + np.sqrt(ab) * v


def ddim_step(x_t: np.ndarray, net_out: np.ndarray, t: int, sched: NoiseSchedule, t_prev: int | None = None) -> np.ndarray:
    x_t, net_out = np.asarray(x_t), np.asarray(net_out)
    if x_t.shape != net_out.shape:
        raise ValueError(f"ddim_step: x_t {x_t.shape} vs net_out {net_out.shape}")
    a, b = ddim_coefficients(t, sched, t_prev)
    return (a * x_t + b * net_out).astype(x_t.dtype, copy=False)
