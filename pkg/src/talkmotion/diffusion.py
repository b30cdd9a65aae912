"""DDPM noise schedule, forward noising, ancestral reverse sampling and losses.

Step indices are 1-based throughout the public API (t in [1, T]). The
denoiser predicts the clean sample x0.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import as_tensor, mean, no_grad


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self):
        return self.betas.size

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bar(self):
        return np.cumprod(self.alphas)

    @property
    def alpha_bar_prev(self):
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def posterior_variance(self):
        """Variance of q(x_{t-1} | x_t, x0); exactly 0 at t=1."""
        return self.betas * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @property
    def posterior_variance_clipped(self):
        """posterior_variance with the t=1 entry replaced by the t=2 entry."""
        v = self.posterior_variance.copy()
        if v.size > 1:
            v[0] = v[1]
        return v

    @property
    def posterior_mean_coef1(self):
        return self.betas * np.sqrt(self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @property
    def posterior_mean_coef2(self):
        return (1.0 - self.alpha_bar_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bar)

    def at(self, name, t):
        """Value of a per-step array at 1-based step ``t`` (int or int array)."""
        self.check_step(t)
        return getattr(self, name)[np.asarray(t) - 1]

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step must lie in [1, {self.T}], got {t}")


def make_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear beta schedule over T steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T))


def scaled_schedule(T, beta_start=1e-4, beta_end=0.02, reference_T=1000):
    """Linear schedule whose betas are stretched by reference_T / T."""
    k = reference_T / T
    return make_schedule(T, beta_start * k, beta_end * k)


def q_sample(x0, t, eps, schedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` may be a scalar or one step per leading batch entry.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} differs from sample shape {x0.shape}")
    ab = schedule.at("alpha_bar", t)
    ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def p_sample_step(x_t, t, x0_pred, schedule, noise=None):
    """One ancestral step from the DDPM posterior given a predicted x0.

    The noise term is dropped at t=1, so the last step is deterministic.
    """
    schedule.check_step(t)
    c1 = schedule.posterior_mean_coef1[t - 1]
    c2 = schedule.posterior_mean_coef2[t - 1]
    out = c1 * np.asarray(x0_pred) + c2 * np.asarray(x_t)
    if t > 1:
        if noise is None:
            raise ValueError("noise is required for t > 1")
        out = out + np.sqrt(schedule.posterior_variance[t - 1]) * noise
    return out


def run_reverse_chain(predict_x0, shape, schedule, rng):
    """Generic reverse chain from standard Gaussian noise.

    ``predict_x0(x_t, t)`` returns the clean-sample estimate. Noise for each
    step is drawn from ``rng`` in a fixed order.
    """
    x = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        x0_hat = np.asarray(predict_x0(x, t), dtype=np.float64)
        noise = rng.standard_normal(shape) if t > 1 else None
        x = p_sample_step(x, t, x0_hat, schedule, noise)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite values in reverse chain at step t={t}")
    return x


def sample_sequence(model, cond, schedule, N, rng):
    """Sample one normalized N x d sequence from a trained denoiser."""
    if cond.frames != N:
        raise ValueError(f"condition length {cond.frames} != requested frames {N}")
    with no_grad():
        encoded = model.encode(cond.batched())

        def predict(x, t):
            memory = model.assemble(encoded, np.array([t]))
            return model.forward(x[None], memory).data[0]

        return run_reverse_chain(predict, (N, model.config.d), schedule, rng)


def diffusion_loss(x0, x0_pred):
    """Mean squared error over every frame and dimension."""
    x0, x0_pred = as_tensor(x0), as_tensor(x0_pred)
    if x0.shape != x0_pred.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x0_pred.shape}")
    diff = x0_pred - x0
    return mean(diff * diff)


def first_frame_loss(x0, x0_pred):
    """Mean squared error on frame 1 only (frame axis is second to last)."""
    x0, x0_pred = as_tensor(x0), as_tensor(x0_pred)
    if x0.shape != x0_pred.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x0_pred.shape}")
    if x0.ndim < 2 or x0.shape[-2] == 0:
        raise ValueError("first_frame_loss needs at least one frame")
    return diffusion_loss(x0[..., :1, :], x0_pred[..., :1, :])

