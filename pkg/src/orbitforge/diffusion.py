"""Continuous-time diffusion machinery with analytic oracles.

Implements denoiser preconditioning, log-normal noise-level sampling, the
denoising-score-matching objective, power-law sigma schedules, and a
deterministic Euler sampler for the probability-flow ODE with
classifier-free guidance.  Gaussian-mixture data distributions admit a
closed-form optimal denoiser, which is used throughout the test suite to
verify the sampler without any trained network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Preconditioner",
    "NoiseLevelDistribution",
    "NOISE_LEVEL_PRESETS",
    "GaussianMixture",
    "GaussianMixtureDenoiser",
    "GuidanceSchedule",
    "SigmaSchedule",
    "precondition",
    "denoise",
    "score_from_denoiser",
    "analytic_gm_denoiser",
    "dsm_loss",
    "edm_weight",
    "sample_sigma",
    "make_sigma_schedule",
    "ddim_sample",
    "cfg_combine",
    "guidance_schedule",
]

PRECONDITIONER_VARIANTS = ("edm-unit-sigma", "sd21-discrete")


def precondition(variant, sigma, sigma_table=None):
    """Return (c_skip, c_out, c_in, c_noise) for a noise level.

    ``edm-unit-sigma`` is the unit-data-variance parameterization:
    c_skip = 1/(sigma^2+1), c_out = -sigma/sqrt(sigma^2+1),
    c_in = 1/sqrt(sigma^2+1), c_noise = 0.25*ln(sigma).

    ``sd21-discrete`` keeps the epsilon-style scalings (c_skip = 1,
    c_out = -sigma) and maps sigma to the index of the nearest entry of a
    caller-supplied discrete sigma table.
    """
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if variant == "edm-unit-sigma":
        s2p1 = sigma * sigma + 1.0
        return (
            1.0 / s2p1,
            -sigma / math.sqrt(s2p1),
            1.0 / math.sqrt(s2p1),
            0.25 * math.log(sigma),
        )
    if variant == "sd21-discrete":
        if sigma_table is None:
            raise ValueError("sd21-discrete requires an explicit sigma_table")
        table = np.asarray(sigma_table, dtype=np.float64)
        if table.ndim != 1 or table.size == 0:
            raise ValueError("sigma_table must be a non-empty 1-D array")
        c_noise = float(np.argmin(np.abs(sigma - table)))
        return (1.0, -sigma, 1.0 / math.sqrt(sigma * sigma + 1.0), c_noise)
    raise ValueError(f"unknown preconditioner variant {variant!r}")


@dataclass(frozen=True)
class Preconditioner:
    """Scaling coefficients of a denoiser D(x; sigma) around a raw network."""

    variant: str = "edm-unit-sigma"
    sigma_table: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant not in PRECONDITIONER_VARIANTS:
            raise ValueError(f"unknown preconditioner variant {self.variant!r}")

    def coefficients(self, sigma):
        return precondition(self.variant, sigma, self.sigma_table)

    def c_skip(self, sigma):
        return self.coefficients(sigma)[0]

    def c_out(self, sigma):
        return self.coefficients(sigma)[1]

    def c_in(self, sigma):
        return self.coefficients(sigma)[2]

    def c_noise(self, sigma):
        return self.coefficients(sigma)[3]


def denoise(precond, raw_net, x, sigma, cond=None):
    """Evaluate the preconditioned denoiser.

    D(x; sigma) = c_skip * x + c_out * F(c_in * x; c_noise, cond) where F is
    the raw network ``raw_net(x_scaled, c_noise, cond)``.
    """
    x = np.asarray(x, dtype=np.float64)
    c_skip, c_out, c_in, c_noise = precond.coefficients(sigma)
    fx = np.asarray(raw_net(c_in * x, c_noise, cond), dtype=np.float64)
    if fx.shape != x.shape:
        raise ValueError(f"raw network output shape {fx.shape} != input {x.shape}")
    return c_skip * x + c_out * fx


def score_from_denoiser(d_value, x, sigma):
    """Score of the noised marginal: (D(x; sigma) - x) / sigma^2."""
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d_value = np.asarray(d_value, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if d_value.shape != x.shape:
        raise ValueError("denoiser output and x must have the same shape")
    return (d_value - x) / (sigma * sigma)


@dataclass(frozen=True)
class NoiseLevelDistribution:
    """Log-normal distribution over noise levels: ln(sigma) ~ N(mean, std^2)."""

    p_mean: float
    p_std: float

    def __post_init__(self):
        if self.p_std < 0.0:
            raise ValueError("p_std must be >= 0")

    def sample(self, rng, size=None):
        z = rng.standard_normal(size)
        return np.exp(self.p_mean + self.p_std * z)


# Training-stage presets for the log-sigma distribution.
NOISE_LEVEL_PRESETS: Mapping[str, NoiseLevelDistribution] = {
    "image-finetune": NoiseLevelDistribution(-1.2, 1.0),
    "video-pretrain-hires": NoiseLevelDistribution(0.0, 1.0),
    "text-to-video-hq": NoiseLevelDistribution(0.5, 1.4),
    "image-to-video-base": NoiseLevelDistribution(0.7, 1.6),
    "image-to-video-hq": NoiseLevelDistribution(1.0, 1.6),
}


def sample_sigma(noise_dist, rng, size=None):
    """Draw sigma = exp(p_mean + p_std * z) with z standard normal."""
    return noise_dist.sample(rng, size)


class GaussianMixture:
    """Isotropic Gaussian mixture used as an analytic data distribution.

    Components are (weight, mean, variance) with scalar variance per
    component; weights are normalized on construction.
    """

    def __init__(self, weights, means, variances):
        weights = np.asarray(weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        variances = np.asarray(variances, dtype=np.float64)
        if weights.ndim != 1 or weights.size == 0:
            raise ValueError("mixture needs at least one component")
        if np.any(weights < 0.0):
            raise ValueError("weights must be >= 0")
        total = weights.sum()
        if total <= 0.0:
            raise ValueError("weights must have a positive sum")
        if means.shape[0] != weights.size or variances.shape != weights.shape:
            raise ValueError("weights, means and variances must align")
        if np.any(variances < 0.0):
            raise ValueError("variances must be >= 0")
        self.weights = weights / total
        self.means = means
        self.variances = variances

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def sample(self, rng, n):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise

    def _component_logpdf(self, x, sigma):
        # log N(x; mu_k, (v_k + sigma^2) I) for every component, batched.
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma = np.asarray(sigma, dtype=np.float64)
        s2 = self.variances[None, :] + (sigma * sigma).reshape(-1, 1)
        diff = x[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff * diff, axis=-1)
        d = self.dim
        return -0.5 * (d * np.log(2.0 * np.pi * s2) + sq / s2), diff, s2

    def log_marginal(self, x, sigma):
        """ln p(x; sigma) of the sigma-smoothed mixture (closed form)."""
        if float(np.min(np.asarray(sigma))) < 0.0:
            raise ValueError("sigma must be >= 0")
        logp, _, _ = self._component_logpdf(x, sigma)
        logw = np.log(self.weights)[None, :]
        m = np.max(logp + logw, axis=1, keepdims=True)
        out = m[:, 0] + np.log(np.sum(np.exp(logp + logw - m), axis=1))
        return out if np.asarray(x).ndim > 1 else float(out[0])


def analytic_gm_denoiser(mixture, x, sigma):
    """Exact posterior mean E[x0 | x0 + n = x] under a Gaussian mixture.

    This is the global minimizer of the denoising-score-matching objective
    and serves as the stand-in for a trained denoiser.  ``sigma`` may be a
    scalar or a per-row vector matching a batched ``x``.
    """
    if mixture.n_components == 0:
        raise ValueError("empty mixture")
    x_arr = np.asarray(x, dtype=np.float64)
    single = x_arr.ndim == 1
    xb = np.atleast_2d(x_arr)
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0.0):
        raise ValueError("sigma must be >= 0")
    if sig.ndim == 0 and float(sig) == 0.0:
        return x_arr.copy()
    sig_b = np.broadcast_to(sig, (xb.shape[0],)) if sig.ndim <= 1 else sig
    logp, diff, s2 = mixture._component_logpdf(xb, sig_b)
    logw = logp + np.log(mixture.weights)[None, :]
    logw -= np.max(logw, axis=1, keepdims=True)
    resp = np.exp(logw)
    resp /= np.sum(resp, axis=1, keepdims=True)
    # Per-component posterior mean: mu_k + v_k/(v_k + sigma^2) (x - mu_k).
    shrink = mixture.variances[None, :] / s2
    post = mixture.means[None, :, :] + shrink[:, :, None] * diff
    out = np.sum(resp[:, :, None] * post, axis=1)
    # sigma == 0 rows are noiseless: the posterior collapses onto x.
    zero = np.asarray(sig_b) == 0.0
    if np.any(zero):
        out[zero] = xb[zero]
    return out[0] if single else out


class GaussianMixtureDenoiser:
    """Conditional analytic denoiser: an opaque token selects the mixture.

    The ``None`` token is the designated null/unconditional path used by
    classifier-free guidance.
    """

    def __init__(self, mixtures: Mapping[Hashable, GaussianMixture]):
        if not mixtures:
            raise ValueError("need at least one mixture")
        self.mixtures = dict(mixtures)

    def __call__(self, x, sigma, cond=None):
        try:
            mixture = self.mixtures[cond]
        except KeyError:
            raise ValueError(f"no mixture registered for token {cond!r}") from None
        return analytic_gm_denoiser(mixture, x, sigma)


def edm_weight(sigma):
    """DSM loss weight lambda(sigma) = (1 + sigma^2) / sigma^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (1.0 + sigma * sigma) / (sigma * sigma)


def dsm_loss(denoiser, data, noise_dist, rng, n_draws, weight=edm_weight, cond=None):
    """Monte-Carlo estimate of E[lambda(sigma) ||D(x0 + n; sigma) - x0||^2].

    ``data`` is either a GaussianMixture (sampled) or an array of data
    points (rows drawn uniformly with replacement).
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if isinstance(data, GaussianMixture):
        x0 = data.sample(rng, n_draws)
    else:
        data = np.atleast_2d(np.asarray(data, dtype=np.float64))
        x0 = data[rng.integers(0, data.shape[0], size=n_draws)]
    sigma = noise_dist.sample(rng, n_draws)
    noise = sigma[:, None] * rng.standard_normal(x0.shape)
    d_val = denoiser(x0 + noise, sigma, cond)
    sq = np.sum((d_val - x0) ** 2, axis=1)
    return float(np.mean(weight(sigma) * sq))


@dataclass(frozen=True)
class SigmaSchedule:
    """Strictly decreasing noise levels ending exactly at zero."""

    sigmas: np.ndarray

    def __post_init__(self):
        sig = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "sigmas", sig)
        if sig.ndim != 1 or sig.size < 2:
            raise ValueError("schedule needs at least [sigma_max, 0]")
        if sig[-1] != 0.0:
            raise ValueError("schedule must end at exactly 0")
        if np.any(np.diff(sig) >= 0.0):
            raise ValueError("schedule must be strictly decreasing")

    @property
    def n_steps(self):
        return self.sigmas.size - 1

    def __len__(self):
        return self.sigmas.size

    def __getitem__(self, i):
        return float(self.sigmas[i])


def make_sigma_schedule(sigma_max=80.0, sigma_min=0.002, n_steps=50, rho=7.0):
    """Power-law spacing between sigma_max and sigma_min plus a final zero.

    sigma_i = (sigma_max^(1/rho) + i/(n-1) * (sigma_min^(1/rho)
    - sigma_max^(1/rho)))^rho for i < n, sigma_n = 0.
    """
    if not (sigma_max > sigma_min > 0.0):
        raise ValueError("need sigma_max > sigma_min > 0")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if rho <= 0.0:
        raise ValueError("rho must be > 0")
    if n_steps == 1:
        body = np.array([sigma_max])
    else:
        hi = sigma_max ** (1.0 / rho)
        lo = sigma_min ** (1.0 / rho)
        t = np.arange(n_steps, dtype=np.float64) / (n_steps - 1)
        body = (hi + t * (lo - hi)) ** rho
    return SigmaSchedule(np.concatenate([body, [0.0]]))


def cfg_combine(d_cond, d_uncond, w):
    """Classifier-free guidance: w * D_cond - (w - 1) * D_uncond."""
    d_cond = np.asarray(d_cond, dtype=np.float64)
    d_uncond = np.asarray(d_uncond, dtype=np.float64)
    if d_cond.shape != d_uncond.shape:
        raise ValueError(
            f"conditional {d_cond.shape} and unconditional {d_uncond.shape} "
            "predictions must have the same shape"
        )
    return w * d_cond - (w - 1.0) * d_uncond


def _guided_denoise(denoiser, x, sigma, cond, w):
    d_cond = np.asarray(denoiser(x, sigma, cond), dtype=np.float64)
    if w == 1.0:
        # Guidance degenerates to the conditional prediction; skipping the
        # unconditional evaluation keeps the w=1 path bitwise identical.
        return d_cond
    d_uncond = np.asarray(denoiser(x, sigma, None), dtype=np.float64)
    return cfg_combine(d_cond, d_uncond, w)


def ddim_sample(
    denoiser,
    schedule,
    *,
    cond=None,
    guidance: Union[float, Sequence[float]] = 1.0,
    x_init=None,
    rng=None,
    n_samples=None,
    dim=None,
):
    """Deterministic Euler integration of the probability-flow ODE.

    x_{i+1} = x_i + (sigma_{i+1} - sigma_i) * (x_i - D^w(x_i; sigma_i)) /
    sigma_i, returning the state at sigma = 0.  ``guidance`` is a scalar or
    a per-step sequence of CFG strengths.  The chain is a pure function of
    (x_init, schedule, cond, guidance).
    """
    sig = schedule.sigmas
    n_steps = schedule.n_steps
    if x_init is None:
        if rng is None or dim is None:
            raise ValueError("provide x_init, or rng and dim")
        shape = (dim,) if n_samples is None else (n_samples, dim)
        x = sig[0] * rng.standard_normal(shape)
    else:
        x = np.array(x_init, dtype=np.float64, copy=True)
    w_arr = np.asarray(guidance, dtype=np.float64)
    if w_arr.ndim == 0:
        w_arr = np.full(n_steps, float(w_arr))
    elif w_arr.shape != (n_steps,):
        raise ValueError(f"per-step guidance must have length {n_steps}")
    for i in range(n_steps):
        s_cur = sig[i]
        s_next = sig[i + 1]
        d_val = _guided_denoise(denoiser, x, s_cur, cond, float(w_arr[i]))
        x = x + (s_next - s_cur) * (x - d_val) / s_cur
    return x


GUIDANCE_KINDS = ("constant", "linear", "triangular")


def guidance_schedule(kind, k, w_min, w_max, i):
    """Per-frame CFG strength for frame i of a k-frame orbit.

    constant: w_max everywhere.  linear: ramp from w_min at frame 0 to
    w_max at frame k-1.  triangular: tent over u = i/k, so frame 0 sits at
    w_min and the loop closes at the conditioning view with the peak at
    u = 0.5.
    """
    if not 0 <= i < k:
        raise ValueError(f"frame index {i} out of range for k={k}")
    if kind == "constant":
        return float(w_max)
    if kind == "linear":
        if k < 2:
            raise ValueError("linear schedule needs k >= 2")
        return float(w_min + (w_max - w_min) * (i / (k - 1)))
    if kind == "triangular":
        return float(w_min + (w_max - w_min) * (1.0 - abs(2.0 * i / k - 1.0)))
    raise ValueError(f"unknown guidance kind {kind!r}")


@dataclass(frozen=True)
class GuidanceSchedule:
    """Frame-indexed guidance strengths for a k-frame generation."""

    kind: str
    w_min: float
    w_max: float
    k: int

    def __post_init__(self):
        if self.kind not in GUIDANCE_KINDS:
            raise ValueError(f"unknown guidance kind {self.kind!r}")
        if self.w_min < 0.0 or self.w_max < 0.0:
            raise ValueError("guidance strengths must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def at(self, i):
        return guidance_schedule(self.kind, self.k, self.w_min, self.w_max, i)

    def values(self):
        return np.array([self.at(i) for i in range(self.k)])
