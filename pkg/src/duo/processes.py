"""Forward marginals, transition kernels, and reverse posteriors.

The discrete process mixes a point mass with the uniform prior 1/K:

    marginal(x; alpha)  = alpha * onehot(x) + (1 - alpha) / K.

The Gaussian process scales the one-hot vertex and adds isotropic noise:

    w ~ Normal(alpha_tilde * onehot(x), (1 - alpha_tilde**2) * I_K).

argmax(w) is distributed as marginal(x; T_K(alpha_tilde)), which is the
bridge exercised throughout the test harness. Only the uniform prior is
supported; a masked/absorbing prior has no such Gaussian preimage.

All functions are pure, broadcast over leading batch dimensions, and take
an explicit numpy Generator where randomness is involved.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr

from .schedule import LOG_SQRT_2PI

_QUAD_WINDOW = 12.0


def uniform_prior(K):
    return np.full(K, 1.0 / K)


def discrete_marginal(x, alpha, K):
    """Categorical alpha * onehot(x) + (1 - alpha)/K, batched over x/alpha.

    x: int array (...,); alpha: scalar or broadcastable (...,).
    Returns (..., K).
    """
    x = np.asarray(x)
    if np.any((x < 0) | (x >= K)):
        raise IndexError("token id out of range")
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    shape = np.broadcast_shapes(x.shape, alpha.shape)
    alpha_b = np.broadcast_to(alpha, shape)
    out = np.broadcast_to(((1.0 - alpha_b) / K)[..., None], shape + (K,)).copy()
    idx = np.broadcast_to(x, shape)[..., None]
    np.put_along_axis(out, idx, ((1.0 - alpha_b) / K + alpha_b)[..., None], -1)
    return out


def transition_kernel(z_s, alpha_ts, K):
    """One-step discrete kernel: keep with prob alpha_ts, else uniform."""
    return discrete_marginal(z_s, alpha_ts, K)


def sample_categorical(probs, rng):
    """Inverse-CDF draw from rows of probabilities.

    probs: (..., K). Returns int64 ids of shape (...,). Deterministic given
    the generator state.
    """
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])[..., None] * cdf[..., -1:]
    ids = (u > cdf).sum(axis=-1)
    ids = np.minimum(ids, p.shape[-1] - 1)
    return ids if ids.ndim else int(ids)


def transition_matrix(alpha, alpha_prime, K):
    """Generator of the uniform-state process, columns summing to zero.

    Q = (-alpha_prime / (K alpha)) * (ones - K I); since alpha is
    decreasing (alpha_prime <= 0) the off-diagonal rates are nonnegative.
    The forward marginal satisfies d/dt P(t) = Q P(t).
    """
    if alpha <= 0.0:
        raise ZeroDivisionError("transition matrix is singular at alpha = 0")
    rate = -alpha_prime / (K * alpha)
    return rate * (np.ones((K, K)) - K * np.eye(K))


def reverse_posterior(z_t, x_hat, alpha_s, alpha_t, K):
    """Posterior over the cleaner latent given z_t and a denoiser guess.

    Evaluates the exact single-token reverse posterior with the clean token
    replaced by the simplex vector x_hat: writing a = alpha_t / alpha_s,

        num = K alpha_t x_hat[z_t] onehot(z_t) + (a - alpha_t) onehot(z_t)
              + (alpha_s - alpha_t) x_hat + (1 - a)(1 - alpha_s)/K,

    normalized by K alpha_t x_hat[z_t] + 1 - alpha_t. Equivalent to Bayes
    rule with the per-clean-token mixture weighted by x_hat.

    z_t: int (...,); x_hat: (..., K); alpha_s, alpha_t scalar or (...,).
    """
    z_t = np.asarray(z_t)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    alpha_s = np.asarray(alpha_s, dtype=np.float64)
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    if np.any(alpha_s <= 0) or np.any(alpha_s > 1):
        raise ValueError("alpha_s must lie in (0, 1]")
    if np.any(alpha_t > alpha_s):
        raise ValueError("noise ordering violated: alpha_t must be <= alpha_s")
    a_ts = alpha_t / alpha_s
    xh_z = np.take_along_axis(x_hat, np.broadcast_to(z_t, x_hat.shape[:-1])[..., None], -1)[..., 0]
    denom = K * alpha_t * xh_z + 1.0 - alpha_t
    if np.any(denom <= 0):
        raise ValueError("degenerate posterior: alpha_t = 1 with x_hat[z_t] = 0")
    out = (alpha_s - alpha_t)[..., None] * x_hat + ((1.0 - a_ts) * (1.0 - alpha_s) / K)[..., None]
    spike = K * alpha_t * xh_z + a_ts - alpha_t
    idx = np.broadcast_to(z_t, out.shape[:-1])[..., None]
    np.put_along_axis(out, idx, np.take_along_axis(out, idx, -1) + spike[..., None], -1)
    out /= out.sum(axis=-1, keepdims=True)
    return out


def gaussian_forward_sample(x, alpha_tilde, K, rng, size=None):
    """Draw w = alpha_tilde * onehot(x) + sigma_tilde * eps.

    x: int (...,); returns (..., K), or (size,) + (..., K) when size is
    given.
    """
    x = np.asarray(x)
    at = np.asarray(alpha_tilde, dtype=np.float64)
    shape = np.broadcast_shapes(x.shape, at.shape) + (K,)
    if size is not None:
        shape = (size,) + shape
    sig = np.sqrt((1.0 - at) * (1.0 + at))
    w = rng.standard_normal(shape) * np.broadcast_to(sig, shape[:-1])[..., None]
    idx = np.broadcast_to(x, shape[:-1])[..., None]
    signal = np.broadcast_to(at, shape[:-1])[..., None]
    np.put_along_axis(w, idx, np.take_along_axis(w, idx, -1) + signal, -1)
    return w


def ddim_step(w_t, x_hat, alpha_tilde_s, alpha_tilde_t):
    """Deterministic reverse update of the Gaussian latent.

    eps_hat = (w_t - alpha_tilde_t * x_hat) / sigma_tilde_t, then
    w_s = alpha_tilde_s * x_hat + sigma_tilde_s * eps_hat. x_hat is the
    denoiser mean plugged in for the clean vertex.
    """
    at_s = np.asarray(alpha_tilde_s, dtype=np.float64)
    at_t = np.asarray(alpha_tilde_t, dtype=np.float64)
    if np.any(at_t > at_s):
        raise ValueError("noise ordering violated: alpha_tilde_t must be <= alpha_tilde_s")
    if np.any(at_t >= 1.0):
        raise ZeroDivisionError("sigma_tilde_t = 0: latent at t carries no noise to invert")
    w_t = np.asarray(w_t, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    sig_t = np.sqrt((1.0 - at_t) * (1.0 + at_t))
    sig_s = np.sqrt((1.0 - at_s) * (1.0 + at_s))
    eps_hat = (w_t - at_t[..., None] * x_hat) / sig_t[..., None]
    return at_s[..., None] * x_hat + sig_s[..., None] * eps_hat


def argmax_pushforward(mean, sigma, rel_tol=1e-8):
    """Exact law of argmax(Normal(mean, sigma**2 I)) by quadrature.

    probs[i] = integral phi(u) * prod_{j != i} Phi(u + (mean_i - mean_j)/sigma) du,

    evaluated in the log domain with adaptive composite Simpson on
    u in [-12, 12], doubling until consecutive levels agree to rel_tol.
    The result is checked to sum to 1 within 1e-8 and renormalized.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    mean = np.asarray(mean, dtype=np.float64)
    K = mean.size
    d = (mean[:, None] - mean[None, :]) / sigma  # d[i, j]
    n = 256
    s_prev = None
    while n <= 65536:
        u = np.linspace(-_QUAD_WINDOW, _QUAD_WINDOW, n + 1)
        lp = log_ndtr(u[None, None, :] + d[:, :, None])  # (K, K, n+1)
        g = lp.sum(axis=1) - np.diagonal(lp).T  # drop the j = i term
        g += -0.5 * u[None, :] ** 2 - LOG_SQRT_2PI
        v = np.exp(g)
        h = 2.0 * _QUAD_WINDOW / n
        s = h / 3.0 * (
            v[:, 0] + v[:, -1] + 4.0 * v[:, 1::2].sum(axis=1) + 2.0 * v[:, 2:-1:2].sum(axis=1)
        )
        if s_prev is not None and np.all(np.abs(s - s_prev) <= rel_tol * np.abs(s) + 1e-300):
            break
        s_prev = s
        n *= 2
    else:
        from .schedule import QuadratureError

        raise QuadratureError(
            f"argmax pushforward quadrature did not reach rel_tol={rel_tol}",
            achieved=float(np.max(np.abs(s - s_prev) / (np.abs(s) + 1e-300))),
        )
    total = s.sum()
    if abs(total - 1.0) > 1e-8:
        from .schedule import QuadratureError

        raise QuadratureError(
            f"pushforward mass {total} deviates from 1 beyond 1e-8",
            achieved=abs(total - 1.0),
        )
    return s / total
