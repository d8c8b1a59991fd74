"""ELBO integrands and Monte Carlo NELBO estimators.

The per-token integrand exists in two algebraically identical forms. The
direct form materializes the mixed vector xbar = K*alpha*onehot(x) +
(1-alpha) and sums log ratios weighted by xbar; the reduced form evaluates
those inner sums analytically through the single scalar

    kappa = (1 - alpha) / (K alpha + 1 - alpha),

which removes the one-hot materialization and lowers estimator variance.
Their pointwise equality is the module's central identity and is enforced
by the test suite to 1e-9 relative.

Estimators report per-token nats with a plug-in standard error over Monte
Carlo rounds. Everything is pure given (denoiser, rng).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import processes, schedule

# Denoiser outputs are floored before logs/divisions; the integrand divides
# by model probabilities and nothing constrains them away from zero.
PROB_FLOOR = 1e-30

# Endpoint exclusion for time draws: the integrand weight -alpha'/(K alpha)
# degenerates at alpha in {0, 1}.
T_EPS_DISCRETE = 1e-6
T_EPS_GAUSSIAN = 1e-3


@dataclass(frozen=True)
class NoiseLevel:
    """Discrete level alpha, its time derivative, and the reduced scalar."""

    alpha: np.ndarray
    alpha_prime: np.ndarray
    kappa: np.ndarray

    @classmethod
    def from_alpha(cls, alpha, alpha_prime, K):
        alpha = np.asarray(alpha, dtype=np.float64)
        alpha_prime = np.asarray(alpha_prime, dtype=np.float64)
        kappa = (1.0 - alpha) / (K * alpha + 1.0 - alpha)
        return cls(alpha, alpha_prime, kappa)


@dataclass(frozen=True)
class NelboEstimate:
    """Monte Carlo estimate in nats per token."""

    mean: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("estimate needs at least one sample")
        if self.std_error < 0:
            raise ValueError("standard error cannot be negative")


@dataclass(frozen=True)
class CurriculumConfig:
    """Training window [beta, gamma] and softmax temperature tau."""

    tau: float
    beta: float
    gamma: float
    table: schedule.TransformTable

    def __post_init__(self):
        if not (0.0 <= self.beta < self.gamma <= 1.0):
            raise ValueError(f"need 0 <= beta < gamma <= 1, got [{self.beta}, {self.gamma}]")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")


def _mixed(values, alpha, K):
    """K*alpha*values + (1-alpha), the common change of variables."""
    return K * alpha * values + (1.0 - alpha)


def f_udlm(z_t, x_hat, level, x, K):
    """Direct integrand: materializes xbar and sums weighted log ratios.

    z_t, x: int arrays (...,); x_hat: (..., K); level fields broadcast over
    (...,). Returns nats, shape (...,).
    """
    z_t = np.asarray(z_t)
    x = np.asarray(x)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    alpha = np.asarray(level.alpha, dtype=np.float64)
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("alpha must lie in (0, 1)")
    aprime = np.asarray(level.alpha_prime, dtype=np.float64)
    xbar = _mixed(np.asarray(x[..., None] == np.arange(K), dtype=np.float64), alpha[..., None], K)
    xbar_th = np.maximum(_mixed(x_hat, alpha[..., None], K), PROB_FLOOR)
    xbar_i = np.take_along_axis(xbar, z_t[..., None], -1)[..., 0]
    xbar_th_i = np.take_along_axis(xbar_th, z_t[..., None], -1)[..., 0]
    log_ratio = (np.log(xbar_th_i)[..., None] - np.log(xbar_th)) + (
        np.log(xbar) - np.log(xbar_i)[..., None]
    )
    bracket = K / xbar_i - K / xbar_th_i - (xbar * log_ratio).sum(axis=-1) / xbar_i
    return -aprime / (K * alpha) * bracket


def f_duo(z_t, x_hat, level, x, K):
    """Reduced integrand: inner sums over the clean vertex done in closed
    form through kappa. Numerically equal to f_udlm."""
    z_t = np.asarray(z_t)
    x = np.asarray(x)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    alpha = np.asarray(level.alpha, dtype=np.float64)
    if np.any((alpha <= 0) | (alpha >= 1)):
        raise ValueError("alpha must lie in (0, 1)")
    aprime = np.asarray(level.alpha_prime, dtype=np.float64)
    kappa = np.asarray(level.kappa, dtype=np.float64)

    xbar_th = np.maximum(_mixed(x_hat, alpha[..., None], K), PROB_FLOOR)
    log_th = np.log(xbar_th)
    log_th_i = np.take_along_axis(log_th, z_t[..., None], -1)[..., 0]
    log_th_m = np.take_along_axis(log_th, x[..., None], -1)[..., 0]
    xbar_th_i = np.take_along_axis(xbar_th, z_t[..., None], -1)[..., 0]
    match = (z_t == x).astype(np.float64)
    xbar_i = K * alpha * match + (1.0 - alpha)

    sum_log = K * log_th_i - log_th.sum(axis=-1)
    bracket = (
        K / xbar_i
        - K / xbar_th_i
        - (kappa * match + (1.0 - match)) * sum_log
        - K * alpha / (1.0 - alpha) * (log_th_i - log_th_m) * (1.0 - match)
        - ((K - 1.0) * kappa * match - (1.0 - match) / kappa) * np.log(kappa)
    )
    return -aprime / (K * alpha) * bracket


def f_duo_grad(z_t, x_hat, level, x, K):
    """Value and gradient of the integrand with respect to x_hat.

    d f / d x_hat_k = -alpha' * [ delta_{k,i} (K/xbar_th_i^2
    - K/(xbar_i xbar_th_i)) + xbar_k / (xbar_i xbar_th_k) ], where i is the
    noisy-token index. The constant simplex component is annihilated later
    by any softmax-parameterized model. Floored coordinates get zero
    gradient.
    """
    z_t = np.asarray(z_t)
    x = np.asarray(x)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    alpha = np.asarray(level.alpha, dtype=np.float64)
    aprime = np.asarray(level.alpha_prime, dtype=np.float64)
    value = f_duo(z_t, x_hat, level, x, K)

    raw = _mixed(x_hat, alpha[..., None], K)
    xbar_th = np.maximum(raw, PROB_FLOOR)
    xbar = _mixed(np.asarray(x[..., None] == np.arange(K), dtype=np.float64), alpha[..., None], K)
    xbar_i = np.take_along_axis(xbar, z_t[..., None], -1)
    xbar_th_i = np.take_along_axis(xbar_th, z_t[..., None], -1)
    grad_bar = xbar / (xbar_i * xbar_th)
    spike = K / xbar_th_i**2 - K / (xbar_i * xbar_th_i)
    np.put_along_axis(grad_bar, z_t[..., None], np.take_along_axis(grad_bar, z_t[..., None], -1) + spike, -1)
    grad = -aprime[..., None] * grad_bar * (raw > PROB_FLOOR)
    return value, grad


def tempered_softmax(w, tau):
    """softmax(w / tau) with max subtraction; tau = 0 returns the one-hot
    argmax (lowest index on ties)."""
    w = np.asarray(w, dtype=np.float64)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0.0:
        ids = np.argmax(w, axis=-1)
        return np.asarray(ids[..., None] == np.arange(w.shape[-1]), dtype=np.float64)
    z = w / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def time_sampler(n, mode, domain=(0.0, 1.0), rng=None):
    """Draw n diffusion times on [a, b].

    iid: independent uniforms. low-discrepancy: one uniform per subinterval
    [a + (i-1)(b-a)/n, a + i(b-a)/n]. antithetic: mirrored pairs
    (t, a + b - t).
    """
    if n < 1:
        raise ValueError("need n >= 1 times")
    a, b = domain
    if not a < b:
        raise ValueError("domain must satisfy a < b")
    if mode == "iid":
        return a + (b - a) * rng.random(n)
    if mode == "low-discrepancy":
        return a + (b - a) * (np.arange(n) + rng.random(n)) / n
    if mode == "antithetic":
        half = (n + 1) // 2
        t = a + (b - a) * rng.random(half)
        return np.concatenate([t, (a + b) - t])[:n]
    raise ValueError(f"unknown time sampler mode {mode!r}")


def _sample_discrete_latents(x, alpha, K, rng):
    """z ~ alpha * onehot(x) + (1-alpha)/K for x (...,) and alpha (...,)."""
    keep = rng.random(x.shape) < alpha
    uniform = rng.integers(0, K, size=x.shape)
    return np.where(keep, x, uniform)


def _estimate(per_round):
    v = np.asarray(per_round, dtype=np.float64)
    n = v.size
    se = float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return NelboEstimate(float(v.mean()), se, n)


def _round_chunks(n_mc, per_round_cost, budget=4_000_000):
    block = max(1, int(budget // max(per_round_cost, 1)))
    starts = list(range(0, n_mc, block))
    return [(s, min(s + block, n_mc)) for s in starts]


def sequence_nelbo(seqs, denoiser, sched, sampler_mode="low-discrepancy", n_mc=1000, rng=None):
    """NELBO of a token-id batch under a discrete-valued schedule.

    seqs: (B, L) int ids. Per sequence, n_mc times are drawn by
    sampler_mode on [eps, 1-eps]; per round the latents are resampled and
    the reduced integrand is summed over positions. Returns per-token nats
    with the standard error taken across rounds.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if sched.kind == schedule.LINEAR_GAUSSIAN:
        raise ValueError("sequence_nelbo needs a discrete-valued schedule")
    seqs = np.asarray(seqs)
    B, L = seqs.shape
    K = _vocab_of(denoiser, sched)
    dom = (T_EPS_DISCRETE, 1.0 - T_EPS_DISCRETE)
    times = np.stack([time_sampler(n_mc, sampler_mode, dom, rng) for _ in range(B)], axis=1)
    per_round = np.empty(n_mc)
    for lo, hi in _round_chunks(n_mc, B * L * K):
        t = times[lo:hi]                       # (R, B)
        alpha, aprime = schedule.eval_alpha(sched, t)
        level = NoiseLevel.from_alpha(alpha[..., None], aprime[..., None], K)
        x = np.broadcast_to(seqs, (hi - lo, B, L))
        z = _sample_discrete_latents(x, alpha[..., None], K, rng)
        x_hat = denoiser(z, t[..., None], alpha[..., None])
        loss = f_duo(z, x_hat, level, x, K)    # (R, B, L)
        per_round[lo:hi] = loss.sum(axis=-1).mean(axis=-1) / L
    return _estimate(per_round)


def nelbo_gaussian_latents(seqs, denoiser, table, sampler_mode="low-discrepancy", n_mc=1000, rng=None):
    """Same estimand as sequence_nelbo with the via-transform schedule, but
    the latents are drawn in the Gaussian space and discretized by argmax.

    Ties in the argmax have probability zero and break to the lowest index.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    seqs = np.asarray(seqs)
    B, L = seqs.shape
    K = table.vocab_size
    sched = schedule.Schedule.via_transform(table)
    dom = (T_EPS_DISCRETE, 1.0 - T_EPS_DISCRETE)
    times = np.stack([time_sampler(n_mc, sampler_mode, dom, rng) for _ in range(B)], axis=1)
    per_round = np.empty(n_mc)
    for lo, hi in _round_chunks(n_mc, B * L * K):
        t = times[lo:hi]
        alpha, aprime = schedule.eval_alpha(sched, t)
        level = NoiseLevel.from_alpha(alpha[..., None], aprime[..., None], K)
        x = np.broadcast_to(seqs, (hi - lo, B, L))
        w = processes.gaussian_forward_sample(x, (1.0 - t)[..., None], K, rng)
        z = np.argmax(w, axis=-1)
        x_hat = denoiser(z, t[..., None], alpha[..., None])
        loss = f_duo(z, x_hat, level, x, K)
        per_round[lo:hi] = loss.sum(axis=-1).mean(axis=-1) / L
    return _estimate(per_round)


def gaussian_nelbo(seqs, gaussian_denoiser, K, n_mc=1000, rng=None, sampler_mode="low-discrepancy"):
    """NELBO of the Gaussian process itself: -E[snr'(t) |onehot(x) - xhat|^2]
    per token, with snr' analytic for the linear schedule and t drawn on
    [1e-3, 1 - 1e-3]."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    seqs = np.asarray(seqs)
    B, L = seqs.shape
    dom = (T_EPS_GAUSSIAN, 1.0 - T_EPS_GAUSSIAN)
    times = np.stack([time_sampler(n_mc, sampler_mode, dom, rng) for _ in range(B)], axis=1)
    per_round = np.empty(n_mc)
    onehot = np.asarray(seqs[..., None] == np.arange(K), dtype=np.float64)
    for lo, hi in _round_chunks(n_mc, B * L * K):
        t = times[lo:hi]
        x = np.broadcast_to(seqs, (hi - lo, B, L))
        w = processes.gaussian_forward_sample(x, (1.0 - t)[..., None], K, rng)
        x_hat = gaussian_denoiser(w, t[..., None], None)
        sq = ((onehot - x_hat) ** 2).sum(axis=-1)          # (R, B, L)
        nu_prime = schedule.snr_prime_linear(t)[..., None]
        per_round[lo:hi] = (-nu_prime * sq).sum(axis=-1).mean(axis=-1) / L
    return _estimate(per_round)


def curriculum_loss(seqs, config, denoiser, rng, n_mc=1):
    """Training loss on tempered-softmax latents over t ~ U[beta, gamma].

    Per draw: Gaussian latents at alpha_tilde = 1 - t, discrete tokens by
    argmax, denoiser fed softmax(w / tau) rows, and the reduced integrand
    is evaluated at alpha = T(alpha_tilde) from the cached table. With
    tau = 0 and [beta, gamma] = [0, 1] this is the unbiased estimator of
    nelbo_gaussian_latents; any other setting is a biased, lower-variance
    surrogate.

    Returns (per-token loss, diagnostics); diagnostics carry the per-draw
    values so variance probes need no second code path.
    """
    seqs = np.asarray(seqs)
    B, L = seqs.shape
    K = config.table.vocab_size
    sched = schedule.Schedule.via_transform(config.table)
    lo_t = max(config.beta, T_EPS_DISCRETE)
    hi_t = min(config.gamma, 1.0 - T_EPS_DISCRETE)
    per_round = np.empty(n_mc)
    times_all = np.empty((n_mc, B))
    for lo, hi in _round_chunks(n_mc, B * L * K):
        t = lo_t + (hi_t - lo_t) * rng.random((hi - lo, B))
        times_all[lo:hi] = t
        alpha, aprime = schedule.eval_alpha(sched, t)
        level = NoiseLevel.from_alpha(alpha[..., None], aprime[..., None], K)
        x = np.broadcast_to(seqs, (hi - lo, B, L))
        w = processes.gaussian_forward_sample(x, (1.0 - t)[..., None], K, rng)
        z = np.argmax(w, axis=-1)
        rows = tempered_softmax(w, config.tau)
        x_hat = denoiser(rows, t[..., None], alpha[..., None])
        loss = f_duo(z, x_hat, level, x, K)
        per_round[lo:hi] = loss.sum(axis=-1).mean(axis=-1) / L
    diagnostics = {"per_draw": per_round, "times": times_all}
    return float(per_round.mean()), diagnostics


def derive_curriculum_window(table, t_low=0.05, t_high=0.95):
    """[beta, gamma] such that T(1 - t) sweeps [t_low, t_high].

    The lower time edge is where the transform reaches t_high and the upper
    edge where it has fallen to t_low.
    """
    beta = 1.0 - schedule.invert(table, t_high)
    gamma = 1.0 - schedule.invert(table, t_low)
    return float(beta), float(gamma)


def _vocab_of(denoiser, sched):
    K = getattr(denoiser, "vocab_size", None)
    if K is None and sched.table is not None:
        K = sched.table.vocab_size
    if K is None:
        raise ValueError("cannot infer vocab size; denoiser lacks vocab_size")
    return K
