"""Samplers: ancestral generation, deterministic discrete trajectories,
and the marginal-preserving single-token reverse step.

Ancestral generation runs the reverse posterior on a uniform time grid
t_i = i / T from pure uniform noise down to the data; the greedy-tail
variant replaces the final draw (the step landing on t = 0) with the
argmax of that step's posterior, which trades entropy for fidelity.

A deterministic discrete trajectory (DDT) fixes one Gaussian noise vector
per token and discretizes the straight-line latent path:

    z(t) = argmax(alpha_tilde(t) * onehot(x) + sigma_tilde(t) * eps).

Along such a path each token changes at most once, at a closed-form time:
the signal coordinate wins while alpha_tilde / sigma_tilde exceeds
c = max_{j != x} eps_j - eps_x, so the flip sits at alpha_tilde* =
c / sqrt(1 + c**2). Argmax ties break to the lowest index everywhere
(probability-zero events under continuous noise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import processes, schedule
from .models import onehot as models_onehot


class InsufficientSamplesError(RuntimeError):
    """Rejection sampling kept too few draws to report a distribution."""

    def __init__(self, accepted, required):
        super().__init__(f"only {accepted} accepted draws (need >= {required})")
        self.accepted = accepted
        self.required = required


@dataclass(frozen=True)
class DdtPair:
    """Adjacent states of one deterministic discrete trajectory."""

    z_s: np.ndarray
    z_t: np.ndarray
    s: float
    t: float


def ancestral_generate(denoiser, K, L, T, greedy_tail=False, rng=None, n_samples=None, sched=None):
    """Generate by ancestral denoising over T uniform reverse steps.

    Returns (L,) ids, or (n_samples, L) when n_samples is given. The noise
    level follows the linear discrete schedule unless ``sched`` overrides
    it.
    """
    if T < 1:
        raise ValueError("need at least one reverse step")
    if sched is None:
        sched = schedule.Schedule.linear_discrete()
    batch = 1 if n_samples is None else n_samples
    z = rng.integers(0, K, size=(batch, L))
    for i in range(T, 0, -1):
        t = i / T
        s = (i - 1) / T
        alpha_t = sched.alpha(t)
        alpha_s = sched.alpha(s)
        x_hat = denoiser(z, t, alpha_t)
        posterior = processes.reverse_posterior(z, x_hat, alpha_s, alpha_t, K)
        if greedy_tail and i == 1:
            z = posterior.argmax(axis=-1)
        else:
            z = processes.sample_categorical(posterior, rng)
    return z[0] if n_samples is None else z


def ddt_state(x_seq, eps_seq, t):
    """Trajectory state argmax(alpha_tilde * onehot(x) + sigma_tilde * eps).

    x_seq: (..., L) ids; eps_seq: (..., L, K); t broadcastable against
    (..., L). A (T, 1)-shaped t scans a whole time grid at once.
    """
    x_seq = np.asarray(x_seq)
    eps_seq = np.asarray(eps_seq, dtype=np.float64)
    K = eps_seq.shape[-1]
    at = 1.0 - np.asarray(t, dtype=np.float64)
    sig = schedule.sigma_tilde(at)
    w = np.asarray(at)[..., None] * models_onehot(x_seq, K) + np.asarray(sig)[..., None] * eps_seq
    return np.argmax(w, axis=-1)


def ddt_pair(x_seq, eps_seq, t, delta):
    """States at t and s = max(t - delta, 0) from the same (x, eps)."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    s = max(t - delta, 0.0)
    z = ddt_state(x_seq, eps_seq, np.array([[s], [t]]))
    return DdtPair(z[0], z[1], s, float(t))


def flip_time(x, eps):
    """Closed-form change point of the single-token trajectory.

    c = max_{j != x} eps_j - eps_x. c <= 0 means the token never leaves x
    (returns 1). Otherwise the flip is at t* = 1 - c / sqrt(1 + c**2);
    before t* the token equals x, after it equals argmax(eps).
    """
    eps = np.asarray(eps, dtype=np.float64)
    others = np.delete(eps, x)
    c = others.max() - eps[x]
    if c <= 0:
        return 1.0
    return 1.0 - c / np.sqrt(1.0 + c * c)


def marginal_preserving_step(z_t, x_data, K, alpha_tilde_s, alpha_tilde_t, n_mc, rng, min_accept=100):
    """Monte Carlo estimate of the discrete reverse kernel induced by the
    Gaussian reverse flow, for a single token.

    Draws Gaussian latents at level alpha_tilde_t conditioned on x_data,
    keeps those whose argmax equals z_t, pushes the survivors one
    deterministic reverse step (optimal denoiser), and tallies the argmax
    at level alpha_tilde_s. Verification-grade: the conditional integral
    has no closed form, so the kernel is estimated, not deployed.

    Returns (probs, n_accepted).
    """
    if alpha_tilde_t > alpha_tilde_s:
        raise ValueError("noise ordering violated: alpha_tilde_t must be <= alpha_tilde_s")
    z_t = int(z_t)
    x_data = int(x_data)
    x_rows = models_onehot(x_data, K)
    counts = np.zeros(K, dtype=np.int64)
    accepted = 0
    block = 200_000
    done = 0
    while done < n_mc:
        take = min(block, n_mc - done)
        w_t = processes.gaussian_forward_sample(
            np.full(take, x_data), alpha_tilde_t, K, rng
        )
        keep = np.argmax(w_t, axis=-1) == z_t
        survivors = w_t[keep]
        if survivors.size:
            if alpha_tilde_s == alpha_tilde_t:
                w_s = survivors
            else:
                w_s = processes.ddim_step(survivors, x_rows, alpha_tilde_s, alpha_tilde_t)
            counts += np.bincount(np.argmax(w_s, axis=-1), minlength=K)
            accepted += survivors.shape[0]
        done += take
    if accepted < min_accept:
        raise InsufficientSamplesError(accepted, min_accept)
    return counts / accepted, accepted


def write_sample_dump(path, samples, K, L, T, greedy_tail, seed):
    """One sequence per line, space-separated ids, after a header comment
    recording the full sampler configuration."""
    samples = np.atleast_2d(np.asarray(samples))
    with open(path, "w") as fh:
        fh.write(f"# K={K} L={L} T={T} greedy_tail={int(bool(greedy_tail))} seed={seed}\n")
        for row in samples:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def read_sample_dump(path):
    """Inverse of write_sample_dump; returns (samples, header dict)."""
    with open(path) as fh:
        header_line = fh.readline().strip()
        if not header_line.startswith("# "):
            raise ValueError("sample dump missing header comment")
        header = {}
        for item in header_line[2:].split():
            key, val = item.split("=")
            header[key] = int(val)
        rows = [
            [int(v) for v in line.split()]
            for line in fh
            if line.strip()
        ]
    return np.asarray(rows, dtype=np.int64), header
