"""Statistical and numerical checks for every identity the toolkit rests
on: pushforward duality, the marginal ODE, the non-Markov trajectory
counterexample, the data-processing inequality, gradient contracts, and
estimator variance directions.

Reports are reproducible bit-for-bit given (seed, n). Thresholds come from
stated concentration bounds fixed up front, never tuned afterwards; each
report records the formula its threshold came from. Divergence checks that
drown in Monte Carlo noise report "inconclusive" rather than failing: an
inequality cannot be falsified by a noisy estimate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import models, processes, schedule

LOG_SQRT_2PI = schedule.LOG_SQRT_2PI


@dataclass(frozen=True)
class TestReport:
    """One named check: statistic against threshold, plus provenance."""

    name: str
    statistic: float
    threshold: float
    passed: bool
    n_samples: int = 0
    seed: int = -1
    comparison: str = "<="
    bound: str = ""
    status: str = ""

    def __post_init__(self):
        object.__setattr__(self, "status", self.status or ("pass" if self.passed else "fail"))

    def to_json(self):
        return json.dumps(asdict(self))


def write_reports(path, reports):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")


def read_reports(path):
    with open(path) as fh:
        return [TestReport(**json.loads(line)) for line in fh if line.strip()]


def tv_distance(p, q):
    """0.5 * L1 distance between probability vectors of equal length."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def duality_test(K, alpha_tilde, n, rng, seed=-1, rel_tol=1e-8):
    """Empirical argmax pushforward against the transformed marginal.

    n draws of the Gaussian forward latent (clean token 0), discretized by
    argmax, in total variation against marginal(0; T_K(alpha_tilde)). The
    threshold 3*sqrt(K/n) is a conservative union-style multinomial bound,
    chosen over per-cell chi-square to stay robust at small expected
    counts.
    """
    if n < 10_000:
        raise ValueError("duality test needs n >= 1e4")
    w = processes.gaussian_forward_sample(np.zeros(n, dtype=np.int64), alpha_tilde, K, rng)
    counts = np.bincount(np.argmax(w, axis=-1), minlength=K)
    target = processes.discrete_marginal(0, schedule.transform(alpha_tilde, K, rel_tol), K)
    stat = tv_distance(counts / n, target)
    thr = 3.0 * np.sqrt(K / n)
    return TestReport(
        name=f"duality K={K} at={alpha_tilde:g}",
        statistic=stat,
        threshold=thr,
        passed=stat <= thr,
        n_samples=n,
        seed=seed,
        bound="3*sqrt(K/n) multinomial TV bound",
    )


def ode_residual(t, x, K, table, h=1e-5):
    """Finite-difference check of the marginal evolution equation.

    P(t +- h) is built from table lookups of the transformed level; the
    central difference is compared against Q_t P(t) with the generator
    assembled from the same schedule's (alpha, alpha') at t. Threshold
    1e-4 at h = 1e-5.
    """
    if not h < t < 1.0 - h:
        raise ValueError("t must keep t +- h inside (0, 1)")
    sched = schedule.Schedule.via_transform(table)
    p_hi = processes.discrete_marginal(x, schedule.lookup(table, 1.0 - (t + h)), K)
    p_lo = processes.discrete_marginal(x, schedule.lookup(table, 1.0 - (t - h)), K)
    fd = (p_hi - p_lo) / (2.0 * h)
    alpha, aprime = schedule.eval_alpha(sched, t)
    rhs = processes.transition_matrix(alpha, aprime, K) @ processes.discrete_marginal(x, alpha, K)
    stat = float(np.abs(fd - rhs).max())
    return TestReport(
        name=f"ode-residual K={K} t={t:g}",
        statistic=stat,
        threshold=1e-4,
        passed=stat <= 1e-4,
        bound="max abs residual of dP/dt = Q P at h=1e-5",
    )


def nonmarkov_demo(w_s, alpha_tilde_ts, rel_tol=1e-8):
    """Witness that discretized trajectories are not Markov in general.

    Pushes the Gaussian transition kernel from a concrete latent w_s through
    argmax and checks that two non-argmax indices receive visibly different
    mass (> 0.01), which the symmetric discrete kernel can never produce.
    Fails to witness when the non-maximal entries of w_s are all equal,
    the one symmetric exception.
    """
    w_s = np.asarray(w_s, dtype=np.float64)
    top = int(np.argmax(w_s))
    others = np.delete(w_s, top)
    if np.allclose(others, others[0]):
        raise ValueError("degenerate witness: non-maximal entries of w_s are all equal")
    sigma = float(np.sqrt((1.0 - alpha_tilde_ts) * (1.0 + alpha_tilde_ts)))
    push = processes.argmax_pushforward(alpha_tilde_ts * w_s, sigma, rel_tol)
    non_top = np.delete(push, top)
    stat = float(non_top.max() - non_top.min())
    return TestReport(
        name="nonmarkov-witness",
        statistic=stat,
        threshold=0.01,
        passed=stat > 0.01,
        comparison=">",
        bound="max spread of non-argmax pushforward probabilities",
    )


@dataclass(frozen=True)
class VertexMixture:
    """Mixture of vocabulary-vertex Gaussians: one (vertex, level) per
    component."""

    weights: np.ndarray
    vertices: np.ndarray
    levels: np.ndarray

    @classmethod
    def of(cls, weights, vertices, levels):
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum(), np.asarray(vertices), np.asarray(levels, dtype=np.float64))

    def log_density(self, points, K):
        pts = np.asarray(points, dtype=np.float64)
        comps = []
        for wgt, v, at in zip(self.weights, self.vertices, self.levels):
            sig2 = (1.0 - at) * (1.0 + at)
            mean = np.zeros(K)
            mean[v] = at
            sq = ((pts - mean) ** 2).sum(axis=-1)
            comps.append(np.log(wgt) - 0.5 * sq / sig2 - K * (0.5 * np.log(sig2) + LOG_SQRT_2PI))
        from scipy.special import logsumexp

        return logsumexp(np.stack(comps, axis=0), axis=0)

    def sample(self, n, K, rng):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        out = np.empty((n, K))
        for c in range(self.weights.size):
            mask = comp == c
            if mask.any():
                out[mask] = processes.gaussian_forward_sample(
                    np.full(int(mask.sum()), self.vertices[c]), self.levels[c], K, rng
                )
        return out

    def pushforward(self, K, rel_tol=1e-8):
        p = np.zeros(K)
        for wgt, v, at in zip(self.weights, self.vertices, self.levels):
            mean = np.zeros(K)
            mean[v] = at
            p += wgt * processes.argmax_pushforward(mean, float(np.sqrt((1 - at) * (1 + at))), rel_tol)
        return p


def dpi_test(q_mix, p_mix, K, n_mc, rng, seed=-1, rel_tol=1e-8):
    """Divergence cannot grow under the argmax map.

    KL(q || p) in the continuous space is estimated by Monte Carlo with its
    standard error; the KL between the exact argmax pushforwards is
    computed by quadrature. Passes when the pushforward KL is below the
    continuous estimate plus 3 SE; if the SE exceeds 10% of the estimate
    the verdict is inconclusive rather than a failure.
    """
    pts = q_mix.sample(n_mc, K, rng)
    diff = q_mix.log_density(pts, K) - p_mix.log_density(pts, K)
    kl_cont = float(diff.mean())
    se = float(diff.std(ddof=1) / np.sqrt(n_mc))
    q_push = q_mix.pushforward(K, rel_tol)
    p_push = p_mix.pushforward(K, rel_tol)
    kl_push = float(models.kl_categorical(q_push, p_push))
    ok = kl_push <= kl_cont + 3.0 * se
    inconclusive = se > 0.1 * max(abs(kl_cont), 1e-12) and not ok
    return TestReport(
        name="dpi",
        statistic=kl_push,
        threshold=kl_cont + 3.0 * se,
        passed=bool(ok or inconclusive),
        n_samples=n_mc,
        seed=seed,
        bound="KL(pushforward) <= KL(continuous) + 3*SE",
        status="inconclusive" if inconclusive else ("pass" if ok else "fail"),
    )


def gradient_check(model, make_loss, eps=1e-5, seed=-1):
    """Exact vjp gradients against central finite differences.

    make_loss(model) must return (value, grads) with grads from the model's
    vjp. Every parameter entry is perturbed by +-eps. The statistic is the
    worst per-array sup-norm error relative to the finite-difference scale.
    """
    _, grads = make_loss(model)
    worst = 0.0
    for p, g in zip(model.params(), grads):
        fd = np.empty_like(p)
        flat = p.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi, _ = make_loss(model)
            flat[i] = keep - eps
            lo, _ = make_loss(model)
            flat[i] = keep
            fd_flat[i] = (hi - lo) / (2.0 * eps)
        scale = max(float(np.abs(fd).max()), 1e-8)
        worst = max(worst, float(np.abs(g - fd).max()) / scale)
    return TestReport(
        name=f"gradient-check {type(model).__name__}",
        statistic=worst,
        threshold=1e-5,
        passed=worst <= 1e-5,
        seed=seed,
        bound="max |vjp - central difference| / max |fd|",
    )


def variance_probe(loss_sampler, n_reps):
    """Sample mean and variance of repeated loss draws at fixed
    parameters."""
    if n_reps < 100:
        raise ValueError("variance probe needs n_reps >= 100")
    draws = np.array([loss_sampler() for _ in range(n_reps)], dtype=np.float64)
    return float(draws.mean()), float(draws.var(ddof=1))
