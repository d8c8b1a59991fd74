"""Denoisers at desk scale, with hand-derived gradients.

Every denoiser is a callable ``model(z, t, alpha)`` returning row-stochastic
(..., L, K) arrays. ``z`` is either an integer array of token ids (..., L)
or a float array of simplex rows (..., L, K); ``t`` and ``alpha`` broadcast
over the token axes. Models are context-free: each position is denoised
independently, which keeps exact Bayes oracles tractable while exercising
every identity (none of them constrains the denoiser's functional form).

Trainable models (tabular and a small MLP) expose ``params()`` plus an
exact reverse-mode ``vjp``; updates are plain fixed-rate gradient descent.

Checkpoint format: magic ``DUOMDL1``, a 4-byte kind tag (``TAB\\0`` or
``MLP\\0``), the dimension header as little-endian uint64s (tabular: bins,
vocab; mlp: hidden, vocab), then the parameters as little-endian float64 in
declaration order (tabular: logits[bins][input][output]; mlp: W1, b1, W2,
b2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

MODEL_MAGIC = b"DUOMDL1"
_Q_FLOOR = 1e-30


def _is_soft(z):
    return np.asarray(z).dtype.kind == "f"


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_vjp(p, upstream):
    """(dL/d logits) given softmax output p and dL/d p."""
    inner = (upstream * p).sum(axis=-1, keepdims=True)
    return p * (upstream - inner)


def onehot(ids, K):
    return np.asarray(np.asarray(ids)[..., None] == np.arange(K), dtype=np.float64)


# --------------------------------------------------------------------------
# Fixed (non-trainable) denoisers


class OptimalDenoiser:
    """Always answers with the clean sequence, regardless of input."""

    def __init__(self, x_seq, K):
        self.x_seq = np.asarray(x_seq)
        self.vocab_size = K

    def __call__(self, z, t, alpha=None):
        z = np.asarray(z)
        lead = z.shape[: z.ndim - (2 if _is_soft(z) else 1)]
        rows = onehot(self.x_seq, self.vocab_size)
        return np.broadcast_to(rows, lead + rows.shape).copy()


def optimal_denoiser(x_seq, K):
    return OptimalDenoiser(x_seq, K)


def bayes_posterior(corpus_seqs, K, z, alpha):
    """Exact posterior mean over a finite corpus, in the log domain.

    Sequence n gets weight proportional to the product over positions of
    alpha * [z matches] + (1 - alpha)/K; the output row at position l is the
    weight-averaged one-hot of the corpus tokens there. Returns (rows,
    degenerate) where degenerate flags batch entries whose weights all
    underflowed (those fall back to uniform corpus weights).
    """
    corpus_seqs = np.asarray(corpus_seqs)
    if corpus_seqs.size == 0:
        raise ValueError("corpus must be nonempty")
    z = np.asarray(z)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any((alpha < 0) | (alpha > 1)):
        raise ValueError("alpha must lie in [0, 1]")
    n, L = corpus_seqs.shape
    matches = (z[..., None, :] == corpus_seqs).sum(axis=-1)        # (..., n)
    a = np.broadcast_to(alpha, z.shape[:-1])[..., None]
    with np.errstate(divide="ignore"):
        log_keep = np.log(a + (1.0 - a) / K)
        log_flip = np.log((1.0 - a) / K)
    log_w = matches * log_keep + (L - matches) * log_flip
    norm = logsumexp(log_w, axis=-1, keepdims=True)
    degenerate = ~np.isfinite(norm[..., 0])
    with np.errstate(invalid="ignore"):
        w = np.exp(log_w - norm)
    if np.any(degenerate):
        w[degenerate] = 1.0 / n
    member = onehot(corpus_seqs, K)                                # (n, L, K)
    rows = np.einsum("...n,nlk->...lk", w, member)
    return rows, degenerate


def bayes_denoiser_eval(corpus_seqs, K, z_seq, alpha):
    """Posterior-mean rows only; see bayes_posterior for the fallback."""
    rows, _ = bayes_posterior(corpus_seqs, K, z_seq, alpha)
    return rows


class BayesDenoiser:
    """Denoiser wrapping the exact corpus posterior. Needs alpha, not t."""

    def __init__(self, corpus_seqs, K):
        self.corpus_seqs = np.asarray(corpus_seqs)
        self.vocab_size = K
        self.last_degenerate = 0

    def __call__(self, z, t, alpha):
        if alpha is None:
            raise ValueError("Bayes denoiser requires the noise level alpha")
        if _is_soft(z):
            raise TypeError("Bayes denoiser accepts token ids only")
        a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), np.asarray(z).shape[:-1] + (1,))[..., 0]
        rows, degenerate = bayes_posterior(self.corpus_seqs, self.vocab_size, z, a)
        self.last_degenerate = int(np.count_nonzero(degenerate))
        return rows


class UniformDenoiser:
    """Constant uniform rows; a deliberately uninformative baseline."""

    def __init__(self, K):
        self.vocab_size = K

    def __call__(self, z, t, alpha=None):
        z = np.asarray(z)
        shape = z.shape if _is_soft(z) else z.shape + (self.vocab_size,)
        return np.full(shape, 1.0 / self.vocab_size)


# --------------------------------------------------------------------------
# Trainable denoisers


@dataclass
class TabularDenoiser:
    """Per-token lookup model: softmax(logits[time_bin, input_token]).

    Time bins are bin = min(floor(t * B), B - 1); t = 1 clamps into the
    last bin. Rejects simplex inputs, which only trainable soft-input
    models (the MLP) support.
    """

    logits: np.ndarray

    def __post_init__(self):
        if self.logits.ndim != 3 or self.logits.shape[1] != self.logits.shape[2]:
            raise ValueError("logits must have shape (bins, K, K)")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def zeros(cls, time_bins, K):
        return cls(np.zeros((time_bins, K, K)))

    @property
    def time_bins(self):
        return self.logits.shape[0]

    @property
    def vocab_size(self):
        return self.logits.shape[1]

    def params(self):
        return [self.logits]

    def clone(self):
        return TabularDenoiser(self.logits.copy())

    def with_params(self, params):
        return TabularDenoiser(params[0].copy())

    def _bins(self, t, shape):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), shape)
        if np.any((t < 0) | (t > 1)):
            raise ValueError("t must lie in [0, 1]")
        return np.minimum((t * self.time_bins).astype(np.int64), self.time_bins - 1)

    def __call__(self, z, t, alpha=None):
        if _is_soft(z):
            raise TypeError("tabular denoiser accepts token ids only")
        z = np.asarray(z)
        bins = self._bins(t, z.shape)
        return _softmax(self.logits[bins, z])

    def vjp(self, z, t, upstream, alpha=None):
        """Exact dL/d logits for upstream = dL/d output, accumulated over
        every (bin, input token) cell the batch touches."""
        z = np.asarray(z)
        bins = self._bins(t, z.shape)
        p = _softmax(self.logits[bins, z])
        g = _softmax_vjp(p, np.asarray(upstream, dtype=np.float64))
        grad = np.zeros_like(self.logits)
        np.add.at(grad, (bins.ravel(), z.ravel()), g.reshape(-1, g.shape[-1]))
        return [grad]


@dataclass
class MlpDenoiser:
    """One-hidden-layer MLP over a single token row plus the time scalar.

    Forward per position: h = tanh(W1 @ [row; t] + b1), out =
    softmax(W2 @ h + b2). Accepts one-hot or general simplex rows, which
    lets the same weights serve hard and relaxed latents.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for a in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("parameters must be finite")
        H, Kp1 = self.W1.shape
        if self.W2.shape != (Kp1 - 1, H) or self.b1.shape != (H,) or self.b2.shape != (Kp1 - 1,):
            raise ValueError("inconsistent parameter shapes")

    @classmethod
    def init(cls, hidden, K, rng, scale=0.1):
        return cls(
            scale * rng.standard_normal((hidden, K + 1)),
            np.zeros(hidden),
            scale * rng.standard_normal((K, hidden)),
            np.zeros(K),
        )

    @property
    def hidden(self):
        return self.W1.shape[0]

    @property
    def vocab_size(self):
        return self.W2.shape[0]

    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def clone(self):
        return MlpDenoiser(*(p.copy() for p in self.params()))

    def with_params(self, params):
        return MlpDenoiser(*(p.copy() for p in params))

    def _features(self, z, t):
        K = self.vocab_size
        rows = np.asarray(z, dtype=np.float64) if _is_soft(z) else onehot(z, K)
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64), rows.shape[:-1])
        return np.concatenate([rows, tt[..., None]], axis=-1)

    def _forward(self, feats):
        pre = feats @ self.W1.T + self.b1
        h = np.tanh(pre)
        logits = h @ self.W2.T + self.b2
        return h, _softmax(logits)

    def __call__(self, z, t, alpha=None):
        return self._forward(self._features(z, t))[1]

    def vjp(self, z, t, upstream, alpha=None):
        """Exact parameter gradients by reverse mode through the two
        layers; the forward pass is recomputed (no activation cache)."""
        feats = self._features(z, t)
        h, p = self._forward(feats)
        u = np.asarray(upstream, dtype=np.float64)
        d_logits = _softmax_vjp(p, u)
        flat_dl = d_logits.reshape(-1, d_logits.shape[-1])
        flat_h = h.reshape(-1, h.shape[-1])
        gW2 = flat_dl.T @ flat_h
        gb2 = flat_dl.sum(axis=0)
        d_h = d_logits @ self.W2
        d_pre = d_h * (1.0 - h**2)
        flat_dp = d_pre.reshape(-1, d_pre.shape[-1])
        flat_f = feats.reshape(-1, feats.shape[-1])
        gW1 = flat_dp.T @ flat_f
        gb1 = flat_dp.sum(axis=0)
        return [gW1, gb1, gW2, gb2]


# --------------------------------------------------------------------------
# EMA and divergence


@dataclass
class EmaState:
    """Exponential moving average shadow of a parameter list."""

    decay: float
    shadow: list

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")

    @classmethod
    def from_params(cls, decay, params):
        return cls(decay, [p.copy() for p in params])


def ema_update(state, params):
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if len(state.shadow) != len(params):
        raise ValueError("parameter count mismatch")
    for s, p in zip(state.shadow, params):
        if s.shape != p.shape:
            raise ValueError(f"shape mismatch {s.shape} vs {p.shape}")
        s *= state.decay
        s += (1.0 - state.decay) * p
    return state


def kl_categorical(p, q):
    """sum p log(p/q) over the last axis, with q floored at 1e-30 and
    0 log 0 = 0. Nonnegative by Gibbs' inequality."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), _Q_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


# --------------------------------------------------------------------------
# Gradient-descent training loops (single-threaded; they own the params)


def train_nelbo_gd(model, corpus_seqs, sched, steps, lr, batch_size, rng, sampler_mode="iid"):
    """Fit a trainable denoiser by descending the reduced NELBO integrand.

    Per step: a with-replacement minibatch, one time draw per sequence on
    the endpoint-excluded interval, fresh discrete latents, analytic
    integrand gradient, exact model vjp, fixed-rate descent. Returns the
    per-step mean losses.
    """
    from . import objectives, schedule as _sch

    corpus_seqs = np.asarray(corpus_seqs)
    n, L = corpus_seqs.shape
    K = model.vocab_size
    losses = np.empty(steps)
    dom = (objectives.T_EPS_DISCRETE, 1.0 - objectives.T_EPS_DISCRETE)
    for step in range(steps):
        x = corpus_seqs[rng.integers(0, n, size=batch_size)]
        t = objectives.time_sampler(batch_size, sampler_mode, dom, rng)[:, None]
        alpha, aprime = _sch.eval_alpha(sched, t)
        level = objectives.NoiseLevel.from_alpha(alpha, aprime, K)
        z = objectives._sample_discrete_latents(x, alpha, K, rng)
        x_hat = model(z, t, alpha)
        value, grad_rows = objectives.f_duo_grad(z, x_hat, level, x, K)
        losses[step] = value.sum(axis=-1).mean() / L
        grads = model.vjp(z, t, grad_rows / batch_size, alpha=alpha)
        for p, g in zip(model.params(), grads):
            p -= lr * g
    return losses


def train_curriculum_gd(model, corpus_seqs, config, steps, lr, batch_size, rng):
    """Fit a soft-input denoiser on the tempered-softmax training loss."""
    from . import objectives, processes, schedule as _sch

    corpus_seqs = np.asarray(corpus_seqs)
    n, L = corpus_seqs.shape
    K = model.vocab_size
    sched = _sch.Schedule.via_transform(config.table)
    lo_t = max(config.beta, objectives.T_EPS_DISCRETE)
    hi_t = min(config.gamma, 1.0 - objectives.T_EPS_DISCRETE)
    losses = np.empty(steps)
    for step in range(steps):
        x = corpus_seqs[rng.integers(0, n, size=batch_size)]
        t = lo_t + (hi_t - lo_t) * rng.random((batch_size, 1))
        alpha, aprime = _sch.eval_alpha(sched, t)
        level = objectives.NoiseLevel.from_alpha(alpha, aprime, K)
        w = processes.gaussian_forward_sample(x, 1.0 - t, K, rng)
        z = np.argmax(w, axis=-1)
        rows = objectives.tempered_softmax(w, config.tau)
        x_hat = model(rows, t, alpha)
        value, grad_rows = objectives.f_duo_grad(z, x_hat, level, x, K)
        losses[step] = value.sum(axis=-1).mean() / L
        grads = model.vjp(rows, t, grad_rows / batch_size, alpha=alpha)
        for p, g in zip(model.params(), grads):
            p -= lr * g
    return losses


# --------------------------------------------------------------------------
# Checkpoints

_KIND_TAGS = {"TAB\x00": TabularDenoiser, "MLP\x00": MlpDenoiser}


def save_model(path, model):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        if isinstance(model, TabularDenoiser):
            fh.write(b"TAB\x00")
            fh.write(struct.pack("<QQ", model.time_bins, model.vocab_size))
        elif isinstance(model, MlpDenoiser):
            fh.write(b"MLP\x00")
            fh.write(struct.pack("<QQ", model.hidden, model.vocab_size))
        else:
            raise TypeError(f"cannot checkpoint a {type(model).__name__}")
        for p in model.params():
            fh.write(p.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
            raise ValueError("not a model checkpoint")
        kind = fh.read(4).decode("latin1")
        if kind not in _KIND_TAGS:
            raise ValueError(f"unknown model kind tag {kind!r}")
        d0, d1 = struct.unpack("<QQ", fh.read(16))
        raw = fh.read()
    buf = np.frombuffer(raw, dtype="<f8")
    if kind == "TAB\x00":
        expect = d0 * d1 * d1
        if buf.size != expect:
            raise ValueError("checkpoint size mismatch")
        return TabularDenoiser(buf.reshape(d0, d1, d1).astype(np.float64))
    H, K = d0, d1
    sizes = [H * (K + 1), H, K * H, K]
    if buf.size != sum(sizes):
        raise ValueError("checkpoint size mismatch")
    parts = np.split(buf.astype(np.float64), np.cumsum(sizes)[:-1])
    return MlpDenoiser(parts[0].reshape(H, K + 1), parts[1], parts[2].reshape(K, H), parts[3])
