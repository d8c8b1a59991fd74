"""Consistency distillation over deterministic discrete trajectories.

The student learns to jump further along the reverse process than the
teacher: per step, an adjacent trajectory pair (z_s, z_t) with s =
max(t - delta, 0) is built from one shared noise draw, the frozen teacher
denoises the cleaner state, and the student is descended on the per-token
KL between its prediction at the noisier state and the teacher's. Training
runs in rounds; the teacher is refreshed from the student (or its EMA
shadow) at each round boundary and delta doubles after every round.
"""

from __future__ import annotations

import csv
import hashlib
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import models, processes, sampling

_TEACHER_MODES = ("student-weights", "ema-weights")
_KL_DIRECTIONS = ("student-first", "teacher-first")


@dataclass(frozen=True)
class DcdConfig:
    """Full parameterization of the distillation loop."""

    rounds: int
    steps_per_round: int
    delta0: float
    lr: float
    ema_decay: float = 0.999
    teacher_mode: str = "student-weights"
    kl_direction: str = "student-first"
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.steps_per_round < 1 or self.batch_size < 1:
            raise ValueError("rounds, steps_per_round, and batch_size must be >= 1")
        if self.delta0 * 2 ** (self.rounds - 1) > 1.0 + 1e-12:
            raise ValueError("delta0 * 2**(rounds-1) must not exceed 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.teacher_mode not in _TEACHER_MODES:
            raise ValueError(f"teacher_mode must be one of {_TEACHER_MODES}")
        if self.kl_direction not in _KL_DIRECTIONS:
            raise ValueError(f"kl_direction must be one of {_KL_DIRECTIONS}")


@dataclass
class DistillMetrics:
    """Per-step rows plus per-round aggregates."""

    rows: list = field(default_factory=list)        # (round, step, loss, delta)
    round_loss: list = field(default_factory=list)
    round_tv: list = field(default_factory=list)    # dict T -> tv, or None
    round_seconds: list = field(default_factory=list)


def _checksum(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.tobytes())
    return h.hexdigest()


def _kl_loss_and_upstream(student_rows, teacher_rows, direction):
    """Summed-over-positions KL and its gradient w.r.t. student rows."""
    p = np.maximum(student_rows, models._Q_FLOOR)
    q = np.maximum(teacher_rows, models._Q_FLOOR)
    if direction == "student-first":
        loss = models.kl_categorical(student_rows, teacher_rows)
        upstream = np.log(p) - np.log(q) + 1.0
    else:
        loss = models.kl_categorical(teacher_rows, student_rows)
        upstream = -q / p
    return loss, upstream


def dcd_train(config, corpus_seqs, student, eval_hook=None):
    """Run the full round/step distillation loop.

    corpus_seqs: (n, L) clean token ids sampled with replacement per step.
    student: trainable denoiser (exposes params/vjp/with_params). The
    returned parameters are the EMA shadow, along with the metrics.
    ``eval_hook(round_index, student)``, when given, is called after each
    round and may return a dict of TV-at-T values for the metrics.
    """
    corpus_seqs = np.asarray(corpus_seqs)
    n, L = corpus_seqs.shape
    K = student.vocab_size
    rng = np.random.default_rng(config.seed)
    ema = models.EmaState.from_params(config.ema_decay, student.params())
    metrics = DistillMetrics()
    delta = config.delta0
    for rnd in range(config.rounds):
        t0 = time.perf_counter()
        if config.teacher_mode == "student-weights":
            teacher = student.with_params(student.params())
        else:
            teacher = student.with_params(ema.shadow)
        teacher_sum = _checksum(teacher.params())
        losses = np.empty(config.steps_per_round)
        for step in range(config.steps_per_round):
            x = corpus_seqs[rng.integers(0, n, size=config.batch_size)]
            t = rng.random((config.batch_size, 1))
            s = np.maximum(t - delta, 0.0)
            eps = rng.standard_normal((config.batch_size, L, K))
            z_s = sampling.ddt_state(x, eps, s)
            z_t = sampling.ddt_state(x, eps, t)
            student_rows = student(z_t, t)
            teacher_rows = teacher(z_s, s)
            kl, upstream = _kl_loss_and_upstream(student_rows, teacher_rows, config.kl_direction)
            loss = float(kl.sum(axis=-1).mean())
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite distillation loss at round {rnd} step {step}")
            losses[step] = loss
            grads = student.vjp(z_t, t, upstream / config.batch_size)
            for p, g in zip(student.params(), grads):
                p -= config.lr * g
            models.ema_update(ema, student.params())
            metrics.rows.append((rnd, step, loss, delta))
        if _checksum(teacher.params()) != teacher_sum:
            raise RuntimeError(f"teacher parameters changed within round {rnd}")
        metrics.round_loss.append(float(losses.mean()))
        metrics.round_seconds.append(time.perf_counter() - t0)
        metrics.round_tv.append(eval_hook(rnd, student) if eval_hook else None)
        delta = delta * 2.0
        if delta > 1.0:
            warnings.warn("distillation step size clamped to 1 after doubling")
            delta = 1.0
    return [p.copy() for p in ema.shadow], metrics


def enumerate_sequences(K, L):
    """All K**L sequences in mixed-radix order, shape (K**L, L)."""
    total = K**L
    if total > 1_000_000:
        raise ValueError(f"K**L = {total} exceeds the enumeration cap of 1e6")
    grids = np.meshgrid(*([np.arange(K)] * L), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def sequence_index(seqs, K):
    """Mixed-radix index of each row, matching enumerate_sequences order."""
    seqs = np.atleast_2d(np.asarray(seqs))
    L = seqs.shape[-1]
    weights = K ** np.arange(L - 1, -1, -1)
    return (seqs * weights).sum(axis=-1)


def dcd_eval_fewstep(denoiser, K, L, T_list, n_samples, data_dist, rng, greedy_tail=False):
    """Exact TV between ancestral samples and an enumerated data law.

    data_dist: (K**L,) probabilities in mixed-radix order. Returns a dict
    mapping each T to the observed total variation distance.
    """
    data_dist = np.asarray(data_dist, dtype=np.float64)
    if K**L > 1_000_000:
        raise ValueError(f"K**L = {K ** L} exceeds the enumeration cap of 1e6")
    if data_dist.shape != (K**L,):
        raise ValueError("data_dist must enumerate all K**L sequences")
    out = {}
    for T in T_list:
        samples = sampling.ancestral_generate(
            denoiser, K, L, T, greedy_tail=greedy_tail, rng=rng, n_samples=n_samples
        )
        counts = np.bincount(sequence_index(samples, K), minlength=K**L)
        emp = counts / n_samples
        out[T] = 0.5 * float(np.abs(emp - data_dist).sum())
    return out


def metrics_to_csv(path, metrics):
    """round, step, loss, delta rows; TV columns appended when evaluated."""
    tv_keys = sorted({T for tv in metrics.round_tv if tv for T in tv})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "step", "loss", "delta"] + [f"tv_T{T}" for T in tv_keys])
        for rnd, step, loss, delta in metrics.rows:
            last = step == max(s for r, s, _, _ in metrics.rows if r == rnd)
            tv = metrics.round_tv[rnd] if last and metrics.round_tv[rnd] else {}
            writer.writerow(
                [rnd, step, f"{loss:.10g}", f"{delta:.10g}"]
                + [f"{tv[T]:.10g}" if T in tv else "" for T in tv_keys]
            )
