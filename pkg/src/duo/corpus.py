"""Toy corpora: Markov-chain generation, sequence packing, persistence.

Corpora stand in for real training sets at desk scale. Generation uses the
counter-based Philox (4x64-10) generator, so a seed reproduces the same
corpus on any platform. Chains start from their stationary law, which
makes unigram statistics stationary at every position.

Text format, one corpus per file:

    duo-corpus v1 K=<K> L=<L> n=<n>
    <id> <id> ... <id>          (n lines of L space-separated ids)

An optional alphabet file maps ids to characters, one "id<TAB>char" line
per id.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

HEADER_RE = re.compile(r"^duo-corpus v1 K=(\d+) L=(\d+) n=(\d+)$")


class CorpusFormatError(ValueError):
    def __init__(self, message, line_no):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Corpus:
    K: int
    L: int
    seqs: np.ndarray
    alphabet: dict | None = None

    def __post_init__(self):
        seqs = np.asarray(self.seqs, dtype=np.int64).reshape(-1, self.L)
        object.__setattr__(self, "seqs", seqs)
        if seqs.size and (seqs.min() < 0 or seqs.max() >= self.K):
            raise ValueError("token id out of range")

    def __len__(self):
        return self.seqs.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Corpus)
            and self.K == other.K
            and self.L == other.L
            and self.seqs.shape == other.seqs.shape
            and bool(np.all(self.seqs == other.seqs))
            and self.alphabet == other.alphabet
        )


def stationary_distribution(transition):
    """Left eigenvector of a row-stochastic matrix for eigenvalue 1."""
    vals, vecs = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def generate_markov(K, L, n, concentration=1.0, seed=0):
    """n length-L chains from a random Dirichlet-row transition table.

    Rows of the transition matrix are symmetric-Dirichlet draws with the
    given concentration (large values approach iid uniform tokens). The
    initial token of every chain is drawn from the stationary law.
    """
    if K < 2 or L < 1 or n < 1:
        raise ValueError("need K >= 2, L >= 1, n >= 1")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    rng = np.random.Generator(np.random.Philox(seed))
    transition = rng.dirichlet(np.full(K, concentration), size=K)
    pi = stationary_distribution(transition)
    seqs = np.empty((n, L), dtype=np.int64)
    cdf_pi = np.cumsum(pi)
    seqs[:, 0] = np.searchsorted(cdf_pi, rng.random(n) * cdf_pi[-1])
    cdf_rows = np.cumsum(transition, axis=1)
    for pos in range(1, L):
        u = rng.random(n) * cdf_rows[seqs[:, pos - 1], -1]
        row_cdf = cdf_rows[seqs[:, pos - 1]]
        seqs[:, pos] = (u[:, None] > row_cdf).sum(axis=1)
    seqs = np.minimum(seqs, K - 1)
    return Corpus(K, L, seqs)


def pack(docs, L, K):
    """Concatenate docs with the reserved separator id K-1 between them,
    then wrap into length-L rows, dropping the trailing remainder.

    Document ids must stay below K-1; the separator id is reserved.
    """
    stream = []
    for d, doc in enumerate(docs):
        ids = list(doc)
        if any(not 0 <= v < K - 1 for v in ids):
            raise ValueError(f"doc {d} uses ids outside [0, {K - 2}] (id {K - 1} is the separator)")
        if d:
            stream.append(K - 1)
        stream.extend(ids)
    rows = len(stream) // L
    seqs = np.asarray(stream[: rows * L], dtype=np.int64).reshape(rows, L)
    return Corpus(K, L, seqs)


def unpack(corpus):
    """Split the wrapped stream back into docs at separator ids. Recovers
    the original concatenation up to the tail pack() dropped."""
    stream = corpus.seqs.ravel()
    docs = []
    current = []
    for v in stream:
        if v == corpus.K - 1:
            docs.append(current)
            current = []
        else:
            current.append(int(v))
    docs.append(current)
    return docs


def save(corpus, path):
    with open(path, "w") as fh:
        fh.write(f"duo-corpus v1 K={corpus.K} L={corpus.L} n={len(corpus)}\n")
        for row in corpus.seqs:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError("empty file", 1)
    m = HEADER_RE.match(lines[0])
    if not m:
        raise CorpusFormatError(f"bad header {lines[0]!r}", 1)
    K, L, n = (int(g) for g in m.groups())
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise CorpusFormatError(f"expected {n} sequences, found {len(body)}", len(lines))
    seqs = np.zeros((n, L), dtype=np.int64)
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != L:
            raise CorpusFormatError(f"expected {L} ids, found {len(parts)}", i + 2)
        try:
            row = [int(p) for p in parts]
        except ValueError:
            raise CorpusFormatError("non-integer token id", i + 2) from None
        if any(not 0 <= v < K for v in row):
            raise CorpusFormatError(f"token id out of range [0, {K - 1})", i + 2)
        seqs[i] = row
    return Corpus(K, L, seqs)


def save_alphabet(alphabet, path):
    with open(path, "w") as fh:
        for idx in sorted(alphabet):
            fh.write(f"{idx}\t{alphabet[idx]}\n")


def load_alphabet(path):
    alphabet = {}
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                idx, char = line.rstrip("\n").split("\t")
                alphabet[int(idx)] = char
            except ValueError:
                raise CorpusFormatError("expected 'id<TAB>char'", i + 1) from None
    return alphabet
