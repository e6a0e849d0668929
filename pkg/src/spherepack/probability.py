"""Finite-alphabet probability primitives.

Pmfs and stochastic matrices are thin immutable wrappers around float64
arrays.  All divergence routines accept either the wrapper types or plain
array-likes.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

PMF_TOL = 1e-12


class AlphabetMismatch(ValueError):
    pass


class OrderOutOfRange(ValueError):
    pass


class ChannelFormatError(ValueError):
    """Malformed channel file; carries 1-based line/column of the offence."""

    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pmf:
    probs: np.ndarray

    def __init__(self, probs, renormalize: bool = False, tol: float = PMF_TOL):
        arr = np.asarray(probs, dtype=np.float64).ravel()
        if arr.size == 0:
            raise ValueError("empty pmf")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise ValueError("pmf entries must be finite and non-negative")
        total = math.fsum(arr)
        if renormalize:
            if total <= 0:
                raise ValueError("cannot renormalize a zero vector")
            arr = arr / total
        elif abs(total - 1.0) > tol:
            raise ValueError(f"pmf sums to {total!r}, not 1")
        object.__setattr__(self, "probs", _frozen(arr))

    def __len__(self) -> int:
        return self.probs.size

    def __array__(self, dtype=None, copy=None):
        return self.probs if dtype is None else self.probs.astype(dtype)

    def __eq__(self, other) -> bool:
        return isinstance(other, Pmf) and np.array_equal(self.probs, other.probs)

    def __repr__(self) -> str:
        return f"Pmf({np.array2string(self.probs, precision=6)})"


@dataclass(frozen=True, eq=False)
class Dmc:
    """Stochastic matrix; row ``x`` is the output pmf for input ``x``."""

    matrix: np.ndarray

    def __init__(self, rows, renormalize: bool = False, tol: float = PMF_TOL):
        mat = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] < 1:
            raise ValueError("channel must be a non-empty 2-d array")
        mat = np.vstack([Pmf(r, renormalize=renormalize, tol=tol).probs for r in mat])
        object.__setattr__(self, "matrix", _frozen(mat))

    @property
    def input_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def output_size(self) -> int:
        return self.matrix.shape[1]

    @property
    def rows(self) -> list[Pmf]:
        return [Pmf(r) for r in self.matrix]

    def row(self, x: int) -> np.ndarray:
        return self.matrix[x]

    def digest(self) -> str:
        h = hashlib.sha1()
        h.update(np.asarray(self.matrix.shape, dtype=np.int64).tobytes())
        h.update(self.matrix.tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Dmc) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self) -> int:
        return hash(self.digest())

    def __repr__(self) -> str:
        return f"Dmc({self.input_size}x{self.output_size})"


PmfLike = Union[Pmf, Sequence[float], np.ndarray]
DmcLike = Union[Dmc, Sequence[Sequence[float]], np.ndarray]


def as_array(p: PmfLike) -> np.ndarray:
    if isinstance(p, Pmf):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def as_dmc(w: DmcLike) -> Dmc:
    return w if isinstance(w, Dmc) else Dmc(w)


def bsc(p: float) -> Dmc:
    """Binary symmetric channel with crossover probability ``p``."""
    return Dmc([[1.0 - p, p], [p, 1.0 - p]])


def identity_channel(size: int) -> Dmc:
    return Dmc(np.eye(size))


def _pair(a: PmfLike, b: PmfLike) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise AlphabetMismatch(f"alphabet sizes differ: {a.shape} vs {b.shape}")
    return a, b


def total_variation(a: PmfLike, b: PmfLike) -> float:
    """Sum of absolute differences, in [0, 2] for pmfs."""
    a, b = _pair(a, b)
    return math.fsum(np.abs(a - b))


def check_order(order: float) -> float:
    order = float(order)
    if not (0.0 < order <= 1.0):
        raise OrderOutOfRange(f"order must lie in (0, 1], got {order!r}")
    return order


def renyi_divergence(order: float, w: PmfLike, q: PmfLike) -> float:
    """Order-``order`` Rényi divergence D(w || q) in nats.

    Atoms with w(y) = 0 never contribute.  At order 1 an atom with
    w(y) > 0 = q(y) makes the value +inf; below order 1 such an atom only
    drops out of the sum.
    """
    order = check_order(order)
    w, q = _pair(w, q)
    ws = w > 0
    if order == 1.0:
        if np.any(ws & (q <= 0)):
            return math.inf
        wv, qv = w[ws], q[ws]
        return math.fsum(wv * (np.log(wv) - np.log(qv)))
    both = ws & (q > 0)
    if not np.any(both):
        return math.inf
    wv, qv = w[both], q[both]
    lr = np.log(wv) - np.log(qv)
    # sum w^a q^(1-a) - 1, expanded around whichever endpoint is closer; both
    # inputs are taken as exactly normalised, since near order one a rounding
    # residual in sum(w) - 1 would be amplified by 1/(1 - order)
    if order < 0.5:
        terms = qv * np.expm1(order * lr)
        excess = math.fsum(np.concatenate([terms, -q[~ws & (q > 0)]]))
    else:
        terms = wv * np.expm1((order - 1.0) * lr)
        excess = math.fsum(np.concatenate([terms, -w[ws & ~(q > 0)]]))
    if excess <= -1.0:
        return math.inf
    value = math.log1p(excess) / (order - 1.0)
    return max(value, 0.0)


def renyi_divergence_rows(order: float, rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Vectorised ``renyi_divergence`` of every row of ``rows`` against ``q``."""
    return np.array([renyi_divergence(order, r, q) for r in rows])


def kl_divergence(w: PmfLike, q: PmfLike) -> float:
    return renyi_divergence(1.0, w, q)


# --- channel files -------------------------------------------------------

def parse_channel(text: str, renormalize: bool = False) -> Dmc:
    """Parse the ``dmc <inputs> <outputs>`` text format."""
    header = None
    rows: list[list[float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        tokens = _tokens_with_columns(line)
        if header is None:
            if tokens[0][1] != "dmc":
                raise ChannelFormatError("expected header 'dmc <inputs> <outputs>'", lineno, tokens[0][0])
            if len(tokens) != 3:
                raise ChannelFormatError("header needs exactly two sizes", lineno, tokens[0][0])
            sizes = []
            for col, tok in tokens[1:]:
                try:
                    v = int(tok)
                except ValueError:
                    raise ChannelFormatError(f"size {tok!r} is not an integer", lineno, col) from None
                if v < 1:
                    raise ChannelFormatError("sizes must be positive", lineno, col)
                sizes.append(v)
            header = (lineno, sizes[0], sizes[1])
            continue
        n_in, n_out = header[1], header[2]
        if len(rows) == n_in:
            raise ChannelFormatError(f"more than {n_in} rows", lineno, tokens[0][0])
        if len(tokens) != n_out:
            col = tokens[min(len(tokens), n_out) - 1][0] if tokens else 1
            raise ChannelFormatError(f"expected {n_out} probabilities, found {len(tokens)}", lineno, col)
        row = []
        for col, tok in tokens:
            try:
                v = float(tok)
            except ValueError:
                raise ChannelFormatError(f"{tok!r} is not a number", lineno, col) from None
            if not math.isfinite(v) or v < 0:
                raise ChannelFormatError(f"{tok!r} is not a probability", lineno, col)
            row.append(v)
        total = math.fsum(row)
        if not renormalize and abs(total - 1.0) > PMF_TOL:
            raise ChannelFormatError(f"row sums to {total!r}", lineno, tokens[0][0])
        rows.append(row)
    if header is None:
        raise ChannelFormatError("missing 'dmc' header", 1)
    if len(rows) != header[1]:
        raise ChannelFormatError(f"expected {header[1]} rows, found {len(rows)}", header[0])
    return Dmc(rows, renormalize=renormalize)


def _tokens_with_columns(line: str) -> list[tuple[int, str]]:
    out = []
    col = 0
    for tok in line.split():
        col = line.index(tok, col)
        out.append((col + 1, tok))
        col += len(tok)
    return out


def load_channel(path: Union[str, Path], renormalize: bool = False) -> Dmc:
    return parse_channel(Path(path).read_text(encoding="utf-8"), renormalize=renormalize)


def format_channel(w: DmcLike) -> str:
    w = as_dmc(w)
    lines = [f"dmc {w.input_size} {w.output_size}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in w.matrix]
    return "\n".join(lines) + "\n"


def random_pmf(rng: np.random.Generator, size: int, sparsity: float = 0.0) -> np.ndarray:
    """Dirichlet(1) pmf, optionally with entries zeroed at rate ``sparsity``."""
    p = rng.dirichlet(np.ones(size))
    if sparsity > 0:
        mask = rng.random(size) < sparsity
        if mask.all():
            mask[rng.integers(size)] = False
        p = np.where(mask, 0.0, p)
        p = p / p.sum()
    return p


def random_channel(rng: np.random.Generator, n_in: int, n_out: int, sparsity: float = 0.0) -> Dmc:
    return Dmc([random_pmf(rng, n_out, sparsity) for _ in range(n_in)], renormalize=True)


def iter_pairs(items: Iterable) -> Iterable:
    items = list(items)
    return zip(items[:-1], items[1:])
