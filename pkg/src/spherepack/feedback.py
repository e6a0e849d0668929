"""Block codes for a memoryless channel with full output feedback.

An encoder stores, per message, one input symbol for every output history
of length 0..n-1.  Histories of length t-1 occupy the block starting at
offset sum_{s<t} |Y|^(s-1); inside a block a history y_1..y_{t-1} sits at
its little-endian base-|Y| rank sum_i y_i |Y|^(i-1).  Full output strings
y_1..y_n are ranked the same way.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .probability import DmcLike, as_dmc

ENUMERATION_CAP = 1 << 20
DEFAULT_BUDGET = 1 << 24
TIE_TOL = 1e-12


class BudgetExceeded(RuntimeError):
    pass


class EncoderFormatError(ValueError):
    pass


def history_offsets(n: int, out_size: int) -> list[int]:
    """Start of each time step's block; entry n is the table length."""
    offs = [0]
    for t in range(n):
        offs.append(offs[-1] + out_size ** t)
    return offs


def history_rank(history: Sequence[int], out_size: int) -> int:
    r = 0
    for i, y in enumerate(history):
        r += int(y) * out_size ** i
    return r


def unrank(rank: int, length: int, out_size: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        rank, y = divmod(rank, out_size)
        out.append(y)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class FeedbackEncoder:
    n: int
    message_count: int
    input_size: int
    output_size: int
    table: np.ndarray

    def __post_init__(self):
        tab = np.array(self.table, dtype=np.int64)
        width = history_offsets(self.n, self.output_size)[-1]
        if self.n < 1 or self.message_count < 1:
            raise ValueError("n and message count must be positive")
        if tab.shape != (self.message_count, width):
            raise ValueError(f"table shape {tab.shape} != ({self.message_count}, {width})")
        if tab.size and (tab.min() < 0 or tab.max() >= self.input_size):
            raise ValueError("table holds an invalid input symbol")
        tab.setflags(write=False)
        object.__setattr__(self, "table", tab)

    def input(self, message: int, t: int, history: Sequence[int] = ()) -> int:
        """Input at 1-based time ``t`` after observing ``history`` (length t-1)."""
        if len(history) != t - 1:
            raise ValueError("history length must be t-1")
        off = history_offsets(self.n, self.output_size)[t - 1]
        return int(self.table[message, off + history_rank(history, self.output_size)])

    def block(self, t: int) -> np.ndarray:
        offs = history_offsets(self.n, self.output_size)
        return self.table[:, offs[t - 1]:offs[t]]

    @classmethod
    def from_codewords(cls, codewords, input_size: int, output_size: int) -> "FeedbackEncoder":
        """Encoder that ignores feedback and sends a fixed codeword per message."""
        cw = np.asarray(codewords, dtype=np.int64)
        m, n = cw.shape
        cols = [np.repeat(cw[:, t:t + 1], output_size ** t, axis=1) for t in range(n)]
        return cls(n, m, input_size, output_size, np.concatenate(cols, axis=1))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeedbackEncoder)
            and (self.n, self.message_count, self.input_size, self.output_size)
            == (other.n, other.message_count, other.input_size, other.output_size)
            and np.array_equal(self.table, other.table)
        )


@dataclass(frozen=True, eq=False)
class Decoder:
    """Message estimate for every output string, indexed by rank."""

    n: int
    output_size: int
    messages: np.ndarray

    def __post_init__(self):
        arr = np.array(self.messages, dtype=np.int64)
        if arr.shape != (self.output_size ** self.n,):
            raise ValueError("decoder must cover every output string")
        arr.setflags(write=False)
        object.__setattr__(self, "messages", arr)

    def __call__(self, outputs: Sequence[int]) -> int:
        return int(self.messages[history_rank(outputs, self.output_size)])

    @classmethod
    def constant(cls, n: int, output_size: int, message: int) -> "Decoder":
        return cls(n, output_size, np.full(output_size ** n, message))


@dataclass(frozen=True)
class CodeEvaluation:
    per_message: tuple
    average: float
    rate_nats: float


def _check(w, enc: FeedbackEncoder):
    w = as_dmc(w)
    if (w.input_size, w.output_size) != (enc.input_size, enc.output_size):
        raise ValueError("encoder alphabets do not match the channel")
    if w.output_size ** enc.n > ENUMERATION_CAP:
        raise BudgetExceeded(f"|Y|^n = {w.output_size ** enc.n} exceeds the enumeration cap {ENUMERATION_CAP}")
    return w


def output_laws(w: DmcLike, enc: FeedbackEncoder) -> np.ndarray:
    """Array (M, |Y|^n) of output-string probabilities for every message."""
    w = _check(w, enc)
    mat = w.matrix
    offs = history_offsets(enc.n, enc.output_size)
    law = np.ones((enc.message_count, 1))
    for t in range(enc.n):
        x = enc.table[:, offs[t]:offs[t + 1]]  # (M, Y^t)
        step = mat[x]  # (M, Y^t, Y)
        law = (law[:, :, None] * step).transpose(0, 2, 1).reshape(enc.message_count, -1)
    return law


def feedback_output_law(w: DmcLike, enc: FeedbackEncoder, message: int) -> np.ndarray:
    """Probability of each output string y_1..y_n when ``message`` is sent."""
    return output_laws(w, enc)[message]


def evaluate_code(w: DmcLike, enc: FeedbackEncoder, dec: Decoder) -> CodeEvaluation:
    laws = output_laws(w, enc)
    if dec.n != enc.n or dec.output_size != enc.output_size:
        raise ValueError("decoder does not match encoder")
    per = []
    for m in range(enc.message_count):
        correct = math.fsum(laws[m, dec.messages == m])
        per.append(min(max(1.0 - correct, 0.0), 1.0))
    return CodeEvaluation(tuple(per), math.fsum(per) / enc.message_count, math.log(enc.message_count) / enc.n)


def map_decoder(w: DmcLike, enc: FeedbackEncoder, message_count: Optional[int] = None) -> Decoder:
    """Most likely message per output string; near-ties go to the smallest index."""
    laws = output_laws(w, enc)
    if message_count is not None and message_count != enc.message_count:
        raise ValueError("message count does not match encoder")
    top = laws.max(axis=0)
    ok = laws >= top - TIE_TOL * np.maximum(top, 1e-300)
    return Decoder(enc.n, enc.output_size, np.argmax(ok, axis=0))


# --- optimal code by strategy-tree dynamic programming ------------------------

@dataclass(frozen=True)
class OptimalCode:
    encoder: FeedbackEncoder
    evaluation: CodeEvaluation
    error: Union[float, Fraction]
    node_operations: int


def strategy_tree_size(n: int, input_size: int, output_size: int, message_count: int) -> int:
    """Nodes visited by the DP: sum over depths d of (|X|^M |Y|)^d."""
    branch = input_size ** message_count * output_size
    return sum(branch ** d for d in range(1, n + 1))


def _as_exact(mat: np.ndarray) -> np.ndarray:
    return np.array([[Fraction(repr(float(v))) for v in row] for row in mat], dtype=object)


def optimal_feedback_code(
    w: DmcLike,
    n: int,
    message_count: int,
    budget: int = DEFAULT_BUDGET,
    exact: bool = False,
) -> OptimalCode:
    """Feedback code minimising the average error probability under MAP decoding.

    The value of a node holding per-message path likelihoods L is
    max over input assignments x in X^M of sum_y value(L * W(y|x)), with
    max_m L_m at depth n.  All nodes of one depth are processed as one
    array.  Ties go to the lexicographically smallest assignment.  With
    ``exact`` the recursion runs in rationals built from the decimal
    representation of the channel entries.
    """
    w = as_dmc(w)
    nx, ny, m_count = w.input_size, w.output_size, message_count
    if n < 1 or m_count < 1:
        raise ValueError("n and message count must be positive")
    ops = strategy_tree_size(n, nx, ny, m_count)
    if ops > budget:
        raise BudgetExceeded(f"strategy tree needs {ops} node operations, budget is {budget}")
    choices = np.array(list(itertools.product(range(nx), repeat=m_count)), dtype=np.int64)  # (C, M)
    n_choice = choices.shape[0]
    mat = _as_exact(w.matrix) if exact else w.matrix
    # per choice and output: likelihood multipliers for each message, (C, Y, M)
    mult = np.stack([mat[choices[:, j], :] for j in range(m_count)], axis=-1)

    layers = [np.ones((1, m_count), dtype=object) if exact else np.ones((1, m_count))]
    if exact:
        layers[0][:] = Fraction(1)
    for _ in range(n):
        prev = layers[-1]
        nxt = prev[:, None, None, :] * mult[None, :, :, :]
        layers.append(nxt.reshape(-1, m_count))

    value = layers[n].max(axis=1)
    decisions = []
    for d in range(n - 1, -1, -1):
        per_choice = value.reshape(-1, n_choice, ny).sum(axis=2)  # (S_d, C)
        if exact:
            best = per_choice.max(axis=1)
            pick = np.array([list(row).index(b) for row, b in zip(per_choice, best)], dtype=np.int64)
        else:
            best = per_choice.max(axis=1)
            ok = per_choice >= best[:, None] - TIE_TOL * np.maximum(np.abs(best[:, None]), 1e-300)
            pick = np.argmax(ok, axis=1)
            best = per_choice[np.arange(per_choice.shape[0]), pick]
        decisions.append(pick)
        value = best
    decisions.reverse()
    total = value[0]
    error = 1 - total / m_count if exact else 1.0 - float(total) / m_count

    offs = history_offsets(n, ny)
    table = np.zeros((m_count, offs[-1]), dtype=np.int64)
    states = np.zeros(1, dtype=np.int64)  # node index per history rank at the current depth
    for d in range(n):
        pick = decisions[d][states]  # (Y^d,)
        table[:, offs[d]:offs[d + 1]] = choices[pick].T
        child = (states * n_choice + pick)[None, :] * ny + np.arange(ny)[:, None]  # (Y, Y^d)
        states = child.reshape(-1)  # rank h + y * Y^d
    enc = FeedbackEncoder(n, m_count, nx, ny, table)
    ev = evaluate_code(w, enc, map_decoder(w, enc))
    return OptimalCode(enc, ev, error, ops)


# --- bound verification -------------------------------------------------------

def verify_spb(w: DmcLike, n: int, message_count: int, params, budget: int = DEFAULT_BUDGET) -> dict:
    """Compare the optimal code's error probability with the sphere-packing lower bound."""
    from .exponents import spb_lower_bound

    rate = math.log(message_count) / n
    if abs(params.rate - rate) > 1e-12 or params.n != n:
        raise ValueError("parameters were built for a different rate or block length")
    best = optimal_feedback_code(w, n, message_count, budget)
    bound = spb_lower_bound(params, w)
    report = {
        "n": n,
        "messages": message_count,
        "rate_nats": rate,
        "optimal_error": best.evaluation.average,
        "bound": bound.value,
        "log_bound": bound.log_value,
        "vacuous": bound.vacuous,
        "hypotheses": dict(params.flags),
    }
    if not params.window_ok:
        report["status"] = "hypothesis-failed"
        report["claim"] = "no claim"
    elif bound.vacuous:
        report["status"] = "vacuous"
        report["claim"] = "trivially satisfied"
    else:
        ok = best.evaluation.average >= bound.value
        report["status"] = "pass" if ok else "fail"
        report["claim"] = "optimal error >= bound"
    return report


# --- serialisation -----------------------------------------------------------

def format_encoder(enc: FeedbackEncoder) -> str:
    lines = [f"fenc {enc.n} {enc.message_count} {enc.input_size} {enc.output_size}"]
    lines += [" ".join(str(int(v)) for v in row) for row in enc.table]
    return "\n".join(lines) + "\n"


def parse_encoder(text: str) -> FeedbackEncoder:
    rows = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    rows = [r for r in rows if r]
    if not rows or rows[0][0] != "fenc" or len(rows[0]) != 5:
        raise EncoderFormatError("expected header 'fenc n M |X| |Y|'")
    try:
        n, m, nx, ny = (int(v) for v in rows[0][1:])
        table = [[int(v) for v in r] for r in rows[1:]]
    except ValueError as exc:
        raise EncoderFormatError(str(exc)) from None
    if len(table) != m:
        raise EncoderFormatError(f"expected {m} message rows, found {len(table)}")
    try:
        return FeedbackEncoder(n, m, nx, ny, np.array(table, dtype=np.int64).reshape(m, -1))
    except ValueError as exc:
        raise EncoderFormatError(str(exc)) from None
