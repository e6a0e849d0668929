"""Chebyshev-type tail bound for sums of increments with bounded conditional means.

Models are finite trees: every node lists its children as
(probability, increment, subtree) triples, and the increment of a child at
depth t is the t-th term of the sequence.  Everything is exact in
``fractions.Fraction``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

Number = Union[int, float, Fraction]


def chebyshev_bound(second_moments: Sequence[Number], gamma: Number) -> Number:
    """1 - sum(second_moments) / gamma^2."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    total = sum(second_moments, Fraction(0) if all(isinstance(v, (int, Fraction)) for v in second_moments) else 0.0)
    return 1 - total / (gamma * gamma)


@dataclass
class TreeNode:
    children: list = field(default_factory=list)  # (prob, increment, TreeNode)


@dataclass(frozen=True)
class TreeCheck:
    conditional_means_ok: bool
    worst_mean_excess: Fraction
    second_moments: tuple
    probability: Fraction
    bound: Fraction

    @property
    def holds(self) -> bool:
        return self.conditional_means_ok and self.probability >= self.bound


def _walk(node: TreeNode, depth: int, prob: Fraction, partial: Fraction, out: list) -> None:
    if not node.children:
        out.append((prob, partial, depth))
        return
    for p, x, child in node.children:
        _walk(child, depth + 1, prob * p, partial + x, out)


def check_tree(root: TreeNode, mean_bounds: Sequence[Fraction], gamma: Fraction) -> TreeCheck:
    """Exact verification of the tail bound on one finite model."""
    depth = len(mean_bounds)
    moments = [Fraction(0)] * depth
    worst = None
    stack = [(root, 0, Fraction(1))]
    while stack:
        node, t, reach = stack.pop()
        if not node.children:
            if t != depth:
                raise ValueError("all leaves must sit at the model depth")
            continue
        total = sum(p for p, _, _ in node.children)
        if total != 1:
            raise ValueError("child probabilities must sum to one")
        mean = sum(p * x for p, x, _ in node.children)
        excess = mean - mean_bounds[t]
        worst = excess if worst is None else max(worst, excess)
        for p, x, child in node.children:
            moments[t] += reach * p * x * x
            stack.append((child, t + 1, reach * p))
    leaves: list = []
    _walk(root, 0, Fraction(1), Fraction(0), leaves)
    threshold = gamma + sum(mean_bounds, Fraction(0))
    prob = sum((p for p, s, _ in leaves if s < threshold), Fraction(0))
    bound = chebyshev_bound(moments, gamma)
    return TreeCheck(worst is None or worst <= 0, worst if worst is not None else Fraction(0), tuple(moments), prob, bound)


def random_tree(rng: np.random.Generator, depth: int, mean_bounds: Sequence[Fraction], max_branch: int = 3,
                slack: bool = False) -> TreeNode:
    """Random model whose conditional means equal ``mean_bounds`` (or fall below them with ``slack``)."""

    def build(t: int) -> TreeNode:
        node = TreeNode()
        if t == depth:
            return node
        b = int(rng.integers(2, max_branch + 1))
        weights = [int(v) for v in rng.integers(1, 6, size=b)]
        probs = [Fraction(wt, sum(weights)) for wt in weights]
        xs = [Fraction(int(rng.integers(-12, 13)), int(rng.integers(1, 5))) for _ in range(b - 1)]
        target = mean_bounds[t]
        if slack:
            target -= Fraction(int(rng.integers(0, 4)), 4)
        last = (target - sum(p * x for p, x in zip(probs, xs))) / probs[-1]
        xs.append(last)
        node.children = [(p, x, build(t + 1)) for p, x in zip(probs, xs)]
        return node

    return build(0)
