"""Toy chain task ``X -> V -> Y`` used with planted models."""

from __future__ import annotations

from typing import Any, Mapping, Sequence

from .base import Task, TaskError, Vocab
from .hlm import chain_model

ID_TAG = "ID"
ALT_FILLERS = "alternate-fillers"
FILLERS = ("a", "b", "c", "d")
ALT_FILLER_TOKENS = ("e", "f", "g", "h")
KEYWORDS = ("<bos>", "=", "no", "yes")


class ChainTask(Task):
    """``<bos> f X f f =`` with ``V = index(X) mod 2`` and ``Y = yes/no`` of ``V``.

    ``v_flips`` lists X values whose V is flipped; a planted model built from
    the flipped model answers those inputs wrongly, always through ``V``.
    """

    name = "chain"
    tags = (ID_TAG, ALT_FILLERS)
    answer_variable = "Y"
    causal_variables = ("V",)
    max_seq_len = 8

    def __init__(self, n_x: int = 8, train_mixture: Mapping[str, float] | None = None):
        if n_x < 2:
            raise TaskError(f"chain task needs at least 2 X values, got {n_x}")
        self.x_values = tuple(f"x{i}" for i in range(n_x))
        self.v_of_x = {x: i % 2 for i, x in enumerate(self.x_values)}
        self.y_of_v = {0: "no", 1: "yes"}
        self.vocab = Vocab(KEYWORDS + FILLERS + ALT_FILLER_TOKENS + self.x_values)
        self.hlm = chain_model(self.x_values, self.v_of_x, self.y_of_v)
        self.train_mixture = dict(train_mixture or {ID_TAG: 1.0})

    def flipped_hlm(self, v_flips: Sequence[str]):
        bad = set(v_flips) - set(self.x_values)
        if bad:
            raise TaskError(f"unknown X values {sorted(bad)}")
        v = {x: (1 - b if x in v_flips else b) for x, b in self.v_of_x.items()}
        return chain_model(self.x_values, v, self.y_of_v, name="chain-flipped")

    def _sample(self, tag, causal_rng, background_rng):
        x = self.x_values[int(causal_rng.integers(len(self.x_values)))]
        pool = ALT_FILLER_TOKENS if tag == ALT_FILLERS else FILLERS
        f = [pool[int(i)] for i in background_rng.integers(len(pool), size=3)]
        return {"X": x, "f1": f[0], "f2": f[1], "f3": f[2]}

    def render(self, a: Mapping[str, Any], tag: str):
        words = ["<bos>", a["f1"], a["X"], a["f2"], a["f3"], "="]
        return words, {"X": 2, "last": 5}

    def task_function(self, a):
        return self.y_of_v[self.v_of_x[a["X"]]]
