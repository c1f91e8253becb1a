"""Interval membership task (PriceTag analog)."""

from __future__ import annotations

from typing import Any, Mapping

from .base import Task, TaskError, Vocab
from .hlm import HighLevelModel, Variable

PRICES = tuple(range(21))
ID_TAG = "ID"
ALT_CURRENCY = "alternate-currency"
TYPOS = "typos"
KEYWORDS = (
    "<bos>", "does", "the", "item", "cost", "between", "and", "?", ":", ".",
    "$", "£", "b/t", "$$", "&&", "?!!", "True", "False",
)


def interval_answer(lb, ub, q) -> bool:
    """``lb < q < ub``; ties between the query and a bound are rejected."""
    if not lb < ub:
        raise TaskError(f"lower bound {lb} must be below upper bound {ub}")
    if q == lb or q == ub:
        raise TaskError(f"query {q} ties with a bound ({lb}, {ub})")
    return bool(ub > q) and bool(lb < q)


def interval_hlm(shortcut: bool = False, values=PRICES) -> HighLevelModel:
    """``P = lb < q``, ``Q = ub > q``, output ``P and Q``.

    With ``shortcut`` the upper check is only carried out when ``P`` holds,
    so an intervention on ``Q`` cannot revive an output whose ``P`` is false.
    """
    values = tuple(values)
    if shortcut:
        q_mech = ("P", "ub", "q"), (lambda p, ub, q: bool(p) and ub > q)
    else:
        q_mech = ("ub", "q"), (lambda ub, q: ub > q)
    return HighLevelModel(
        [
            Variable("lb", values),
            Variable("ub", values),
            Variable("q", values),
            Variable("currency", ("$", "£"), causal=False),
            Variable("typos", (False, True), causal=False),
            Variable("P", (False, True), ("lb", "q"), lambda lb, q: lb < q),
            Variable("Q", (False, True), *q_mech),
            Variable("answer", (False, True), ("P", "Q"), lambda p, q: bool(p and q)),
        ],
        output="answer",
        name="interval-shortcut" if shortcut else "interval",
    )


class IntervalTask(Task):
    name = "interval"
    tags = (ID_TAG, ALT_CURRENCY, TYPOS)
    answer_variable = "answer"
    causal_variables = ("P", "Q")
    max_seq_len = 24

    def __init__(self, shortcut: bool = False, train_mixture: Mapping[str, float] | None = None):
        self.vocab = Vocab(KEYWORDS + tuple(str(v) for v in PRICES))
        self.hlm = interval_hlm(shortcut)
        self.train_mixture = dict(train_mixture or {ID_TAG: 0.97, ALT_CURRENCY: 0.01, TYPOS: 0.02})

    def _sample(self, tag, causal_rng, background_rng):
        inside = bool(causal_rng.integers(2))
        while True:
            lb, ub, q = (int(x) for x in causal_rng.integers(0, 21, size=3))
            if lb < ub and q not in (lb, ub) and (lb < q < ub) == inside:
                break
        return {
            "lb": lb,
            "ub": ub,
            "q": q,
            "currency": "£" if tag == ALT_CURRENCY else "$",
            "typos": tag == TYPOS,
        }

    def render(self, a: Mapping[str, Any], tag: str):
        cur = a["currency"]
        if a["typos"]:
            words = ["<bos>", "does", "the", "item", "cost", "b/t", "$$", str(a["lb"]), "&&", cur, str(a["ub"]),
                     "?!!", "item", ":", cur, str(a["q"]), "."]
        else:
            words = ["<bos>", "does", "the", "item", "cost", "between", cur, str(a["lb"]), "and", cur, str(a["ub"]),
                     "?", "item", ":", cur, str(a["q"]), "."]
        roles = {"lb": 7, "ub": 10, "q": 15, "last": len(words) - 1}
        return words, roles

    def task_function(self, a):
        return interval_answer(a["lb"], a["ub"], a["q"])

    def answer_token(self, value) -> str:
        return "True" if value else "False"
