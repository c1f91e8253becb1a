"""Table lookup task (entity -> attribute, RAVEL analog)."""

from __future__ import annotations

from typing import Any, Mapping

import numpy as np

from .base import Task, TaskError, Vocab
from .hlm import HighLevelModel, Variable

ID_TAG = "ID"
SINGLE_ATTRIBUTE_DEMOS = "single-attribute-demos"
KEYWORDS = ("<bos>", "city", "country", ";")


def lookup_answer(entity, table: Mapping):
    try:
        return table[entity]
    except KeyError:
        raise TaskError(f"entity {entity!r} not in table") from None


def random_table(n_entities: int = 64, n_attributes: int = 8, seed: int = 0) -> dict[str, str]:
    """Entities ``e0..`` mapped to attributes ``c0..``; every attribute is used."""
    rng = np.random.default_rng(seed)
    attrs = np.arange(n_entities) % n_attributes
    rng.shuffle(attrs)
    return {f"e{i}": f"c{int(a)}" for i, a in enumerate(attrs)}


def lookup_hlm(table: Mapping[str, str]) -> HighLevelModel:
    entities = tuple(table)
    attributes = tuple(sorted(set(table.values()), key=lambda s: (len(s), s)))
    return HighLevelModel(
        [
            Variable("entity", entities),
            Variable("demo_entity", entities, causal=False),
            Variable("attribute", attributes, ("entity",), lambda e: table[e]),
            Variable("output", attributes, ("attribute",), lambda c: c),
        ],
        output="output",
        name="lookup",
    )


class LookupTask(Task):
    name = "lookup"
    tags = (ID_TAG, SINGLE_ATTRIBUTE_DEMOS)
    answer_variable = "output"
    causal_variables = ("attribute",)
    max_seq_len = 24

    def __init__(self, table: Mapping[str, str] | None = None, demo_attribute: str = "c0",
                 train_mixture: Mapping[str, float] | None = None):
        self.table = dict(table or random_table())
        self.entities = tuple(self.table)
        self.attributes = tuple(sorted(set(self.table.values()), key=lambda s: (len(s), s)))
        if demo_attribute not in self.attributes:
            raise TaskError(f"unknown demo attribute {demo_attribute!r}")
        self.demo_attribute = demo_attribute
        self.demo_pool = tuple(e for e in self.entities if self.table[e] == demo_attribute)
        self.vocab = Vocab(KEYWORDS + self.entities + self.attributes)
        self.hlm = lookup_hlm(self.table)
        self.train_mixture = dict(train_mixture or {ID_TAG: 0.98, SINGLE_ATTRIBUTE_DEMOS: 0.02})

    def _sample(self, tag, causal_rng, background_rng):
        entity = self.entities[int(causal_rng.integers(len(self.entities)))]
        pool = self.demo_pool if tag == SINGLE_ATTRIBUTE_DEMOS else self.entities
        pool = [e for e in pool if e != entity] or list(pool)
        demo = pool[int(background_rng.integers(len(pool)))]
        return {"entity": entity, "demo_entity": demo}

    def render(self, a: Mapping[str, Any], tag: str):
        demo = a["demo_entity"]
        words = ["<bos>", "city", demo, "country", self.table[demo], ";", "city", a["entity"], "country"]
        roles = {"demo_entity": 2, "demo_attribute": 4, "entity": 7, "last": 8}
        return words, roles

    def task_function(self, a):
        return lookup_answer(a["entity"], self.table)
