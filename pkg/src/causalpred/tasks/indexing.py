"""Indexing task: output the name that is not referred to again (IOI analog)."""

from __future__ import annotations

from typing import Any, Mapping

import numpy as np

from .base import Task, TaskError, Vocab
from .hlm import HighLevelModel, Variable

NAMES_A = (
    "Mary John Alice Bob Carol David Emma Frank Grace Henry Irene Jack Karen Leo Mia Noah "
    "Olivia Paul Quinn Rose Sam Tina Uma Victor Wendy Xavier Yara Zach Amy Ben Chloe Dan "
    "Ella Finn Gina Hugo Ivy Jake Kate Liam Lily Max Nina Oscar Pam Ray Sara Tom Vera Will "
    "Anna Eric Fiona Greg Holly Ian Julia Kevin Laura Mark Nora Owen Ruth Sean"
).split()
NAMES_B = "LiBai DuFu WangWei SuShi BaiJuyi MengHaoran LuYou LiQingzhao".split()
PLACES = ("garden", "school", "office", "market")
OBJECTS = ("book", "ring", "apple", "drink")
KEYWORDS = (
    "<bos>", "then", "and", "went", "to", "the", ".", "gave", "a",
    "story", ":", "who", "got", "it", "?", "answer",
)

POSITIONS = ("first", "second")
ID_TAG = "ID"
DISJOINT_NAMES = "disjoint-name-vocabulary"
REPHRASED = "rephrased-template"
_TRAIN_SALT = 0x7E1


def indexing_answer(name_a: str, name_b: str, name_c: str) -> str:
    """Return whichever of ``name_a``/``name_b`` is not repeated as ``name_c``."""
    if name_a == name_b:
        raise TaskError(f"names must differ, got {name_a!r} twice")
    if name_c == name_a:
        return name_b
    if name_c == name_b:
        return name_a
    raise TaskError(f"{name_c!r} repeats neither {name_a!r} nor {name_b!r}")


def indexing_hlm(names=NAMES_A + NAMES_B, n_refs: int = 64) -> HighLevelModel:
    """``position`` is the slot (first/second) holding the non-repeated name."""
    names = tuple(names)
    return HighLevelModel(
        [
            Variable("name_a", names),
            Variable("name_b", names),
            Variable("name_c", names),
            Variable("place", PLACES, causal=False),
            Variable("object", OBJECTS, causal=False),
            Variable("ref", tuple(range(n_refs)), causal=False),
            Variable("position", POSITIONS, ("name_a", "name_b", "name_c"),
                     lambda a, b, c: "first" if c == b else "second"),
            Variable("output", names, ("position", "name_a", "name_b"),
                     lambda pos, a, b: a if pos == "first" else b),
        ],
        output="output",
        name="indexing",
    )


def referring_words(n_refs: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Lexicon of words pointing back at the first / second mentioned name."""
    return tuple(f"former{i}" for i in range(n_refs)), tuple(f"latter{i}" for i in range(n_refs))


def _zipf_cdf(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return np.cumsum(w / w.sum())


def _draw(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


class IndexingTask(Task):
    """Two names, then a word referring back to one of them; the answer is the other name.

    The referring word comes from a long-tailed lexicon (``n_refs`` words per
    slot, Zipf-distributed). The ``n_unseen`` rarest words never occur in the
    training stream, so a trained model meets them only at test time. Names
    are drawn with Zipf-skewed frequencies.
    """

    name = "indexing"
    tags = (ID_TAG, DISJOINT_NAMES, REPHRASED)
    answer_variable = "output"
    causal_variables = ("position",)
    max_seq_len = 24

    def __init__(self, names_a=NAMES_A, names_b=NAMES_B, n_refs: int = 64, n_unseen: int = 16,
                 ref_zipf: float = 1.0, zipf_exponent: float = 1.0, train_mixture: Mapping[str, float] | None = None):
        self.names_a = tuple(names_a)
        self.names_b = tuple(names_b)
        if set(self.names_a) & set(self.names_b):
            raise TaskError("ID and OOD name sets must be disjoint")
        if not 0 <= n_unseen < n_refs:
            raise TaskError(f"need 0 <= n_unseen < n_refs, got {n_unseen} and {n_refs}")
        self.n_refs, self.n_unseen = int(n_refs), int(n_unseen)
        self.refs = referring_words(self.n_refs)
        self._ref_cdf = _zipf_cdf(self.n_refs, ref_zipf)
        self._seen_ref_cdf = _zipf_cdf(self.n_refs - self.n_unseen, ref_zipf)
        self._cdf = {False: _zipf_cdf(len(self.names_a), zipf_exponent), True: _zipf_cdf(len(self.names_b), zipf_exponent)}
        names = self.names_a + self.names_b
        self.vocab = Vocab(KEYWORDS + PLACES + OBJECTS + names + self.refs[0] + self.refs[1])
        self.hlm = indexing_hlm(names, self.n_refs)
        self.train_mixture = dict(train_mixture or {ID_TAG: 0.993, DISJOINT_NAMES: 0.002, REPHRASED: 0.005})

    def _sample(self, tag, causal_rng, background_rng):
        # causal draws are tag independent; they are mapped into the tag's name pool
        position = POSITIONS[int(causal_rng.integers(2))]
        ua, ub = causal_rng.random(2)
        ood = tag == DISJOINT_NAMES
        pool = self.names_b if ood else self.names_a
        cdf = self._cdf[ood]
        ia = _draw(cdf, ua)
        # second name: same inverse-cdf draw with the first name removed
        rest = np.delete(np.diff(cdf, prepend=0.0), ia)
        ib = min(int(np.searchsorted(np.cumsum(rest / rest.sum()), ub, side="right")), len(pool) - 2)
        ib += ib >= ia
        a, b = pool[ia], pool[ib]
        c = b if position == "first" else a
        return {
            "name_a": a,
            "name_b": b,
            "name_c": c,
            "ref": _draw(self._ref_cdf, background_rng.random()),
            "place": PLACES[int(background_rng.integers(len(PLACES)))],
            "object": OBJECTS[int(background_rng.integers(len(OBJECTS)))],
        }

    def unseen_ref(self, a: Mapping[str, Any]) -> bool:
        return a["ref"] >= self.n_refs - self.n_unseen

    def training_sample(self, tag, seed, index):
        # the rarest referring words are withheld from training
        a = self.sample_assignment(tag, seed, index)
        if not self.unseen_ref(a):
            return self.make_prompt(a, tag, uid=f"{self.name}:{tag}:{seed}:{index}")
        u = np.random.default_rng([seed, index, _TRAIN_SALT]).random()
        a = dict(a, ref=_draw(self._seen_ref_cdf, u))
        return self.make_prompt(a, tag, uid=f"{self.name}:{tag}:{seed}:{index}:train")

    def render(self, a: Mapping[str, Any], tag: str):
        c = self.refs[0 if a["name_c"] == a["name_a"] else 1][a["ref"]]
        if tag == REPHRASED:
            words = ["<bos>", "story", ":", a["name_a"], "and", a["name_b"], "went", "to", "the", a["place"], ".",
                     c, "gave", "a", a["object"], ".", "who", "got", "it", "?", "answer", ":"]
            roles = {"name_a": 3, "name_b": 5, "place": 9, "name_c": 11, "object": 14}
        else:
            words = ["<bos>", "then", a["name_a"], "and", a["name_b"], "went", "to", "the", a["place"], ".",
                     c, "gave", "a", a["object"], "to"]
            roles = {"name_a": 2, "name_b": 4, "place": 8, "name_c": 10, "object": 13}
        roles["last"] = len(words) - 1
        return words, roles

    def task_function(self, a):
        return indexing_answer(a["name_a"], a["name_b"], a["name_c"])
