"""Shared task machinery: vocabularies, prompts, examples, split generation."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .hlm import HighLevelModel

DATASET_SCHEMA = "causalpred.dataset/1"


class TaskError(ValueError):
    pass


class BalanceError(TaskError):
    def __init__(self, msg: str, counts: dict[int, int]):
        super().__init__(f"{msg} (achieved counts: correct={counts.get(1, 0)}, wrong={counts.get(0, 0)})")
        self.counts = counts


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            dup = sorted({t for t in tokens if list(tokens).count(t) > 1})
            raise TaskError(f"duplicate tokens in vocabulary: {dup}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> tuple[int, ...]:
        try:
            return tuple(self.index[w] for w in words)
        except KeyError as e:
            raise TaskError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]
    roles: Mapping[str, int]  # role name -> token position, used by token selectors
    assignment: Mapping[str, Any]
    tag: str
    uid: str = ""

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Example:
    prompt: Prompt
    output_tokens: tuple[int, ...]
    label: int
    expected: Any = None

    @property
    def uid(self) -> str:
        return self.prompt.uid

    @property
    def tag(self) -> str:
        return self.prompt.tag

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt.tokens


@dataclass
class VerifiedSet:
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def prompt_keys(self) -> set[tuple[int, ...]]:
        return {e.tokens for e in self.examples}


def _tag_salt(tag: str) -> int:
    return zlib.crc32(tag.encode())


class Task:
    """Base class for synthetic tasks.

    Subclasses define the vocabulary, the high-level model, samplers and the
    renderer. Sampling is a pure function of ``(tag, seed, index)``; the
    causal part of an assignment does not depend on the tag.
    """

    name: str = "task"
    tags: tuple[str, ...] = ("ID",)
    answer_variable: str = "Y"
    causal_variables: tuple[str, ...] = ()
    vocab: Vocab
    hlm: HighLevelModel
    max_seq_len: int = 24
    train_mixture: Mapping[str, float] = {"ID": 1.0}

    # -- to override ------------------------------------------------------
    def _sample(self, tag: str, causal_rng: np.random.Generator, background_rng: np.random.Generator) -> dict[str, Any]:
        """Draw an input assignment; ``causal_rng`` must be consumed identically for every tag."""
        raise NotImplementedError

    def render(self, assignment: Mapping[str, Any], tag: str) -> tuple[list[str], dict[str, int]]:
        raise NotImplementedError

    def task_function(self, assignment: Mapping[str, Any]) -> Any:
        raise NotImplementedError

    def answer_token(self, value: Any) -> str:
        return str(value)

    # -- shared -----------------------------------------------------------
    def check_tag(self, tag: str) -> None:
        if tag not in self.tags:
            raise TaskError(f"task {self.name!r} has no distribution tag {tag!r}; known: {list(self.tags)}")

    def sample_assignment(self, tag: str, seed: int, index: int) -> dict[str, Any]:
        self.check_tag(tag)
        return self._sample(
            tag,
            np.random.default_rng([seed, index, 0]),
            np.random.default_rng([seed, index, 1, _tag_salt(tag)]),
        )

    def make_prompt(self, assignment: Mapping[str, Any], tag: str, uid: str = "") -> Prompt:
        words, roles = self.render(assignment, tag)
        tokens = self.vocab.encode(words)
        if len(tokens) > self.max_seq_len:
            raise TaskError(f"prompt of length {len(tokens)} exceeds max_seq_len {self.max_seq_len}")
        return Prompt(tokens, dict(roles), dict(assignment), tag, uid)

    def sample(self, tag: str, seed: int, index: int) -> Prompt:
        a = self.sample_assignment(tag, seed, index)
        return self.make_prompt(a, tag, uid=f"{self.name}:{tag}:{seed}:{index}")

    def training_sample(self, tag: str, seed: int, index: int) -> Prompt:
        """Prompt used by the trainer; same as ``sample`` unless a task restricts training inputs."""
        return self.sample(tag, seed, index)

    def encode_answer(self, value: Any) -> int:
        return self.vocab.index[self.answer_token(value)]

    @property
    def answer_token_ids(self) -> dict[int, Any]:
        """Token id -> high-level output value for every valid answer."""
        return {self.encode_answer(v): v for v in self.hlm[self.hlm.output].domain}

    def decode_answer(self, tokens: Sequence[int]) -> Any:
        """Map output tokens to an output value, or ``None`` if invalid."""
        if not tokens:
            return None
        return self.answer_token_ids.get(int(tokens[0]))

    def target_token(self, prompt: Prompt) -> int:
        return self.encode_answer(self.task_function(prompt.assignment))

    def label(self, prompt: Prompt, output_tokens: Sequence[int]) -> int:
        return int(self.decode_answer(output_tokens) == self.task_function(prompt.assignment))

    def variable_value(self, assignment: Mapping[str, Any], variable: str) -> Any:
        return self.hlm.evaluate(assignment)[variable]


# ---------------------------------------------------------------------------
# splits


def label_examples(task: Task, model, prompts: Sequence[Prompt], n_decode: int = 1) -> list[Example]:
    from ..model import greedy_decode

    outs = greedy_decode(model, [p.tokens for p in prompts], n_decode)
    examples = []
    for p, out in zip(prompts, outs):
        expected = task.task_function(p.assignment)
        examples.append(Example(p, tuple(out), task.label(p, out), expected))
    return examples


def generate_split(
    task: Task,
    tag: str,
    n: int,
    seed: int,
    model,
    balance: bool = False,
    exclude: Iterable[tuple[int, ...]] | None = None,
    max_draws: int | None = None,
    chunk: int = 1024,
    start: int = 0,
) -> list[Example]:
    """Draw ``n`` examples from distribution ``tag`` and label them with ``model``.

    With ``balance`` the split holds exactly ``n/2`` correct and ``n/2`` wrong
    examples, in draw order, found by rejection sampling.
    """
    task.check_tag(tag)
    if balance and n % 2:
        raise TaskError(f"balanced split needs an even size, got {n}")
    excluded = set(exclude or ())
    budget = max_draws if max_draws is not None else max(2000, 200 * n)
    quota = {1: n // 2, 0: n // 2} if balance else None
    counts = {0: 0, 1: 0}
    out: list[Example] = []
    index = start
    while len(out) < n:
        if index - start >= budget:
            raise BalanceError(f"rejection budget of {budget} draws exhausted for {task.name}/{tag}", counts)
        stop = min(index + chunk, start + budget)
        prompts = [task.sample(tag, seed, i) for i in range(index, stop)]
        prompts = [p for p in prompts if p.tokens not in excluded]
        index = stop
        for ex in label_examples(task, model, prompts):
            if quota is not None:
                if counts[ex.label] >= quota[ex.label]:
                    continue
            counts[ex.label] += 1
            out.append(ex)
            if len(out) == n:
                break
    return out


def build_verified_set(task: Task, model, n: int, seed: int, exclude=None, max_draws: int | None = None) -> VerifiedSet:
    """Correctly answered ID examples (label 1), drawn from their own seed stream."""
    task.check_tag("ID")
    excluded = set(exclude or ())
    budget = max_draws if max_draws is not None else max(2000, 50 * n)
    kept: list[Example] = []
    seen: set[tuple[int, ...]] = set()
    index = 0
    while len(kept) < n:
        if index >= budget:
            raise BalanceError(f"could not collect {n} verified examples within {budget} draws", {1: len(kept)})
        stop = min(index + 1024, budget)
        prompts = [task.sample("ID", seed, i) for i in range(index, stop)]
        index = stop
        prompts = [p for p in prompts if p.tokens not in excluded and p.tokens not in seen]
        for ex in label_examples(task, model, prompts):
            if ex.label == 1 and ex.tokens not in seen:
                seen.add(ex.tokens)
                kept.append(ex)
                if len(kept) == n:
                    break
    return VerifiedSet(kept)


# ---------------------------------------------------------------------------
# dataset files


def example_to_record(ex: Example) -> dict:
    p = ex.prompt
    return {
        "schema": DATASET_SCHEMA,
        "id": p.uid,
        "tag": p.tag,
        "prompt_tokens": list(p.tokens),
        "roles": dict(p.roles),
        "assignment": dict(p.assignment),
        "output_tokens": list(ex.output_tokens),
        "label": int(ex.label),
    }


def record_to_example(rec: dict, task: Task | None = None) -> Example:
    if rec.get("schema") != DATASET_SCHEMA:
        raise TaskError(f"unsupported dataset schema {rec.get('schema')!r}")
    p = Prompt(tuple(rec["prompt_tokens"]), dict(rec["roles"]), dict(rec["assignment"]), rec["tag"], rec["id"])
    expected = task.task_function(p.assignment) if task is not None else None
    return Example(p, tuple(rec["output_tokens"]), int(rec["label"]), expected)


def dumps_dataset(examples: Iterable[Example]) -> str:
    return "".join(json.dumps(example_to_record(e), sort_keys=True) + "\n" for e in examples)


def write_dataset(path: str | Path, examples: Iterable[Example]) -> None:
    Path(path).write_text(dumps_dataset(examples))


def read_dataset(path: str | Path, task: Task | None = None) -> list[Example]:
    lines = Path(path).read_text().splitlines()
    return [record_to_example(json.loads(line), task) for line in lines if line.strip()]
