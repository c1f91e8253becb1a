from .base import (
    BalanceError,
    Example,
    Prompt,
    Task,
    TaskError,
    VerifiedSet,
    Vocab,
    build_verified_set,
    generate_split,
    label_examples,
    read_dataset,
    write_dataset,
)
from .chain import ChainTask
from .hlm import HighLevelModel, HLMError, Variable, chain_model
from .indexing import IndexingTask, indexing_answer, indexing_hlm
from .interval import IntervalTask, interval_answer, interval_hlm
from .lookup import LookupTask, lookup_answer, lookup_hlm, random_table

TASKS = {"chain": ChainTask, "indexing": IndexingTask, "interval": IntervalTask, "lookup": LookupTask}


def get_task(name: str, **kwargs) -> Task:
    try:
        cls = TASKS[name]
    except KeyError:
        raise TaskError(f"unknown task {name!r}; known: {sorted(TASKS)}") from None
    return cls(**kwargs)


def hlm_eval(hlm: HighLevelModel, assignment, interventions=None):
    """Output of ``hlm`` on ``assignment`` under ``interventions``."""
    return hlm.run(assignment, interventions)


def counterfactual_label(hlm: HighLevelModel, base_assignment, variable: str, value):
    """Output the high-level model predicts for ``base`` once ``variable`` is forced to ``value``."""
    if value not in hlm[variable].domain:
        raise HLMError(f"value {value!r} outside domain of {variable!r}")
    return hlm.run(base_assignment, {variable: value})
