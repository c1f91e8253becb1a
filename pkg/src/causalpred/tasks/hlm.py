"""High-level causal models over finite domains."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Mapping, Sequence


class HLMError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    domain: tuple
    parents: tuple[str, ...] = ()
    mechanism: Callable[..., Any] | None = None  # None for input variables
    causal: bool = True  # False marks background inputs no mechanism reads

    @property
    def is_input(self) -> bool:
        return self.mechanism is None


@dataclass
class HighLevelModel:
    """A DAG of variables with deterministic mechanisms.

    Mechanisms are called with parent values as positional arguments, in the
    order listed in ``Variable.parents``.
    """

    variables: Sequence[Variable]
    output: str
    name: str = "hlm"
    _by_name: dict[str, Variable] = field(init=False, repr=False)
    _order: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {}
        for v in self.variables:
            if v.name in self._by_name:
                raise HLMError(f"duplicate variable {v.name!r}")
            self._by_name[v.name] = v
        for v in self.variables:
            for p in v.parents:
                if p not in self._by_name:
                    raise HLMError(f"{v.name!r} has unknown parent {p!r}")
            if v.is_input and v.parents:
                raise HLMError(f"input variable {v.name!r} cannot have parents")
        if self.output not in self._by_name:
            raise HLMError(f"unknown output variable {self.output!r}")
        self._order = self._toposort()

    def _toposort(self) -> list[str]:
        order: list[str] = []
        state: dict[str, int] = {}

        def visit(n: str, stack: tuple[str, ...]):
            s = state.get(n, 0)
            if s == 2:
                return
            if s == 1:
                raise HLMError(f"cycle through {' -> '.join(stack + (n,))}")
            state[n] = 1
            for p in self._by_name[n].parents:
                visit(p, stack + (n,))
            state[n] = 2
            order.append(n)

        for v in self.variables:
            visit(v.name, ())
        return order

    def __getitem__(self, name: str) -> Variable:
        try:
            return self._by_name[name]
        except KeyError:
            raise HLMError(f"unknown variable {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def order(self) -> list[str]:
        return list(self._order)

    @property
    def inputs(self) -> list[str]:
        return [n for n in self._order if self._by_name[n].is_input]

    @property
    def intermediates(self) -> list[str]:
        return [n for n in self._order if not self._by_name[n].is_input and n != self.output]

    def evaluate(self, assignment: Mapping[str, Hashable], interventions: Mapping[str, Hashable] | None = None) -> dict[str, Any]:
        """Evaluate every variable in topological order.

        Intervened variables take their forced value; their descendants are
        recomputed from it.
        """
        interventions = dict(interventions or {})
        for name, value in interventions.items():
            var = self[name]
            if value not in var.domain:
                raise HLMError(f"intervention value {value!r} outside domain of {name!r}")
        values: dict[str, Any] = {}
        for name in self._order:
            var = self._by_name[name]
            if name in interventions:
                values[name] = interventions[name]
            elif var.is_input:
                if name not in assignment:
                    if var.causal:
                        raise HLMError(f"missing input {name!r}")
                    continue
                value = assignment[name]
                if var.causal and value not in var.domain:
                    raise HLMError(f"input {name!r}={value!r} outside its domain")
                values[name] = value
            else:
                values[name] = var.mechanism(*(values[p] for p in var.parents))
        return values

    def run(self, assignment, interventions=None):
        return self.evaluate(assignment, interventions)[self.output]

    def mechanism_table(self, name: str) -> dict[tuple, Any]:
        """Enumerate ``parent values -> value`` over the full parent domains."""
        var = self[name]
        if var.is_input:
            raise HLMError(f"{name!r} is an input variable")
        doms = [self[p].domain for p in var.parents]
        return {combo: var.mechanism(*combo) for combo in itertools.product(*doms)}

    def check_total(self) -> None:
        """Raise unless every mechanism maps its parent domains into its own domain."""
        for name in self._order:
            var = self._by_name[name]
            if var.is_input:
                continue
            for combo, out in self.mechanism_table(name).items():
                if out not in var.domain:
                    raise HLMError(f"mechanism {name!r}{combo} -> {out!r} outside its domain")


def chain_model(x_domain: Sequence, v_of_x: Mapping, y_of_v: Mapping, name: str = "chain") -> HighLevelModel:
    """``X -> V -> Y`` with tabulated mechanisms."""
    v_dom = tuple(sorted(set(v_of_x.values()), key=repr))
    y_dom = tuple(sorted(set(y_of_v.values()), key=repr))
    return HighLevelModel(
        [
            Variable("X", tuple(x_domain)),
            Variable("V", v_dom, ("X",), lambda x: v_of_x[x]),
            Variable("Y", y_dom, ("V",), lambda v: y_of_v[v]),
        ],
        output="Y",
        name=name,
    )
