from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings, strategies as st

from causalpred.planted import planted_chain
from causalpred.tasks import (
    BalanceError,
    ChainTask,
    HLMError,
    HighLevelModel,
    IndexingTask,
    IntervalTask,
    LookupTask,
    TaskError,
    Variable,
    build_verified_set,
    counterfactual_label,
    generate_split,
    hlm_eval,
    indexing_answer,
    interval_answer,
    lookup_answer,
    random_table,
    read_dataset,
    write_dataset,
)
from causalpred.tasks.indexing import DISJOINT_NAMES, NAMES_A, NAMES_B, REPHRASED

ALL_TASKS = [IndexingTask, IntervalTask, LookupTask, ChainTask]


# -- task functions -------------------------------------------------------------


def test_interval_answer_examples():
    assert interval_answer(3, 10, 5) is True
    assert interval_answer(0, 20, 25) is False
    with pytest.raises(TaskError):
        interval_answer(3, 10, 3)
    with pytest.raises(TaskError):
        interval_answer(10, 3, 5)


def test_indexing_answer_examples():
    assert indexing_answer("A", "B", "A") == "B"
    assert indexing_answer("A", "B", "B") == "A"
    with pytest.raises(TaskError):
        indexing_answer("A", "B", "C")
    with pytest.raises(TaskError):
        indexing_answer("A", "A", "A")


def test_lookup_answer_examples():
    assert lookup_answer("e1", {"e1": "c1"}) == "c1"
    with pytest.raises(TaskError):
        lookup_answer("e2", {"e1": "c1"})
    table = random_table(64, 8, seed=0)
    assert len(table) == 64 and set(table.values()) == {f"c{i}" for i in range(8)}
    assert all(lookup_answer(e, table) == table[e] for e in table)


# -- high-level models ----------------------------------------------------------


def test_hlm_rejects_cycles_and_unknown_parents():
    with pytest.raises(HLMError, match="cycle"):
        HighLevelModel([Variable("a", (0, 1), ("b",), lambda b: b), Variable("b", (0, 1), ("a",), lambda a: a)], "a")
    with pytest.raises(HLMError, match="unknown parent"):
        HighLevelModel([Variable("a", (0, 1), ("zz",), lambda z: z)], "a")


@pytest.mark.parametrize("cls", ALL_TASKS)
def test_mechanisms_are_total(cls):
    cls().hlm.check_total()


def test_interval_hlm_matches_task_function_on_all_inputs():
    task = IntervalTask()
    n = 0
    for lb, ub, q in itertools.product(range(21), repeat=3):
        if lb < ub and q not in (lb, ub):
            a = {"lb": lb, "ub": ub, "q": q}
            assert hlm_eval(task.hlm, a) == task.task_function(a)
            n += 1
    assert n == 3990


def test_indexing_hlm_matches_task_function_on_all_inputs():
    task = IndexingTask(names_a=NAMES_A[:12], names_b=NAMES_B[:4])
    names = task.names_a + task.names_b
    for a, b in itertools.permutations(names, 2):
        for c in (a, b):
            x = {"name_a": a, "name_b": b, "name_c": c}
            assert hlm_eval(task.hlm, x) == task.task_function(x)


def test_lookup_and_chain_consistency():
    task = LookupTask()
    for e in task.entities:
        assert hlm_eval(task.hlm, {"entity": e}) == task.task_function({"entity": e})
    chain = ChainTask()
    for x in chain.x_values:
        assert hlm_eval(chain.hlm, {"X": x}) == chain.task_function({"X": x})


def test_chain_intervention_ignores_input():
    hlm = ChainTask().hlm
    for x in ChainTask().x_values:
        assert hlm_eval(hlm, {"X": x}, {"V": 1}) == "yes"
        assert hlm_eval(hlm, {"X": x}, {"V": 0}) == "no"


def test_indexing_position_mechanism_table():
    hlm = IndexingTask().hlm
    # position names the slot holding the answer; forcing it selects that slot
    base = {"name_a": "Mary", "name_b": "John", "name_c": "Mary"}
    assert hlm.evaluate(base)["position"] == "second"
    assert hlm_eval(hlm, base) == "John"
    assert hlm_eval(hlm, base, {"position": "first"}) == "Mary"
    assert hlm.mechanism_table("output")[("first", "Mary", "John")] == "Mary"
    assert hlm.mechanism_table("output")[("second", "Mary", "John")] == "John"


def test_counterfactual_labels():
    idx = IndexingTask()
    base = {"name_a": "Mary", "name_b": "John", "name_c": "John"}
    assert counterfactual_label(idx.hlm, base, "position", "first") == "Mary"
    assert counterfactual_label(idx.hlm, base, "position", "second") == "John"
    iv = IntervalTask()
    assert counterfactual_label(iv.hlm, {"lb": 3, "ub": 10, "q": 5}, "P", False) is False
    lk = LookupTask()
    for e in lk.entities[:10]:
        assert counterfactual_label(lk.hlm, {"entity": e}, "attribute", "c2") == "c2"
    with pytest.raises(HLMError):
        counterfactual_label(idx.hlm, base, "position", "third")


def test_interval_shortcut_sets_q_false_when_p_fails():
    plain, short = IntervalTask().hlm, IntervalTask(shortcut=True).hlm
    x = {"lb": 12, "ub": 15, "q": 5}  # lower check fails, upper check holds
    assert plain.evaluate(x)["Q"] is True
    assert short.evaluate(x)["Q"] is False
    assert hlm_eval(plain, x) is hlm_eval(short, x) is False
    # a base where only Q fails: importing Q from x fixes the plain model's answer, not the shortcut's
    base = {"lb": 1, "ub": 4, "q": 5}
    assert counterfactual_label(plain, base, "Q", plain.evaluate(x)["Q"]) is True
    assert counterfactual_label(short, base, "Q", short.evaluate(x)["Q"]) is False


# -- sampling and rendering -----------------------------------------------------


@pytest.mark.parametrize("cls", ALL_TASKS)
def test_samples_are_valid_and_deterministic(cls):
    task = cls()
    for tag in task.tags:
        for i in range(40):
            p = task.sample(tag, 3, i)
            assert p == task.sample(tag, 3, i)
            assert len(p.tokens) <= task.max_seq_len
            assert p.tokens[-1] == p.tokens[p.roles["last"]]
            assert hlm_eval(task.hlm, p.assignment) == task.task_function(p.assignment)
            task.encode_answer(task.task_function(p.assignment))


@pytest.mark.parametrize("cls", ALL_TASKS)
def test_causal_draws_do_not_depend_on_tag(cls):
    task = cls()
    for i in range(30):
        vals = {tag: {v: task.variable_value(task.sample_assignment(tag, 1, i), v) for v in task.causal_variables}
                for tag in task.tags}
        first = next(iter(vals.values()))
        assert all(v == first for v in vals.values())


def test_disjoint_name_tag_uses_only_ood_names():
    task = IndexingTask()
    for i in range(200):
        a = task.sample_assignment(DISJOINT_NAMES, 0, i)
        assert {a["name_a"], a["name_b"], a["name_c"]} <= set(NAMES_B)
        b = task.sample_assignment("ID", 0, i)
        assert {b["name_a"], b["name_b"]} <= set(NAMES_A)


def test_indexing_roles_point_at_names():
    task = IndexingTask()
    for tag in task.tags:
        for i in range(20):
            p = task.sample(tag, 0, i)
            words = task.vocab.decode(p.tokens)
            assert words[p.roles["name_a"]] == p.assignment["name_a"]
            assert words[p.roles["name_b"]] == p.assignment["name_b"]
            slot = 0 if p.assignment["name_c"] == p.assignment["name_a"] else 1
            assert words[p.roles["name_c"]] == task.refs[slot][p.assignment["ref"]]


def test_rephrased_template_changes_tokens_only():
    task = IndexingTask()
    for i in range(20):
        a, b = task.sample("ID", 0, i), task.sample(REPHRASED, 0, i)
        assert a.tokens != b.tokens
        assert task.task_function(a.assignment) == task.task_function(b.assignment)


def test_rarest_referring_words_never_reach_training():
    task = IndexingTask()
    unseen = seen_in_test = 0
    for tag in task.tags:
        for i in range(2000):
            train = task.training_sample(tag, 0, i)
            test = task.sample(tag, 0, i)
            assert not task.unseen_ref(train.assignment)
            # only the referring word is redrawn; the causal inputs stay put
            assert {k: train.assignment[k] for k in ("name_a", "name_b", "name_c")} == \
                   {k: test.assignment[k] for k in ("name_a", "name_b", "name_c")}
            seen_in_test += task.unseen_ref(test.assignment)
            unseen += 1
    assert 0.02 < seen_in_test / unseen < 0.15


def test_unknown_tag_rejected():
    with pytest.raises(TaskError):
        IndexingTask().sample("nope", 0, 0)


# -- splits ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def flipped_chain():
    task = ChainTask()
    return task, planted_chain(task, v_flips=("x0",)).model


@pytest.fixture(scope="module")
def exact_chain():
    task = ChainTask()
    return task, planted_chain(task).model


def test_labels_match_decoded_answers(flipped_chain):
    task, model = flipped_chain
    ex = generate_split(task, "ID", 200, 0, model)
    for e in ex:
        assert e.label == int(task.decode_answer(e.output_tokens) == task.task_function(e.prompt.assignment))
        assert e.label == int(e.prompt.assignment["X"] != "x0")


def test_split_is_seed_deterministic(flipped_chain):
    task, model = flipped_chain
    a = generate_split(task, "ID", 50, 9, model)
    b = generate_split(task, "ID", 50, 9, model)
    assert [e.prompt for e in a] == [e.prompt for e in b]


def test_balanced_split(flipped_chain):
    task, model = flipped_chain
    ex = generate_split(task, "alternate-fillers", 40, 1, model, balance=True)
    assert sum(e.label for e in ex) == 20 and len(ex) == 40
    with pytest.raises(TaskError):
        generate_split(task, "ID", 41, 1, model, balance=True)


def test_balance_fails_on_perfect_model(exact_chain):
    task, model = exact_chain
    with pytest.raises(BalanceError) as err:
        generate_split(task, "ID", 10, 0, model, balance=True, max_draws=500)
    assert err.value.counts[0] == 0


def test_verified_set_is_correct_id_and_excludable(flipped_chain):
    task, model = flipped_chain
    ver = build_verified_set(task, model, 30, seed=4)
    assert len(ver) == 30 and all(e.label == 1 and e.tag == "ID" for e in ver)
    assert len(ver.prompt_keys()) == 30
    rest = generate_split(task, "ID", 100, 4, model, exclude=ver.prompt_keys())
    assert not ver.prompt_keys() & {e.tokens for e in rest}


def test_dataset_round_trip(tmp_path, flipped_chain):
    task, model = flipped_chain
    ex = generate_split(task, "ID", 20, 2, model)
    write_dataset(tmp_path / "d.jsonl", ex)
    back = read_dataset(tmp_path / "d.jsonl", task)
    assert [(e.prompt, e.output_tokens, e.label) for e in back] == [(e.prompt, e.output_tokens, e.label) for e in ex]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_indexing_sample_properties(seed, index):
    task = IndexingTask()
    for tag in task.tags:
        a = task.sample_assignment(tag, seed, index)
        assert a["name_a"] != a["name_b"]
        assert a["name_c"] in (a["name_a"], a["name_b"])
