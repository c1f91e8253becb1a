from __future__ import annotations

import pytest
import torch
from hypothesis import given, settings, strategies as st

from causalpred.model import (
    ActivationVector,
    ModelError,
    ResidualLocation,
    TransformerConfig,
    TransformerModel,
    forward,
    forward_with_patch,
    get_val,
    greedy_decode,
    task_accuracy,
    train_task_model,
)
from causalpred.tasks import ChainTask, IndexingTask

CFG = TransformerConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=20, max_seq_len=10, seed=1)


@pytest.fixture(scope="module")
def tiny():
    return TransformerModel(CFG).freeze()


def _tokens(seed: int, n: int = 8) -> torch.Tensor:
    return torch.randint(0, CFG.vocab_size, (1, n), generator=torch.Generator().manual_seed(seed))


def test_config_validation():
    with pytest.raises(ModelError):
        TransformerConfig(d_model=10, n_heads=3)
    with pytest.raises(ModelError):
        TransformerConfig(n_layers=0)


def test_weight_shapes_follow_config(tiny):
    w = tiny.named_weights()
    assert w["W_E"].shape == (20, 16) and w["W_pos"].shape == (10, 16) and w["W_U"].shape == (16, 20)
    assert len(tiny.blocks) == 2


def test_forward_shapes_and_cache(tiny):
    logits, cache = forward(tiny, _tokens(0))
    assert logits.shape == (1, 8, 20)
    assert len(cache) == CFG.n_layers + 1
    assert all(c.shape == (1, 8, 16) for c in cache)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 7))
def test_causal_masking(seed, t):
    model = TransformerModel(CFG).freeze()
    a = _tokens(seed)
    b = a.clone()
    b[0, t:] = (b[0, t:] + 1) % CFG.vocab_size
    la, lb = forward(model, a)[0], forward(model, b)[0]
    assert torch.equal(la[0, :t], lb[0, :t])


def test_forward_is_deterministic(tiny):
    x = _tokens(3)
    assert torch.equal(forward(tiny, x)[0], forward(tiny, x)[0])


def test_token_range_and_length_checked(tiny):
    with pytest.raises(ModelError):
        forward(tiny, torch.tensor([[0, 25]]))
    with pytest.raises(ModelError):
        forward(tiny, torch.zeros(1, 11, dtype=torch.long))


def test_layer0_value_is_embedding_plus_position(tiny):
    toks = _tokens(4)[0].tolist()
    v = get_val(tiny, toks, ResidualLocation(0, "pos:3"))
    assert torch.equal(v.values, tiny.W_E[toks[3]] + tiny.W_pos[3])


def test_get_val_equals_cache_lookup(tiny):
    toks = _tokens(5)
    _, cache = forward(tiny, toks)
    for layer in range(CFG.n_layers + 1):
        v = get_val(tiny, toks[0].tolist(), ResidualLocation(layer, "last"))
        assert torch.equal(v.values, cache[layer][0, -1])


def test_selector_errors():
    with pytest.raises(ModelError):
        ResidualLocation(0, "not a selector!")
    with pytest.raises(ModelError):
        ResidualLocation(0, "name_c").resolve([1, 2, 3])
    with pytest.raises(ModelError):
        ResidualLocation(0, "pos:9").resolve([1, 2, 3])


def test_identity_patch_leaves_logits_unchanged(tiny):
    toks = _tokens(6)[0].tolist()
    for layer in range(CFG.n_layers + 1):
        loc = ResidualLocation(layer, "pos:4")
        own = get_val(tiny, toks, loc)
        assert torch.equal(forward_with_patch(tiny, toks, loc, own), forward(tiny, torch.tensor([toks]))[0][0])


def test_final_residual_patch_copies_source_logits(tiny):
    base, src = _tokens(7)[0].tolist(), _tokens(8)[0].tolist()
    loc = ResidualLocation(CFG.n_layers, "last")
    patched = forward_with_patch(tiny, base, loc, get_val(tiny, src, loc))
    assert torch.allclose(patched[-1], forward(tiny, torch.tensor([src]))[0][0, -1], atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2), st.integers(0, 7))
def test_patch_locality(seed, layer, t):
    model = TransformerModel(CFG).freeze()
    toks = _tokens(seed)
    loc = ResidualLocation(layer, f"pos:{t}")
    rep = ActivationVector(torch.randn(16, generator=torch.Generator().manual_seed(seed)), loc)
    base_logits, base_cache = model.run(toks)
    pos = torch.tensor([t])
    from causalpred.model import patch_hook

    logits, cache = model.run(toks, {layer: patch_hook(pos, lambda _: rep.values)})
    assert torch.equal(logits[0, :t], base_logits[0, :t])
    for k in range(layer):
        assert torch.equal(cache[k], base_cache[k])
    assert torch.equal(forward_with_patch(model, toks[0].tolist(), loc, rep)[:t], base_logits[0, :t])


def test_patch_length_checked(tiny):
    with pytest.raises(ModelError):
        forward_with_patch(tiny, [1, 2, 3], ResidualLocation(1, "last"), torch.zeros(5))


def test_weights_round_trip(tiny):
    again = TransformerModel.from_weights(CFG, tiny.named_weights())
    assert again.weights_hash() == tiny.weights_hash()
    with pytest.raises(ModelError):
        TransformerModel.from_weights(CFG, {"W_E": tiny.W_E})


def test_zero_steps_gives_initial_weights_and_chance_accuracy():
    task = ChainTask()
    cfg = TransformerConfig(n_layers=1, n_heads=1, d_model=8, d_ff=8, vocab_size=len(task.vocab), max_seq_len=8)
    m, log = train_task_model(cfg, task, 0, eval_size=256)
    assert m.weights_hash() == TransformerModel(cfg).weights_hash()
    # an untrained model is no better than guessing among the two answers
    assert log.id_accuracy <= 0.5 + 0.1


def test_training_is_seed_deterministic_and_learns_chain():
    task = ChainTask()
    cfg = TransformerConfig(n_layers=1, n_heads=1, d_model=16, d_ff=16, vocab_size=len(task.vocab), max_seq_len=8)
    a, log_a = train_task_model(cfg, task, 150, batch=32, lr=1e-2, eval_size=256)
    b, log_b = train_task_model(cfg, task, 150, batch=32, lr=1e-2, eval_size=256)
    assert a.weights_hash() == b.weights_hash()
    assert log_a.losses == log_b.losses
    assert log_a.losses[-1] < log_a.losses[0]
    assert task_accuracy(a, task, "ID", 256) > 0.95


def test_vocab_must_cover_task():
    task = IndexingTask()
    with pytest.raises(ModelError):
        train_task_model(TransformerConfig(vocab_size=10), task, 1)


def test_greedy_decode_appends_tokens(tiny):
    out = greedy_decode(tiny, [[1, 2, 3], [4, 5]], n_decode=3)
    assert [len(o) for o in out] == [3, 3]
