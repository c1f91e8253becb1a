from __future__ import annotations

import json

import pytest
import torch

from causalpred.causal import Alignment
from causalpred.model import ResidualLocation, TransformerConfig, TransformerModel
from causalpred.numerics import OrthonormalMap
from causalpred.store import (
    STORE_ENV,
    ArtifactStore,
    CorruptArtifact,
    MissingArtifact,
    StoreError,
    load_alignment,
    load_model,
    save_alignment,
    save_model,
)


def test_put_get_round_trip(tmp_path):
    store = ArtifactStore(tmp_path)
    aid = store.put("blob", {"x": 1, "name": "a"}, {"data.bin": b"\x00\x01\x02", "notes.txt": b"hi"})
    manifest, files = store.get(aid, "blob")
    assert manifest == {"x": 1, "name": "a", "kind": "blob"}
    assert files == {"data.bin": b"\x00\x01\x02", "notes.txt": b"hi"}
    assert store.put("blob", {"name": "a", "x": 1}, {"notes.txt": b"hi", "data.bin": b"\x00\x01\x02"}) == aid
    assert store.put("blob", {"x": 2, "name": "a"}) != aid


def test_single_byte_mutations_are_detected(tmp_path):
    store = ArtifactStore(tmp_path)
    payload = bytes(range(64))
    aid = store.put("blob", {"k": "v"}, {"p.bin": payload})
    target = store.path(aid) / "p.bin"
    for i in range(len(payload)):
        bad = bytearray(payload)
        bad[i] ^= 0x01
        target.write_bytes(bytes(bad))
        with pytest.raises(CorruptArtifact):
            store.get(aid)
    target.write_bytes(payload)
    store.get(aid)
    mpath = store.path(aid) / "manifest.json"
    good = mpath.read_bytes()
    mpath.write_bytes(good.replace(b'"v"', b'"w"'))
    with pytest.raises(CorruptArtifact):
        store.get(aid)


def test_tags_and_missing(tmp_path):
    store = ArtifactStore(tmp_path)
    aid = store.put("blob", {"k": 1})
    store.tag("best", aid)
    assert store.resolve("best") == aid and store.kind("best") == "blob"
    with pytest.raises(MissingArtifact, match="nope"):
        store.get("nope")
    with pytest.raises(MissingArtifact):
        store.tag("x", "blob-0000")
    with pytest.raises(MissingArtifact):
        store.get(aid, "model")
    with pytest.raises(StoreError):
        store.put("blob", {}, {"../evil": b""})


def test_model_and_alignment_round_trip(tmp_path):
    store = ArtifactStore(tmp_path)
    cfg = TransformerConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, vocab_size=12, max_seq_len=6, seed=3)
    model = TransformerModel(cfg)
    mid = save_model(store, model, {"note": "x"})
    loaded, manifest = load_model(store, mid)
    assert manifest["note"] == "x"
    for (n1, a), (n2, b) in zip(model.named_weights().items(), loaded.named_weights().items()):
        assert n1 == n2 and torch.equal(a, b)
    align = Alignment("V", ResidualLocation(1, "last"), OrthonormalMap.random(2, 16, seed=4), "chain", 4)
    aid = save_alignment(store, align)
    back, m, _ = load_alignment(store, aid)
    assert torch.equal(back.map.params, align.map.params) and back.id == align.id
    assert torch.equal(back.q(), align.q())


def test_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(STORE_ENV, str(tmp_path / "env"))
    assert ArtifactStore.resolve_root(str(tmp_path / "flag")).root == tmp_path / "env"
    monkeypatch.delenv(STORE_ENV)
    assert ArtifactStore.resolve_root(str(tmp_path / "flag")).root == tmp_path / "flag"
