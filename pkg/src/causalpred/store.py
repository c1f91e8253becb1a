"""Content-addressed artifact store.

An artifact is a directory holding ``manifest.json`` plus named binary
files. Its id is ``<kind>-<first 16 hex of sha256>`` over the canonical
manifest and every file, so identical content always lands on the same id.
Writes go to a temporary directory that is renamed into place; the index is
replaced atomically as well.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

import torch

from .numerics import read_tensor, tensor_from_bytes, tensor_to_bytes

STORE_ENV = "CAUSALPRED_STORE"
INDEX = "index.json"


class StoreError(RuntimeError):
    pass


class MissingArtifact(StoreError):
    pass


class CorruptArtifact(StoreError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def content_hash(manifest: Mapping, files: Mapping[str, bytes]) -> str:
    h = hashlib.sha256()
    h.update(canonical_json(manifest))
    for name in sorted(files):
        data = files[name]
        h.update(name.encode() + b"\0" + len(data).to_bytes(8, "little"))
        h.update(data)
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ArtifactStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "objects").mkdir(exist_ok=True)

    @classmethod
    def resolve_root(cls, flag: str | None, default: str = "artifacts") -> "ArtifactStore":
        """Store root from the environment override, else ``flag``, else ``default``."""
        return cls(os.environ.get(STORE_ENV) or flag or default)

    # -- index ------------------------------------------------------------
    def index(self) -> dict:
        p = self.root / INDEX
        if not p.exists():
            return {"artifacts": {}, "tags": {}}
        return json.loads(p.read_text())

    def _write_index(self, idx: dict) -> None:
        _atomic_write(self.root / INDEX, json.dumps(idx, indent=1, sort_keys=True).encode())

    def tag(self, name: str, artifact_id: str) -> None:
        idx = self.index()
        if artifact_id not in idx["artifacts"]:
            raise MissingArtifact(f"cannot tag unknown artifact {artifact_id!r}")
        idx["tags"][name] = artifact_id
        self._write_index(idx)

    def resolve(self, ref: str) -> str:
        idx = self.index()
        if ref in idx["artifacts"]:
            return ref
        if ref in idx["tags"]:
            return idx["tags"][ref]
        raise MissingArtifact(f"no artifact or tag named {ref!r} in {self.root}")

    def kind(self, ref: str) -> str:
        return self.index()["artifacts"][self.resolve(ref)]["kind"]

    # -- objects ----------------------------------------------------------
    def put(self, kind: str, manifest: Mapping, files: Mapping[str, bytes] | None = None) -> str:
        files = dict(files or {})
        for name in files:
            if "/" in name or name.startswith(".") or name == "manifest.json":
                raise StoreError(f"invalid artifact file name {name!r}")
        manifest = dict(manifest, kind=kind)
        digest = content_hash(manifest, files)
        aid = f"{kind}-{digest[:16]}"
        final = self.root / "objects" / aid
        if not final.exists():
            tmp = Path(tempfile.mkdtemp(dir=self.root / "objects", prefix=".tmp-"))
            try:
                (tmp / "manifest.json").write_bytes(canonical_json(manifest))
                for name, data in files.items():
                    (tmp / name).write_bytes(data)
                os.replace(tmp, final)
            except BaseException:
                shutil.rmtree(tmp, ignore_errors=True)
                raise
        idx = self.index()
        idx["artifacts"][aid] = {"kind": kind, "hash": digest, "path": f"objects/{aid}", "files": sorted(files)}
        self._write_index(idx)
        return aid

    def get(self, ref: str, kind: str | None = None) -> tuple[dict, dict[str, bytes]]:
        aid = self.resolve(ref)
        entry = self.index()["artifacts"][aid]
        if kind is not None and entry["kind"] != kind:
            raise MissingArtifact(f"{ref!r} is a {entry['kind']} artifact, expected {kind}")
        d = self.root / entry["path"]
        if not d.is_dir():
            raise MissingArtifact(f"artifact directory for {aid} is missing")
        manifest = json.loads((d / "manifest.json").read_bytes())
        files = {name: (d / name).read_bytes() for name in entry["files"]}
        if content_hash(manifest, files) != entry["hash"]:
            raise CorruptArtifact(f"hash mismatch for {aid}: stored content was modified")
        return manifest, files

    def path(self, ref: str) -> Path:
        aid = self.resolve(ref)
        return self.root / self.index()["artifacts"][aid]["path"]


# ---------------------------------------------------------------------------
# typed helpers


def tensors_to_files(tensors: Mapping[str, torch.Tensor], prefix: str = "") -> tuple[list[dict], dict[str, bytes]]:
    entries, files = [], {}
    for i, (name, t) in enumerate(tensors.items()):
        fname = f"{prefix}{i:03d}.bin"
        entries.append({"name": name, "file": fname, "shape": list(t.shape)})
        files[fname] = tensor_to_bytes(t)
    return entries, files


def files_to_tensors(entries: list[dict], files: Mapping[str, bytes]) -> dict[str, torch.Tensor]:
    out = {}
    for e in entries:
        if e["file"] not in files:
            raise CorruptArtifact(f"tensor file {e['file']} missing")
        t = tensor_from_bytes(files[e["file"]])
        if list(t.shape) != list(e["shape"]):
            raise CorruptArtifact(f"tensor {e['name']} has shape {list(t.shape)}, manifest says {e['shape']}")
        out[e["name"]] = t
    return out


def save_model(store: ArtifactStore, model, extra: Mapping | None = None, files: Mapping[str, bytes] | None = None) -> str:
    entries, tfiles = tensors_to_files(model.named_weights(), "w")
    manifest = {"config": model.cfg.to_dict(), "weights": entries, **(extra or {})}
    return store.put("model", manifest, {**tfiles, **(files or {})})


def load_model(store: ArtifactStore, ref: str):
    from .model import TransformerConfig, TransformerModel

    manifest, files = store.get(ref, "model")
    cfg = TransformerConfig(**manifest["config"])
    return TransformerModel.from_weights(cfg, files_to_tensors(manifest["weights"], files)).freeze(), manifest


def save_alignment(store: ArtifactStore, alignment, extra: Mapping | None = None, files: Mapping[str, bytes] | None = None) -> str:
    manifest = {**alignment.manifest(), **(extra or {}), "params": "params.bin"}
    return store.put("alignment", manifest, {"params.bin": tensor_to_bytes(alignment.map.params.detach()), **(files or {})})


def load_alignment(store: ArtifactStore, ref: str):
    from .causal import Alignment

    manifest, files = store.get(ref, "alignment")
    params = read_tensor(io.BytesIO(files["params.bin"]))
    return Alignment.from_manifest(manifest, params), manifest, files
