"""Binary model file: one self-contained artifact per trained model.

Layout: 4-byte magic "TMLP", little-endian uint32 format version,
little-endian uint64 metadata byte length, UTF-8 JSON metadata, then the
concatenated little-endian float32 parameter arrays. The metadata carries
the feature schema, preprocessor statistics, training config, the gate
trees as JSON, and one array manifest per branch whose offsets count from
the start of the array region and increase strictly. Routing matrices are
not stored; they are rebuilt from the trees on load, which keeps files
small and re-exercises the compiler every time.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .data import Preprocessor, schema_from_dict
from .ensemble import EnsembleBundle
from .errors import CorruptModel
from .gbdt import GbdtModel
from .model import (
    BlockParams,
    GateParams,
    HeadParams,
    TmlpModel,
    TmlpParams,
    TokenizerParams,
    TrainConfig,
    model_param_dict,
)
from .routing import compile_model

MAGIC = b"TMLP"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _branch_entry(params: TmlpParams, pruned: bool):
    arrays = dict(model_param_dict(params))
    meta = {
        "pruned": bool(pruned),
        "hidden_idx": None if params.hidden_idx is None
        else [int(i) for i in params.hidden_idx],
        "channel_idx": None if params.channel_idx is None
        else [int(i) for i in params.channel_idx],
        "gates": None,
    }
    if params.gates is not None:
        arrays["gate.log_alpha_h"] = params.gates.log_alpha_h
        arrays["gate.log_alpha_in"] = params.gates.log_alpha_in
        meta["gates"] = {
            "lam1": float(params.gates.lam1),
            "lam2": float(params.gates.lam2),
        }
    return arrays, meta


def save_model(path: str, obj: TmlpModel | EnsembleBundle) -> None:
    """Writes a single model or a branch bundle to one binary file."""
    if isinstance(obj, EnsembleBundle):
        head_model = obj.branches[0]
        branch_models = obj.branches
        extra = {"learning_rates": [float(x) for x in obj.learning_rates]}
        kind = "ensemble"
        gbdt = obj.gbdt
    else:
        head_model = obj
        branch_models = [obj]
        extra = {}
        kind = "single"
        gbdt = obj.gbdt

    blobs: list[bytes] = []
    offset = 0
    branch_metas = []
    for m in branch_models:
        arrays, meta = _branch_entry(m.params, m.pruned)
        manifest = []
        for name, arr in arrays.items():
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append(
                {"name": name, "shape": [int(s) for s in arr.shape], "offset": offset}
            )
            blobs.append(blob)
            offset += len(blob)
        meta["arrays"] = manifest
        branch_metas.append(meta)

    doc = {
        "kind": kind,
        "task": head_model.task,
        "schema": head_model.schema.to_dict(),
        "preprocessor": head_model.prep.to_dict(),
        "config": head_model.config.to_dict(),
        "gbdt": None if gbdt is None else gbdt.to_dict(),
        "branches": branch_metas,
        **extra,
    }
    meta_bytes = json.dumps(doc).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        for blob in blobs:
            f.write(blob)


def _params_from_arrays(arrays: dict[str, np.ndarray], bm: dict) -> TmlpParams:
    try:
        n_emb = sum(1 for k in arrays if k.startswith("tok.emb"))
        tok = TokenizerParams(
            w_num=arrays["tok.w_num"],
            b_num=arrays["tok.b_num"],
            embeddings=[arrays[f"tok.emb{j}"] for j in range(n_emb)],
            cls=arrays["tok.cls"],
        )
        n_blocks = sum(1 for k in arrays if k.startswith("blk") and k.endswith(".w1"))
        if n_blocks == 0:
            raise CorruptModel("manifest holds no block parameters")
        blocks = [
            BlockParams(
                ln1_gain=arrays[f"blk{i}.ln1_gain"],
                ln1_bias=arrays[f"blk{i}.ln1_bias"],
                w1=arrays[f"blk{i}.w1"],
                sgu_gain=arrays[f"blk{i}.sgu_gain"],
                sgu_bias=arrays[f"blk{i}.sgu_bias"],
                w3=arrays[f"blk{i}.w3"],
                b3=arrays[f"blk{i}.b3"],
                w2=arrays[f"blk{i}.w2"],
            )
            for i in range(n_blocks)
        ]
        head = HeadParams(
            ln_gain=arrays["head.ln_gain"],
            ln_bias=arrays["head.ln_bias"],
            w=arrays["head.w"],
            b=arrays["head.b"],
        )
        gates = None
        if bm.get("gates") is not None:
            gates = GateParams(
                log_alpha_h=arrays["gate.log_alpha_h"],
                log_alpha_in=arrays["gate.log_alpha_in"],
                lam1=float(bm["gates"]["lam1"]),
                lam2=float(bm["gates"]["lam2"]),
            )
    except KeyError as e:
        raise CorruptModel(f"manifest missing array {e}") from None
    hidden_idx = bm.get("hidden_idx")
    channel_idx = bm.get("channel_idx")
    return TmlpParams(
        tokenizer=tok, blocks=blocks, head=head, gates=gates,
        hidden_idx=None if hidden_idx is None else np.asarray(hidden_idx, dtype=np.int64),
        channel_idx=None if channel_idx is None else np.asarray(channel_idx, dtype=np.int64),
    )


def load_model(path: str) -> TmlpModel | EnsembleBundle:
    """Reads a model file back; raises CorruptModel on any malformation."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise CorruptModel("file shorter than its fixed header")
    magic, version, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptModel(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptModel(f"unsupported format version {version}")
    region = _HEADER.size + meta_len
    if region > len(raw):
        raise CorruptModel("metadata extends past end of file")
    try:
        meta = json.loads(raw[_HEADER.size : region].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptModel(f"unreadable metadata: {e}") from None

    try:
        kind = meta["kind"]
        task = meta["task"]
        schema = schema_from_dict(meta["schema"])
        prep = Preprocessor.from_dict(meta["preprocessor"])
        cfg = TrainConfig.from_dict(meta["config"])
        gbdt = None if meta["gbdt"] is None else GbdtModel.from_dict(meta["gbdt"])
        branch_metas = meta["branches"]
        if not isinstance(branch_metas, list) or not branch_metas:
            raise CorruptModel("no branch sections")
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptModel(f"metadata missing or malformed: {e}") from None

    routing = compile_model(gbdt) if gbdt is not None else None
    prev_offset = -1
    end = region
    branches = []
    for bm in branch_metas:
        arrays: dict[str, np.ndarray] = {}
        try:
            manifest = bm["arrays"]
        except (KeyError, TypeError) as e:
            raise CorruptModel(f"branch manifest malformed: {e}") from None
        for ent in manifest:
            try:
                name = ent["name"]
                shape = tuple(int(s) for s in ent["shape"])
                off = int(ent["offset"])
            except (KeyError, TypeError, ValueError) as e:
                raise CorruptModel(f"manifest entry malformed: {e}") from None
            if off <= prev_offset:
                raise CorruptModel("manifest offsets not strictly increasing")
            prev_offset = off
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            lo = region + off
            if lo + 4 * count > len(raw):
                raise CorruptModel(f"array {name!r} extends past end of file")
            arrays[name] = (
                np.frombuffer(raw, dtype="<f4", count=count, offset=lo)
                .reshape(shape)
                .copy()
            )
            end = max(end, lo + 4 * count)
        params = _params_from_arrays(arrays, bm)
        branches.append(
            TmlpModel(
                schema=schema, prep=prep, config=cfg, task=task, params=params,
                gbdt=gbdt, pruned=bool(bm.get("pruned", False)), routing=routing,
            )
        )
    if end != len(raw):
        raise CorruptModel("file length disagrees with the array manifest")

    if kind == "single":
        return branches[0]
    if kind == "ensemble":
        rates = tuple(float(x) for x in meta.get("learning_rates", ()))
        return EnsembleBundle(task=task, gbdt=gbdt, branches=branches, learning_rates=rates)
    raise CorruptModel(f"unknown container kind {kind!r}")
