"""Binary tensor container shared by the simulator, trainer, CLI, and exporters.

File layout (little-endian throughout):

    magic   4 bytes  b"APA2"
    version u16      currently 1
    count   u32      number of records
    record  repeated ``count`` times:
        name_len u16, name UTF-8 bytes
        dtype    u8   (0=f32, 1=f64, 2=u32, 3=u8)
        rank     u8
        dims     u32 per axis
        payload  row-major array bytes

Writing the same records twice yields byte-identical files, so containers
can be compared and cached by content.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .common import ValidationError

MAGIC = b"APA2"
VERSION = 1

_DTYPE_BY_CODE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<u4"),
    3: np.dtype("u1"),
}
_CODE_BY_KEY = {(dt.kind, dt.itemsize): code for code, dt in _DTYPE_BY_CODE.items()}

# Candidate rows are [x, y, z, r1(3), r2(3), width]; see priors.encode_action.
ACTION_DIM = 10


def _dtype_code(name: str, array: np.ndarray) -> int:
    key = (array.dtype.kind, array.dtype.itemsize)
    code = _CODE_BY_KEY.get(key)
    if code is None:
        raise ValidationError(name, f"unsupported dtype {array.dtype}")
    return code


def write_records(path: str | Path, records: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named arrays in the given order.  Order defines the file bytes."""
    chunks = [MAGIC, b"", b""]  # version and count patched below
    count = 0
    seen: set[str] = set()
    for name, array in records:
        if not name:
            raise ValidationError("name", "record name must be non-empty")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValidationError(name, "record name longer than 65535 bytes")
        if name in seen:
            raise ValidationError(name, "duplicate record name")
        seen.add(name)
        array = np.asarray(array)
        if array.ndim > 0xFF:
            raise ValidationError(name, "rank exceeds 255")
        code = _dtype_code(name, array)
        array = array.astype(_DTYPE_BY_CODE[code], copy=False)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", code, array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(array.tobytes())
        count += 1
    chunks[1] = struct.pack("<H", VERSION)
    chunks[2] = struct.pack("<I", count)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValidationError(what, "truncated file")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_records(path: str | Path) -> dict[str, np.ndarray]:
    """Read all records, preserving file order.  Validates structure."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4, "magic") != MAGIC:
        raise ValidationError("magic", "not an APA2 container")
    (version,) = reader.unpack("<H", "version")
    if version != VERSION:
        raise ValidationError("version", f"unsupported version {version}")
    (count,) = reader.unpack("<I", "count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name")
        name = reader.take(name_len, "name").decode("utf-8")
        if name in out:
            raise ValidationError(name, "duplicate record name")
        code, rank = reader.unpack("<BB", name)
        if code not in _DTYPE_BY_CODE:
            raise ValidationError(name, f"unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I", name)
        dtype = _DTYPE_BY_CODE[code]
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.take(n_items * dtype.itemsize, name)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if reader.pos != len(reader.buf):
        raise ValidationError("trailing", "unexpected bytes after last record")
    return out


def _meta_bytes(meta: Mapping[str, str]) -> np.ndarray:
    text = json.dumps(dict(meta), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def _meta_parse(raw: np.ndarray, what: str) -> dict[str, str]:
    try:
        meta = json.loads(raw.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(what, f"malformed metadata: {exc}") from exc
    if not isinstance(meta, dict):
        raise ValidationError(what, "metadata must be a JSON object")
    return {str(k): str(v) for k, v in meta.items()}


@dataclass
class SceneBundle:
    """One fused scene plus its candidate actions, ready for scoring.

    ``labels`` is optional: one-hot for imitation samples, multi-hot for
    relation-feasibility samples.  ``meta`` holds free-form string pairs.
    """

    points: np.ndarray          # [n, 3] f32
    features: np.ndarray        # [n, D] f32
    similarities: np.ndarray    # [n] f32 in [-1, 1]
    candidates: np.ndarray      # [L, ACTION_DIM] f32
    candidate_kind: str         # "pick" | "place"
    instruction_text: str
    instruction_embedding: np.ndarray  # [D] f32
    labels: np.ndarray | None = None   # [L] u8 in {0, 1}
    meta: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValidationError("points", f"expected [n>=1, 3], got {pts.shape}")
        n = pts.shape[0]
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] != n or feats.shape[1] < 1:
            raise ValidationError("features", f"expected [{n}, D>=1], got {feats.shape}")
        sims = np.asarray(self.similarities)
        if sims.shape != (n,):
            raise ValidationError("similarities", f"expected [{n}], got {sims.shape}")
        if not np.isfinite(sims).all() or sims.min() < -1.0 - 1e-6 or sims.max() > 1.0 + 1e-6:
            raise ValidationError("similarities", "values outside [-1, 1]")
        if not np.isfinite(feats).all():
            raise ValidationError("features", "non-finite values")
        cands = np.asarray(self.candidates)
        if cands.ndim != 2 or cands.shape[1] != ACTION_DIM or cands.shape[0] < 1:
            raise ValidationError("candidates", f"expected [L>=1, {ACTION_DIM}], got {cands.shape}")
        if self.candidate_kind not in ("pick", "place"):
            raise ValidationError("candidate_kind", f"unknown kind {self.candidate_kind!r}")
        emb = np.asarray(self.instruction_embedding)
        if emb.ndim != 1 or emb.shape[0] != feats.shape[1]:
            raise ValidationError("instruction_embedding",
                                  f"expected [{feats.shape[1]}], got {emb.shape}")
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (cands.shape[0],):
                raise ValidationError("labels", f"expected [{cands.shape[0]}], got {labels.shape}")
            if not np.isin(labels, (0, 1)).all():
                raise ValidationError("labels", "entries must be 0 or 1")
            if int(labels.sum()) < 1:
                raise ValidationError("labels", "at least one positive label required")
        for key in self.meta:
            if key == "candidate_kind":
                raise ValidationError("meta", "'candidate_kind' is a reserved key")

    def save(self, path: str | Path) -> None:
        self.validate()
        records: list[tuple[str, np.ndarray]] = [
            ("points", np.asarray(self.points, dtype=np.float32)),
            ("features", np.asarray(self.features, dtype=np.float32)),
            ("similarities", np.asarray(self.similarities, dtype=np.float32)),
            ("candidates", np.asarray(self.candidates, dtype=np.float32)),
            ("instruction_embedding", np.asarray(self.instruction_embedding, dtype=np.float32)),
            ("instruction_text",
             np.frombuffer(self.instruction_text.encode("utf-8"), dtype=np.uint8).copy()),
        ]
        if self.labels is not None:
            records.append(("labels", np.asarray(self.labels, dtype=np.uint8)))
        records.append(("meta", _meta_bytes({**self.meta, "candidate_kind": self.candidate_kind})))
        write_records(path, records)

    @classmethod
    def load(cls, path: str | Path) -> "SceneBundle":
        rec = read_records(path)
        for required in ("points", "features", "similarities", "candidates",
                         "instruction_embedding", "instruction_text", "meta"):
            if required not in rec:
                raise ValidationError(required, "missing record")
        meta = _meta_parse(rec["meta"], "meta")
        kind = meta.pop("candidate_kind", None)
        if kind is None:
            raise ValidationError("candidate_kind", "missing from metadata")
        bundle = cls(
            points=rec["points"],
            features=rec["features"],
            similarities=rec["similarities"],
            candidates=rec["candidates"],
            candidate_kind=kind,
            instruction_text=rec["instruction_text"].tobytes().decode("utf-8"),
            instruction_embedding=rec["instruction_embedding"],
            labels=rec.get("labels"),
            meta=meta,
        )
        bundle.validate()
        return bundle


@dataclass
class PolicySnapshot:
    """Serialized policy: config mapping, named parameter tensors, run info.

    Structural checks happen here; the layout check against the config
    (every expected tensor present exactly once) lives in align.load_policy.
    """

    config: dict[str, object]
    params: dict[str, np.ndarray]
    training_meta: dict[str, str] = field(default_factory=dict)
    loss_curve: np.ndarray | None = None

    def save(self, path: str | Path) -> None:
        if not self.params:
            raise ValidationError("params", "snapshot has no parameter tensors")
        config_raw = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        records: list[tuple[str, np.ndarray]] = [
            ("config", np.frombuffer(config_raw.encode("utf-8"), dtype=np.uint8).copy()),
            ("training_meta", _meta_bytes(self.training_meta)),
        ]
        if self.loss_curve is not None:
            records.append(("loss_curve", np.asarray(self.loss_curve, dtype=np.float64)))
        for name in self.params:  # caller controls order; training uses sorted names
            records.append((f"param/{name}", np.asarray(self.params[name], dtype=np.float64)))
        write_records(path, records)

    @classmethod
    def load(cls, path: str | Path) -> "PolicySnapshot":
        rec = read_records(path)
        if "config" not in rec:
            raise ValidationError("config", "missing record")
        try:
            config = json.loads(rec["config"].tobytes().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError("config", f"malformed config: {exc}") from exc
        if not isinstance(config, dict):
            raise ValidationError("config", "config must be a JSON object")
        params = {name[len("param/"):]: arr for name, arr in rec.items()
                  if name.startswith("param/")}
        if not params:
            raise ValidationError("params", "snapshot has no parameter tensors")
        meta = _meta_parse(rec["training_meta"], "training_meta") if "training_meta" in rec else {}
        return cls(config=config, params=params, training_meta=meta,
                   loss_curve=rec.get("loss_curve"))
