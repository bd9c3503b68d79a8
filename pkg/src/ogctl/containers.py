"""Bit-exact binary containers for embeddings, templates and checkpoints.

All integers are little-endian; floats are IEEE-754 binary32 (checkpoint arrays
keep their native dtype). Readers validate magic, version and exact byte
length before exposing any data, and reject non-finite payloads. Writers are
atomic: temp file in the destination directory, then rename.

Embedding container ("OGEB", version 1)
    header : magic, u32 version, u32 n_patches, u32 dims[n], u32 aux_dim, u64 count
    record : u32 subject, u32 media, u8 occlusion[n], f32 aux[aux_dim], f32 patches[sum(dims)]

Template container ("OGTP", version 1)
    header : magic, u32 version, u32 dim, u32 count      (16 bytes total)
    record : u32 subject, u32 media, f32 values[dim]     (8 + 4*dim bytes)

Checkpoint ("OGCK", version 1)
    magic, u32 version, u64 json_len, json meta (utf-8), u32 n_arrays, then per
    array: u16 name_len, name, u8 dtype code, u8 ndim, u32 shape[ndim], u64
    nbytes, raw bytes.
"""
from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContainerError, NotFiniteError
from .records import EmbeddingSet, TemplateSet, summarize_occlusion

EMBEDDING_MAGIC = b"OGEB"
TEMPLATE_MAGIC = b"OGTP"
CHECKPOINT_MAGIC = b"OGCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: "<f4", 1: "<f8", 2: "u1", 3: "<i8", 4: "<u4"}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via temp-file-then-rename; a failed run never leaves partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Cursor:
    """Sequential reader over an in-memory buffer with offset-aware errors."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.offset = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise ContainerError(
                f"{self.what}: truncated at byte {len(self.data)} "
                f"(needed {self.offset + n})"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "little")

    def expect_magic(self, magic: bytes) -> None:
        got = self.take(len(magic))
        if got != magic:
            raise ContainerError(f"{self.what}: bad magic {got!r}, expected {magic!r}")

    def expect_version(self, version: int) -> None:
        got = self.u32()
        if got != version:
            raise ContainerError(f"{self.what}: unsupported version {got}")

    def done(self) -> None:
        if self.offset != len(self.data):
            raise ContainerError(
                f"{self.what}: {len(self.data) - self.offset} trailing bytes after record payload"
            )


def _u32(value: int) -> bytes:
    return int(value).to_bytes(4, "little")


def _u64(value: int) -> bytes:
    return int(value).to_bytes(8, "little")


def _check_label_range(name: str, arr: np.ndarray) -> None:
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise ConfigError(f"{name} labels must fit in u32")


def _embedding_record_dtype(n: int, dims: tuple[int, ...], aux_dim: int) -> np.dtype:
    fields = [("subject", "<u4"), ("media", "<u4"), ("occlusion", "u1", (n,))]
    if aux_dim:
        fields.append(("aux", "<f4", (aux_dim,)))
    fields.append(("patches", "<f4", (int(sum(dims)),)))
    return np.dtype(fields)


def write_embeddings(path: str, dataset: EmbeddingSet) -> None:
    dataset.validate()
    _check_label_range("subject", dataset.subjects)
    _check_label_range("media", dataset.medias)
    n = dataset.n_patches
    dims = dataset.patch_dims
    aux_dim = dataset.aux_dim
    header = (
        EMBEDDING_MAGIC
        + _u32(FORMAT_VERSION)
        + _u32(n)
        + b"".join(_u32(d) for d in dims)
        + _u32(aux_dim)
        + _u64(len(dataset))
    )
    rec = np.zeros(len(dataset), dtype=_embedding_record_dtype(n, dims, aux_dim))
    rec["subject"] = dataset.subjects
    rec["media"] = dataset.medias
    rec["occlusion"] = dataset.occlusion
    if aux_dim:
        rec["aux"] = dataset.aux
    rec["patches"] = np.concatenate([p.astype("<f4") for p in dataset.patches], axis=1)
    atomic_write_bytes(path, header + rec.tobytes())


def read_embeddings(path: str) -> EmbeddingSet:
    with open(path, "rb") as f:
        data = f.read()
    cur = _Cursor(data, f"embedding container '{path}'")
    cur.expect_magic(EMBEDDING_MAGIC)
    cur.expect_version(FORMAT_VERSION)
    n = cur.u32()
    if n < 1 or n > 4096:
        raise ContainerError(f"{cur.what}: implausible patch count {n}")
    dims = tuple(cur.u32() for _ in range(n))
    aux_dim = cur.u32()
    count = cur.u64()
    dtype = _embedding_record_dtype(n, dims, aux_dim)
    payload = cur.take(count * dtype.itemsize)
    cur.done()
    rec = np.frombuffer(payload, dtype=dtype)
    occ = rec["occlusion"].reshape(count, n)
    if occ.size and not np.isin(occ, (0, 1)).all():
        raise ContainerError(f"{cur.what}: occlusion bytes outside {{0,1}}")
    flat = rec["patches"].reshape(count, int(sum(dims)))
    if not np.all(np.isfinite(flat)):
        raise ContainerError(f"{cur.what}: non-finite patch payload")
    aux = None
    if aux_dim:
        aux = np.array(rec["aux"].reshape(count, aux_dim), dtype=np.float32)
        if not np.all(np.isfinite(aux)):
            raise ContainerError(f"{cur.what}: non-finite aux payload")
    offsets = np.cumsum((0,) + dims)
    patches = [
        np.array(flat[:, offsets[i] : offsets[i + 1]], dtype=np.float32) for i in range(n)
    ]
    out = EmbeddingSet(
        patch_dims=dims,
        subjects=rec["subject"].astype(np.int64),
        medias=rec["media"].astype(np.int64),
        occlusion=np.array(occ, dtype=np.uint8),
        patches=patches,
        aux=aux,
    )
    out.validate()
    return out


def _template_record_dtype(dim: int) -> np.dtype:
    return np.dtype([("subject", "<u4"), ("media", "<u4"), ("values", "<f4", (dim,))])


def write_templates(path: str, templates: TemplateSet) -> None:
    templates.validate()
    _check_label_range("subject", templates.subjects)
    _check_label_range("media", templates.medias)
    if len(templates) > 0xFFFFFFFF:
        raise ConfigError("template container holds at most 2^32-1 records")
    header = (
        TEMPLATE_MAGIC + _u32(FORMAT_VERSION) + _u32(templates.dim) + _u32(len(templates))
    )
    rec = np.zeros(len(templates), dtype=_template_record_dtype(templates.dim))
    rec["subject"] = templates.subjects
    rec["media"] = templates.medias
    rec["values"] = templates.values.astype("<f4")
    atomic_write_bytes(path, header + rec.tobytes())


def read_templates(path: str) -> TemplateSet:
    with open(path, "rb") as f:
        data = f.read()
    cur = _Cursor(data, f"template container '{path}'")
    cur.expect_magic(TEMPLATE_MAGIC)
    cur.expect_version(FORMAT_VERSION)
    dim = cur.u32()
    if dim < 1:
        raise ContainerError(f"{cur.what}: template dim must be >= 1")
    count = cur.u32()
    dtype = _template_record_dtype(dim)
    payload = cur.take(count * dtype.itemsize)
    cur.done()
    rec = np.frombuffer(payload, dtype=dtype)
    values = np.array(rec["values"].reshape(count, dim), dtype=np.float32)
    if not np.all(np.isfinite(values)):
        raise ContainerError(f"{cur.what}: non-finite template payload")
    out = TemplateSet(
        subjects=rec["subject"].astype(np.int64),
        medias=rec["media"].astype(np.int64),
        values=values,
    )
    out.validate()
    return out


@dataclass
class CheckpointPayload:
    """JSON-able metadata plus named arrays; round-trips bit-identically."""

    meta: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def write_checkpoint(path: str, payload: CheckpointPayload) -> None:
    meta_bytes = json.dumps(payload.meta, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, _u32(FORMAT_VERSION), _u64(len(meta_bytes)), meta_bytes]
    parts.append(_u32(len(payload.arrays)))
    for name, arr in payload.arrays.items():
        arr = np.asarray(arr)                 # tobytes() always emits C order
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _CODE_FOR_DTYPE:
            raise ConfigError(f"checkpoint array '{name}' has unsupported dtype {arr.dtype}")
        name_bytes = name.encode("utf-8")
        parts.append(len(name_bytes).to_bytes(2, "little"))
        parts.append(name_bytes)
        parts.append(bytes([_CODE_FOR_DTYPE[np.dtype(dt)], arr.ndim]))
        for s in arr.shape:
            parts.append(_u32(s))
        raw = arr.astype(dt, copy=False).tobytes()
        parts.append(_u64(len(raw)))
        parts.append(raw)
    atomic_write_bytes(path, b"".join(parts))


def read_checkpoint(path: str) -> CheckpointPayload:
    with open(path, "rb") as f:
        data = f.read()
    cur = _Cursor(data, f"checkpoint '{path}'")
    cur.expect_magic(CHECKPOINT_MAGIC)
    cur.expect_version(FORMAT_VERSION)
    meta_len = cur.u64()
    try:
        meta = json.loads(cur.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{cur.what}: corrupt metadata block ({exc})") from exc
    arrays: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u16()).decode("utf-8")
        code = cur.u8()
        if code not in _DTYPE_CODES:
            raise ContainerError(f"{cur.what}: unknown dtype code {code} for '{name}'")
        ndim = cur.u8()
        shape = tuple(cur.u32() for _ in range(ndim))
        nbytes = cur.u64()
        dtype = np.dtype(_DTYPE_CODES[code])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise ContainerError(
                f"{cur.what}: array '{name}' length {nbytes} != shape {shape} ({expected})"
            )
        arrays[name] = np.frombuffer(cur.take(nbytes), dtype=dtype).reshape(shape).copy()
    cur.done()
    return CheckpointPayload(meta=meta, arrays=arrays)


def read_embeddings_csv(
    path: str,
    eps: float = 0.7,
    patch_dims: tuple[int, ...] | None = None,
) -> EmbeddingSet:
    """Import embeddings from CSV: header `subject,media,m_1..m_n,<flat floats>`.

    Occlusion columns accept binary flags or visible fractions in [0, 1];
    fractions are binarized at threshold eps. Without explicit patch_dims the
    float columns are split evenly over the n patches.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ContainerError(f"csv '{path}': empty file") from None
        header = [h.strip() for h in header]
        if header[:2] != ["subject", "media"]:
            raise ContainerError(f"csv '{path}': header must start with subject,media")
        n = 0
        while 2 + n < len(header) and header[2 + n].startswith("m_"):
            n += 1
        if n == 0:
            raise ContainerError(f"csv '{path}': no m_i occlusion columns found")
        n_floats = len(header) - 2 - n
        if patch_dims is None:
            if n_floats % n != 0:
                raise ContainerError(
                    f"csv '{path}': {n_floats} feature columns not divisible by {n} patches"
                )
            patch_dims = (n_floats // n,) * n
        if sum(patch_dims) != n_floats:
            raise ContainerError(
                f"csv '{path}': patch dims {patch_dims} do not sum to {n_floats} columns"
            )
        subjects, medias, fractions, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ContainerError(
                    f"csv '{path}': line {lineno} has {len(row)} fields, expected {len(header)}"
                )
            subjects.append(int(row[0]))
            medias.append(int(row[1]))
            fractions.append([float(v) for v in row[2 : 2 + n]])
            feats.append([float(v) for v in row[2 + n :]])
    if not subjects:
        raise ContainerError(f"csv '{path}': no records")
    fractions = np.asarray(fractions, dtype=np.float64)
    occlusion = np.vstack([summarize_occlusion(fr, eps) for fr in fractions])
    flat = np.asarray(feats, dtype=np.float32)
    if not np.all(np.isfinite(flat)):
        raise ContainerError(f"csv '{path}': non-finite feature values")
    offsets = np.cumsum((0,) + tuple(patch_dims))
    out = EmbeddingSet(
        patch_dims=tuple(patch_dims),
        subjects=np.asarray(subjects, dtype=np.int64),
        medias=np.asarray(medias, dtype=np.int64),
        occlusion=occlusion,
        patches=[flat[:, offsets[i] : offsets[i + 1]].copy() for i in range(n)],
        aux=None,
    )
    out.validate()
    return out
