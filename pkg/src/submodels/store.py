"""Little-endian binary formats for Submodels, bundles and Basemodels, plus the on-disk store.

Submodel file (``<speaker_id>.subm``)::

    magic "SUBM" | version u16 = 1 | flags u16 = 0 | speaker_id u64 |
    d_model u32 | d_b u32 | n_layers u32 | reserved u32          (32 bytes)
    per layer: ln_gamma[d] ln_beta[d] w_down[d*d_b] b_down[d_b]
               w_up[d_b*d] b_up[d] alpha[1]                    (float32 LE)

All writers go through a temp file and ``os.replace`` so readers never see a
partially written file.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
from pathlib import Path

import numpy as np

from .core import F32, Param
from .errors import DimensionMismatch, FormatError, StoreError, UnknownSpeaker
from .model import (
    FORMAT_VERSION,
    AdapterParams,
    Basemodel,
    BasemodelConfig,
    EmbeddingBundle,
    OneHotBundle,
    Submodel,
    SubmodelMeta,
    count_params,
)

log = logging.getLogger(__name__)

SUBM_MAGIC = b"SUBM"
BNDL_MAGIC = b"BNDL"
EMBM_MAGIC = b"EMBM"
BASE_MAGIC = b"BASE"

_SUBM = struct.Struct("<4sHHQIIII")
_BNDL = struct.Struct("<4sHHI")
_EMBM = struct.Struct("<4sHHIIIIIf")
_BASE = struct.Struct("<4sHHIIIIIQ4x")
assert _SUBM.size == 32 and _EMBM.size == 32 and _BASE.size == 40

SUBMODEL_SUFFIX = ".subm"
BUNDLE_SUFFIX = ".bndl"
EMBEDDING_SUFFIX = ".embm"
BASE_SUFFIX = ".base"


def _f32le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _check_header(magic: bytes, version: int, want: bytes, what: str) -> None:
    if magic != want:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {want!r}", "BAD_MAGIC")
    if version != FORMAT_VERSION:
        raise FormatError(f"{what}: unsupported format version {version}", "BAD_VERSION")


def _check_length(have: int, need: int, what: str) -> None:
    if have < need:
        raise FormatError(f"{what}: truncated, {have} of {need} bytes", "TRUNCATED")
    if have > need:
        raise FormatError(f"{what}: {have - need} trailing bytes after declared payload", "TRUNCATED")


class _Reader:
    def __init__(self, raw: bytes, offset: int = 0):
        self.raw = raw
        self.offset = offset

    def floats(self, n: int, shape=None) -> np.ndarray:
        a = np.frombuffer(self.raw, "<f4", n, self.offset).astype(F32)
        self.offset += 4 * n
        return a.reshape(shape) if shape is not None else a


# --------------------------------------------------------------------------
# Submodels
# --------------------------------------------------------------------------

def _adapter_bytes(a: AdapterParams, with_alpha: bool = True) -> bytes:
    ln, down, up, alpha = a.to_transport()
    parts = [_f32le(ln), _f32le(down), _f32le(up)]
    if with_alpha:
        parts.append(_f32le(alpha))
    return b"".join(parts)


def _read_adapter(r: _Reader, d: int, d_b: int, prefix: str, with_alpha: bool = True) -> AdapterParams:
    ln = r.floats(2 * d, (2, d))
    down = r.floats((d + 1) * d_b, (d + 1, d_b))
    up = r.floats((d_b + 1) * d, (d_b + 1, d))
    alpha = r.floats(1) if with_alpha else np.ones(1, dtype=F32)
    return AdapterParams.from_transport(ln, down, up, alpha, prefix)


def submodel_bytes(sub: Submodel) -> bytes:
    m = sub.meta
    head = _SUBM.pack(SUBM_MAGIC, FORMAT_VERSION, 0, m.speaker_id, m.d_model, m.d_b, m.n_layers, 0)
    return head + b"".join(_adapter_bytes(a) for a in sub.layers)


def parse_submodel(raw: bytes, offset: int = 0, expected: BasemodelConfig | None = None,
                   what: str = "submodel", exact: bool = True) -> tuple[Submodel, int]:
    """Decode one Submodel starting at ``offset``; returns it and the end offset."""
    if len(raw) - offset < _SUBM.size:
        raise FormatError(f"{what}: truncated header ({len(raw) - offset} bytes)", "TRUNCATED")
    magic, version, _flags, sid, d, d_b, L, _ = _SUBM.unpack_from(raw, offset)
    _check_header(magic, version, SUBM_MAGIC, what)
    if min(d, d_b, L) < 1:
        raise DimensionMismatch(f"{what}: zero dimension in header (d_model={d}, d_b={d_b}, L={L})")
    end = offset + _SUBM.size + 4 * count_params(d, d_b, L)
    if exact or len(raw) < end:
        _check_length(len(raw), end, what)
    if expected is not None and (d != expected.d_model or L != expected.n_layers):
        raise DimensionMismatch(
            f"{what}: file has d_model={d}, L={L}; base expects d_model={expected.d_model}, "
            f"L={expected.n_layers}")
    r = _Reader(raw, offset + _SUBM.size)
    layers = [_read_adapter(r, d, d_b, f"adapter{l}.") for l in range(L)]
    return Submodel(SubmodelMeta(sid, d, d_b, L, version), layers), end


def save_submodel(sub: Submodel, path: str | os.PathLike) -> None:
    atomic_write(path, submodel_bytes(sub))


def load_submodel(path: str | os.PathLike, expected: BasemodelConfig | None = None) -> Submodel:
    raw = Path(path).read_bytes()
    sub, _ = parse_submodel(raw, expected=expected, what=str(path))
    return sub


# --------------------------------------------------------------------------
# bundles
# --------------------------------------------------------------------------

def save_bundle(bundle: OneHotBundle, path: str | os.PathLike) -> None:
    parts = [_BNDL.pack(BNDL_MAGIC, FORMAT_VERSION, 0, len(bundle.submodels))]
    parts += [submodel_bytes(s) for s in bundle.submodels]
    atomic_write(path, b"".join(parts))


def load_bundle(path: str | os.PathLike, expected: BasemodelConfig | None = None) -> OneHotBundle:
    raw = Path(path).read_bytes()
    if len(raw) < _BNDL.size:
        raise FormatError(f"{path}: truncated bundle header", "TRUNCATED")
    magic, version, _flags, n = _BNDL.unpack_from(raw)
    _check_header(magic, version, BNDL_MAGIC, str(path))
    subs, off = [], _BNDL.size
    for i in range(n):
        sub, off = parse_submodel(raw, off, expected, f"{path}[{i}]", exact=False)
        subs.append(sub)
    _check_length(len(raw), off, str(path))
    return OneHotBundle([s.speaker_id for s in subs], subs)


def save_embedding_bundle(eb: EmbeddingBundle, path: str | os.PathLike) -> None:
    N, L, M = len(eb.speaker_ids), eb.n_layers, eb.n_banks
    parts = [_EMBM.pack(EMBM_MAGIC, FORMAT_VERSION, 0, N, eb.d_model, eb.d_b, L, M, eb.alpha),
             np.asarray(eb.speaker_ids, dtype="<u8").tobytes()]
    parts += [_adapter_bytes(a, with_alpha=False) for row in eb.banks for a in row]
    parts.append(_f32le(eb.embedding.value))
    atomic_write(path, b"".join(parts))


def load_embedding_bundle(path: str | os.PathLike, expected: BasemodelConfig | None = None) -> EmbeddingBundle:
    raw = Path(path).read_bytes()
    what = str(path)
    if len(raw) < _EMBM.size:
        raise FormatError(f"{what}: truncated header", "TRUNCATED")
    magic, version, _flags, N, d, d_b, L, M, alpha = _EMBM.unpack_from(raw)
    _check_header(magic, version, EMBM_MAGIC, what)
    body = count_params(d, d_b, 1) - 1
    _check_length(len(raw), _EMBM.size + 8 * N + 4 * (L * M * body + N * L * M), what)
    if expected is not None and (d != expected.d_model or L != expected.n_layers):
        raise DimensionMismatch(f"{what}: d_model={d}, L={L} vs base {expected.d_model}, {expected.n_layers}")
    ids = [int(v) for v in np.frombuffer(raw, "<u8", N, _EMBM.size)]
    r = _Reader(raw, _EMBM.size + 8 * N)
    banks = [[_read_adapter(r, d, d_b, f"bank{l}.{m}.", with_alpha=False) for m in range(M)]
             for l in range(L)]
    emb = r.floats(N * L * M, (N, L * M))
    return EmbeddingBundle(banks, Param("embedding", emb), ids, float(alpha))


# --------------------------------------------------------------------------
# Basemodel artifact
# --------------------------------------------------------------------------

def basemodel_bytes(base: Basemodel) -> bytes:
    c = base.config
    head = _BASE.pack(BASE_MAGIC, FORMAT_VERSION, 0, c.d_in, c.d_model, c.d_ff, c.n_layers, c.d_out, c.seed)
    return head + b"".join(_f32le(base.params[name].value) for name in Basemodel.param_shapes(c))


def save_basemodel(base: Basemodel, path: str | os.PathLike) -> None:
    atomic_write(path, basemodel_bytes(base))


def load_basemodel(path: str | os.PathLike) -> Basemodel:
    raw = Path(path).read_bytes()
    what = str(path)
    if len(raw) < _BASE.size:
        raise FormatError(f"{what}: truncated header", "TRUNCATED")
    magic, version, _flags, d_in, d, d_ff, L, d_out, seed = _BASE.unpack_from(raw)
    _check_header(magic, version, BASE_MAGIC, what)
    config = BasemodelConfig(d_in, d, d_ff, L, d_out, seed)
    shapes = Basemodel.param_shapes(config)
    _check_length(len(raw), _BASE.size + 4 * sum(int(np.prod(s)) for s in shapes.values()), what)
    r = _Reader(raw, _BASE.size)
    params = {name: Param(name, r.floats(int(np.prod(shape)), shape)) for name, shape in shapes.items()}
    return Basemodel(config, params)


# --------------------------------------------------------------------------
# store
# --------------------------------------------------------------------------

class SubmodelStore:
    """A directory of ``<speaker_id>.subm`` files."""

    def __init__(self, root: str | os.PathLike, create: bool = False):
        self.root = Path(root)
        if create:
            self.root.mkdir(parents=True, exist_ok=True)
        elif not self.root.is_dir():
            raise StoreError(f"store root {self.root} does not exist")

    def path_for(self, speaker_id: int) -> Path:
        return self.root / f"{int(speaker_id)}{SUBMODEL_SUFFIX}"

    def save(self, sub: Submodel) -> Path:
        path = self.path_for(sub.speaker_id)
        save_submodel(sub, path)
        return path

    def load(self, speaker_id: int, expected: BasemodelConfig | None = None) -> Submodel:
        path = self.path_for(speaker_id)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            raise UnknownSpeaker(f"no Submodel stored for speaker {speaker_id}") from None
        sub, _ = parse_submodel(raw, expected=expected, what=str(path))
        if sub.speaker_id != int(speaker_id):
            raise StoreError(f"{path} holds speaker {sub.speaker_id}")
        return sub

    def speaker_ids(self) -> list[int]:
        ids = []
        for p in self.root.glob(f"*{SUBMODEL_SUFFIX}"):
            if p.stem.isdigit():
                ids.append(int(p.stem))
        return sorted(ids)

    def __contains__(self, speaker_id: int) -> bool:
        return self.path_for(speaker_id).is_file()


def write_split(submodels, root: str | os.PathLike) -> list[Path]:
    """Write each Submodel of a split bundle as its own store file."""
    store = SubmodelStore(root, create=True)
    return [store.save(s) for s in submodels]
