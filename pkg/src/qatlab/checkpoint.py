"""Little-endian binary checkpoint format.

Layout::

    magic   4 bytes  b"QVGN"
    version u32
    count   u32      number of entries
    entries, each:
        kind     u8   0 tensor, 1 quant spec, 2 auxiliary branch, 3 packed weights
        name_len u16
        name     utf-8 bytes
        body     (per kind, below)

    tensor:  rank u32, extents u64 * rank, payload f64 * prod(extents)
    quant:   bits u8, granularity u8 (0 tensor, 1 channel, 2 token), learnable u8,
             groups u32, scales f64 * groups, zero-shifts i32 * groups
    aux:     present u8; when 0 nothing follows. Otherwise strategy u8
             (0 rank, 1 sparse, 2 residual-quant) and
               rank:  r0 u32, lam f64, u f64, phase u32, tensor L, tensor R
               sparse: ratio f64, phase u32, tensor W, tensor mask
               residual-quant: coeff f64, phase u32, count u32, then per term a tensor and a quant body
    packed:  bits u8, n u32, m u32, nbytes u32, codes u8 * nbytes,
             scales f64 * n, zero-shifts u8 * n

Files are written to a temporary sibling and renamed into place, so a crash
never leaves a torn checkpoint behind.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from pathlib import Path

import numpy as np

from .auxrank import AuxState, DecayBaselineState
from .intexec import PackedWeights
from .quantizer import GRANULARITIES, QuantSpec
from .tensor import Tensor

MAGIC = b"QVGN"
VERSION = 1
TENSOR, QUANT, AUX, PACKED = 0, 1, 2, 3
_STRATEGIES = ("rank", "sparse", "residual-quant")


class CheckpointError(ValueError):
    pass


def _w_tensor(buf: io.BytesIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")  # tobytes() is C order; ascontiguousarray would promote 0-d to 1-d
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _r_tensor(buf: io.BytesIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", buf.read(4))
    shape = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf.read(8 * count), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def _w_quant(buf: io.BytesIO, q: QuantSpec) -> None:
    buf.write(struct.pack("<BBBI", q.bits, GRANULARITIES.index(q.granularity), int(q.learnable), q.groups))
    buf.write(np.ascontiguousarray(q.scale.data, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(q.zero, dtype="<i4").tobytes())


def _r_quant(buf: io.BytesIO) -> QuantSpec:
    bits, gran, learnable, groups = struct.unpack("<BBBI", buf.read(7))
    scale = np.frombuffer(buf.read(8 * groups), dtype="<f8").astype(np.float64)
    zero = np.frombuffer(buf.read(4 * groups), dtype="<i4").astype(np.int64)
    return QuantSpec(bits, GRANULARITIES[gran], Tensor(scale, requires_grad=bool(learnable)), zero, bool(learnable))


def _w_aux(buf: io.BytesIO, aux) -> None:
    if aux is None or not aux.present:
        buf.write(struct.pack("<B", 0))
        return
    if isinstance(aux, AuxState):
        buf.write(struct.pack("<BB", 1, 0))
        buf.write(struct.pack("<IddI", aux.r0, aux.lam, aux.u, aux.phase))
        _w_tensor(buf, aux.L.data)
        _w_tensor(buf, aux.R.data)
    elif aux.strategy == "sparse":
        buf.write(struct.pack("<BB", 1, 1))
        buf.write(struct.pack("<dI", aux.ratio, aux.phase))
        _w_tensor(buf, aux.W.data)
        _w_tensor(buf, aux.mask)
    else:
        buf.write(struct.pack("<BB", 1, 2))
        buf.write(struct.pack("<dII", aux.coeff, aux.phase, len(aux.terms)))
        for t, q in zip(aux.terms, aux.specs):
            _w_tensor(buf, t.data)
            _w_quant(buf, q)


def _r_aux(buf: io.BytesIO):
    (present,) = struct.unpack("<B", buf.read(1))
    if not present:
        return None
    (strategy,) = struct.unpack("<B", buf.read(1))
    if _STRATEGIES[strategy] == "rank":
        r0, lam, u, phase = struct.unpack("<IddI", buf.read(24))
        L, R = _r_tensor(buf), _r_tensor(buf)
        return AuxState(Tensor(L, True), Tensor(R, True), r0, lam, u=u, phase=phase)
    if _STRATEGIES[strategy] == "sparse":
        ratio, phase = struct.unpack("<dI", buf.read(12))
        W, mask = _r_tensor(buf), _r_tensor(buf)
        return DecayBaselineState("sparse", W=Tensor(W, True), mask=mask, ratio=ratio, phase=phase)
    coeff, phase, count = struct.unpack("<dII", buf.read(16))
    terms, specs = [], []
    for _ in range(count):
        terms.append(Tensor(_r_tensor(buf), True))
        specs.append(_r_quant(buf))
    return DecayBaselineState("residual-quant", terms=terms, specs=specs, coeff=coeff, phase=phase)


def _w_packed(buf: io.BytesIO, p: PackedWeights) -> None:
    buf.write(struct.pack("<BIII", p.bits, p.n, p.m, p.codes.nbytes))
    buf.write(np.ascontiguousarray(p.codes, dtype=np.uint8).tobytes())
    buf.write(np.ascontiguousarray(p.scale, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(p.zero, dtype=np.uint8).tobytes())


def _r_packed(buf: io.BytesIO) -> PackedWeights:
    bits, n, m, nbytes = struct.unpack("<BIII", buf.read(13))
    codes = np.frombuffer(buf.read(nbytes), dtype=np.uint8).copy()
    scale = np.frombuffer(buf.read(8 * n), dtype="<f8").astype(np.float64)
    zero = np.frombuffer(buf.read(n), dtype=np.uint8).copy()
    return PackedWeights(codes, scale, zero, n, m, bits)


def encode(entries: dict) -> bytes:
    """Serialize ``name -> value``; values may be arrays/Tensors, QuantSpec, aux states
    (``None`` meaning an eliminated branch) or PackedWeights."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, value in entries.items():
        raw = name.encode("utf-8")
        if isinstance(value, QuantSpec):
            kind = QUANT
        elif value is None or isinstance(value, (AuxState, DecayBaselineState)):
            kind = AUX
        elif isinstance(value, PackedWeights):
            kind = PACKED
        else:
            kind = TENSOR
        buf.write(struct.pack("<BH", kind, len(raw)))
        buf.write(raw)
        if kind == TENSOR:
            _w_tensor(buf, value.data if isinstance(value, Tensor) else np.asarray(value))
        elif kind == QUANT:
            _w_quant(buf, value)
        elif kind == AUX:
            _w_aux(buf, value)
        else:
            _w_packed(buf, value)
    return buf.getvalue()


def decode(blob: bytes) -> dict:
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version, count = struct.unpack("<II", buf.read(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    readers = {TENSOR: _r_tensor, QUANT: _r_quant, AUX: _r_aux, PACKED: _r_packed}
    for _ in range(count):
        kind, name_len = struct.unpack("<BH", buf.read(3))
        name = buf.read(name_len).decode("utf-8")
        if kind not in readers:
            raise CheckpointError(f"unknown entry kind {kind} for {name!r}")
        out[name] = readers[kind](buf)
    return out


def save(path, entries: dict) -> str:
    """Atomically write ``entries``; returns the sha256 of the written bytes."""
    blob = encode(entries)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict:
    return decode(Path(path).read_bytes())


def aux_payload_bytes(blob: bytes) -> int:
    """Bytes spent on auxiliary-branch bodies beyond the one-byte presence flags."""
    buf = io.BytesIO(blob)
    buf.read(4)
    _, count = struct.unpack("<II", buf.read(8))
    total = 0
    for _ in range(count):
        kind, name_len = struct.unpack("<BH", buf.read(3))
        buf.read(name_len)
        start = buf.tell()
        {TENSOR: _r_tensor, QUANT: _r_quant, AUX: _r_aux, PACKED: _r_packed}[kind](buf)
        if kind == AUX:
            total += buf.tell() - start - 1
    return total


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
