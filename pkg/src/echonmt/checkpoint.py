"""Binary model serialization in two interchangeable forms.

full mode stores every tensor; compressed mode stores only the trainable
tensors plus the generation seed, and regenerates all frozen tensors at load
time. The layout is fully pinned (little-endian, length-prefixed records,
trailing sha256) so a checkpoint round-trips bit-exactly across platforms.

Layout: magic, u32 version, u8 mode, packed generation spec, u64 optimizer
step, length-prefixed JSON header (model config, trainability mask, optional
vocab tokens), tensor records (u16 name length + name, u8 ndim, u32 dims,
float64 data), sha256 of everything preceding.
"""

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from .model import EsnmtModel, ModelConfig, TrainabilityMask, build_model, parameter_shapes

MAGIC = b"ECHONMT\x01"
VERSION = 1
_SPEC_FMT = "<QBIIIIdd"
FULL, COMPRESSED = "full", "compressed"


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


def save(model: EsnmtModel, mode: str, step: int = 0,
         vocab_tokens: Optional[List[str]] = None) -> bytes:
    """Serialize a model; compressed mode contains no frozen tensors."""
    if mode not in (FULL, COMPRESSED):
        raise ValueError(f"mode must be 'full' or 'compressed', got {mode!r}")
    cfg = model.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<B", 1 if mode == COMPRESSED else 0))
    buf.write(
        struct.pack(
            _SPEC_FMT,
            cfg.seed,
            1 if cfg.cell_type == "lstm" else 0,
            cfg.num_encoder_layers,
            cfg.num_decoder_layers,
            cfg.hidden_dim,
            cfg.input_dim,
            cfg.density,
            cfg.radius_norm_target,
        )
    )
    buf.write(struct.pack("<Q", step))
    header = {"config": asdict(cfg), "mask": asdict(model.mask)}
    if vocab_tokens is not None:
        header["vocab"] = list(vocab_tokens)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)

    if mode == FULL:
        tensors = {**model.params, **model.frozen}
    else:
        tensors = model.params
    names = sorted(tensors)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        # note: asarray, not ascontiguousarray -- the latter promotes 0-d
        # scale factors to shape (1,)
        t = np.asarray(tensors[name], dtype=np.float64)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        for dim in t.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(t.astype("<f8").tobytes())
    payload = buf.getvalue()
    return payload + hashlib.sha256(payload).digest()


@dataclass
class LoadedCheckpoint:
    model: EsnmtModel
    mode: str
    step: int
    vocab_tokens: Optional[List[str]]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated at byte {self.pos} (wanted {n} more)"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load(data: bytes) -> LoadedCheckpoint:
    """Reconstruct a model; compressed checkpoints regenerate every frozen
    tensor from the stored seed, bit-identically to the saved model."""
    if len(data) < len(MAGIC) + 32:
        raise TruncatedCheckpointError("checkpoint shorter than header + checksum")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatchError("checkpoint checksum mismatch")
    r = _Reader(payload)
    if r.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic bytes")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    (mode_flag,) = r.unpack("<B")
    mode = COMPRESSED if mode_flag else FULL
    r.unpack(_SPEC_FMT)  # spec is duplicated in the JSON header; packed copy is for tooling
    (step,) = r.unpack("<Q")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.read(hlen).decode("utf-8"))
    cfg = ModelConfig(**header["config"])
    mask = TrainabilityMask(**header["mask"])

    model = build_model(cfg, mask, generate_frozen=(mode == COMPRESSED))
    expected = parameter_shapes(cfg)
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.read(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack("<" + "I" * ndim)) if ndim else ()
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r}")
        if shape != expected[name][0]:
            raise CheckpointError(
                f"tensor {name!r} shape {shape} != expected {expected[name][0]}"
            )
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.read(n * 8), dtype="<f8").reshape(shape).copy()
        if name in model.params:
            model.params[name] = arr
        else:
            model.frozen[name] = arr
    if r.pos != len(payload):
        raise CheckpointError(f"{len(payload) - r.pos} trailing bytes in checkpoint")
    return LoadedCheckpoint(model, mode, step, header.get("vocab"))


def save_file(path, model, mode, step=0, vocab_tokens=None):
    data = save(model, mode, step, vocab_tokens)
    with open(path, "wb") as f:
        f.write(data)


def load_file(path) -> LoadedCheckpoint:
    with open(path, "rb") as f:
        return load(f.read())


@dataclass
class VerifyReport:
    rows: List[Tuple[str, float]]  # (tensor name, max abs difference)

    @property
    def ok(self) -> bool:
        return all(diff == 0.0 for _, diff in self.rows)

    def __str__(self):
        lines = [f"{name}: max|diff| = {diff:.3e}" for name, diff in self.rows]
        lines.append("OK" if self.ok else "MISMATCH")
        return "\n".join(lines)


def verify(a: bytes, b: bytes) -> VerifyReport:
    """Per-tensor comparison of two checkpoints of the same architecture."""
    ma, mb = load(a).model, load(b).model
    if asdict(ma.config) != asdict(mb.config):
        raise CheckpointError("checkpoints have different architecture headers")
    rows = []
    for name in sorted(set(ma.params) | set(ma.frozen)):
        ta, tb = ma.tensor(name), mb.tensor(name)
        if ta.shape != tb.shape:
            raise CheckpointError(f"tensor {name!r} shape mismatch: {ta.shape} vs {tb.shape}")
        rows.append((name, float(np.max(np.abs(ta - tb))) if ta.size else 0.0))
    return VerifyReport(rows)
