"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DEIT" | u32 version | u32 config_len | config JSON (UTF-8)
    u32 section_count
    per section: u8 section_id | u32 tensor_count | tensors
    per tensor:  u32 name_len | name | u32 ndim | u64 dims[ndim] | u8 dtype | payload
    u32 CRC32 of every preceding byte

Sections: 0 = parameters, 1 = optimizer state, 2 = EMA parameters.
"""
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, ShapeError, VersionError

MAGIC = b"DEIT"
VERSION = 1
SECTION_PARAMS, SECTION_OPTIM, SECTION_EMA = 0, 1, 2
_SECTION_NAMES = {SECTION_PARAMS: "params", SECTION_OPTIM: "optimizer", SECTION_EMA: "ema"}
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"),
          4: np.dtype("<i4")}
_DTYPE_TAGS = {v: k for k, v in DTYPES.items()}


@dataclass
class Checkpoint:
    config: dict
    params: dict
    optimizer: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)


def _encode_tensor(name, arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    key = np.dtype(dt.str if dt.kind != "u" else "u1")
    if key not in _DTYPE_TAGS:
        raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    head += struct.pack("<B", _DTYPE_TAGS[key])
    return head + np.ascontiguousarray(arr, dtype=key).tobytes()


def encode(ckpt):
    cfg = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg]
    sections = [(SECTION_PARAMS, ckpt.params)]
    if ckpt.optimizer:
        sections.append((SECTION_OPTIM, ckpt.optimizer))
    if ckpt.ema:
        sections.append((SECTION_EMA, ckpt.ema))
    parts.append(struct.pack("<I", len(sections)))
    for sid, tensors in sections:
        parts.append(struct.pack("<BI", sid, len(tensors)))
        parts.extend(_encode_tensor(n, a) for n, a in tensors.items())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"unexpected end of checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf):
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("not a DEIT checkpoint (bad magic)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("checkpoint CRC mismatch; file is corrupted or truncated")
    r = _Reader(body)
    r.take(4)
    version, cfg_len = r.unpack("<II")
    if version > VERSION:
        raise VersionError(f"checkpoint version {version} is newer than supported {VERSION}")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (n_sections,) = r.unpack("<I")
    sections = {}
    for _ in range(n_sections):
        sid, count = r.unpack("<BI")
        tensors = {}
        for _ in range(count):
            (nlen,) = r.unpack("<I")
            name = r.take(nlen).decode("utf-8")
            (ndim,) = r.unpack("<I")
            dims = r.unpack(f"<{ndim}Q") if ndim else ()
            (tag,) = r.unpack("<B")
            if tag not in DTYPES:
                raise FormatError(f"tensor {name!r}: unknown dtype tag {tag}")
            dt = DTYPES[tag]
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
            tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
        sections[_SECTION_NAMES.get(sid, str(sid))] = tensors
    if r.pos != len(body):
        raise FormatError("trailing bytes after last section")
    return Checkpoint(config, sections.get("params", {}), sections.get("optimizer", {}),
                      sections.get("ema", {}))


def save_checkpoint(path, ckpt):
    """Atomic write (temporary file in the same directory, then rename)."""
    data = encode(ckpt)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=d)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode(f.read())


def check_compatible(model, params):
    """Raise ShapeError naming the first tensor whose name or shape differs."""
    expected = model.named_parameters()
    for name, p in expected.items():
        if name not in params:
            raise ShapeError(f"checkpoint lacks tensor {name!r}")
        if tuple(params[name].shape) != tuple(p.shape):
            raise ShapeError(f"tensor {name!r}: model expects {tuple(p.shape)}, "
                             f"checkpoint has {tuple(params[name].shape)}")
    extra = [n for n in params if n not in expected]
    if extra:
        raise ShapeError(f"checkpoint has unexpected tensor {extra[0]!r}")


def load_into(model, ckpt):
    check_compatible(model, ckpt.params)
    model.load_state_dict(ckpt.params)
    return model


def model_checkpoint(model, meta, optimizer=None, ema=None):
    """Bundle a model (and optional optimizer / EMA state) with its metadata."""
    from .teacher_zoo import TinyConvNet
    arch = "convnet" if isinstance(model, TinyConvNet) else "deit"
    config = {"arch": arch, "model": model.config.to_dict(), "resolution": model.resolution,
              **meta}
    return Checkpoint(config, model.state_dict(), optimizer.state() if optimizer else {},
                      ema.state() if ema else {})


def build_model(ckpt):
    """Instantiate the architecture recorded in ``ckpt`` and load its parameters."""
    from .model import DeiTConfig, DeiTModel
    from .teacher_zoo import ConvNetConfig, TinyConvNet
    cfg = ckpt.config
    if cfg.get("arch") == "convnet":
        model = TinyConvNet(ConvNetConfig.from_dict(cfg["model"]))
    else:
        model = DeiTModel(DeiTConfig.from_dict(cfg["model"]))
    if "resolution" in cfg and model.resolution != cfg["resolution"]:
        raise ShapeError(f"checkpoint resolution {cfg['resolution']} does not match its model "
                         f"config ({model.resolution})")
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else None
    if dtype is not None:
        for p in model.parameters():
            p.data = p.data.astype(dtype)
    return load_into(model, ckpt)
