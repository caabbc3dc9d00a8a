"""Image files (PGM P5, raw float64) and binary model checkpoints.

Raw image layout: ``b"EMF8"``, u32 height, u32 width, then little-endian
float64 pixels in row-major order.

Checkpoint layout (all integers little-endian)::

    b"EMSR" | u32 version | u32 len | config text (key=value lines)
    u32 n_params | per param: u32 name_len, name, u32 ndim, u32 dims..., f64 data
    u32 has_adam | [u64 t, f64 beta1, f64 beta2, f64 eps, per param: f64 m, f64 v]
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .net import EmsrConfig, EmsrModel, param_shapes

RAW_MAGIC = b"EMF8"
CKPT_MAGIC = b"EMSR"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- images


def _read_token(buf: io.BytesIO) -> bytes:
    tok = b""
    while True:
        c = buf.read(1)
        if not c:
            raise FormatError("truncated PGM header")
        if c == b"#":
            buf.readline()
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_pgm(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    if _read_token(buf) != b"P5":
        raise FormatError("not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(_read_token(buf)) for _ in range(3))
    except ValueError as exc:
        raise FormatError(f"bad PGM header: {exc}") from None
    if not 0 < maxval < 65536:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    raw = buf.read(w * h * dtype.itemsize)
    if len(raw) != w * h * dtype.itemsize:
        raise FormatError(f"PGM pixel data truncated: expected {w * h} pixels")
    return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.float64) / maxval


def write_pgm(image: np.ndarray, bits: int = 8) -> bytes:
    if bits not in (8, 16):
        raise ValueError(f"PGM depth must be 8 or 16 bits, got {bits}")
    maxval = 255 if bits == 8 else 65535
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * maxval).astype(">u2" if bits == 16 else "u1")
    h, w = img.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode() + q.tobytes()


def read_raw(data: bytes) -> np.ndarray:
    if data[:4] != RAW_MAGIC or len(data) < 12:
        raise FormatError("not an EMF8 raw image")
    h, w = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 8 * h * w:
        raise FormatError(f"EMF8 body has {len(body)} bytes, expected {8 * h * w}")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


def write_raw(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype="<f8")
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    return RAW_MAGIC + struct.pack("<II", *img.shape) + img.tobytes()


def load_image(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] == RAW_MAGIC:
        return read_raw(data)
    if data[:2] == b"P5":
        return read_pgm(data)
    raise FormatError(f"{path}: unrecognized image format")


def save_image(path, image: np.ndarray, bits: int | None = None) -> None:
    """Write by extension: ``.pgm`` (8-bit unless ``bits=16``) or ``.emf`` raw float64."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        path.write_bytes(write_pgm(image, bits or 8))
    else:
        path.write_bytes(write_raw(image))


IMAGE_SUFFIXES = (".pgm", ".emf")


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------- checkpoints


def _config_text(cfg: EmsrConfig) -> bytes:
    return "".join(f"{k}={v!r}\n" for k, v in cfg.to_dict().items()).encode()


def _parse_config(text: bytes) -> EmsrConfig:
    pairs = {}
    for line in text.decode().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            pairs[k.strip()] = v.strip()
    return EmsrConfig.from_dict(pairs)


def _pack_array(out: io.BytesIO, a: np.ndarray) -> None:
    out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def checkpoint_bytes(model: EmsrModel, adam=None) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    cfg = _config_text(model.config)
    out.write(struct.pack("<I", len(cfg)) + cfg)
    out.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)) + nb)
        out.write(struct.pack("<I", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        _pack_array(out, t.data)
    out.write(struct.pack("<I", 0 if adam is None else 1))
    if adam is not None:
        out.write(struct.pack("<Qddd", adam.t, adam.beta1, adam.beta2, adam.eps))
        for name in model.params:
            _pack_array(out, adam.m[name])
            _pack_array(out, adam.v[name])
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: EmsrModel, path, adam=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, adam))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)


def parse_checkpoint(data: bytes):
    """Return ``(model, adam_state_or_None)`` from checkpoint bytes."""
    from .training import AdamState

    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise FormatError("not an EMSR checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint CRC mismatch; file is corrupted")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    (clen,) = r.unpack("<I")
    cfg = _parse_config(r.take(clen))
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        params[name] = Tensor(r.array(shape), requires_grad=True, name=name)
    if list(params) != list(param_shapes(cfg)):
        raise FormatError("checkpoint parameter table does not match its config")
    model = EmsrModel(cfg, params)
    (has_adam,) = r.unpack("<I")
    adam = None
    if has_adam:
        t, b1, b2, eps = r.unpack("<Qddd")
        m, v = {}, {}
        for name, p in params.items():
            m[name] = r.array(p.shape)
            v[name] = r.array(p.shape)
        adam = AdamState(m=m, v=v, t=t, beta1=b1, beta2=b2, eps=eps)
    if r.pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return model, adam


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
