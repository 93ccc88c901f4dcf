"""Binary Netpbm images: P6 (RGB) and P5 (grey / label maps), 8- or 16-bit."""
from __future__ import annotations

import os

import numpy as np

from ..tensor import Tensor

_WHITESPACE = b" \t\n\r\v\f"


class NetpbmError(ValueError):
    def __init__(self, message, offset=None, path=None):
        where = f" at byte {offset}" if offset is not None else ""
        src = f"{path}: " if path else ""
        super().__init__(f"{src}{message}{where}")
        self.offset = offset
        self.path = path


def _token(buf, pos):
    """Next header token and the position just after it, skipping whitespace and comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise NetpbmError("comment runs to end of file", pos)
            pos = end + 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmError("header ended early", start)
    return buf[start:pos], pos


def _int_token(buf, pos, what):
    tok, end = _token(buf, pos)
    if not tok.isdigit():
        raise NetpbmError(f"{what} is not a decimal integer: {tok[:16]!r}", end - len(tok))
    return int(tok), end


def parse(buf, path=None):
    """Decode a complete P5/P6 file.

    Returns (array, maxval): (H, W) for P5 and (H, W, 3) for P6, dtype uint8
    or uint16 by maxval.
    """
    try:
        if len(buf) < 2:
            raise NetpbmError("file too short for a magic number", 0)
        magic = bytes(buf[:2])
        if magic not in (b"P5", b"P6"):
            raise NetpbmError(f"unsupported magic number {magic!r}", 0)
        if len(buf) < 3 or buf[2:3] not in _WHITESPACE:
            raise NetpbmError("magic number must be followed by whitespace", 2)
        width, pos = _int_token(buf, 2, "width")
        height, pos = _int_token(buf, pos, "height")
        maxval, pos = _int_token(buf, pos, "maxval")
        if width == 0 or height == 0:
            raise NetpbmError(f"zero image dimension {width}x{height}", pos)
        if not 0 < maxval < 65536:
            raise NetpbmError(f"unsupported maxval {maxval}", pos)
        if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
            raise NetpbmError("maxval must be followed by a single whitespace byte", pos)
        pos += 1
        channels = 3 if magic == b"P6" else 1
        depth = 1 if maxval < 256 else 2
        need = width * height * channels * depth
        have = len(buf) - pos
        if have < need:
            raise NetpbmError(f"truncated payload: need {need} bytes, found {have}", len(buf))
        if have > need:
            raise NetpbmError(f"{have - need} unexpected bytes after payload", pos + need)
        dtype = np.uint8 if depth == 1 else np.dtype(">u2")
        arr = np.frombuffer(bytes(buf[pos:pos + need]), dtype=dtype)
        if arr.size and int(arr.max()) > maxval:
            bad = int(np.argmax(arr > maxval))
            raise NetpbmError(f"sample {int(arr[bad])} exceeds maxval {maxval}", pos + bad * depth)
        shape = (height, width, 3) if channels == 3 else (height, width)
        arr = arr.reshape(shape).astype(np.uint8 if depth == 1 else np.uint16)
        return arr, maxval
    except NetpbmError as e:
        if path is not None and e.path is None:
            raise NetpbmError(str(e), None, path) from None
        raise


def read_header(path):
    """(magic, width, height, maxval) without reading the payload."""
    with open(path, "rb") as f:
        head = f.read(512)
    if head[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic number {head[:2]!r}", 0, path)
    w, pos = _int_token(head, 2, "width")
    h, pos = _int_token(head, pos, "height")
    m, pos = _int_token(head, pos, "maxval")
    return head[:2].decode(), w, h, m


def _read(path):
    with open(path, "rb") as f:
        return parse(f.read(), path=os.fspath(path))


def load_image(path):
    """P6 file -> Tensor (3, H, W) with values in [0, 1]."""
    arr, maxval = _read(path)
    if arr.ndim != 3:
        raise NetpbmError("expected a P6 colour image", 0, os.fspath(path))
    return Tensor(arr.transpose(2, 0, 1).astype(np.float64) / maxval)


def load_labels(path):
    """P5 file -> (H, W) int64 label map."""
    arr, _ = _read(path)
    if arr.ndim != 2:
        raise NetpbmError("expected a P5 grey image", 0, os.fspath(path))
    return arr.astype(np.int64)


def encode_pgm(labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 65535):
        raise ValueError("label values must lie in [0, 65535]")
    maxval = 255 if not labels.size or labels.max() <= 255 else 65535
    dtype = np.uint8 if maxval == 255 else np.dtype(">u2")
    h, w = labels.shape
    return b"P5\n%d %d\n%d\n" % (w, h, maxval) + labels.astype(dtype).tobytes()


def encode_ppm(rgb):
    """(H, W, 3) uint8, or float in [0, 1], -> P6 bytes."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"RGB image must be (H, W, 3), got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def _write(path, payload):
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def save_labels(path, labels):
    _write(path, encode_pgm(labels))


def save_rgb(path, rgb):
    _write(path, encode_ppm(rgb))


def save_image(path, image):
    """Tensor or array (3, H, W) in [0, 1] -> P6."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    save_rgb(path, arr.transpose(1, 2, 0))
