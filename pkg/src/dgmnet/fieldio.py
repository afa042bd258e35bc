"""Binary field files and PGM masks.

Field file layout (little-endian)::

    offset  size  content
    0       4     b"DGMF"
    4       1     version (1)
    5       1     dtype code: 1 float32, 2 float64, 3 uint16 labels
    6       2     channel count (u16)
    8       4     height (u32)
    12      4     width (u32)
    16      ...   channels x height x width values, row-major, channel-major
"""

import struct

import numpy as np

from .errors import FieldFileError

MAGIC = b"DGMF"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<u2")}
CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("uint16"): 3}


def encode_field(array, dtype=None):
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValueError(f"fields are 2-D or 3-D arrays, got shape {a.shape}")
    if dtype is not None:
        a = a.astype(dtype)
    code = CODES.get(a.dtype.newbyteorder("=") if a.dtype.byteorder == "<" else a.dtype)
    if code is None:
        raise ValueError(f"unsupported field dtype {a.dtype}")
    C, H, W = a.shape
    if C > 0xFFFF:
        raise ValueError("too many channels for a field file")
    payload = np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()
    return HEADER.pack(MAGIC, VERSION, code, C, H, W) + payload


def decode_field(data):
    """Parse field-file bytes into a ``(C, H, W)`` array."""
    if len(data) < HEADER.size:
        raise FieldFileError(f"truncated header: {len(data)} of {HEADER.size} bytes", len(data))
    magic, version, code, C, H, W = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FieldFileError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FieldFileError(f"unsupported version {version}", 4)
    if code not in DTYPES:
        raise FieldFileError(f"unknown dtype code {code}", 5)
    dt = DTYPES[code]
    expected = C * H * W * dt.itemsize
    got = len(data) - HEADER.size
    if got != expected:
        where = HEADER.size + min(got, expected)
        raise FieldFileError(f"payload is {got} bytes, header promises {expected}", where)
    arr = np.frombuffer(data, dtype=dt, offset=HEADER.size).reshape(C, H, W)
    return arr.astype(dt.newbyteorder("="))


def write_field(path, array, dtype=None):
    with open(path, "wb") as fh:
        fh.write(encode_field(array, dtype))


def read_field(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FieldFileError(f"cannot read {path}: {exc.strerror}") from exc
    return decode_field(data)


# ---------------------------------------------------------------------------
# PGM (P5)
# ---------------------------------------------------------------------------

def _pgm_token(data, pos):
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FieldFileError("unexpected end of PGM header", pos)
    return data[start:pos], pos


def decode_pgm(data):
    if data[:2] != b"P5":
        raise FieldFileError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    values = []
    for _ in range(3):
        start = pos
        tok, pos = _pgm_token(data, pos)
        if not tok.isdigit():
            raise FieldFileError(f"bad PGM header token {tok!r}", start)
        values.append(int(tok))
    W, H, maxval = values
    if not 0 < maxval <= 65535:
        raise FieldFileError(f"PGM maxval {maxval} outside 1..65535", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FieldFileError("missing whitespace after PGM header", pos)
    pos += 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = W * H * dt.itemsize
    if len(data) - pos < expected:
        raise FieldFileError(f"PGM raster truncated: {len(data) - pos} of {expected} bytes",
                             len(data))
    raster = np.frombuffer(data, dtype=dt, count=W * H, offset=pos).reshape(H, W)
    return raster.astype(np.int64)


def encode_pgm(mask):
    m = np.asarray(mask)
    H, W = m.shape
    maxval = max(int(m.max()) if m.size else 0, 1)
    if maxval > 65535:
        raise ValueError("PGM cannot hold labels above 65535")
    dt = ">u2" if maxval > 255 else "u1"
    return b"P5\n%d %d\n%d\n" % (W, H, maxval) + m.astype(dt).tobytes()


def read_mask(path):
    """Read a label mask from a P5 PGM or a single-channel label field file."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FieldFileError(f"cannot read {path}: {exc.strerror}") from exc
    if data[:4] == MAGIC:
        arr = decode_field(data)
        if arr.shape[0] != 1:
            raise FieldFileError(f"mask field must have one channel, got {arr.shape[0]}", 6)
        return arr[0].astype(np.int64)
    return decode_pgm(data)
