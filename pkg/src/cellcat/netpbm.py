"""Binary netpbm I/O: 16-bit grayscale PGM (P5) and 8-bit color PPM (P6).

Grayscale planes are written with maxval 65535 and big-endian sample
order. Readers accept 8-bit files and widen them to uint16 without
rescaling.
"""

import numpy as np

_WHITESPACE = b" \t\n\r\x0b\x0c"


class NetpbmParseError(ValueError):
    pass


def _next_token(buf, pos):
    n = len(buf)
    while pos < n:
        c = buf[pos]
        if c in _WHITESPACE:
            pos += 1
        elif c == 0x23:  # '#' comment runs to end of line
            while pos < n and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise NetpbmParseError("truncated header")
    return buf[start:pos], pos


def _int_field(buf, pos, name):
    token, pos = _next_token(buf, pos)
    try:
        value = int(token)
    except ValueError:
        raise NetpbmParseError(f"invalid {name}: {token!r}") from None
    return value, pos


def read_plane(path):
    """Read a binary PGM into a uint16 array of shape (height, width)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _next_token(buf, 0)
    if magic != b"P5":
        raise NetpbmParseError(f"unexpected magic {magic!r}, expected P5")
    width, pos = _int_field(buf, pos, "width")
    height, pos = _int_field(buf, pos, "height")
    maxval, pos = _int_field(buf, pos, "maxval")
    if width < 1:
        raise NetpbmParseError(f"invalid width: {width}")
    if height < 1:
        raise NetpbmParseError(f"invalid height: {height}")
    if not 0 < maxval < 65536:
        raise NetpbmParseError(f"invalid maxval: {maxval} (must be in 1..65535)")
    if pos >= len(buf) or buf[pos] not in _WHITESPACE:
        raise NetpbmParseError("missing whitespace after maxval")
    pos += 1
    two_byte = maxval > 255
    need = width * height * (2 if two_byte else 1)
    payload = buf[pos : pos + need]
    if len(payload) < need:
        raise NetpbmParseError(
            f"truncated payload: expected {need} bytes, found {len(payload)}"
        )
    if two_byte:
        data = np.frombuffer(payload, dtype=">u2").astype(np.uint16)
    else:
        data = np.frombuffer(payload, dtype=np.uint8).astype(np.uint16)
    return data.reshape(height, width)


def write_plane(plane, path):
    """Write a uint16 array as binary PGM with maxval 65535."""
    arr = np.asarray(plane)
    if arr.ndim != 2:
        raise ValueError("plane must be 2-D")
    if arr.dtype != np.uint16:
        if arr.size and (arr.min() < 0 or arr.max() > 65535):
            raise ValueError("plane values must lie in [0, 65535]")
        arr = arr.astype(np.uint16)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(arr.astype(">u2").tobytes())


def write_rgb(rgb, path):
    """Write a uint8 array of shape (height, width, 3) as binary PPM."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("rgb image must have shape (height, width, 3)")
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("rgb values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())
