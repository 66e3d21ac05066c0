"""Binary 8-bit P6 decoder.

Any defect (bad magic, malformed header, unsupported maxval, truncated
pixel payload) raises DecodeError so the exporter can skip the file and
record it instead of aborting the run.
"""

import numpy as np


class DecodeError(ValueError):
    """The file is not a decodable 8-bit P6 image."""


def _header_token(f):
    # whitespace separates tokens; "#" starts a comment running to newline
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise DecodeError("unexpected end of file in header")
        if ch in b" \t\r\n":
            if tok:
                return tok
            continue
        if ch == b"#":
            while ch and ch != b"\n":
                ch = f.read(1)
            if tok:
                return tok
            continue
        tok += ch


def read_ppm(path):
    """Decode a binary 8-bit P6 file to float32 [H, W, 3] in [0, 1]."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise DecodeError(f"{path}: {e}") from None
    with f:
        magic = _header_token(f)
        if magic != b"P6":
            raise DecodeError(f"{path}: not a P6 file (magic {magic!r})")
        try:
            w = int(_header_token(f))
            h = int(_header_token(f))
            maxval = int(_header_token(f))
        except ValueError as e:
            raise DecodeError(f"{path}: bad header: {e}") from None
        if w <= 0 or h <= 0:
            raise DecodeError(f"{path}: bad dimensions {w}x{h}")
        if maxval != 255:
            raise DecodeError(f"{path}: only maxval 255 supported, got {maxval}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise DecodeError(f"{path}: truncated pixel data "
                              f"({len(raw)} of {w * h * 3} bytes)")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0
