"""Binary P5 PGM reader/writer (8-bit grayscale).

The writer emits the canonical header "P5\\n<w> <h>\\n255\\n" followed by raw
row-major bytes, so identical pixel data always yields identical files.  The
reader tolerates arbitrary whitespace and '#' comments in the header, as the
format allows.
"""

import numpy as np


def write_pgm(path, img):
    """Write a [H, W] uint8 array as binary P5 with maxval 255."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-d, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"PGM image must be uint8, got {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def _header_tokens(data, count):
    """Pull `count` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise ValueError("malformed P5 header: truncated")
        ch = data[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise ValueError("malformed P5 header: unterminated comment")
            pos = nl + 1
        else:
            end = pos
            while end < len(data) and data[end:end + 1] not in b" \t\r\n":
                end += 1
            tokens.append(data[pos:end])
            pos = end
    if pos >= len(data) or data[pos:pos + 1] not in b" \t\r\n":
        raise ValueError("malformed P5 header: missing separator before pixel data")
    return tokens, pos + 1


def read_pgm(path):
    """Read a binary P5 file with maxval 255 into a [H, W] uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"malformed P5 header: magic {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"malformed P5 header: non-numeric field ({exc})") from None
    if w < 1 or h < 1:
        raise ValueError(f"malformed P5 header: size {w}x{h}")
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}, expected 255")
    pixels = data[offset:]
    if len(pixels) < w * h:
        raise ValueError(f"truncated pixel data: expected {w * h} bytes, got {len(pixels)}")
    if len(pixels) > w * h:
        raise ValueError(f"trailing bytes after pixel data: {len(pixels) - w * h}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()
