"""Binary PPM (P6, maxval 255) image IO.

Images cross this boundary as [1, 3, H, W] tensors in [0, 1]. Writing
quantizes with round(clip(x, 0, 1) * 255); reading maps back by / 255.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def write_ppm(path, img: Tensor) -> None:
    if img.shape[0] != 1 or img.shape[1] != 3:
        raise ShapeError(f"ppm writer expects [1, 3, H, W], got {img.shape}")
    h, w = img.shape[2], img.shape[3]
    q = np.clip(np.rint(img.data[0] * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(q.transpose(1, 2, 0).tobytes())


def _read_token(f) -> bytes:
    # PPM headers allow whitespace and '#' comments between tokens.
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ValueError("truncated ppm header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def read_ppm(path) -> Tensor:
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic != b"P6":
            raise ValueError(f"not a P6 ppm: magic {magic!r}")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ValueError(f"only maxval 255 supported, got {maxval}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ValueError(f"truncated ppm payload: wanted {w * h * 3} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return Tensor((arr / 255.0)[None])


