"""Flat binary container for named float64 matrices.

Layout: an ASCII text header followed by raw little-endian float64 blobs.

    tensorfile 1
    meta <key> <value...>
    tensor <name> <rows> <cols>
    end
    <row-major float64 data, one blob per tensor line, in header order>

Keys and tensor names are sorted, so writing the same content twice produces
byte-identical files.
"""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError

MAGIC = "tensorfile 1"


def _clean_token(token: str, what: str) -> str:
    token = str(token)
    if not token or any(c.isspace() for c in token):
        raise DataFormatError(f"{what} must be a non-empty token: {token!r}")
    return token


def save_tensors(path, tensors: dict[str, np.ndarray],
                 meta: dict[str, object] | None = None) -> None:
    lines = [MAGIC]
    for key in sorted(meta or {}):
        value = str((meta or {})[key])
        if "\n" in value:
            raise DataFormatError("meta values must be single-line")
        lines.append(f"meta {_clean_token(key, 'meta key')} {value}")
    names = sorted(tensors)
    blobs = []
    for name in names:
        a = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise DataFormatError(f"tensor {name!r} must be 2-D")
        lines.append(f"tensor {_clean_token(name, 'tensor name')} "
                     f"{a.shape[0]} {a.shape[1]}")
        blobs.append(a.astype("<f8").tobytes())
    lines.append("end\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii"))
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise DataFormatError(f"{path}: missing header terminator")
    try:
        header = raw[:cut].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: non-ASCII header") from exc
    if not header or header[0] != MAGIC:
        raise DataFormatError(f"{path}: bad magic, expected {MAGIC!r}")
    meta: dict[str, str] = {}
    shapes: list[tuple[str, int, int]] = []
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            try:
                name, rows, cols = rest.split(" ")
                shapes.append((name, int(rows), int(cols)))
            except ValueError as exc:
                raise DataFormatError(f"{path}: bad tensor line {line!r}") from exc
        else:
            raise DataFormatError(f"{path}: unknown header line {line!r}")
    body = raw[cut + len(marker):]
    need = sum(r * c for _, r, c in shapes) * 8
    if len(body) != need:
        raise DataFormatError(
            f"{path}: body holds {len(body)} bytes, header implies {need}")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, rows, cols in shapes:
        nbytes = rows * cols * 8
        flat = np.frombuffer(body, dtype="<f8", count=rows * cols,
                             offset=offset)
        tensors[name] = flat.astype(np.float64).reshape(rows, cols)
        offset += nbytes
    return tensors, meta
