"""Plain-text labeled dense blocks.

::

    format_version 1
    [matrix A 2 2]
    0.5 0
    0   0.5
    [vector k 2]
    1 1
    [labels states 2]
    x1 x2

Blank lines and ``#`` comments are ignored.  Errors carry line numbers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

_HEADER = re.compile(r"^\[(matrix|vector|labels)\s+(\w+)\s+(\d+)(?:\s+(\d+))?\]$")


class MatrixFileError(ValueError):
    pass


@dataclass
class MatrixFile:
    matrices: dict = field(default_factory=dict)
    vectors: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    version: int = 1

    def matrix(self, name: str) -> np.ndarray:
        if name not in self.matrices:
            raise KeyError(f"matrix block {name!r} not present")
        return self.matrices[name]

    def vector(self, name: str) -> np.ndarray:
        if name not in self.vectors:
            raise KeyError(f"vector block {name!r} not present")
        return self.vectors[name]


def parse_matrix_text(text: str, source: str = "<string>") -> MatrixFile:
    out = MatrixFile()
    lines = text.splitlines()
    pending = None  # (kind, name, rows, cols, start_line, data rows)

    def finish():
        if pending is None:
            return
        kind, name, rows, cols, line_no, data = pending
        where = f"{source}:{line_no}"
        if kind == "labels":
            tokens = [t for row in data for t in row]
            if len(tokens) != rows:
                raise MatrixFileError(f"{where}: labels {name!r} declares {rows} entries, found {len(tokens)}")
            out.labels[name] = tokens
            return
        try:
            vals = [[float(t) for t in row] for row in data]
        except ValueError as exc:
            raise MatrixFileError(f"{where}: non-numeric entry in block {name!r}: {exc}") from None
        if kind == "vector":
            flat = [v for row in vals for v in row]
            if len(flat) != rows:
                raise MatrixFileError(f"{where}: vector {name!r} declares {rows} entries, found {len(flat)}")
            out.vectors[name] = np.array(flat)
            return
        if len(vals) != rows or any(len(r) != cols for r in vals):
            shape = (len(vals), {len(r) for r in vals})
            raise MatrixFileError(f"{where}: matrix {name!r} declares {rows}x{cols}, found rows/cols {shape}")
        out.matrices[name] = np.array(vals, dtype=float).reshape(rows, cols)

    for no, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("format_version"):
            parts = line.split()
            if len(parts) != 2 or parts[1] != "1":
                raise MatrixFileError(f"{source}:{no}: unsupported format version {line!r}")
            continue
        if line.startswith("["):
            finish()
            m = _HEADER.match(line)
            if not m:
                raise MatrixFileError(f"{source}:{no}: malformed block header {line!r}")
            kind, name, rows, cols = m.group(1), m.group(2), int(m.group(3)), m.group(4)
            if kind == "matrix" and cols is None:
                raise MatrixFileError(f"{source}:{no}: matrix header needs rows and cols")
            if kind != "matrix" and cols is not None:
                raise MatrixFileError(f"{source}:{no}: {kind} header takes a single length")
            if name in out.matrices or name in out.vectors or name in out.labels:
                raise MatrixFileError(f"{source}:{no}: duplicate block {name!r}")
            pending = (kind, name, rows, int(cols) if cols else None, no, [])
            continue
        if pending is None:
            raise MatrixFileError(f"{source}:{no}: data outside of a block")
        pending[5].append(line.split())
    finish()
    return out


def load_matrix_file(path) -> MatrixFile:
    path = Path(path)
    return parse_matrix_text(path.read_text(), str(path))


def load_bundled(name: str) -> MatrixFile:
    ref = resources.files("smpc.data").joinpath(f"{name}_system.txt")
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled case named {name!r}")
    return parse_matrix_text(ref.read_text(), f"bundled:{name}")


def bundled_path(filename: str) -> Path:
    return Path(str(resources.files("smpc.data").joinpath(filename)))


def format_matrix_file(blocks: dict, header: str = "") -> str:
    """Inverse of :func:`parse_matrix_text` for 1-D and 2-D arrays."""
    out = []
    for line in header.splitlines():
        out.append(f"# {line}" if line else "#")
    out.append("format_version 1")
    for name, val in blocks.items():
        if isinstance(val, (list, tuple)) and val and isinstance(val[0], str):
            out.append(f"[labels {name} {len(val)}]")
            out.append(" ".join(val))
            continue
        arr = np.asarray(val, dtype=float)
        if arr.ndim == 1:
            out.append(f"[vector {name} {arr.size}]")
            out.append(" ".join(repr(float(v)) for v in arr))
        else:
            out.append(f"[matrix {name} {arr.shape[0]} {arr.shape[1]}]")
            for row in arr:
                out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"
