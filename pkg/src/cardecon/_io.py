"""Small helpers for the delimited-text formats used throughout the package.

Every table this package writes may start with ``#``-prefixed provenance lines
(tool version, seed, input hashes). Readers skip such leading lines.
"""
from __future__ import annotations

import csv
import hashlib
import io
import os
from typing import IO, Iterable, Mapping, Sequence

from . import __version__

PathLike = str | os.PathLike


def file_sha256(path: PathLike, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def provenance_lines(seed: int | None = None,
                     inputs: Mapping[str, PathLike] | None = None,
                     extra: Mapping[str, object] | None = None) -> list[str]:
    """Header comment lines: tool version, seed and content hashes of inputs."""
    lines = [f"tool: cardecon {__version__}"]
    if seed is not None:
        lines.append(f"seed: {seed}")
    for label, path in sorted((inputs or {}).items()):
        lines.append(f"input {label}: sha256={file_sha256(path)}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key}: {value}")
    return lines


def fmt_float(x: float) -> str:
    # repr gives the shortest string that round-trips exactly
    return repr(float(x))


def write_table(path_or_fh: PathLike | IO[str], header: Sequence[str],
                rows: Iterable[Sequence[object]],
                comments: Sequence[str] = ()) -> None:
    """Write a comma-separated table with optional leading comment lines."""
    def _write(fh: IO[str]) -> None:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, float) else v for v in row])

    if hasattr(path_or_fh, "write"):
        _write(path_or_fh)  # type: ignore[arg-type]
    else:
        with open(path_or_fh, "w", newline="", encoding="utf-8") as fh:
            _write(fh)


def read_table(path_or_fh: PathLike | IO[str]) -> tuple[list[str], list[list[str]], list[str]]:
    """Read a comma-separated table; returns (header, rows, comment lines)."""
    if hasattr(path_or_fh, "read"):
        text = path_or_fh.read()  # type: ignore[union-attr]
    else:
        with open(path_or_fh, "r", encoding="utf-8", newline="") as fh:
            text = fh.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    lines = text.splitlines(keepends=True)
    comments = []
    start = 0
    while start < len(lines) and lines[start].startswith("#"):
        comments.append(lines[start][1:].strip())
        start += 1
    reader = csv.reader(io.StringIO("".join(lines[start:])))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValueError("table has no header row") from None
    rows = [row for row in reader if row]
    return header, rows, comments


def count_comment_lines(fh: IO[bytes]) -> int:
    """Number of leading ``#`` lines in a seekable binary stream; rewinds it."""
    pos = fh.tell()
    n = 0
    while True:
        line = fh.readline()
        if not line.startswith(b"#"):
            break
        n += 1
    fh.seek(pos)
    return n
