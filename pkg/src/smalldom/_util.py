"""Small shared helpers: atomic file writes and float formatting."""

from __future__ import annotations

import math
import os
import tempfile


def fmt(x) -> str:
    """Shortest decimal that round-trips the float exactly.

    Guarantees summary rows recomputed from a parsed CSV match the
    in-memory values bit for bit.
    """
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename.

    An existing file is never left partially overwritten.
    """
    path = os.fspath(path)
    parent = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=parent, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
