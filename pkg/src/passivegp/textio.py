"""Plain-text serialization helpers.

All numeric output uses 17 significant digits so that float64 values
round-trip exactly and repeated runs produce byte-identical files.
"""

import numpy as np


def g17(x) -> str:
    """Format a scalar with 17 significant digits."""
    return "%.17g" % float(x)


def g17_seq(values) -> str:
    """Format a 1-D sequence as a space-separated line."""
    return " ".join(g17(v) for v in np.asarray(values, dtype=float).ravel())


def write_lines(path, lines):
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_tokens(path):
    """Read a whitespace-token stream, ignoring blank lines and # comments."""
    tokens = []
    with open(path) as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    return tokens
