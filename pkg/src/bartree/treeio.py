"""Columnar text dump of a simulated tree.

The file starts with one metadata comment line, then a CSV table::

    # bartree-tree p=1 n=3 seed=42
    label,generation,X,eps
    1,0,0.0,
    2,1,1.2,0.2
    ...

The ``eps`` column is absent when the noise was not recorded; it is empty
for the seeded ancestors (labels below 2**p). Floats are written with
``repr`` and read back bit for bit.
"""

from __future__ import annotations

import csv
import io
import re
from pathlib import Path

import numpy as np

from .model import SimulatedTree
from .tree import TreeShape, subtree_size

_HEADER = re.compile(r"^# bartree-tree p=(\d+) n=(\d+) seed=(\d+)\s*$")


class TreeFormatError(ValueError):
    pass


def dumps_tree(tree: SimulatedTree) -> str:
    buf = io.StringIO()
    buf.write(f"# bartree-tree p={tree.p} n={tree.n} seed={tree.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = ["label", "generation", "X"] + (["eps"] if tree.has_noise else [])
    w.writerow(cols)
    X = tree.X.tolist()
    eps = tree.eps.tolist() if tree.has_noise else None
    for k in range(1, subtree_size(tree.n) + 1):
        row = [k, k.bit_length() - 1, repr(X[k])]
        if eps is not None:
            e = eps[k]
            row.append("" if e != e else repr(e))
        w.writerow(row)
    return buf.getvalue()


def write_tree(tree: SimulatedTree, path) -> None:
    Path(path).write_text(dumps_tree(tree))


def loads_tree(text: str) -> SimulatedTree:
    lines = text.splitlines()
    if not lines:
        raise TreeFormatError("empty tree file")
    m = _HEADER.match(lines[0])
    if not m:
        raise TreeFormatError("line 1: missing '# bartree-tree p=.. n=.. seed=..' header")
    p, n, seed = (int(g) for g in m.groups())
    try:
        shape = TreeShape(n=n, p=p)
    except ValueError as exc:
        raise TreeFormatError(f"line 1: {exc}") from exc
    reader = csv.reader(lines[1:])
    try:
        cols = next(reader)
    except StopIteration:
        raise TreeFormatError("line 2: missing column header") from None
    if cols not in (["label", "generation", "X"], ["label", "generation", "X", "eps"]):
        raise TreeFormatError(f"line 2: unexpected columns {cols}")
    has_eps = len(cols) == 4
    size = subtree_size(n)
    X = np.full(size + 1, np.nan)
    eps = np.full(size + 1, np.nan) if has_eps else None
    count = 0
    for lineno, row in enumerate(reader, start=3):
        if not row:
            continue
        if len(row) != len(cols):
            raise TreeFormatError(f"line {lineno}: expected {len(cols)} fields, got {len(row)}")
        try:
            k = int(row[0])
            X[k] = float(row[2])
            if has_eps and row[3] != "":
                eps[k] = float(row[3])
        except (ValueError, IndexError) as exc:
            raise TreeFormatError(f"line {lineno}: {exc}") from exc
        if k != count + 1:
            raise TreeFormatError(f"line {lineno}: expected label {count + 1}, got {k}")
        count += 1
    if count != size:
        raise TreeFormatError(f"expected {size} cells for n={n}, found {count}")
    X.setflags(write=False)
    if eps is not None:
        eps.setflags(write=False)
    return SimulatedTree(shape=shape, X=X, eps=eps, seed=seed, init=X[1:1 << p].copy())


def read_tree(path) -> SimulatedTree:
    return loads_tree(Path(path).read_text())
