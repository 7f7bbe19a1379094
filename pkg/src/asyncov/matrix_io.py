"""CSV helpers for labelled matrices."""

from __future__ import annotations

import csv

import numpy as np


def write_matrix_csv(path, M, row_names=None, col_names=None, fmt=repr) -> None:
    """Write ``M`` with a header row of column labels and a leading label column."""
    M = np.atleast_2d(np.asarray(M))
    if row_names is None:
        row_names = [str(i) for i in range(M.shape[0])]
    if col_names is None:
        col_names = [str(j) for j in range(M.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", *col_names])
        for name, row in zip(row_names, M):
            w.writerow([name, *(fmt(v.item()) for v in row)])


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    M = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).reshape(len(names), len(cols))
    return M, names, cols
