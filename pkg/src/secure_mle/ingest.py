"""CSV ingestion for data nodes.

Each node's file has a header row, one id column and the node's variables.
``NA`` or an empty cell is missing. Rows are aligned across nodes through
the id column: the sorted list of all ids (numeric order when every id is
an integer) defines layout row 0, 1, ...; a node's ids must land exactly on
the rows the layout gives it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import AlignmentError, ConfigError, MissingDataError
from .mvn import DataPartition
from .partition import PartitionLayout

MISSING = {"", "NA"}


@dataclass
class NodeTable:
    ids: list[str]
    columns: list[str]
    values: np.ndarray          # NaN marks a missing cell


@dataclass
class IngestResult:
    partitions: dict[str, DataPartition]
    ids: list[str]                              # id of each layout row
    imputed: dict[str, dict[str, int]] = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"{len(self.ids)} aligned rows, {len(self.partitions)} nodes"]
        for name, part in self.partitions.items():
            filled = sum(self.imputed.get(name, {}).values())
            lines.append(f"  {name}: {part.n} rows x {part.p} columns, {filled} cells imputed")
        return "\n".join(lines)


def read_table(path, id_column: str = "id") -> NodeTable:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if not rows:
        raise ConfigError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if id_column not in header:
        raise AlignmentError(f"{path} has no {id_column!r} column")
    if len(set(header)) != len(header):
        raise ConfigError(f"{path} repeats a column name")
    id_at = header.index(id_column)
    columns = [h for i, h in enumerate(header) if i != id_at]
    ids, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ConfigError(f"{path}:{lineno} has {len(row)} fields, header has {len(header)}")
        ids.append(row[id_at].strip())
        cells = []
        for i, cell in enumerate(row):
            if i == id_at:
                continue
            cell = cell.strip()
            if cell in MISSING:
                cells.append(np.nan)
                continue
            try:
                cells.append(float(cell))
            except ValueError:
                raise ConfigError(f"{path}:{lineno} has a non-numeric value {cell!r}") from None
        values.append(cells)
    if len(set(ids)) != len(ids):
        raise AlignmentError(f"{path} repeats an id")
    if any(i in MISSING for i in ids):
        raise AlignmentError(f"{path} has a row without an id")
    arr = np.array(values, dtype=float).reshape(len(ids), len(columns))
    return NodeTable(ids, columns, arr)


def impute_marginal(values: np.ndarray, columns: Sequence[str] = ()) -> tuple[np.ndarray, dict[str, int]]:
    """Fill missing cells with the mean of the observed cells in the same column."""
    out = np.array(values, dtype=float)
    counts = {}
    for j in range(out.shape[1]):
        miss = np.isnan(out[:, j])
        if not miss.any():
            continue
        name = columns[j] if columns else str(j)
        if miss.all():
            raise MissingDataError(f"column {name!r} has no observed values to impute from")
        out[miss, j] = out[~miss, j].mean()
        counts[name] = int(miss.sum())
    return out, counts


def _id_key(ids: Sequence[str]):
    try:
        [int(i) for i in ids]
    except ValueError:
        return str
    return int


def ingest_node(table: NodeTable, layout: PartitionLayout, name: str, impute: bool = False,
                key=None) -> tuple[DataPartition, dict[str, int]]:
    """One node's table as a partition; its sorted ids take its layout rows in order.

    This needs no other node's file, which is what lets a remote node
    daemon load its own data.
    """
    nd = layout.node(name)
    want = [layout.var_names[c] for c in nd.cols]
    if sorted(table.columns) != sorted(want):
        raise AlignmentError(f"{name} has columns {table.columns}, layout expects {want}")
    if len(table.ids) != len(nd.rows):
        raise AlignmentError(f"{name} has {len(table.ids)} rows, layout assigns it {len(nd.rows)}")
    values = table.values[:, [table.columns.index(c) for c in want]]
    counts: dict[str, int] = {}
    if np.isnan(values).any():
        if not impute:
            cells = int(np.isnan(values).sum())
            raise MissingDataError(f"{name} has {cells} missing cells and imputation is off")
        values, counts = impute_marginal(values, want)
    key = key or _id_key(table.ids)
    order = sorted(range(len(table.ids)), key=lambda i: key(table.ids[i]))
    return DataPartition(values[order], nd.cols, tuple(sorted(nd.rows))), counts


def ingest(paths: Mapping[str, str | Path], layout: PartitionLayout, id_column: str = "id",
           impute: bool = False) -> IngestResult:
    """Read, align and validate one CSV per node of ``layout``."""
    missing = set(layout.names) - set(paths)
    extra = set(paths) - set(layout.names)
    if missing or extra:
        raise ConfigError(f"data files do not match the layout: missing {sorted(missing)}, unknown {sorted(extra)}")
    tables = {name: read_table(paths[name], id_column) for name in layout.names}
    key = _id_key([i for t in tables.values() for i in t.ids])
    all_ids = sorted({i for t in tables.values() for i in t.ids}, key=key)
    if len(all_ids) != layout.n:
        raise AlignmentError(f"files hold {len(all_ids)} distinct ids, layout has {layout.n} rows")
    row_of = {i: r for r, i in enumerate(all_ids)}
    partitions, imputed = {}, {}
    for nd in layout.nodes:
        t = tables[nd.name]
        if sorted(row_of[i] for i in t.ids) != sorted(nd.rows):
            raise AlignmentError(f"ids of {nd.name} do not match the rows the layout assigns it")
        partitions[nd.name], counts = ingest_node(t, layout, nd.name, impute, key)
        if counts:
            imputed[nd.name] = counts
    return IngestResult(partitions, all_ids, imputed)


def write_table(path, ids: Sequence[str], columns: Sequence[str], values: np.ndarray, id_column: str = "id") -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([id_column, *columns])
        for i, row in zip(ids, np.asarray(values)):
            w.writerow([i, *("NA" if np.isnan(v) else repr(float(v)) for v in row)])
