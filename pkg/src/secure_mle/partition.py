"""Partition layouts and the split of complex layouts into vertical bands."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import LayoutError


@dataclass(frozen=True)
class NodeSpec:
    name: str
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(sorted(int(r) for r in self.rows)))
        object.__setattr__(self, "cols", tuple(sorted(int(c) for c in self.cols)))
        if not self.rows or not self.cols:
            raise LayoutError(f"node {self.name!r} holds no cells")
        if len(set(self.rows)) != len(self.rows) or len(set(self.cols)) != len(self.cols):
            raise LayoutError(f"node {self.name!r} lists a row or column twice")


@dataclass(frozen=True)
class PartitionLayout:
    """Which node holds which cells of the ``n x p`` data grid."""

    nodes: tuple[NodeSpec, ...]
    n: int
    p: int
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        names = [nd.name for nd in self.nodes]
        if len(set(names)) != len(names):
            raise LayoutError("node names must be unique")
        if "central" in names:
            raise LayoutError("'central' is reserved for the coordinating node")
        if len(self.nodes) < 2:
            raise LayoutError("a partitioned layout needs at least two data nodes")
        if not self.var_names:
            object.__setattr__(self, "var_names", tuple(f"x{i}" for i in range(self.p)))
        if len(self.var_names) != self.p:
            raise LayoutError("var_names length does not match p")
        self._check_tiling()

    def _check_tiling(self):
        owner = {}
        for nd in self.nodes:
            if nd.rows[0] < 0 or nd.rows[-1] >= self.n or nd.cols[0] < 0 or nd.cols[-1] >= self.p:
                raise LayoutError(f"node {nd.name!r} reaches outside the {self.n}x{self.p} grid")
        # tiling check per row: columns covered exactly once
        for r, sig in self.row_signatures().items():
            cols = [c for _, cs in sig for c in cs]
            if len(cols) != len(set(cols)):
                raise LayoutError(f"row {r} has a cell held by two nodes")
            if len(cols) != self.p:
                raise LayoutError(f"row {r} has cells held by no node")
            owner[r] = sig
        if len(owner) != self.n:
            missing = sorted(set(range(self.n)) - set(owner))
            raise LayoutError(f"rows {missing[:5]} are held by no node")

    def row_signatures(self) -> dict[int, tuple[tuple[str, tuple[int, ...]], ...]]:
        sigs: dict[int, list] = {}
        for nd in self.nodes:
            for r in nd.rows:
                sigs.setdefault(r, []).append((nd.name, nd.cols))
        return {r: tuple(sorted(s, key=lambda e: e[1][0])) for r, s in sorted(sigs.items())}

    @property
    def K(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [nd.name for nd in self.nodes]

    def node(self, name: str) -> NodeSpec:
        for nd in self.nodes:
            if nd.name == name:
                return nd
        raise LayoutError(f"unknown node {name!r}")

    @property
    def kind(self) -> str:
        all_rows = tuple(range(self.n))
        all_cols = tuple(range(self.p))
        if all(nd.rows == all_rows for nd in self.nodes):
            return "vertical"
        if all(nd.cols == all_cols for nd in self.nodes):
            return "horizontal"
        return "complex"

    @classmethod
    def vertical(cls, col_sets: Sequence[Sequence[int]], n: int, names: Sequence[str] | None = None,
                 var_names: tuple[str, ...] = ()) -> "PartitionLayout":
        names = list(names or [f"node{k + 1}" for k in range(len(col_sets))])
        p = sum(len(c) for c in col_sets)
        nodes = tuple(NodeSpec(nm, tuple(range(n)), tuple(cs)) for nm, cs in zip(names, col_sets))
        return cls(nodes, n, p, var_names)

    @classmethod
    def horizontal(cls, row_sets: Sequence[Sequence[int]], p: int, names: Sequence[str] | None = None,
                   var_names: tuple[str, ...] = ()) -> "PartitionLayout":
        names = list(names or [f"node{k + 1}" for k in range(len(row_sets))])
        n = sum(len(r) for r in row_sets)
        nodes = tuple(NodeSpec(nm, tuple(rs), tuple(range(p))) for nm, rs in zip(names, row_sets))
        return cls(nodes, n, p, var_names)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "variables": list(self.var_names),
            "nodes": [
                {"name": nd.name, "rows": _to_ranges(nd.rows), "columns": [self.var_names[c] for c in nd.cols]}
                for nd in self.nodes
            ],
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "PartitionLayout":
        try:
            variables = [str(v) for v in spec["variables"]]
            n = int(spec["n"])
            col_index = {v: i for i, v in enumerate(variables)}
            nodes = []
            for entry in spec["nodes"]:
                rows = [r for lo, hi in entry["rows"] for r in range(int(lo), int(hi))]
                unknown = [c for c in entry["columns"] if c not in col_index]
                if unknown:
                    raise LayoutError(f"node {entry['name']!r} names unknown columns {unknown}")
                nodes.append(NodeSpec(str(entry["name"]), tuple(rows), tuple(col_index[c] for c in entry["columns"])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, LayoutError):
                raise
            raise LayoutError(f"malformed layout: {exc}") from exc
        layout = cls(tuple(nodes), n, len(variables), tuple(variables))
        declared = spec.get("kind")
        if declared is not None and declared != layout.kind:
            raise LayoutError(f"layout declared {declared!r} but the tiling is {layout.kind!r}")
        return layout

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PartitionLayout":
        try:
            spec = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise LayoutError(f"layout file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(spec)


def _to_ranges(rows: Sequence[int]) -> list[list[int]]:
    out: list[list[int]] = []
    for r in rows:
        if out and out[-1][1] == r:
            out[-1][1] = r + 1
        else:
            out.append([r, r + 1])
    return out


@dataclass(frozen=True)
class Band:
    """Rows sharing one column ownership pattern: a pure vertical subproblem."""

    rows: tuple[int, ...]
    chain: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def node_names(self) -> list[str]:
        return [name for name, _ in self.chain]

    @property
    def column_order(self) -> list[int]:
        return [c for _, cols in self.chain for c in cols]

    @property
    def sizes(self) -> list[int]:
        return [len(cols) for _, cols in self.chain]

    @property
    def n(self) -> int:
        return len(self.rows)

    def position(self, name: str) -> int:
        return self.node_names.index(name)


@dataclass(frozen=True)
class SubroutinePlan:
    bands: tuple[Band, ...]

    def __len__(self):
        return len(self.bands)

    def first_nodes(self) -> list[str]:
        seen: list[str] = []
        for band in self.bands:
            if band.node_names[0] not in seen:
                seen.append(band.node_names[0])
        return seen


def plan_subroutines(layout: PartitionLayout) -> SubroutinePlan:
    """Group rows by ownership pattern; order bands by their lowest row.

    Inside a band, nodes are chained in order of their first global column.
    """
    groups: dict[tuple, list[int]] = {}
    for r, sig in layout.row_signatures().items():
        groups.setdefault(sig, []).append(r)
    bands = [Band(tuple(rows), sig) for sig, rows in groups.items()]
    bands.sort(key=lambda b: b.rows[0])
    return SubroutinePlan(tuple(bands))
