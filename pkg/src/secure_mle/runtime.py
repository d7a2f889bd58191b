"""High-level entry points: build a federation, evaluate, replay transcripts."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import LayoutError, ReplayError
from .mvn import DataPartition, ParameterSet
from .nodes import CENTRAL, CentralNode, DataNode
from .partition import PartitionLayout
from .primitives import unmask
from .protocol.messages import (
    BundleUp,
    CentralForward,
    CleanRequest,
    MarginalParams,
    ProtocolMessage,
    SumToken,
    Transcript,
    parse_band,
    root_eval_id,
)
from .protocol.steps import central_correction
from .transport import TransportConfig, make_transport

DEFAULT_NOISE_FACTOR = 1e3


def default_noise_scale(data_magnitude: float = 1.0) -> float:
    return DEFAULT_NOISE_FACTOR * float(data_magnitude)


def partitions_from_matrix(data: np.ndarray, layout: PartitionLayout) -> dict[str, DataPartition]:
    """Cut a pooled matrix along a layout (simulation and test helper)."""
    data = np.asarray(data, dtype=float)
    if data.shape != (layout.n, layout.p):
        raise LayoutError(f"data is {data.shape}, layout is {layout.n}x{layout.p}")
    return {nd.name: DataPartition(data[np.ix_(nd.rows, nd.cols)], nd.cols, nd.rows) for nd in layout.nodes}


@dataclass
class Federation:
    """A central node plus data nodes wired through one transport.

    Every ``evaluate`` call is one full protocol run under a fresh eval id
    (and so fresh masks); the optimizer treats it as a black-box objective.
    """

    layout: PartitionLayout
    central: CentralNode
    transport: object
    record: bool = False

    def __post_init__(self):
        self._ids = itertools.count(1)
        self.transcript = Transcript()
        self.evaluations = 0

    @classmethod
    def build(cls, layout: PartitionLayout, partitions: Mapping[str, DataPartition] | None,
              noise_scale: float | None = None, seed: int | None = None, mask_scale: float | None = None,
              transport: TransportConfig | str | None = None, record: bool = False) -> "Federation":
        noise_scale = default_noise_scale() if noise_scale is None else noise_scale
        seed = int(np.random.SeedSequence().entropy) if seed is None else int(seed)
        if isinstance(transport, str) or transport is None:
            transport = TransportConfig(kind=transport or "in_process")
        central = CentralNode(layout, noise_scale, seed, mask_scale)
        nodes = None
        if partitions is not None:
            unknown = set(partitions) - set(layout.names)
            if unknown:
                raise LayoutError(f"partitions for unknown nodes {sorted(unknown)}")
            nodes = {name: DataNode(name, layout, part, noise_scale, seed, mask_scale)
                     for name, part in partitions.items()}
        return cls(layout, central, make_transport(central, nodes, transport), record)

    def next_eval_id(self) -> str:
        return f"e{next(self._ids):06d}"

    def evaluate(self, params: ParameterSet, mode: str | None = None, eval_id: str | None = None,
                 transcript: Transcript | None = None) -> float:
        eval_id = eval_id or self.next_eval_id()
        sink = transcript if transcript is not None else (self.transcript if self.record else None)
        value = self.transport.evaluate(params, eval_id, mode, sink)
        self.evaluations += 1
        return value

    def close(self) -> None:
        self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _run(params, layout, partitions, mode, noise_scale, seed, transport, eval_id, transcript, mask_scale):
    with Federation.build(layout, partitions, noise_scale, seed, mask_scale, transport) as fed:
        return fed.evaluate(params, mode, eval_id, transcript)


def run_evaluation(params: ParameterSet, layout: PartitionLayout, partitions: Mapping[str, DataPartition], *,
                   noise_scale: float | None = None, seed: int | None = None,
                   transport: TransportConfig | str | None = None, eval_id: str = "e000001",
                   transcript: Transcript | None = None, mask_scale: float | None = None) -> float:
    """One secure vertical evaluation (the layout must reduce to a single band)."""
    return _run(params, layout, partitions, "vertical", noise_scale, seed, transport, eval_id, transcript, mask_scale)


def run_complex(params: ParameterSet, layout: PartitionLayout, partitions: Mapping[str, DataPartition], *,
                noise_scale: float | None = None, seed: int | None = None,
                transport: TransportConfig | str | None = None, eval_id: str = "e000001",
                transcript: Transcript | None = None, mask_scale: float | None = None) -> float:
    """Any tiling: vertical runs per band, band totals combined by a masked ring.

    A layout that is a single band is simply one vertical evaluation.
    """
    mode = "vertical" if layout.kind == "vertical" else "banded"
    return _run(params, layout, partitions, mode, noise_scale, seed, transport, eval_id, transcript, mask_scale)


def horizontal_round(params: ParameterSet, layout: PartitionLayout, partitions: Mapping[str, DataPartition], *,
                     seed: int | None = None, mask_scale: float = 1e12,
                     transport: TransportConfig | str | None = None, eval_id: str = "e000001",
                     transcript: Transcript | None = None) -> float:
    """Row-partitioned data: each node's full log-likelihood summed around a masked ring."""
    if layout.kind != "horizontal":
        raise LayoutError("a secure-sum round needs every node to hold every column")
    return _run(params, layout, partitions, "horizontal", 0.0, seed, transport, eval_id, transcript, mask_scale)


# -- replay -------------------------------------------------------------------


def _band_final(msgs: list[ProtocolMessage], sid: str) -> tuple[float, float | None]:
    """Central correction of one band session, and its clean total if it ended at the central node."""
    covs, noise, a1, a2 = {}, {}, {}, {}
    names: list[str] = []
    clean = None
    for m in msgs:
        p = m.payload
        if isinstance(p, MarginalParams):
            names.insert(0, m.receiver)
            covs[0] = p.cov
            last_noise = p.p_last
        elif isinstance(p, CentralForward):
            k = m.round - 1
            covs[k] = p.cov
            noise[k - 1] = p.p
            names.append(m.receiver)
        elif isinstance(p, BundleUp):
            a1[m.sender], a2[m.sender] = p.a1, p.a2
        elif isinstance(p, CleanRequest):
            clean = p.ll_star
    if 0 not in covs:
        raise ReplayError(f"session {sid} has no opening message")
    K = len(covs)
    if sorted(covs) != list(range(K)) or set(a1) != set(names) or len(names) != K:
        raise ReplayError(f"session {sid} is incomplete")
    noise[K - 1] = last_noise
    if sorted(noise) != list(range(K)):
        raise ReplayError(f"session {sid} is missing noise matrices")
    total = sum(central_correction(noise[k], a1[names[k]], a2[names[k]], covs[k]) for k in range(K))
    return total, clean


def replay(transcript: Transcript, eval_id: str | None = None) -> float:
    """Recompute the central node's final value from what it sent and received."""
    roots = transcript.eval_ids()
    if eval_id is None:
        if len(roots) != 1:
            raise ReplayError(f"transcript holds {len(roots)} evaluations; name one")
        eval_id = roots[0]
    msgs = [m for m in transcript.messages if root_eval_id(m.eval_id) == eval_id]
    if not msgs:
        raise ReplayError(f"no messages for evaluation {eval_id}")
    sessions: dict[str, list[ProtocolMessage]] = {}
    for m in msgs:
        sessions.setdefault(m.eval_id, []).append(m)
    tokens = [m for m in msgs if isinstance(m.payload, SumToken)]
    if eval_id in sessions and not tokens:
        corr, clean = _band_final(sessions[eval_id], eval_id)
        if clean is None:
            raise ReplayError(f"evaluation {eval_id} never delivered its final total")
        return clean - corr
    if eval_id in sessions:
        final = [m for m in tokens if m.receiver == CENTRAL]
        if len(final) != 1:
            raise ReplayError(f"secure-sum round {eval_id} is incomplete")
        return final[0].payload.value
    ring = [m for m in tokens if m.eval_id.endswith("-sum")]
    opening = [m for m in ring if m.sender == CENTRAL]
    closing = [m for m in ring if m.receiver == CENTRAL]
    if len(opening) != 1 or len(closing) != 1:
        raise ReplayError(f"band ring of {eval_id} is incomplete")
    mask = (opening[0].payload.value, opening[0].payload.low)
    total = unmask(closing[0].payload.value, closing[0].payload.low, mask)
    bands = sorted(sid for sid in sessions if parse_band(sid) is not None)
    if not bands:
        raise ReplayError(f"evaluation {eval_id} has no band sessions")
    expected = list(range(len(bands)))
    if [parse_band(sid) for sid in bands] != expected:
        raise ReplayError(f"evaluation {eval_id} is missing bands")
    return total - sum(_band_final(sessions[sid], sid)[0] for sid in bands)


def replay_all(transcript: Transcript) -> dict[str, float]:
    return {eid: replay(transcript, eid) for eid in transcript.eval_ids()}
