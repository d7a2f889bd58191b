"""Leakage audit of recorded transcripts against pooled-data truths.

Two kinds of checks:

* structural: the set of payload fields each party ever receives must equal
  the set its position in the protocol entitles it to;
* masking: every transmitted value (and a few values a receiver can derive
  from what it holds) is compared with the protected statistic it stands
  in for. The margin is the RMS difference for matrices and the absolute
  difference for scalars; a value whose margin does not exceed
  ``delta(S) = threshold * S`` is reported as an exposure.

This is a test-harness component: it needs the pooled data and the true
parameters, and it proves nothing cryptographic.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import AuditError
from .mvn import ParameterSet, chol_solve, cholesky, condition, gaussian_loglik, log_likelihood, split_cov
from .nodes import CENTRAL
from .partition import PartitionLayout, plan_subroutines
from .primitives import dd_add
from .protocol.messages import (
    BundleUp,
    CentralForward,
    ChainForward,
    CondMeanUp,
    FinalToFirst,
    FullParams,
    MarginalParams,
    ProtocolMessage,
    SumToken,
    Transcript,
    parse_band,
    root_eval_id,
)
from .protocol.steps import chain_correction

CLASSES = ("raw_data", "cond_mean", "partial_ll", "bundle")
DEFAULT_THRESHOLD = 0.1


@dataclass(frozen=True)
class Violation:
    msg_id: str
    field: str
    reason: str
    cls: str = ""       # protected class for masking exposures, empty for structural ones


@dataclass(frozen=True)
class Margin:
    msg_id: str
    field: str
    cls: str
    view: str
    margin: float


@dataclass
class LeakageReport:
    noise_scale: float
    delta: float
    received: dict[str, dict[str, list[str]]]
    violations: list[Violation]
    margins: dict[str, float]
    exposed: dict[str, bool]
    details: list[Margin] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def structure_ok(self) -> bool:
        return all(v["observed"] == v["allowed"] for v in self.received.values())

    @property
    def ok(self) -> bool:
        return not self.violations and self.structure_ok

    def min_margin(self) -> float:
        vals = [m for m in self.margins.values() if np.isfinite(m)]
        return min(vals) if vals else float("nan")

    def to_dict(self) -> dict:
        return {
            "noise_scale": self.noise_scale,
            "delta": self.delta,
            "ok": self.ok,
            "received": self.received,
            "violations": [asdict(v) for v in self.violations],
            "margins": self.margins,
            "exposed": self.exposed,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [f"noise scale {self.noise_scale:g}, exposure threshold {self.delta:g}", "",
                 f"{'party':<12} {'received fields':<48} match"]
        for node, sets in sorted(self.received.items()):
            ok = "yes" if sets["observed"] == sets["allowed"] else "NO"
            lines.append(f"{node:<12} {','.join(sets['observed']):<48} {ok}")
        lines += ["", f"{'class':<12} {'min margin':>14}  exposed"]
        for cls in CLASSES:
            if cls in self.margins:
                lines.append(f"{cls:<12} {self.margins[cls]:>14.6g}  {'YES' if self.exposed[cls] else 'no'}")
        lines += ["", f"violations: {len(self.violations)}"]
        for v in self.violations[:20]:
            lines.append(f"  {v.msg_id} [{v.field}] {v.reason}")
        if len(self.violations) > 20:
            lines.append(f"  ... {len(self.violations) - 20} more")
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def _rms(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise AuditError(f"cannot compare shapes {a.shape} and {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _fields(msg: ProtocolMessage) -> set[str]:
    if isinstance(msg.payload, SumToken):
        return {"sum_token"}
    return set(msg.payload.present_fields())


# -- pooled truths ------------------------------------------------------------


@dataclass
class _BandTruth:
    x: list[np.ndarray]            # node blocks of the band, n x p_k
    own_mean: list[np.ndarray]     # conditional mean of block k given blocks < k
    tail_mean: list[np.ndarray]    # conditional mean of blocks > k given blocks <= k
    running_ll: list[float]        # sum of the chain terms up to and including k
    bundle: list[np.ndarray]       # inv(S_k) (X_k - own_mean_k)^T
    covs: list[np.ndarray]


def _band_truth(params: ParameterSet, pooled: np.ndarray, band) -> _BandTruth:
    sub = params.subset(band.column_order)
    data = pooled[np.ix_(band.rows, band.column_order)]
    n = data.shape[0]
    mean = np.tile(sub.mean, (n, 1))
    cov = sub.cov
    out = _BandTruth([], [], [], [], [], [])
    start, total = 0, 0.0
    for pk in band.sizes:
        x = data[:, start:start + pk]
        own = cov[:pk, :pk]
        chol = cholesky(own)
        out.x.append(x)
        out.own_mean.append(mean[:, :pk].copy())
        out.covs.append(own)
        out.bundle.append(chol_solve(chol, (x - mean[:, :pk]).T))
        total += gaussian_loglik(x, mean[:, :pk], own, chol)
        out.running_ll.append(total)
        if cov.shape[0] > pk:
            cov, mean = condition(split_cov(cov, pk), x, mean)
            out.tail_mean.append(mean.copy())
        start += pk
    return out


# -- allowed receive sets -----------------------------------------------------


def _allowed_vertical(K: int, single: bool) -> dict[int | str, set[str]]:
    allowed: dict[int | str, set[str]] = {CENTRAL: {"a1", "a2"}}
    if K >= 3:
        allowed[CENTRAL].add("mu_star")
    if single:
        allowed[CENTRAL].add("ll_star")
    allowed[0] = {"cov", "mu_tilde", "p_last"} | ({"ll_tilde", "q"} if K > 1 else set())
    for k in range(1, K):
        allowed[k] = {"cov", "b", "c", "p", "ll_tilde", "r", "q"} | ({"m"} if k >= 2 else set())
    return allowed


def allowed_fields(layout: PartitionLayout, mode: str) -> dict[str, set[str]]:
    """Fields each party is entitled to receive during one evaluation."""
    out: dict[str, set[str]] = {CENTRAL: set(), **{nm: set() for nm in layout.names}}
    if mode == "horizontal":
        for nm in layout.names:
            out[nm] = {"mean", "cov", "sum_token"}
        out[CENTRAL] = {"sum_token"}
        return out
    plan = plan_subroutines(layout)
    single = mode == "vertical"
    for band in plan.bands:
        for pos, fields_ in _allowed_vertical(len(band.chain), single).items():
            name = CENTRAL if pos == CENTRAL else band.node_names[pos]
            out[name] |= fields_
    if not single:
        out[CENTRAL].add("sum_token")
        for nm in plan.first_nodes():
            out[nm].add("sum_token")
    return out


def _mode_of(msgs: list[ProtocolMessage]) -> str:
    if any(isinstance(m.payload, FullParams) for m in msgs):
        return "horizontal"
    if any(parse_band(m.eval_id) is not None for m in msgs):
        return "banded"
    return "vertical"


# -- the audit ----------------------------------------------------------------


class _Collector:
    def __init__(self, delta: float):
        self.delta = delta
        self.details: list[Margin] = []
        self.violations: list[Violation] = []

    def add(self, msg: ProtocolMessage, fld: str, cls: str, view: str, margin: float, scale: float = 1.0):
        self.details.append(Margin(msg.msg_id, fld, cls, view, margin))
        # rounding slack so a zero-noise run counts as exposed and a masked one does not
        tol = 1e-9 * max(1.0, scale)
        if margin <= self.delta + tol:
            self.violations.append(Violation(msg.msg_id, fld, f"{view} is within {margin:.3g} of the true {cls}", cls))


def _scan_raw(col: _Collector, msg: ProtocolMessage, truth: _BandTruth, names: list[str], n: int,
              units: Mapping[str, np.ndarray] | None = None) -> None:
    """Look for any other node's data column inside any transmitted matrix.

    ``units`` overrides a field with its data-scale version (bundles are
    compared after multiplying by the sender's covariance block).
    """
    others = [(k, x) for k, x in enumerate(truth.x) if names[k] != msg.receiver]
    for fld in msg.payload.present_fields():
        value = (units or {}).get(fld, getattr(msg.payload, fld))
        if not isinstance(value, np.ndarray):
            continue
        cols = []
        if value.shape[0] == n:
            cols += [value[:, j] for j in range(value.shape[1])]
        if value.shape[1] == n and value.shape[0] != n:
            cols += [value[j, :] for j in range(value.shape[0])]
        if not cols or not others:
            continue
        best = min(_rms(c, x[:, j]) for c in cols for _, x in others for j in range(x.shape[1]))
        scale = max(float(np.max(np.abs(x))) for _, x in others)
        col.add(msg, fld, "raw_data", "transmitted columns", best, scale)


def _audit_band(col: _Collector, msgs: list[ProtocolMessage], truth: _BandTruth, names: list[str],
                params_mean: np.ndarray) -> None:
    K = len(names)
    n = truth.x[0].shape[0]
    pos = {nm: k for k, nm in enumerate(names)}
    noise: dict[int, np.ndarray] = {}
    guess: dict[int, np.ndarray] = {}
    chain: dict[int, ChainForward] = {}
    for m in msgs:
        p = m.payload
        if isinstance(p, MarginalParams):
            noise[K - 1] = p.p_last
            guess[0] = p.mu_tilde
        elif isinstance(p, CentralForward):
            k = pos[m.receiver]
            noise[k - 1] = p.p
            guess[k] = p.b[:, : truth.x[k].shape[1]]
        elif isinstance(p, ChainForward):
            chain[pos[m.receiver]] = p
    for m in msgs:
        p = m.payload
        units = None
        if isinstance(p, BundleUp):
            s = truth.covs[pos[m.sender]]
            units = {"a1": s @ p.a1, "a2": s @ p.a2}
        _scan_raw(col, m, truth, names, n, units)
        if isinstance(p, MarginalParams):
            col.add(m, "mu_tilde", "cond_mean", "noisy mean", _rms(p.mu_tilde, truth.own_mean[0]),
                    float(np.max(np.abs(truth.own_mean[0]))))
        elif isinstance(p, BundleUp):
            k = pos[m.sender]
            s = truth.covs[k]
            # margins in data units: S_k A against the true centred block
            resid = s @ truth.bundle[k]
            scale = float(np.max(np.abs(resid)))
            col.add(m, "a1", "bundle", "A1", _rms(s @ p.a1, resid), scale)
            col.add(m, "a2", "bundle", "A2", _rms(s @ p.a2, resid), scale)
            if k in guess:
                recon = (s @ p.a1).T + guess[k]
                xscale = float(np.max(np.abs(truth.x[k])))
                col.add(m, "a1", "raw_data", "central reconstruction", _rms(recon, truth.x[k]), xscale)
                diff = recon - (s @ (p.a1 - p.a2)).T / 2
                col.add(m, "a1-a2", "raw_data", "differencing A1 and A2", _rms(diff, truth.x[k]), xscale)
        elif isinstance(p, CentralForward):
            k = pos[m.receiver]
            col.add(m, "b", "cond_mean", "B", _rms(p.b, truth.tail_mean[k - 1]),
                    float(np.max(np.abs(truth.tail_mean[k - 1]))))
            cf = chain.get(k)
            if cf is not None:
                derived = p.b - (cf.r - p.p) @ p.c
                if cf.m is not None:
                    derived = derived - cf.m
                col.add(m, "b", "cond_mean", f"{m.receiver} de-noised B", _rms(derived, truth.tail_mean[k - 1]),
                        float(np.max(np.abs(truth.tail_mean[k - 1]))))
        elif isinstance(p, CondMeanUp):
            k = pos[m.sender]
            col.add(m, "mu_star", "cond_mean", "uploaded mean", _rms(p.mu_star, truth.tail_mean[k]),
                    float(np.max(np.abs(truth.tail_mean[k]))))
        elif isinstance(p, ChainForward):
            k = pos[m.sender]
            true = truth.running_ll[k]
            col.add(m, "ll_tilde", "partial_ll", "running total", abs(p.ll_tilde - true), abs(true))
            if k in noise:
                view = p.ll_tilde + chain_correction(noise[k], p.q)
                col.add(m, "ll_tilde", "partial_ll", f"{m.receiver} adjusted total", abs(view - true), abs(true))
        elif isinstance(p, FinalToFirst):
            true = truth.running_ll[K - 1]
            col.add(m, "ll_tilde", "partial_ll", "chain total", abs(p.ll_tilde - true), abs(true))
            if K - 1 in noise:
                view = p.ll_tilde + chain_correction(noise[K - 1], p.q)
                col.add(m, "ll_tilde", "partial_ll", "first node adjusted total", abs(view - true), abs(true))


def _audit_ring(col: _Collector, tokens: list[ProtocolMessage], partials: Mapping[str, float],
                order: list[str]) -> None:
    """Each hop of a masked ring against the true partial sum it carries."""
    for m in tokens:
        if m.receiver == CENTRAL:
            continue
        upto = order[: order.index(m.sender) + 1]
        true = sum(partials.get(nm, 0.0) for nm in upto)
        hi, lo = dd_add(m.payload.value, m.payload.low, -true)
        col.add(m, "sum_token", "partial_ll", "ring token", abs(hi + lo), abs(true))


def audit_transcript(transcript: Transcript, pooled: np.ndarray, params, layout: PartitionLayout,
                     noise_scale: float, threshold: float = DEFAULT_THRESHOLD) -> LeakageReport:
    """Audit every evaluation in ``transcript``.

    ``params`` is one ``ParameterSet`` for all evaluations or a mapping from
    evaluation id to the parameters that evaluation used.
    """
    pooled = np.asarray(pooled, dtype=float)
    if pooled.shape != (layout.n, layout.p):
        raise AuditError(f"oracle data is {pooled.shape}, layout is {layout.n}x{layout.p}")
    if noise_scale < 0 or threshold <= 0:
        raise AuditError("noise scale must be non-negative and the threshold positive")
    delta = threshold * noise_scale
    col = _Collector(delta)
    plan = plan_subroutines(layout)
    observed: dict[str, set[str]] = {CENTRAL: set(), **{nm: set() for nm in layout.names}}
    allowed: dict[str, set[str]] = {CENTRAL: set(), **{nm: set() for nm in layout.names}}
    notes = []
    chained = False
    for eid in transcript.eval_ids():
        msgs = [m for m in transcript.messages if root_eval_id(m.eval_id) == eid]
        prm = params.get(eid) if isinstance(params, Mapping) else params
        if not isinstance(prm, ParameterSet) or prm.p != layout.p:
            raise AuditError(f"no matching parameters for evaluation {eid}")
        mode = _mode_of(msgs)
        for nm, flds in allowed_fields(layout, mode).items():
            allowed[nm] |= flds
        for m in msgs:
            if m.receiver not in observed:
                raise AuditError(f"message {m.msg_id} goes to a party outside the layout")
            got = _fields(m)
            observed[m.receiver] |= got
            legal = allowed_fields(layout, mode)[m.receiver]
            for f in sorted(got - legal):
                col.violations.append(Violation(m.msg_id, f, f"{m.receiver} may not receive {f}"))
        if mode == "horizontal":
            partials = {nd.name: log_likelihood(prm, pooled[list(nd.rows)]) for nd in layout.nodes}
            tokens = [m for m in msgs if isinstance(m.payload, SumToken)]
            _audit_ring(col, tokens, partials, layout.names)
            continue
        chained = True
        sessions: dict[str, list[ProtocolMessage]] = {}
        for m in msgs:
            sessions.setdefault(m.eval_id, []).append(m)
        band_totals: dict[str, float] = {}
        for sid, smsgs in sessions.items():
            if sid.endswith("-sum"):
                continue
            b = parse_band(sid) or 0
            band = plan.bands[b]
            truth = _band_truth(prm, pooled, band)
            _audit_band(col, smsgs, truth, band.node_names, prm.mean)
            first = band.node_names[0]
            band_totals[first] = band_totals.get(first, 0.0) + truth.running_ll[-1]
        if mode == "banded":
            tokens = [m for m in msgs if m.eval_id.endswith("-sum")]
            _audit_ring(col, tokens, band_totals, [CENTRAL] + plan.first_nodes())
    if chained:
        notes.append("the first node of each chain can estimate its own mean noise from its sample mean; "
                     "recorded, not flagged")
    margins: dict[str, float] = {}
    for d in col.details:
        margins[d.cls] = min(margins.get(d.cls, np.inf), d.margin)
    flagged = {v.cls for v in col.violations if v.cls}
    exposed = {cls: cls in flagged for cls in margins}
    received = {nm: {"observed": sorted(observed[nm]), "allowed": sorted(allowed[nm])} for nm in observed}
    for nm, sets in received.items():
        if sets["observed"] != sets["allowed"]:
            missing = sorted(set(sets["allowed"]) - set(sets["observed"]))
            if missing:
                col.violations.append(Violation("-", ",".join(missing), f"{nm} never received expected fields"))
    return LeakageReport(noise_scale, delta, received, col.violations, margins, exposed, col.details, notes)


# -- collusion ----------------------------------------------------------------


@dataclass
class CollusionResult:
    colluders: tuple[str, ...]
    recovered: dict[str, float]       # "total" or "+"-joined node names -> recovered log-likelihood sum


def collusion_demo(transcript: Transcript, colluders: Iterable[str], eval_id: str | None = None) -> CollusionResult:
    """What a coalition learns by pooling its views of a horizontal secure-sum round.

    Within the ring, the coalition knows every token its members sent and
    received. For each run of outsiders between two members, the token
    entering the later member minus the token leaving the earlier one is the
    outsiders' summed log-likelihood, unless the run contains the masking
    initiator (its mask does not cancel). A run covering every outsider
    restates what the lone member already knows, so a single member recovers
    nothing.
    """
    colluders = tuple(sorted(set(colluders)))
    ids = transcript.eval_ids() if eval_id is None else [eval_id]
    if len(ids) != 1:
        raise AuditError("name one evaluation for the collusion demo")
    msgs = [m for m in transcript.messages if root_eval_id(m.eval_id) == ids[0]]
    tokens = [m for m in msgs if isinstance(m.payload, SumToken) and m.eval_id == ids[0]]
    if not tokens or not any(isinstance(m.payload, FullParams) for m in msgs):
        raise AuditError("collusion demo needs a horizontal secure-sum transcript")
    order = [m.receiver for m in sorted((m for m in msgs if isinstance(m.payload, FullParams)),
                                        key=lambda m: m.msg_id)]
    order = _ring_order(tokens, order)
    recovered: dict[str, float] = {}
    if CENTRAL in colluders:
        final = [m for m in tokens if m.receiver == CENTRAL]
        if final:
            recovered["total"] = final[0].payload.value
    members = [i for i, nm in enumerate(order) if nm in colluders]
    sent = {m.sender: m for m in tokens if m.receiver != CENTRAL}
    got = {m.receiver: m for m in tokens if m.receiver != CENTRAL}
    initiator = order[0]
    for a, b in zip(members, members[1:] + members[:1]):
        gap = [order[i % len(order)] for i in range(a + 1, b if b > a else b + len(order))]
        if len(members) < 2 or not gap or initiator in gap:
            continue
        out_tok, in_tok = sent[order[a]].payload, got[order[b]].payload
        hi, lo = dd_add(in_tok.value, in_tok.low, -out_tok.value)
        recovered["+".join(gap)] = hi + (lo - out_tok.low)
    return CollusionResult(colluders, recovered)


def _ring_order(tokens: list[ProtocolMessage], names: list[str]) -> list[str]:
    first = min((m for m in tokens if m.receiver != CENTRAL), key=lambda m: m.round).sender
    nxt = {m.sender: m.receiver for m in tokens if m.receiver != CENTRAL}
    order = [first]
    while nxt.get(order[-1]) not in (None, first):
        order.append(nxt[order[-1]])
    if sorted(order) != sorted(names):
        raise AuditError("ring tokens do not visit every node once")
    return order
