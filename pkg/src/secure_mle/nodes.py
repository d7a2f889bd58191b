"""Reactive node state machines.

A node never calls another node. It consumes one ``ProtocolMessage`` at a
time through ``handle`` and returns the messages it wants sent, so the same
objects run unchanged on the in-process bus and behind TCP sockets.

Session ids:

* ``e000001``: a whole vertical evaluation, or a horizontal secure-sum round;
* ``e000001-b03``: band 3 of a complex layout;
* ``e000001-sum``: the ring combining the band totals of a complex layout.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import LayoutError, ProtocolAborted, ProtocolOrderError, ShapeError
from .mvn import DataPartition, ParameterSet, log_likelihood
from .partition import Band, PartitionLayout, plan_subroutines
from .primitives import dd_add, draw_mask, unmask
from .protocol.messages import (
    Abort,
    BundleUp,
    CentralForward,
    ChainForward,
    CleanRequest,
    CondMeanUp,
    FinalToFirst,
    FullParams,
    MarginalParams,
    ProtocolMessage,
    SumToken,
    band_eval_id,
    parse_band,
    ring_eval_id,
    root_eval_id,
)
from .protocol.steps import cn_adjust, cn_initiate, en_adjust, en_compute, fn_adjust, total_central_correction

log = logging.getLogger(__name__)

CENTRAL = "central"

# later-round steps of the chain loop, so messages sort in protocol order
STEP_BUNDLE_LOOP = 11
STEP_CHAIN_LOOP = 14
STEP_RESULT = 31


def session_rng(seed: int, node: str, eval_id: str) -> np.random.Generator:
    """Independent stream per (seed, node, session); identical on every transport."""
    digest = hashlib.sha256(f"{seed}|{node}|{eval_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def default_mask_scale(noise_scale: float) -> float:
    return float(noise_scale) ** 2


def _resolve_seed(seed: int | None) -> int:
    return int(np.random.SeedSequence().entropy) if seed is None else int(seed)


def _band_of(plan, eval_id: str) -> tuple[int, Band]:
    b = parse_band(eval_id)
    if b is None:
        if len(plan.bands) != 1:
            raise ProtocolOrderError(f"session {eval_id} names no band but the layout has {len(plan.bands)}")
        b = 0
    if not 0 <= b < len(plan.bands):
        raise ProtocolOrderError(f"session {eval_id} names unknown band {b}")
    return b, plan.bands[b]


def _msg(eval_id, rnd, sender, receiver, payload, step=None) -> ProtocolMessage:
    return ProtocolMessage.build(eval_id, rnd, sender, receiver, payload, step)


@dataclass
class _Ring:
    order: list[str]
    token: tuple[float, float] | None = None
    hop: int = 0
    values: dict[int, float] = field(default_factory=dict)


class DataNode:
    """A party holding one partition; computes masked contributions only."""

    def __init__(self, name: str, layout: PartitionLayout, data: DataPartition, noise_scale: float = 1e3,
                 seed: int | None = None, mask_scale: float | None = None):
        spec = layout.node(name)
        if tuple(data.col_ids) != spec.cols:
            raise LayoutError(f"node {name!r} holds columns {data.col_ids}, layout says {spec.cols}")
        if sorted(data.row_ids) != list(spec.rows):
            raise LayoutError(f"node {name!r} holds rows that do not match the layout")
        if noise_scale < 0:
            raise ValueError("noise scale must be non-negative")
        self.name = name
        self.layout = layout
        self.data = data
        self.noise_scale = float(noise_scale)
        self.mask_scale = default_mask_scale(noise_scale) if mask_scale is None else float(mask_scale)
        self.seed = _resolve_seed(seed)
        self.plan = plan_subroutines(layout)
        self._band_rows = {b: self.data.select_rows(band.rows).rows
                           for b, band in enumerate(self.plan.bands) if name in band.node_names}
        self._sessions: dict[str, dict] = {}
        self._rngs: dict[str, np.random.Generator] = {}
        self._rings: dict[str, _Ring] = {}
        self._horizontal: dict[str, dict] = {}

    # -- bookkeeping --------------------------------------------------------

    def _rng(self, eval_id: str) -> np.random.Generator:
        if eval_id not in self._rngs:
            self._rngs[eval_id] = session_rng(self.seed, self.name, eval_id)
        return self._rngs[eval_id]

    def _close(self, eval_id: str) -> None:
        self._sessions.pop(eval_id, None)
        self._rngs.pop(eval_id, None)

    def drop(self, root: str) -> None:
        """Forget every session of one evaluation (after an abort)."""
        for store in (self._sessions, self._rngs, self._rings, self._horizontal):
            for key in [k for k in store if root_eval_id(k) == root]:
                del store[key]

    @property
    def open_sessions(self) -> list[str]:
        return sorted(set(self._sessions) | set(self._rings) | set(self._horizontal))

    def handle(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        if msg.receiver != self.name:
            raise ProtocolOrderError(f"{self.name} got a message addressed to {msg.receiver}")
        p = msg.payload
        if isinstance(p, Abort):
            self.drop(root_eval_id(msg.eval_id))
            return []
        if isinstance(p, FullParams) or (isinstance(p, SumToken) and msg.eval_id == root_eval_id(msg.eval_id)):
            return self._horizontal_step(msg)
        if isinstance(p, SumToken):
            return self._ring_token(msg)
        return self._vertical_step(msg)

    # -- vertical chain -----------------------------------------------------

    def _session(self, eval_id: str) -> dict:
        s = self._sessions.get(eval_id)
        if s is None:
            b, band = _band_of(self.plan, eval_id)
            if self.name not in band.node_names:
                raise ProtocolOrderError(f"{self.name} takes no part in band {b}")
            s = {"band": b, "k": band.position(self.name), "K": len(band.chain),
                 "x": self._band_rows[b], "inbox": {}}
            self._sessions[eval_id] = s
        return s

    def _vertical_step(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        s = self._session(msg.eval_id)
        kind = msg.kind
        if kind in s["inbox"]:
            raise ProtocolOrderError(f"{self.name} got a second {kind} in {msg.eval_id}")
        s["inbox"][kind] = msg.payload
        k, K = s["k"], s["K"]
        if k == 0:
            if kind == MarginalParams.kind:
                return self._first_compute(msg.eval_id, s)
            if kind == FinalToFirst.kind:
                return self._first_finish(msg.eval_id, s)
        elif kind in (ChainForward.kind, CentralForward.kind):
            if ChainForward.kind in s["inbox"] and CentralForward.kind in s["inbox"]:
                return self._chain_step(msg.eval_id, s)
            return []
        raise ProtocolOrderError(f"{self.name} (position {k + 1} of {K}) cannot accept {kind}")

    def _band_names(self, s) -> list[str]:
        return self.plan.bands[s["band"]].node_names

    def _first_compute(self, eval_id, s) -> list[ProtocolMessage]:
        mp: MarginalParams = s["inbox"][MarginalParams.kind]
        res = en_compute(mp.mu_tilde, mp.cov, s["x"], None, self._rng(eval_id), self.noise_scale)
        names = self._band_names(s)
        out = [_msg(eval_id, 1, self.name, CENTRAL, BundleUp(res.a1, res.a2))]
        if s["K"] == 1:
            ll_star = fn_adjust(res.ll_running, mp.p_last, res.q)
            return out + self._deliver(eval_id, s, ll_star)
        s["p_last"] = mp.p_last
        s["inbox"].clear()
        out.append(_msg(eval_id, 1, self.name, names[1], ChainForward(res.ll_running, res.r, res.q)))
        return out

    def _first_finish(self, eval_id, s) -> list[ProtocolMessage]:
        if "p_last" not in s:
            raise ProtocolOrderError("final chain total arrived before the chain started")
        ff: FinalToFirst = s["inbox"][FinalToFirst.kind]
        return self._deliver(eval_id, s, fn_adjust(ff.ll_tilde, s["p_last"], ff.q))

    def _chain_step(self, eval_id, s) -> list[ProtocolMessage]:
        chain: ChainForward = s["inbox"][ChainForward.kind]
        cf: CentralForward = s["inbox"][CentralForward.kind]
        k, K = s["k"], s["K"]
        rng = self._rng(eval_id)
        p_own = s["x"].shape[1]
        adj = en_adjust(cf.b, cf.c, chain.r, cf.p, chain.q, chain.ll_tilde, chain.m, p_own, rng, self.noise_scale)
        res = en_compute(adj.mu_tilde_own, cf.cov, s["x"], adj.ll_star, rng, self.noise_scale)
        names = self._band_names(s)
        rnd = k + 1
        out = [_msg(eval_id, rnd, self.name, CENTRAL, BundleUp(res.a1, res.a2), STEP_BUNDLE_LOOP)]
        if k < K - 1:
            out.append(_msg(eval_id, rnd, self.name, CENTRAL, CondMeanUp(adj.mu_star_tail)))
            out.append(_msg(eval_id, rnd, self.name, names[k + 1],
                            ChainForward(res.ll_running, res.r, res.q, adj.m_new), STEP_CHAIN_LOOP))
        else:
            out.append(_msg(eval_id, K + 1, self.name, names[0], FinalToFirst(res.ll_running, res.q)))
        self._close(eval_id)
        return out

    def _deliver(self, eval_id, s, ll_star: float) -> list[ProtocolMessage]:
        """First node's band total: straight to the central node, or into the band ring."""
        self._close(eval_id)
        if parse_band(eval_id) is None:
            return [_msg(eval_id, s["K"] + 1, self.name, CENTRAL, CleanRequest(ll_star))]
        ring = self._ring_state(root_eval_id(eval_id))
        ring.values[s["band"]] = ll_star
        return self._ring_forward(root_eval_id(eval_id), ring)

    # -- ring over band totals ---------------------------------------------

    def _ring_state(self, root: str) -> _Ring:
        if root not in self._rings:
            self._rings[root] = _Ring([CENTRAL] + self.plan.first_nodes())
        return self._rings[root]

    def _ring_token(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        root = root_eval_id(msg.eval_id)
        ring = self._ring_state(root)
        if ring.token is not None:
            raise ProtocolOrderError(f"{self.name} got a second ring token for {root}")
        ring.token = (msg.payload.value, msg.payload.low)
        ring.hop = msg.round
        return self._ring_forward(root, ring)

    def _ring_forward(self, root: str, ring: _Ring) -> list[ProtocolMessage]:
        mine = [i for i, band in enumerate(self.plan.bands) if band.node_names[0] == self.name]
        if ring.token is None or any(b not in ring.values for b in mine):
            return []
        hi, lo = ring.token
        for b in mine:
            hi, lo = dd_add(hi, lo, ring.values[b])
        pos = ring.order.index(self.name)
        nxt = ring.order[(pos + 1) % len(ring.order)]
        del self._rings[root]
        return [_msg(ring_eval_id(root), ring.hop + 1, self.name, nxt, SumToken(hi, lo))]

    # -- horizontal secure sum ----------------------------------------------

    def _horizontal_step(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        eval_id = msg.eval_id
        s = self._horizontal.setdefault(eval_id, {})
        order = self.layout.names
        pos = order.index(self.name)
        if isinstance(msg.payload, FullParams):
            if "ll" in s:
                raise ProtocolOrderError(f"{self.name} got parameters twice for {eval_id}")
            params = ParameterSet(msg.payload.mean.reshape(-1), msg.payload.cov)
            if params.p != self.data.p:
                raise ShapeError(f"parameters have {params.p} variables, node holds {self.data.p}")
            s["ll"] = log_likelihood(params, self.data.rows)
            if pos == 0:
                s["mask"] = draw_mask(self._rng(eval_id), self.mask_scale)
                hi, lo = dd_add(*s["mask"], s["ll"])
                return [_msg(eval_id, 2, self.name, order[1], SumToken(hi, lo))]
        else:
            if "token" in s:
                raise ProtocolOrderError(f"{self.name} got a second token for {eval_id}")
            s["token"] = (msg.payload.value, msg.payload.low, msg.round)
        if "ll" not in s or "token" not in s:
            return []
        hi, lo, rnd = s.pop("token")
        del self._horizontal[eval_id]
        self._rngs.pop(eval_id, None)
        if pos == 0:
            total = unmask(hi, lo, s["mask"])
            return [_msg(eval_id, rnd + 1, self.name, CENTRAL, SumToken(total), STEP_RESULT)]
        hi, lo = dd_add(hi, lo, s["ll"])
        return [_msg(eval_id, rnd + 1, self.name, order[(pos + 1) % len(order)], SumToken(hi, lo))]


class CentralNode:
    """Coordinator: holds no data, proposes parameters, de-noises the final total."""

    name = CENTRAL

    def __init__(self, layout: PartitionLayout, noise_scale: float = 1e3, seed: int | None = None,
                 mask_scale: float | None = None):
        if noise_scale < 0:
            raise ValueError("noise scale must be non-negative")
        self.layout = layout
        self.noise_scale = float(noise_scale)
        self.mask_scale = default_mask_scale(noise_scale) if mask_scale is None else float(mask_scale)
        self.seed = _resolve_seed(seed)
        self.plan = plan_subroutines(layout)
        self._bands: dict[str, dict] = {}
        self._evals: dict[str, dict] = {}
        self.results: dict[str, float] = {}
        self.failures: dict[str, str] = {}

    def default_mode(self) -> str:
        return {"vertical": "vertical", "horizontal": "horizontal", "complex": "banded"}[self.layout.kind]

    def drop(self, root: str) -> None:
        self._evals.pop(root, None)
        for key in [k for k in self._bands if root_eval_id(k) == root]:
            del self._bands[key]

    @property
    def open_sessions(self) -> list[str]:
        return sorted(set(self._evals) | set(self._bands))

    # -- starting an evaluation --------------------------------------------

    def start(self, params: ParameterSet, eval_id: str, mode: str | None = None) -> list[ProtocolMessage]:
        if "-" in eval_id:
            raise ValueError("evaluation ids may not contain '-'")
        if eval_id in self._evals or eval_id in self.results:
            raise ProtocolOrderError(f"evaluation {eval_id} already started")
        if params.p != self.layout.p:
            raise ShapeError(f"parameters have {params.p} variables, layout has {self.layout.p}")
        mode = mode or self.default_mode()
        if mode == "horizontal":
            if self.layout.kind != "horizontal":
                raise LayoutError("a secure-sum round needs every node to hold every column")
            self._evals[eval_id] = {"mode": mode}
            mean = params.mean.reshape(1, -1)
            return [_msg(eval_id, 1, CENTRAL, nd, FullParams(mean, params.cov)) for nd in self.layout.names]
        if mode == "vertical":
            if len(self.plan.bands) != 1:
                raise LayoutError("layout does not reduce to a single vertical band")
            self._evals[eval_id] = {"mode": mode, "bands": [eval_id]}
            return self._start_band(params, eval_id, self.plan.bands[0])
        if mode != "banded":
            raise ValueError(f"unknown evaluation mode {mode!r}")
        sessions = [band_eval_id(eval_id, b) for b in range(len(self.plan.bands))]
        order = [CENTRAL] + self.plan.first_nodes()
        mask = draw_mask(session_rng(self.seed, CENTRAL, ring_eval_id(eval_id)), self.mask_scale)
        self._evals[eval_id] = {"mode": mode, "bands": sessions, "mask": mask}
        out = []
        for sid, band in zip(sessions, self.plan.bands):
            out += self._start_band(params, sid, band)
        out.append(_msg(ring_eval_id(eval_id), 1, CENTRAL, order[1], SumToken(*mask)))
        return out

    def _start_band(self, params: ParameterSet, sid: str, band: Band) -> list[ProtocolMessage]:
        sub = params.subset(band.column_order)
        rng = session_rng(self.seed, CENTRAL, sid)
        cs = cn_initiate(sub, band.sizes, band.n, rng, self.noise_scale)
        K = cs.K
        self._bands[sid] = {"cs": cs, "names": band.node_names, "a1": [None] * K, "a2": [None] * K,
                            "mu_star": [None] * K, "forwarded": [False] * K, "ll_star": None}
        first = band.node_names[0]
        return [_msg(sid, 1, CENTRAL, first, MarginalParams(cs.covs[0], cs.mu_tilde[0], cs.noise[K - 1]))]

    # -- message handling ---------------------------------------------------

    def handle(self, msg: ProtocolMessage) -> list[ProtocolMessage]:
        root = root_eval_id(msg.eval_id)
        if isinstance(msg.payload, Abort):
            reason = f"{msg.sender} aborted evaluation {root} (code {int(msg.payload.code)})"
            self.failures[root] = reason
            self.drop(root)
            raise ProtocolAborted(reason)
        if root not in self._evals:
            raise ProtocolOrderError(f"no open evaluation {root} for {msg.msg_id}")
        ev = self._evals[root]
        if isinstance(msg.payload, SumToken):
            if ev["mode"] == "horizontal":
                self._finish(root, msg.payload.value)
            else:
                ev["ring"] = unmask(msg.payload.value, msg.payload.low, ev["mask"])
                self._try_banded(root)
            return []
        st = self._bands.get(msg.eval_id)
        if st is None:
            raise ProtocolOrderError(f"no open band session {msg.eval_id}")
        names = st["names"]
        if msg.sender not in names:
            raise ProtocolOrderError(f"{msg.sender} is not part of {msg.eval_id}")
        k = names.index(msg.sender)
        p = msg.payload
        out: list[ProtocolMessage] = []
        if isinstance(p, BundleUp):
            if st["a1"][k] is not None:
                raise ProtocolOrderError(f"duplicate bundle from {msg.sender}")
            st["a1"][k], st["a2"][k] = p.a1, p.a2
            out = self._maybe_forward(msg.eval_id, st, k)
        elif isinstance(p, CondMeanUp):
            if k == 0 or k >= len(names) - 1:
                raise ProtocolOrderError(f"{msg.sender} may not upload a conditional mean")
            st["mu_star"][k] = p.mu_star
            out = self._maybe_forward(msg.eval_id, st, k)
        elif isinstance(p, CleanRequest):
            if ev["mode"] != "vertical" or k != 0:
                raise ProtocolOrderError(f"unexpected final total from {msg.sender}")
            st["ll_star"] = p.ll_star
        else:
            raise ProtocolOrderError(f"central node cannot accept {msg.kind}")
        if ev["mode"] == "vertical":
            self._try_vertical(root)
        else:
            self._try_banded(root)
        return out

    def _maybe_forward(self, sid: str, st: dict, k: int) -> list[ProtocolMessage]:
        cs = st["cs"]
        if k >= cs.K - 1 or st["forwarded"][k] or st["a1"][k] is None:
            return []
        if k == 0:
            tail = cs.tail_mu_tilde(0)
        elif st["mu_star"][k] is not None:
            tail = st["mu_star"][k]
        else:
            return []
        st["forwarded"][k] = True
        b = cn_adjust(st["a1"][k], tail, cs.crosses[k])
        st["mu_star"][k] = None
        payload = CentralForward(cs.covs[k + 1], b, cs.gains[k], cs.noise[k])
        return [_msg(sid, k + 2, CENTRAL, st["names"][k + 1], payload)]

    def _correction(self, sid: str) -> float | None:
        st = self._bands[sid]
        if any(a is None for a in st["a1"]):
            return None
        cs = st["cs"]
        return total_central_correction(cs.noise, st["a1"], st["a2"], cs.covs)

    def _try_vertical(self, root: str) -> None:
        st = self._bands[root]
        if st["ll_star"] is None:
            return
        corr = self._correction(root)
        if corr is not None:
            self._finish(root, st["ll_star"] - corr)

    def _try_banded(self, root: str) -> None:
        ev = self._evals[root]
        if "ring" not in ev:
            return
        corrs = [self._correction(sid) for sid in ev["bands"]]
        if any(c is None for c in corrs):
            return
        self._finish(root, ev["ring"] - sum(corrs))

    def _finish(self, root: str, value: float) -> None:
        self.results[root] = float(value)
        self.drop(root)
        log.debug("evaluation %s finished: %.10g", root, value)

    def pop_result(self, eval_id: str) -> float:
        if eval_id in self.failures:
            raise ProtocolAborted(self.failures.pop(eval_id))
        try:
            return self.results.pop(eval_id)
        except KeyError:
            raise ProtocolOrderError(f"evaluation {eval_id} has not finished") from None
