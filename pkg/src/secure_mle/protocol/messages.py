"""Typed payloads, the message envelope, wire codecs and transcripts.

Every payload field is a float64 matrix, a float scalar, or absent. There is
no payload type that carries a node's observation matrix, so raw data cannot
be addressed to another node by construction.

Binary layout (all little-endian)::

    u8   format version
    str  msg_id, eval_id          (str = u16 byte length + utf-8)
    u32  round
    str  sender, receiver, kind
    u16  field count
    per field, in the payload's declared order:
        str name
        u8  tag: 0 absent, 1 scalar, 2 matrix
        f64 value                 (tag 1)
        u32 rows, u32 cols, rows*cols f64 in row-major order  (tag 2)
"""

from __future__ import annotations

import functools
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import ClassVar, Iterable, Iterator

import numpy as np

from ..errors import ReplayError, ShapeError

WIRE_VERSION = 1


def _freeze(value):
    if value is None:
        return None
    if isinstance(value, np.ndarray):
        arr = np.asarray(value, dtype="<f8", order="C")
        if arr.flags.writeable or arr is value and value.base is not None and value.base.flags.writeable:
            # detach from anything the caller might still mutate
            arr = arr.copy()
        if arr.ndim != 2:
            raise ShapeError(f"payload matrices must be 2-d, got {arr.ndim}-d")
        arr.setflags(write=False)
        return arr
    return float(value)


@dataclass(frozen=True)
class Payload:
    kind: ClassVar[str] = ""
    # protocol step number, used to order messages canonically within a round
    step: ClassVar[int] = 0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _freeze(getattr(self, f.name)))

    def present_fields(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name) is not None]


@dataclass(frozen=True)
class MarginalParams(Payload):
    """Central -> first node: own covariance block, noisy mean, last node's P."""

    kind: ClassVar[str] = "marginal_params"
    step: ClassVar[int] = 2
    cov: np.ndarray
    mu_tilde: np.ndarray
    p_last: np.ndarray


@dataclass(frozen=True)
class BundleUp(Payload):
    kind: ClassVar[str] = "bundle_up"
    step: ClassVar[int] = 4
    a1: np.ndarray
    a2: np.ndarray


@dataclass(frozen=True)
class ChainForward(Payload):
    kind: ClassVar[str] = "chain_forward"
    step: ClassVar[int] = 5
    ll_tilde: float
    r: np.ndarray
    q: np.ndarray
    m: np.ndarray | None = None


@dataclass(frozen=True)
class CentralForward(Payload):
    kind: ClassVar[str] = "central_forward"
    step: ClassVar[int] = 8
    cov: np.ndarray
    b: np.ndarray
    c: np.ndarray
    p: np.ndarray


@dataclass(frozen=True)
class CondMeanUp(Payload):
    kind: ClassVar[str] = "cond_mean_up"
    step: ClassVar[int] = 13
    mu_star: np.ndarray


@dataclass(frozen=True)
class FinalToFirst(Payload):
    kind: ClassVar[str] = "final_to_first"
    step: ClassVar[int] = 17
    ll_tilde: float
    q: np.ndarray


@dataclass(frozen=True)
class CleanRequest(Payload):
    kind: ClassVar[str] = "clean_request"
    step: ClassVar[int] = 19
    ll_star: float


@dataclass(frozen=True)
class FullParams(Payload):
    """Central -> every node of a horizontal layout: the full parameter set."""

    kind: ClassVar[str] = "full_params"
    step: ClassVar[int] = 1
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class SumToken(Payload):
    """Ring token of a masked sum, carried as an unevaluated ``value + low`` pair."""

    kind: ClassVar[str] = "sum_token"
    step: ClassVar[int] = 30
    value: float
    low: float = 0.0


@dataclass(frozen=True)
class Abort(Payload):
    """Control message: a node failed and the evaluation is void."""

    kind: ClassVar[str] = "abort"
    step: ClassVar[int] = 99
    code: float = 0.0


PAYLOAD_TYPES: dict[str, type[Payload]] = {
    cls.kind: cls
    for cls in (MarginalParams, BundleUp, ChainForward, CentralForward, CondMeanUp, FinalToFirst,
                CleanRequest, FullParams, SumToken, Abort)
}


@dataclass(frozen=True)
class ProtocolMessage:
    msg_id: str
    eval_id: str
    round: int
    sender: str
    receiver: str
    payload: Payload

    @property
    def kind(self) -> str:
        return self.payload.kind

    @classmethod
    def build(cls, eval_id: str, round: int, sender: str, receiver: str, payload: Payload,
              step: int | None = None) -> "ProtocolMessage":
        step = payload.step if step is None else step
        msg_id = f"{eval_id}/{round:03d}/{step:02d}/{sender}>{receiver}"
        return cls(msg_id, eval_id, round, sender, receiver, payload)

    # -- binary -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [_U8.pack(WIRE_VERSION), _str(self.msg_id), _str(self.eval_id), _U32.pack(self.round),
                 _str(self.sender), _str(self.receiver), _str(self.kind)]
        flds = _field_names(type(self.payload))
        parts.append(_U16.pack(len(flds)))
        for name in flds:
            parts.append(_str(name))
            value = getattr(self.payload, name)
            if value is None:
                parts.append(b"\x00")
            elif isinstance(value, np.ndarray):
                parts.append(b"\x02" + _SHAPE.pack(*value.shape))
                parts.append(value.astype("<f8", copy=False).tobytes(order="C"))
            else:
                parts.append(b"\x01" + _F64.pack(value))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtocolMessage":
        buf = bytes(data)
        pos = 0

        def take(st):
            nonlocal pos
            vals = st.unpack_from(buf, pos)
            pos += st.size
            return vals

        def take_str():
            nonlocal pos
            (length,) = _U16.unpack_from(buf, pos)
            pos += 2
            if pos + length > len(buf):
                raise ValueError("string runs past the end of the message")
            s = buf[pos:pos + length].decode("utf-8")
            pos += length
            return s

        try:
            (version,) = take(_U8)
            if version != WIRE_VERSION:
                raise ValueError(f"unsupported wire version {version}")
            msg_id, eval_id = take_str(), take_str()
            (rnd,) = take(_U32)
            sender, receiver, kind = take_str(), take_str(), take_str()
            ptype = PAYLOAD_TYPES[kind]
            (count,) = take(_U16)
            values = {}
            for _ in range(count):
                name = take_str()
                (tag,) = take(_U8)
                if tag == 0:
                    values[name] = None
                elif tag == 1:
                    (values[name],) = take(_F64)
                elif tag == 2:
                    rows, cols = take(_SHAPE)
                    nbytes = 8 * rows * cols
                    if pos + nbytes > len(buf):
                        raise ValueError("matrix runs past the end of the message")
                    values[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
                    pos += nbytes
                else:
                    raise ValueError(f"bad field tag {tag}")
            if pos != len(buf):
                raise ValueError("trailing bytes after message")
            return cls(msg_id, eval_id, rnd, sender, receiver, ptype(**values))
        except (struct.error, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed message: {exc}") from exc

    # -- json ---------------------------------------------------------------

    def to_record(self) -> dict:
        payload = {}
        for f in fields(self.payload):
            value = getattr(self.payload, f.name)
            if isinstance(value, np.ndarray):
                payload[f.name] = {"shape": list(value.shape), "data": value.reshape(-1).tolist()}
            else:
                payload[f.name] = value
        return {
            "msg_id": self.msg_id,
            "eval_id": self.eval_id,
            "round": self.round,
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "payload": payload,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ProtocolMessage":
        ptype = PAYLOAD_TYPES[rec["kind"]]
        values = {}
        for name, value in rec["payload"].items():
            if isinstance(value, dict):
                values[name] = np.array(value["data"], dtype=float).reshape(value["shape"])
            else:
                values[name] = value
        return cls(rec["msg_id"], rec["eval_id"], int(rec["round"]), rec["sender"], rec["receiver"], ptype(**values))

    def to_json(self) -> str:
        return json.dumps(self.to_record(), separators=(",", ":"))


_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_SHAPE = struct.Struct("<II")


def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U16.pack(len(raw)) + raw


@functools.lru_cache(maxsize=None)
def _field_names(ptype: type) -> tuple[str, ...]:
    return tuple(f.name for f in fields(ptype))


@dataclass(frozen=True)
class TranscriptEntry:
    message: ProtocolMessage
    sent_at: float = 0.0


class Transcript:
    """Ordered log of every message of one or more evaluations.

    Entries are kept in canonical order (by ``msg_id``) so two runs of the
    same evaluation produce the same transcript whatever the delivery order.
    ``sent_at`` is a logical clock on the in-process bus and wall time on TCP.
    """

    def __init__(self, entries: Iterable[TranscriptEntry] = ()):
        self._entries: list[TranscriptEntry] = list(entries)
        self._sorted = False

    def record(self, message: ProtocolMessage, sent_at: float = 0.0) -> None:
        self._entries.append(TranscriptEntry(message, sent_at))
        self._sorted = False

    def extend(self, other: "Transcript") -> None:
        self._entries.extend(other.entries)
        self._sorted = False

    @property
    def entries(self) -> list[TranscriptEntry]:
        if not self._sorted:
            self._entries.sort(key=lambda e: e.message.msg_id)
            self._sorted = True
        return self._entries

    @property
    def messages(self) -> list[ProtocolMessage]:
        return [e.message for e in self.entries]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ProtocolMessage]:
        return iter(self.messages)

    def eval_ids(self) -> list[str]:
        """Top-level evaluation ids (band and ring suffixes stripped)."""
        seen: dict[str, None] = {}
        for m in self.messages:
            seen.setdefault(root_eval_id(m.eval_id), None)
        return list(seen)

    def for_eval(self, eval_id: str) -> "Transcript":
        return Transcript(e for e in self.entries if root_eval_id(e.message.eval_id) == eval_id)

    def received_by(self, node: str) -> list[ProtocolMessage]:
        return [m for m in self.messages if m.receiver == node]

    def to_jsonl(self, with_time: bool = False) -> str:
        lines = []
        for e in self.entries:
            rec = e.message.to_record()
            if with_time:
                rec["sent_at"] = e.sent_at
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path, with_time: bool = False) -> None:
        Path(path).write_text(self.to_jsonl(with_time))

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append(TranscriptEntry(ProtocolMessage.from_record(rec), float(rec.get("sent_at", 0.0))))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ReplayError(f"transcript line {lineno} is malformed: {exc}") from exc
        return cls(entries)

    @classmethod
    def load(cls, path) -> "Transcript":
        return cls.from_jsonl(Path(path).read_text())


def root_eval_id(eval_id: str) -> str:
    return eval_id.split("-", 1)[0]


def band_eval_id(eval_id: str, band: int) -> str:
    return f"{eval_id}-b{band:02d}"


def ring_eval_id(eval_id: str) -> str:
    return f"{eval_id}-sum"


def parse_band(eval_id: str) -> int | None:
    """Band index encoded in a session id, or ``None`` for single-band and ring sessions."""
    parts = eval_id.split("-", 1)
    if len(parts) == 2 and parts[1].startswith("b"):
        return int(parts[1][1:])
    return None
