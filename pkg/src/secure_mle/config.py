"""Run configuration read from a TOML file.

Relative paths are resolved against the directory holding the file.

    layout = "layout.json"
    seed = 7
    noise_scale = 1000.0        # omit for the default
    transport = "in_process"    # or "tcp"

    [data]                      # node name -> CSV
    node1 = "node1.csv"

    [ingest]
    id_column = "id"
    impute = false

    [model]
    kind = "saturated"          # or "lgm"

    [optimizer]                 # any OptimizerConfig field
    max_evals = 20000

    [endpoints]                 # tcp only: node name -> "host:port"
    node1 = "127.0.0.1:9101"

    [output]
    result = "result.json"
    table = "result.txt"
    transcript = ""             # optional JSONL of every message
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError
from .optimize import OptimizerConfig
from .transport import TransportConfig


@dataclass
class OutputConfig:
    result: Path | None = None
    table: Path | None = None
    transcript: Path | None = None


@dataclass
class RunConfig:
    layout: Path
    data: dict[str, Path] = field(default_factory=dict)
    model: str = "saturated"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    noise_scale: float | None = None
    seed: int = 0
    transport: str = "in_process"
    endpoints: dict[str, tuple[str, int]] = field(default_factory=dict)
    timeout_ms: int = 30_000
    id_column: str = "id"
    impute: bool = False
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.model not in ("saturated", "lgm"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.noise_scale is not None and self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")

    def check_files(self, need_data: bool = True) -> None:
        if not self.layout.is_file():
            raise ConfigError(f"layout file {self.layout} does not exist")
        if need_data:
            for name, path in self.data.items():
                if not path.is_file():
                    raise ConfigError(f"data file for {name} ({path}) does not exist")

    def transport_config(self) -> TransportConfig:
        return TransportConfig(kind=self.transport, endpoints=dict(self.endpoints), timeout_ms=self.timeout_ms)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = tomli.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "RunConfig":
        raw = dict(raw)

        def resolve(p):
            return None if p in (None, "") else (base / str(p)).resolve()

        known = {"layout", "data", "model", "optimizer", "noise_scale", "seed", "transport", "endpoints",
                 "timeout_ms", "ingest", "output"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "layout" not in raw:
            raise ConfigError("config needs a layout")
        model = raw.get("model", {})
        if isinstance(model, dict):
            model = model.get("kind", "saturated")
        opt_raw = dict(raw.get("optimizer", {}))
        names = {f.name for f in dataclasses.fields(OptimizerConfig)}
        if set(opt_raw) - names:
            raise ConfigError(f"unknown optimizer keys {sorted(set(opt_raw) - names)}")
        ingest = raw.get("ingest", {})
        out = raw.get("output", {})
        try:
            return cls(
                layout=resolve(raw["layout"]),
                data={str(k): resolve(v) for k, v in raw.get("data", {}).items()},
                model=str(model),
                optimizer=OptimizerConfig(**opt_raw),
                noise_scale=None if raw.get("noise_scale") is None else float(raw["noise_scale"]),
                seed=int(raw.get("seed", 0)),
                transport=str(raw.get("transport", "in_process")),
                endpoints={str(k): parse_endpoint(v) for k, v in raw.get("endpoints", {}).items()},
                timeout_ms=int(raw.get("timeout_ms", 30_000)),
                id_column=str(ingest.get("id_column", "id")),
                impute=bool(ingest.get("impute", False)),
                output=OutputConfig(resolve(out.get("result")), resolve(out.get("table")),
                                    resolve(out.get("transcript"))),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = str(text).rpartition(":")
    if not sep or not host:
        raise ConfigError(f"endpoint {text!r} is not host:port")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"endpoint {text!r} has a bad port") from None
