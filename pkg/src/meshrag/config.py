"""JSON configuration with flag > file > default layering.

Schema (every key optional)::

    {
      "backend":   {"transport": "http", "url": "http://host:port", "timeout": 300}
                 | {"transport": "subprocess", "command": ["prog", "arg"], "timeout": 300}
                 | {"transport": "oracle", "library": "dir/with/part_<id>.obj",
                    "match": "shape", "jitter": false, "latency": 0.0},
      "segmenter": {"transport": "builtin"} or any backend transport above,
      "batch_size": 8,
      "seed": 0,
      "segmentation": {"n_prompts": 64, "tau_nms": 0.5, "tau_merge": 0.5, "tau_recover": 0.7},
      "icp": {"max_iterations": 50, "max_correspondence_distance": 0.1,
              "convergence_tol": 1e-6, "sample_count": 8192, "scale_refits": 2},
      "metrics": {"sample_count": 8192, "tau_f1": 0.02, "edge_k": 10, "edge_angle": 30.0}
    }

When no generator transport is given anywhere, ``MESHRAG_BACKEND_URL`` is
used as an HTTP endpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace

from .metrics import MetricParams
from .orchestration.backends import (
    DEFAULT_TIMEOUT,
    HttpTransport,
    MockOracleBackend,
    RemoteGenerator,
    RemoteSegmenter,
    SubprocessTransport,
    load_library,
)
from .retrieval import IcpParams
from .segmentation import SegmentationParams

ENV_BACKEND_URL = "MESHRAG_BACKEND_URL"
TRANSPORTS = ("http", "subprocess", "oracle")


class ConfigError(ValueError):
    pass


@dataclass
class TransportConfig:
    transport: str
    url: str | None = None
    command: list[str] | None = None
    timeout: float = DEFAULT_TIMEOUT
    library: str | None = None
    match: str = "shape"
    jitter: bool = False
    latency: float = 0.0

    def __post_init__(self):
        if self.transport not in TRANSPORTS + ("builtin",):
            raise ConfigError(f"unknown transport {self.transport!r}")
        needed = {"http": "url", "subprocess": "command", "oracle": "library"}.get(self.transport)
        if needed and not getattr(self, needed):
            raise ConfigError(f"{self.transport} transport needs {needed!r}")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")

    @classmethod
    def from_json(cls, data: dict) -> "TransportConfig":
        data = dict(data)
        if "transport" not in data:
            present = [t for t, k in (("http", "url"), ("subprocess", "command"), ("oracle", "library")) if k in data]
            if len(present) != 1:
                raise ConfigError("backend config must name exactly one transport")
            data["transport"] = present[0]
        if isinstance(data.get("command"), str):
            data["command"] = data["command"].split()
        return cls(**_known(cls, data))


def _known(cls, data: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return data


@dataclass
class Config:
    backend: TransportConfig | None = None
    segmenter: TransportConfig | None = None  # None -> built-in geometric segmenter
    batch_size: int = 8
    seed: int = 0
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    icp: IcpParams = field(default_factory=IcpParams)
    metrics: MetricParams = field(default_factory=MetricParams)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def from_json(cls, data: dict) -> "Config":
        data = _known(cls, dict(data))
        try:
            kw = {}
            for key in ("backend", "segmenter"):
                if data.get(key) is not None:
                    kw[key] = TransportConfig.from_json(data[key])
            if kw.get("segmenter") is not None and kw["segmenter"].transport == "builtin":
                kw["segmenter"] = None
            for key in ("batch_size", "seed"):
                if key in data:
                    kw[key] = int(data[key])
            kw["segmentation"] = SegmentationParams(**_known(SegmentationParams, data.get("segmentation", {})))
            kw["icp"] = IcpParams(**_known(IcpParams, data.get("icp", {})))
            kw["metrics"] = MetricParams(**_known(MetricParams, data.get("metrics", {})))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(**kw)


def load_config(path=None, overrides: dict | None = None, env=None) -> Config:
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``.

    ``overrides`` uses the same nesting as the file, with ``None`` meaning
    "not given on the command line".
    """
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    merged = _merge(data, overrides or {})
    if merged.get("backend") is None and env.get(ENV_BACKEND_URL):
        merged["backend"] = {"transport": "http", "url": env[ENV_BACKEND_URL]}
    return Config.from_json(merged)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for key, value in top.items():
        if value is None:
            continue
        if isinstance(value, dict) and key not in ("backend", "segmenter"):
            out[key] = _merge(out.get(key) or {}, value)
        else:
            # a transport given on the command line replaces the file's wholesale
            out[key] = value
    return out


def make_generator(cfg: TransportConfig | None):
    if cfg is None:
        raise ConfigError(f"no generator backend configured (use a flag, the config file or {ENV_BACKEND_URL})")
    if cfg.transport == "http":
        return RemoteGenerator(HttpTransport(cfg.url, cfg.timeout))
    if cfg.transport == "subprocess":
        return RemoteGenerator(SubprocessTransport(cfg.command, cfg.timeout))
    if cfg.transport == "oracle":
        return MockOracleBackend(load_library(cfg.library), jitter=cfg.jitter, latency=cfg.latency, match=cfg.match)
    raise ConfigError(f"{cfg.transport} cannot serve as a generator")


def make_segmenter(cfg: TransportConfig | None):
    """None for the built-in segmenter, otherwise a remote prompt segmenter."""
    if cfg is None or cfg.transport == "builtin":
        return None
    if cfg.transport == "http":
        return RemoteSegmenter(HttpTransport(cfg.url, cfg.timeout))
    if cfg.transport == "subprocess":
        return RemoteSegmenter(SubprocessTransport(cfg.command, cfg.timeout))
    raise ConfigError(f"{cfg.transport} cannot serve as a segmenter")


def with_seed(cfg: Config) -> Config:
    """Propagate the root seed into the segmentation and metric parameters."""
    return replace(
        cfg,
        segmentation=replace(cfg.segmentation, seed=cfg.seed),
        metrics=replace(cfg.metrics, seed=cfg.seed),
    )
