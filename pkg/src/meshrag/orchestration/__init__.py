"""Parallel part generation: jobs, backends, the pipeline and wire servers."""

from .backends import (
    DEFAULT_TIMEOUT,
    HttpTransport,
    MockOracleBackend,
    RemoteGenerator,
    RemoteSegmenter,
    SubprocessTransport,
    load_library,
)
from .jobs import GenerationJob, GenerationResult, GeneratorBackend, plan_batches
from .pipeline import STAGES, PartRecord, PipelineReport, generate_parallel, part_seed, run_pipeline

__all__ = [
    "DEFAULT_TIMEOUT",
    "GenerationJob",
    "GenerationResult",
    "GeneratorBackend",
    "HttpTransport",
    "MockOracleBackend",
    "PartRecord",
    "PipelineReport",
    "RemoteGenerator",
    "RemoteSegmenter",
    "STAGES",
    "SubprocessTransport",
    "generate_parallel",
    "load_library",
    "part_seed",
    "plan_batches",
    "run_pipeline",
]
