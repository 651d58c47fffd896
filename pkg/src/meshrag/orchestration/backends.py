"""Generator and segmenter backends: the in-process oracle and two wire transports.

Both transports carry the same JSON messages.  Over HTTP a method is a
``POST /<method>``; over a subprocess every request is one line
``{"id": n, "method": ..., "params": {...}}`` on the child's stdin and the
child answers with ``{"id": n, "result": {...}}`` or ``{"id": n, "error": msg}``
on stdout, in any order.
"""

from __future__ import annotations

import itertools
import json
import logging
import subprocess
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import Future
from concurrent.futures import TimeoutError as FutureTimeout
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..errors import BackendFailure, BackendUnavailable, UnknownPart
from ..geometry import AffineTransform, PointCloud, TriangleIndex, TriMesh, apply_transform, normalize_geometry
from ..synthetic import random_rotation
from .jobs import GenerationJob, GenerationResult

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0


class MockOracleBackend:
    """Returns normalized ground-truth parts instead of generating them.

    ``library`` maps part ids to meshes in any frame.  With ``match="shape"``
    the job's part id is ignored and the library entry whose normalized
    surface lies closest to the prompt cloud is returned instead, which is
    what an oracle needs when part ids come from a fresh segmentation.

    ``jitter`` rotates the normalized part by up to ``max_rotation`` degrees
    about its center and adds Gaussian vertex noise of std ``noise``, seeded
    by the job seed; the result is renormalized.  ``latency`` seconds are
    slept per request and part ids in ``fail_parts`` raise BackendFailure.
    """

    deterministic = True

    def __init__(
        self,
        library: Mapping[int, TriMesh],
        jitter: bool = False,
        max_rotation: float = 5.0,
        noise: float = 0.001,
        latency: float = 0.0,
        fail_parts: Sequence[int] = (),
        match: str = "id",
        match_points: int = 512,
    ):
        if match not in ("id", "shape"):
            raise ValueError("match must be 'id' or 'shape'")
        if not 0 <= max_rotation <= 5.0 or not 0 <= noise <= 0.002:
            raise ValueError("jitter is limited to 5 degrees of rotation and 0.002 vertex noise")
        self.library = {int(k): normalize_geometry(v)[0] for k, v in library.items()}
        self.jitter = jitter
        self.max_rotation = max_rotation
        self.noise = noise
        self.latency = latency
        self.fail_parts = {int(p) for p in fail_parts}
        self.match = match
        self.match_points = match_points
        self._indices: dict[int, TriangleIndex] = {}
        self._lock = threading.Lock()

    def _triangle_index(self, key: int) -> TriangleIndex:
        with self._lock:
            if key not in self._indices:
                self._indices[key] = TriangleIndex(self.library[key])
            return self._indices[key]

    def lookup(self, job: GenerationJob) -> int:
        if self.match == "id":
            if job.part_id not in self.library:
                raise UnknownPart(f"no library part with id {job.part_id}", key=job.part_id)
            return job.part_id
        if not self.library:
            raise UnknownPart("oracle library is empty", key=job.part_id)
        pts = job.prompt_cloud.positions
        if len(pts) > self.match_points:
            pts = pts[np.linspace(0, len(pts) - 1, self.match_points).astype(np.int64)]
        # mean of the two directions would be fairer, but the one-sided
        # distance already separates the primitives we care about
        costs = {k: float(np.mean(self._triangle_index(k).distance(pts))) for k in sorted(self.library)}
        return min(costs, key=costs.get)

    def generate(self, job: GenerationJob) -> GenerationResult:
        t0 = time.perf_counter()
        if self.latency > 0:
            time.sleep(self.latency)
        if job.part_id in self.fail_parts:
            raise BackendFailure(f"injected failure for part {job.part_id}", key=job.part_id)
        mesh = self.library[self.lookup(job)]
        if self.jitter:
            rng = np.random.default_rng(job.seed)
            rot = random_rotation(rng, self.max_rotation)
            mesh = apply_transform(AffineTransform.from_rotation(rot), mesh)
            verts = mesh.vertices + rng.normal(scale=self.noise, size=mesh.vertices.shape)
            mesh, _ = normalize_geometry(TriMesh(verts, mesh.faces))
        return GenerationResult(job.part_id, mesh, time.perf_counter() - t0)

    def close(self) -> None:
        pass


def load_library(directory) -> dict[int, TriMesh]:
    """Read ``<name>_<id>.obj`` (or ``<id>.obj``) files into an oracle library."""
    from ..io import read_obj

    library = {}
    for path in sorted(Path(directory).glob("*.obj")):
        tail = path.stem.rsplit("_", 1)[-1]
        if tail.lstrip("-").isdigit():
            library[int(tail)] = read_obj(path)
    if not library:
        raise ValueError(f"no <name>_<id>.obj files in {directory}")
    return library


class HttpTransport:
    """JSON over ``POST <url>/<method>``."""

    def __init__(self, url: str, timeout: float = DEFAULT_TIMEOUT):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def call(self, method: str, params: dict, key: int | None = None) -> dict:
        body = json.dumps(params).encode()
        req = urllib.request.Request(
            f"{self.url}/{method}", data=body, headers={"Content-Type": "application/json"}, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = resp.read()
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode(errors="replace")[:200]
            raise BackendFailure(f"{method} returned HTTP {exc.code}: {detail}", key=key) from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            raise BackendUnavailable(f"cannot reach {self.url}: {exc}", key=key) from exc
        try:
            return json.loads(payload)
        except json.JSONDecodeError as exc:
            raise BackendFailure(f"{method} returned invalid JSON", key=key) from exc

    def close(self) -> None:
        pass


class SubprocessTransport:
    """Newline-delimited JSON with a long-lived child process.

    Several requests may be in flight at once; a reader thread routes each
    response line to the waiting caller by its id.
    """

    def __init__(self, command: Sequence[str], timeout: float = DEFAULT_TIMEOUT):
        self.command = list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._pending: dict[int, Future] = {}
        self._ids = itertools.count(1)
        self._lock = threading.Lock()
        self._write_lock = threading.Lock()

    def _start(self) -> subprocess.Popen:
        with self._lock:
            if self._proc is not None and self._proc.poll() is None:
                return self._proc
            try:
                self._proc = subprocess.Popen(
                    self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
                )
            except OSError as exc:
                raise BackendUnavailable(f"cannot start backend {self.command!r}: {exc}") from exc
            threading.Thread(target=self._read, args=(self._proc,), daemon=True).start()
            return self._proc

    def _read(self, proc: subprocess.Popen) -> None:
        for line in proc.stdout:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError:
                logger.warning("ignoring non-JSON line from backend: %.80s", line)
                continue
            with self._lock:
                fut = self._pending.pop(msg.get("id"), None)
            if fut is not None:
                fut.set_result(msg)
        # child exited: fail everything still waiting
        with self._lock:
            waiting, self._pending = self._pending, {}
        for fut in waiting.values():
            fut.set_exception(BackendUnavailable("backend process exited"))

    def call(self, method: str, params: dict, key: int | None = None) -> dict:
        proc = self._start()
        rid = next(self._ids)
        fut: Future = Future()
        with self._lock:
            self._pending[rid] = fut
        line = json.dumps({"id": rid, "method": method, "params": params}) + "\n"
        try:
            with self._write_lock:
                proc.stdin.write(line)
                proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError) as exc:
            with self._lock:
                self._pending.pop(rid, None)
            raise BackendUnavailable(f"backend process is gone: {exc}", key=key) from exc
        try:
            msg = fut.result(timeout=self.timeout)
        except FutureTimeout as exc:
            with self._lock:
                self._pending.pop(rid, None)
            raise BackendUnavailable(f"{method} timed out after {self.timeout} s", key=key) from exc
        except BackendUnavailable as exc:
            raise BackendUnavailable(str(exc), key=key) from exc
        if "error" in msg:
            raise BackendFailure(f"{method} failed: {msg['error']}", key=key)
        return msg["result"]

    def close(self) -> None:
        with self._lock:
            proc, self._proc = self._proc, None
        if proc is not None:
            try:
                proc.stdin.close()
                proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                proc.kill()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


class RemoteGenerator:
    """Generator backend reached through a transport."""

    def __init__(self, transport):
        self.transport = transport

    def generate(self, job: GenerationJob) -> GenerationResult:
        t0 = time.perf_counter()
        msg = self.transport.call("generate", job.to_wire(), key=job.part_id)
        try:
            return GenerationResult.from_wire(job.part_id, msg, time.perf_counter() - t0)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendFailure(f"malformed mesh for part {job.part_id}: {exc}", key=job.part_id) from exc

    def close(self) -> None:
        self.transport.close()


class RemoteSegmenter:
    """Prompt segmenter reached through a transport (method ``segment_prompt``).

    Request: ``{"points", "normals", "prompt_index"}``; response
    ``{"masks": [[0|1, ...] x 3], "scores": [s0, s1, s2]}``.
    """

    def __init__(self, transport):
        self.transport = transport

    def __call__(self, cloud: PointCloud, prompt_index: int) -> tuple[np.ndarray, np.ndarray]:
        params = {
            "points": cloud.positions.tolist(),
            "normals": None if cloud.normals is None else cloud.normals.tolist(),
            "prompt_index": int(prompt_index),
        }
        msg = self.transport.call("segment_prompt", params, key=int(prompt_index))
        try:
            return np.asarray(msg["masks"], dtype=bool), np.asarray(msg["scores"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendFailure(f"malformed segmenter response: {exc}", key=int(prompt_index)) from exc

    def close(self) -> None:
        self.transport.close()
