"""Serve a generator (and optionally a prompt segmenter) over HTTP or stdio."""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..errors import BackendFailure, UnknownPart
from ..geometry import PointCloud
from .jobs import GenerationJob

logger = logging.getLogger(__name__)


class RequestHandler:
    """Dispatches wire methods to in-process backends."""

    def __init__(self, generator=None, segmenter=None):
        self.generator = generator
        self.segmenter = segmenter
        self._cloud_key = None
        self._cloud = None
        self._lock = threading.Lock()

    def _cloud_for(self, params: dict) -> PointCloud:
        # segmenters cache per cloud object; reuse it across prompts on the same points
        pts = np.asarray(params["points"], dtype=np.float64)
        normals = params.get("normals")
        nrm = None if normals is None else np.asarray(normals, dtype=np.float64)
        key = hashlib.sha1(pts.tobytes() + (b"" if nrm is None else nrm.tobytes())).hexdigest()
        with self._lock:
            if key != self._cloud_key:
                self._cloud = PointCloud(pts) if nrm is None else PointCloud.from_unnormalized(pts, nrm)
                self._cloud_key = key
            return self._cloud

    def __call__(self, method: str, params: dict) -> dict:
        if method == "generate":
            if self.generator is None:
                raise LookupError("no generator configured")
            return self.generator.generate(GenerationJob.from_wire(params)).to_wire()
        if method == "segment_prompt":
            if self.segmenter is None:
                raise LookupError("no segmenter configured")
            masks, scores = self.segmenter(self._cloud_for(params), int(params["prompt_index"]))
            return {"masks": np.asarray(masks, dtype=np.uint8).tolist(), "scores": np.asarray(scores).tolist()}
        raise LookupError(f"unknown method {method!r}")


def _status_for(exc: Exception) -> HTTPStatus:
    # KeyError is a LookupError but means a missing request field
    if isinstance(exc, (KeyError, ValueError, TypeError)):
        return HTTPStatus.BAD_REQUEST
    if isinstance(exc, (UnknownPart, LookupError)):
        return HTTPStatus.NOT_FOUND
    return HTTPStatus.INTERNAL_SERVER_ERROR


def make_http_server(handler: RequestHandler, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """Build (but do not start) a threaded server; ``port=0`` picks a free port."""

    class _Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            method = self.path.strip("/")
            try:
                length = int(self.headers.get("Content-Length", 0))
                params = json.loads(self.rfile.read(length) or b"{}")
                body, status = json.dumps(handler(method, params)).encode(), HTTPStatus.OK
            except (BackendFailure, LookupError, KeyError, ValueError, TypeError) as exc:
                body, status = json.dumps({"error": str(exc)}).encode(), _status_for(exc)
            except Exception as exc:  # keep serving after a backend crash
                logger.exception("request %s failed", method)
                body, status = json.dumps({"error": str(exc)}).encode(), HTTPStatus.INTERNAL_SERVER_ERROR
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

    server = ThreadingHTTPServer((host, port), _Handler)
    server.daemon_threads = True
    return server


def serve_in_thread(handler: RequestHandler, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a daemon thread; returns ``(server, url)``."""
    server = make_http_server(handler, host, port)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    h, p = server.server_address[:2]
    return server, f"http://{h}:{p}"


def run_stdio_worker(handler: RequestHandler, stdin=None, stdout=None, workers: int = 8) -> None:
    """Answer newline-delimited JSON requests until stdin closes.

    Requests are processed concurrently, so responses may come back out of
    order; each carries the id of its request.
    """
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    write_lock = threading.Lock()

    def answer(msg: dict) -> None:
        rid = msg.get("id")
        try:
            reply = {"id": rid, "result": handler(msg["method"], msg.get("params", {}))}
        except Exception as exc:
            reply = {"id": rid, "error": f"{type(exc).__name__}: {exc}"}
        line = json.dumps(reply)
        with write_lock:
            stdout.write(line + "\n")
            stdout.flush()

    with ThreadPoolExecutor(max(1, workers)) as pool:
        for line in stdin:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except json.JSONDecodeError as exc:
                with write_lock:
                    stdout.write(json.dumps({"id": None, "error": f"bad request line: {exc}"}) + "\n")
                    stdout.flush()
                continue
            pool.submit(answer, msg)
