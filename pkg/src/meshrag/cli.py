"""``meshrag`` command line: segment, generate, edit, eval, pipeline, serve, worker.

Exit codes: 0 success, 1 I/O error, 2 segmentation failure, 3 backend
unreachable or every part failed, 4 no correspondences while editing,
64 usage error.
"""

from __future__ import annotations

import argparse
import colorsys
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, make_generator, make_segmenter, with_seed
from .editing import EditRequest, edit_incremental
from .errors import (
    BackendFailure,
    BackendUnavailable,
    EmptySegmentation,
    MeshRagError,
    NoCorrespondences,
    NoNormals,
    PipelineEmpty,
)
from .io import PlyFormatError, read_labels, read_obj, read_ply, write_labels, write_obj, write_ply
from .metrics import evaluate_all, reports_to_csv
from .orchestration.pipeline import generate_parallel, run_pipeline
from .segmentation import SegmentLabels, segment_auto

logger = logging.getLogger("meshrag")

EXIT_OK, EXIT_IO, EXIT_SEGMENT, EXIT_BACKEND, EXIT_NO_CORR, EXIT_USAGE = 0, 1, 2, 3, 4, 64
IO_ERRORS = (OSError, PlyFormatError, ValueError, KeyError, json.JSONDecodeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _fail(code: int, message: str) -> int:
    print(f"meshrag: {message}", file=sys.stderr)
    return code


def part_colors(labels: np.ndarray) -> np.ndarray:
    """Distinct RGB per label (golden-ratio hues); label 0 is grey."""
    out = np.full((len(labels), 3), 128, dtype=np.uint8)
    for p in np.unique(labels):
        if p == 0:
            continue
        r, g, b = colorsys.hsv_to_rgb((p * 0.618033988749895) % 1.0, 0.75, 0.95)
        out[labels == p] = (int(255 * r), int(255 * g), int(255 * b))
    return out


# -- shared flags -------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, backend: bool = True) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file (flags override it)")
    g.add_argument("--seed", type=int, help="root seed; part seeds are seed XOR part id")
    if backend:
        b = g.add_mutually_exclusive_group()
        b.add_argument("--backend-url", help="generator HTTP endpoint")
        b.add_argument("--backend-cmd", help="generator worker command (newline-delimited JSON on stdio)")
        b.add_argument("--oracle-library", help="directory of <name>_<id>.obj ground-truth parts (oracle backend)")
        g.add_argument("--oracle-match", choices=["id", "shape"], help="how the oracle picks a part (default shape)")
        g.add_argument("--oracle-jitter", action="store_true", default=None, help="perturb oracle parts")
        g.add_argument("--timeout", type=float, help="per-request timeout in seconds (default 300)")
        g.add_argument("--batch-size", type=int, help="jobs in flight per batch (default 8)")
        g.add_argument("--icp-iterations", type=int, help="ICP iteration cap (default 50)")
        g.add_argument("--icp-samples", type=int, help="points sampled from each part for ICP (default 8192)")
    s = p.add_argument_group("segmentation")
    s.add_argument("--segmenter-url", help="prompt segmenter HTTP endpoint (default: built-in geometric)")
    s.add_argument("--n-prompts", type=int, help="farthest-point prompts (default 64)")
    s.add_argument("--tau-nms", type=float, help="NMS IoU threshold (default 0.5)")
    s.add_argument("--tau-merge", type=float, help="OBB IoU merge threshold (default 0.5)")
    s.add_argument("--tau-recover", type=float, help="recovery threshold (default 0.7)")


def _overrides(args) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    backend = None
    if get("backend_url"):
        backend = {"transport": "http", "url": args.backend_url}
    elif get("backend_cmd"):
        backend = {"transport": "subprocess", "command": args.backend_cmd.split()}
    elif get("oracle_library"):
        backend = {"transport": "oracle", "library": args.oracle_library}
    if backend is not None:
        if get("timeout") is not None:
            backend["timeout"] = args.timeout
        if get("oracle_match"):
            backend["match"] = args.oracle_match
        if get("oracle_jitter"):
            backend["jitter"] = True
    return {
        "backend": backend,
        "segmenter": {"transport": "http", "url": args.segmenter_url} if get("segmenter_url") else None,
        "batch_size": get("batch_size"),
        "seed": get("seed"),
        "segmentation": {
            "n_prompts": get("n_prompts"),
            "tau_nms": get("tau_nms"),
            "tau_merge": get("tau_merge"),
            "tau_recover": get("tau_recover"),
        },
        "icp": {"max_iterations": get("icp_iterations"), "sample_count": get("icp_samples")},
        "metrics": {},
    }


def _config(args):
    return with_seed(load_config(args.config, _overrides(args)))


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def _read_cloud(path):
    cloud = read_ply(path)
    if cloud.normals is None:
        raise NoNormals(f"{path}: normals required (nx, ny, nz properties)")
    return cloud


# -- commands -----------------------------------------------------------------

def cmd_segment(args) -> int:
    cfg = _config(args)
    try:
        cloud = read_ply(args.input)
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, f"cannot read {args.input}: {exc}")
    if cloud.normals is None:
        return _fail(EXIT_SEGMENT, f"{args.input}: normals required for segmentation")
    try:
        seg = segment_auto(cloud, make_segmenter(cfg.segmenter), cfg.segmentation)
    except (EmptySegmentation, BackendFailure, MeshRagError) as exc:
        return _fail(EXIT_SEGMENT, f"segmentation failed: {exc}")
    labels = seg.labels
    colored = args.colored or str(Path(args.output).with_suffix(".ply"))
    try:
        write_labels(args.output, labels.labels, labels.n_parts)
        write_ply(colored, cloud, labels=labels.labels, colors=part_colors(labels.labels))
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write output: {exc}")
    print(labels.n_parts)
    return EXIT_OK


def _generate(args, cloud, cfg):
    backend = make_generator(cfg.backend)
    try:
        if getattr(args, "labels", None):
            raw, n_parts = read_labels(args.labels)
            if len(raw) != len(cloud):
                raise ValueError(f"{args.labels} has {len(raw)} labels for {len(cloud)} points")
            labels = SegmentLabels(raw, n_parts)
            mesh, report = generate_parallel(cloud, labels, backend, cfg.batch_size, cfg.icp, cfg.seed)
        else:
            mesh, report, labels = run_pipeline(cloud, backend, make_segmenter(cfg.segmenter), cfg.segmentation,
                                                cfg.batch_size, cfg.icp, cfg.seed)
    finally:
        close = getattr(backend, "close", None)
        if close:
            close()
    return mesh, report, labels


def _run_generation(args, with_eval: bool) -> int:
    try:
        cfg = _config(args)
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_IO, str(exc))
    try:
        cloud = _read_cloud(args.input)
    except NoNormals as exc:
        return _fail(EXIT_SEGMENT, str(exc))
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, f"cannot read {args.input}: {exc}")
    try:
        mesh, report, labels = _generate(args, cloud, cfg)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except PipelineEmpty as exc:
        detail = "backend unreachable" if exc.unreachable else "every part failed"
        return _fail(EXIT_BACKEND, f"{detail}: {exc.failures}")
    except BackendUnavailable as exc:
        return _fail(EXIT_BACKEND, f"backend unreachable: {exc}")
    except (EmptySegmentation, BackendFailure, NoNormals) as exc:
        return _fail(EXIT_SEGMENT, f"segmentation failed: {exc}")
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, str(exc))
    out = report.to_json()
    out["n_segments"] = int(labels.n_parts)
    code = EXIT_OK
    if with_eval and args.gt:
        try:
            out["metrics"] = evaluate_all(mesh, read_obj(args.gt), cfg.metrics).to_dict()
        except IO_ERRORS as exc:
            code = _fail(EXIT_IO, f"cannot evaluate against {args.gt}: {exc}")
    try:
        write_obj(args.output, mesh)
        if args.report:
            _write_json(args.report, out)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write output: {exc}")
    print(f"{report.n_generated}/{len(report.parts)} parts generated")
    if report.failures:
        print(f"failed parts: {sorted(report.failures)}", file=sys.stderr)
    return code


def cmd_generate(args) -> int:
    return _run_generation(args, with_eval=False)


def cmd_pipeline(args) -> int:
    return _run_generation(args, with_eval=True)


def cmd_edit(args) -> int:
    try:
        cfg = _config(args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    try:
        initial = read_obj(args.initial)
        edited = _read_cloud(args.edited)
    except NoNormals as exc:
        return _fail(EXIT_SEGMENT, str(exc))
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, f"cannot read input: {exc}")
    try:
        backend = make_generator(cfg.backend)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, str(exc))
    try:
        req = EditRequest(initial, edited, args.eps, cfg.icp)
        mesh, report = edit_incremental(req, backend, cfg.batch_size, make_segmenter(cfg.segmenter),
                                        cfg.segmentation, cfg.seed)
    except NoCorrespondences as exc:
        return _fail(EXIT_NO_CORR, f"edited cloud shares no geometry with the initial mesh: {exc}")
    except PipelineEmpty as exc:
        return _fail(EXIT_BACKEND, f"every residual part failed: {exc.failures}")
    except BackendUnavailable as exc:
        return _fail(EXIT_BACKEND, f"backend unreachable: {exc}")
    except (EmptySegmentation, BackendFailure) as exc:
        return _fail(EXIT_SEGMENT, f"segmentation failed: {exc}")
    finally:
        close = getattr(backend, "close", None)
        if close:
            close()
    try:
        write_obj(args.output, mesh)
        if args.report:
            _write_json(args.report, report.to_json())
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write output: {exc}")
    if report.no_changes:
        print("no changes")
    else:
        print(f"{report.n_residual_points} residual points, {report.n_generated_parts} new parts")
    return EXIT_OK


def _pairs(args) -> list[tuple[str, Path, Path]]:
    if args.pred_dir or args.gt_dir:
        if not (args.pred_dir and args.gt_dir) or args.pred or args.gt:
            raise UsageError("use either PRED GT or --pred-dir with --gt-dir")
        gt_dir = Path(args.gt_dir)
        return [(p.stem, p, gt_dir / p.name) for p in sorted(Path(args.pred_dir).glob("*.obj"))]
    if not (args.pred and args.gt):
        raise UsageError("need PRED and GT meshes or --pred-dir/--gt-dir")
    return [(Path(args.pred).stem, Path(args.pred), Path(args.gt))]


def cmd_eval(args) -> int:
    try:
        cfg = _config(args)
        pairs = _pairs(args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, str(exc))
    times = {}
    if args.times:
        try:
            times = {str(k): float(v) for k, v in json.loads(Path(args.times).read_text()).items()}
        except IO_ERRORS as exc:
            return _fail(EXIT_IO, f"cannot read {args.times}: {exc}")
    rows, code = [], EXIT_OK
    for name, pred, gt in pairs:
        try:
            report = evaluate_all(read_obj(pred), read_obj(gt), cfg.metrics)
        except (*IO_ERRORS, MeshRagError) as exc:
            code = _fail(EXIT_IO, f"cannot evaluate {name}: {exc}")
            continue
        rows.append((name, report, times.get(name)))
    out = Path(args.output) if args.output else None
    try:
        if out is not None and out.suffix.lower() == ".json":
            _write_json(out, {"objects": {n: r.to_dict() | {"T": t} for n, r, t in rows},
                              "mean": json.loads(json.dumps(_means(rows)))})
        else:
            text = reports_to_csv(rows)
            if out is None:
                sys.stdout.write(text)
            else:
                out.write_text(text, encoding="utf-8")
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write {out}: {exc}")
    return code


def _means(rows) -> dict:
    from .metrics import aggregate

    means = aggregate([r for _, r, _ in rows])
    ts = [t for _, _, t in rows if t is not None]
    means["T"] = float(np.mean(ts)) if ts else None
    return means


def _server_handler(args):
    from .config import TransportConfig
    from .orchestration.server import RequestHandler
    from .segmentation import builtin_geometric_backend

    generator = None
    if args.library:
        generator = make_generator(TransportConfig("oracle", library=args.library, match=args.match,
                                                   jitter=args.jitter, latency=args.latency))
    return RequestHandler(generator, builtin_geometric_backend)


def cmd_serve(args) -> int:
    from .orchestration.server import make_http_server

    try:
        server = make_http_server(_server_handler(args), args.host, args.port)
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, str(exc))
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_worker(args) -> int:
    from .orchestration.server import run_stdio_worker

    try:
        handler = _server_handler(args)
    except IO_ERRORS as exc:
        return _fail(EXIT_IO, str(exc))
    run_stdio_worker(handler, workers=args.workers)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meshrag", description="Part-wise mesh generation around a pluggable generator.")
    parser.add_argument("--version", action="version", version=f"meshrag {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("segment", help="segment a point cloud into parts")
    p.add_argument("input", help="PLY point cloud with normals")
    p.add_argument("-o", "--output", required=True, help="labels JSON to write")
    p.add_argument("--colored", help="part-colored PLY to write (default: OUTPUT with .ply suffix)")
    _add_config_flags(p, backend=False)
    p.set_defaults(func=cmd_segment)

    for name, func, helptext in (("generate", cmd_generate, "generate and assemble parts"),
                                 ("pipeline", cmd_pipeline, "segment, generate, assemble and optionally evaluate")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("input", help="PLY point cloud with normals")
        p.add_argument("-o", "--output", required=True, help="assembled OBJ to write")
        p.add_argument("--report", help="pipeline report JSON to write")
        if name == "generate":
            src = p.add_mutually_exclusive_group()
            src.add_argument("--labels", help="labels JSON from 'meshrag segment'")
            src.add_argument("--auto-segment", action="store_true", help="segment automatically (default)")
        else:
            p.add_argument("--gt", help="ground-truth OBJ; adds metrics to the report")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("edit", help="add new geometry from an edited point cloud")
    p.add_argument("initial", help="initial OBJ mesh")
    p.add_argument("edited", help="edited PLY point cloud with normals")
    p.add_argument("-o", "--output", required=True, help="merged OBJ to write")
    p.add_argument("--report", help="edit report JSON to write")
    p.add_argument("--eps", type=float, help="residual distance (default 0.02 x edited AABB diagonal)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("eval", help="geometric metrics between predicted and ground-truth meshes")
    p.add_argument("pred", nargs="?", help="predicted OBJ")
    p.add_argument("gt", nargs="?", help="ground-truth OBJ")
    p.add_argument("--pred-dir", help="directory of predicted OBJs")
    p.add_argument("--gt-dir", help="directory of ground-truth OBJs with matching names")
    p.add_argument("-o", "--output", help="CSV or .json to write (default: CSV on stdout)")
    p.add_argument("--times", help="JSON {name: seconds} filling the T column")
    p.add_argument("--config", help="JSON config file (metrics section)")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("serve", cmd_serve, "serve the oracle and built-in segmenter over HTTP"),
                                 ("worker", cmd_worker, "serve them as a stdio worker")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--library", help="oracle library directory (<name>_<id>.obj)")
        p.add_argument("--match", choices=["id", "shape"], default="shape", help="oracle part lookup")
        p.add_argument("--jitter", action="store_true", help="perturb returned parts")
        p.add_argument("--latency", type=float, default=0.0, help="seconds to sleep per request")
        if name == "serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8000)
        else:
            p.add_argument("--workers", type=int, default=8, help="requests handled concurrently")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except OSError as exc:
        return _fail(EXIT_IO, str(exc))


if __name__ == "__main__":
    sys.exit(main())
