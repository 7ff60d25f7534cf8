"""Command-line entry point: ``knetaudit analyze|cluster|reachability|snapshot``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .ingest import (
    DEFAULT_NETPOL_ENABLE_KEY,
    ManifestParseError,
    RenderEnvironmentError,
    RenderError,
    bundle_from_chart,
    bundle_from_manifests,
)
from .model import ResourceId, ValidationError
from .pipeline import AppInput, analyze
from .report import EXIT_ERROR, ConfigError, apply_suppressions, load_suppressions, render
from .snapshot import (
    PodObservation,
    RuntimeSnapshot,
    SnapshotFormatError,
    SnapshotMismatchError,
    dump_snapshot,
    load_snapshot,
    merge_snapshots,
    parse_socket_listing,
)

log = logging.getLogger("knetaudit")

_EXPECTED_ERRORS = (
    ValidationError,
    ManifestParseError,
    SnapshotFormatError,
    SnapshotMismatchError,
    RenderEnvironmentError,
    RenderError,
    ConfigError,
    OSError,
    ValueError,
)


def _ephemeral_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split("-", 1))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO-HI, got {text!r}") from None
    if not 1 <= lo <= hi <= 65535:
        raise argparse.ArgumentTypeError(f"invalid port range {text!r}")
    return lo, hi


def _add_output_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=["json", "text"], default="text")
    p.add_argument("-o", "--output", help="write the report here instead of stdout")
    p.add_argument("--suppress", help="YAML/JSON list of {rule, subject, justification}")
    p.add_argument("--figures", metavar="DIR", help="also write summary figures (PNG) into DIR")
    p.add_argument("--timestamps", action="store_true", help="include a generation timestamp in JSON output")
    p.add_argument("--ephemeral-range", type=_ephemeral_range, default=(32768, 60999), metavar="LO-HI")


def _add_chart_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V")
    p.add_argument("--netpol-enable-key", default=DEFAULT_NETPOL_ENABLE_KEY,
                   help="value key that switches on the chart's network policies (probe for disabled policies)")
    p.add_argument("--renderer", default="helm", help="chart renderer binary (default: helm)")
    p.add_argument("--release", help="release name passed to the renderer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knetaudit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze one application")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifests", nargs="+", metavar="PATH")
    src.add_argument("--chart", metavar="PATH")
    p.add_argument("--app-id", help="application id (default: chart or first manifest name)")
    p.add_argument("--snapshot1", metavar="FILE")
    p.add_argument("--snapshot2", metavar="FILE")
    p.add_argument("--exposure", action="store_true", help="also compute residual exposure (needs snapshots)")
    _add_chart_options(p)
    _add_output_options(p)

    p = sub.add_parser("cluster", help="analyze several applications and cross-application collisions")
    p.add_argument("--app", action="append", required=True, metavar="ID=PATH[,PATH]",
                   help="application id and its manifest file(s) or directory")
    p.add_argument("--snapshots", metavar="DIR", help="directory of snapshot documents, matched by application_id")
    _add_output_options(p)

    p = sub.add_parser("reachability", help="misconfigured endpoints still reachable under network policies")
    p.add_argument("--manifests", nargs="+", required=True, metavar="PATH")
    p.add_argument("--app-id")
    p.add_argument("--snapshot1", required=True, metavar="FILE")
    p.add_argument("--snapshot2", required=True, metavar="FILE")
    p.add_argument("--attacker-namespace", action="append", metavar="NS",
                   help="place the attacker pod in NS instead of the target's namespace (repeatable)")
    _add_output_options(p)

    p = sub.add_parser("snapshot", help="snapshot document utilities")
    ssub = p.add_subparsers(dest="snapshot_command", required=True)
    q = ssub.add_parser("parse", help="convert a raw netstat/ss listing of one pod into a snapshot document")
    q.add_argument("file", help="listing file, or - for stdin")
    q.add_argument("--format", choices=["netstat", "ss"], default="netstat")
    q.add_argument("--app", required=True, help="application id")
    q.add_argument("--iteration", type=int, choices=[1, 2], required=True)
    q.add_argument("--pod", required=True, help="pod name")
    q.add_argument("--unit", required=True, metavar="KIND/NAME", help="owning workload, e.g. Deployment/web")
    q.add_argument("--namespace", default="default")
    q.add_argument("--baseline", metavar="FILE", help="listing taken on the node before deployment")
    q.add_argument("-o", "--output")
    q = ssub.add_parser("merge", help="merge per-pod snapshot documents of one run")
    q.add_argument("files", nargs="+")
    q.add_argument("-o", "--output")
    return parser


def _default_app_id(paths: Sequence[str]) -> str:
    return Path(paths[0]).resolve().stem or "app"


def _load_pair(p1: str | None, p2: str | None):
    s1 = load_snapshot(p1) if p1 else None
    s2 = load_snapshot(p2) if p2 else None
    if s1 is None and s2 is not None:
        s1, s2 = s2, None
    return s1, s2


def _emit(report, args) -> int:
    if args.suppress:
        report = apply_suppressions(report, load_suppressions(args.suppress))
    for s in report.stale_suppressions:
        log.warning("stale suppression: %s %s matched nothing", s.rule, s.subject)
    body, code = render(report, args.format, timestamps=args.timestamps)
    if args.figures:
        from .figures import write_figures

        for path in write_figures(report.summary, args.figures):
            log.info("wrote %s", path)
    if args.output:
        Path(args.output).write_bytes(body)
    else:
        sys.stdout.buffer.write(body)
        sys.stdout.flush()
    return code


def _cmd_analyze(args) -> int:
    if args.chart:
        app_id = args.app_id or Path(args.chart).resolve().name
        bundle = bundle_from_chart(
            args.chart, app_id, args.overrides, renderer=args.renderer,
            release=args.release, netpol_enable_key=args.netpol_enable_key,
        )
    else:
        app_id = args.app_id or _default_app_id(args.manifests)
        bundle = bundle_from_manifests(args.manifests, app_id)
    s1, s2 = _load_pair(args.snapshot1, args.snapshot2)
    report = analyze([AppInput(bundle, s1, s2)], ephemeral_range=args.ephemeral_range,
                     cluster=False, exposure=args.exposure and s1 is not None)
    return _emit(report, args)


def _snapshots_by_app(directory: str | None) -> dict[tuple[str, int], RuntimeSnapshot]:
    out: dict[tuple[str, int], list[RuntimeSnapshot]] = {}
    if not directory:
        return {}
    files = sorted(f for f in Path(directory).iterdir() if f.suffix in (".json", ".yaml", ".yml"))
    for f in files:
        snap = load_snapshot(f)
        out.setdefault((snap.application_id, snap.iteration), []).append(snap)
    return {k: merge_snapshots(v) for k, v in out.items()}


def _cmd_cluster(args) -> int:
    snaps = _snapshots_by_app(args.snapshots)
    apps = []
    seen = set()
    for spec in args.app:
        app_id, sep, paths = spec.partition("=")
        if not sep or not app_id or not paths:
            raise ValueError(f"--app expects ID=PATH, got {spec!r}")
        if app_id in seen:
            raise ValueError(f"application id {app_id!r} given twice")
        seen.add(app_id)
        bundle = bundle_from_manifests(paths.split(","), app_id)
        apps.append(AppInput(bundle, snaps.get((app_id, 1)), snaps.get((app_id, 2))))
    report = analyze(apps, ephemeral_range=args.ephemeral_range, cluster=True)
    return _emit(report, args)


def _cmd_reachability(args) -> int:
    app_id = args.app_id or _default_app_id(args.manifests)
    bundle = bundle_from_manifests(args.manifests, app_id)
    s1, s2 = _load_pair(args.snapshot1, args.snapshot2)
    report = analyze([AppInput(bundle, s1, s2)], ephemeral_range=args.ephemeral_range, cluster=False,
                     exposure=True, attacker_namespaces=args.attacker_namespace)
    return _emit(report, args)


def _read(path: str) -> str:
    return sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_snapshot(args) -> int:
    if args.snapshot_command == "merge":
        merged = merge_snapshots(load_snapshot(f) for f in args.files)
        _write(dump_snapshot(merged), args.output)
        return 0
    kind, sep, name = args.unit.partition("/")
    if not sep or not kind or not name:
        raise ValueError(f"--unit expects KIND/NAME, got {args.unit!r}")
    sockets = parse_socket_listing(_read(args.file), args.format)
    baseline = parse_socket_listing(_read(args.baseline), args.format) if args.baseline else []
    snap = RuntimeSnapshot(
        application_id=args.app,
        iteration=args.iteration,
        observations=(PodObservation(args.pod, ResourceId(args.app, args.namespace, kind, name), tuple(sorted(set(sockets)))),),
        host_baseline=tuple(sorted(set(baseline))),
    )
    _write(dump_snapshot(snap), args.output)
    return 0


COMMANDS = {
    "analyze": _cmd_analyze,
    "cluster": _cmd_cluster,
    "reachability": _cmd_reachability,
    "snapshot": _cmd_snapshot,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except _EXPECTED_ERRORS as exc:
        print(f"knetaudit: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
