"""Runtime port snapshots: socket-listing parsers, host-baseline subtraction
and the two-run comparison used to spot dynamically allocated ports.

A snapshot file looks like::

    version: 1
    application_id: flink
    iteration: 1
    host_baseline: [{proto: TCP, port: 22, scope: all_interfaces}]
    observations:
      - pod: flink-jobmanager-0
        unit: {kind: StatefulSet, name: flink-jobmanager, namespace: default}
        sockets: [{proto: TCP, port: 6123, scope: all_interfaces, process: java}]

``scope`` is ``loopback``, ``all_interfaces`` or a literal IP address.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import yaml

from .model import ApplicationBundle, ResourceId

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1
LOOPBACK = "loopback"
ALL_INTERFACES = "all_interfaces"


class SnapshotFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SnapshotMismatchError(ValueError):
    """Two snapshots that should describe the same application do not."""


@dataclass(frozen=True, order=True)
class SocketRecord:
    protocol: str
    port: int
    # "loopback", "all_interfaces", or the specific address bound to
    bind_scope: str = ALL_INTERFACES
    process_name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.protocol not in ("TCP", "UDP"):
            raise SnapshotFormatError(f"unsupported socket protocol {self.protocol!r}")
        if not isinstance(self.port, int) or not 1 <= self.port <= 65535:
            raise SnapshotFormatError(f"port {self.port!r} out of range 1-65535")

    @property
    def key(self) -> tuple[str, int]:
        return (self.protocol, self.port)

    @property
    def identity(self) -> tuple[str, int, str]:
        return (self.protocol, self.port, self.bind_scope)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"proto": self.protocol, "port": self.port, "scope": self.bind_scope}
        if self.process_name:
            out["process"] = self.process_name
        return out


@dataclass(frozen=True)
class PodObservation:
    pod_name: str
    owner_unit_id: ResourceId
    sockets: tuple[SocketRecord, ...] = ()


@dataclass(frozen=True)
class RuntimeSnapshot:
    application_id: str
    iteration: int
    observations: tuple[PodObservation, ...] = ()
    host_baseline: tuple[SocketRecord, ...] = ()

    def __post_init__(self):
        if self.iteration not in (1, 2):
            raise SnapshotFormatError(f"iteration must be 1 or 2, got {self.iteration!r}")
        pods = [o.pod_name for o in self.observations]
        if len(pods) != len(set(pods)):
            raise SnapshotFormatError("pod names must be unique within a snapshot")

    def sockets_by_unit(self) -> dict[ResourceId, frozenset[SocketRecord]]:
        out: dict[ResourceId, set[SocketRecord]] = defaultdict(set)
        for obs in self.observations:
            out[obs.owner_unit_id].update(obs.sockets)
        return {k: frozenset(v) for k, v in out.items()}


# --- socket listing parsers ----------------------------------------------


def classify_address(host: str) -> str:
    host = host.strip("[]").split("%", 1)[0]
    if host in ("*", "0.0.0.0", "::", ""):
        return ALL_INTERFACES
    try:
        addr = ipaddress.ip_address(host)
    except ValueError:
        raise SnapshotFormatError(f"invalid local address {host!r}") from None
    if isinstance(addr, ipaddress.IPv6Address) and addr.ipv4_mapped is not None:
        addr = addr.ipv4_mapped
    if addr.is_loopback:
        return LOOPBACK
    if addr.is_unspecified:
        return ALL_INTERFACES
    return str(addr)


def _split_endpoint(text: str) -> tuple[str, str]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise SnapshotFormatError(f"malformed address {text!r}")
    return host, port


_NETSTAT_PROTO = re.compile(r"^(tcp|udp)6?$")
_SS_PROCESS = re.compile(r'\(\("([^"]+)"')


def _record(proto: str, local: str, process: str | None, lineno: int) -> SocketRecord:
    host, port = _split_endpoint(local)
    if not port.isdigit():
        raise SnapshotFormatError(f"non-numeric port in {local!r}", lineno)
    try:
        return SocketRecord(proto, int(port), classify_address(host), process)
    except SnapshotFormatError as exc:
        raise SnapshotFormatError(str(exc), lineno) from None


def _parse_netstat(lines: list[str]) -> list[SocketRecord]:
    out = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts or line.startswith("Active Internet") or parts[0] == "Proto":
            continue
        if line.startswith("Active UNIX") or line.startswith("Active Bluetooth"):
            break
        m = _NETSTAT_PROTO.match(parts[0])
        if not m or len(parts) < 5:
            raise SnapshotFormatError(f"unrecognized netstat line {line.strip()!r}", lineno)
        proto = m.group(1).upper()
        rest = parts[5:]
        state = rest[0] if rest and not re.match(r"^(\d+/|-$)", rest[0]) else None
        if proto == "TCP" and state != "LISTEN":
            continue
        if proto == "UDP" and state not in (None, "CLOSE", "ESTABLISHED"):
            continue
        prog = rest[-1] if rest and re.match(r"^(\d+/\S+|-)$", rest[-1]) else None
        process = prog.split("/", 1)[1] if prog and "/" in prog else None
        out.append(_record(proto, parts[3], process, lineno))
    return out


def _parse_ss(lines: list[str]) -> list[SocketRecord]:
    out = []
    has_netid = None
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("Netid", "State"):
            has_netid = parts[0] == "Netid"
            continue
        if has_netid is None:
            has_netid = parts[0] in ("tcp", "udp", "tcp6", "udp6", "sctp", "raw", "u_str", "u_dgr", "nl")
        if has_netid:
            if len(parts) < 6:
                raise SnapshotFormatError(f"unrecognized ss line {line.strip()!r}", lineno)
            netid, state, local = parts[0], parts[1], parts[4]
            extra = parts[6:]
        else:
            if len(parts) < 5:
                raise SnapshotFormatError(f"unrecognized ss line {line.strip()!r}", lineno)
            state, local = parts[0], parts[3]
            netid = "tcp" if state == "LISTEN" else "udp"
            extra = parts[5:]
        netid = netid.rstrip("6")
        if netid not in ("tcp", "udp"):
            if netid in ("raw", "u_str", "u_dgr", "u_seq", "nl", "p_raw", "p_dgr", "sctp", "mptcp"):
                continue
            raise SnapshotFormatError(f"unrecognized ss socket type {netid!r}", lineno)
        if netid == "tcp" and state != "LISTEN":
            continue
        if netid == "udp" and state not in ("UNCONN", "ESTAB"):
            continue
        m = _SS_PROCESS.search(" ".join(extra))
        out.append(_record(netid.upper(), local, m.group(1) if m else None, lineno))
    return out


def parse_socket_listing(text: str, format: str = "netstat") -> list[SocketRecord]:
    """Parse ``netstat -tulpn`` or ``ss -tulpn`` output into socket records.

    Non-listening TCP lines (established connections and the like) are
    skipped; lines that match neither tool's layout raise
    :class:`SnapshotFormatError` carrying the 1-based line number.
    """
    lines = text.splitlines()
    if format == "netstat":
        return _parse_netstat(lines)
    if format == "ss":
        return _parse_ss(lines)
    raise ValueError(f"unknown listing format {format!r}; expected 'netstat' or 'ss'")


# --- snapshot documents ----------------------------------------------------


def _check_keys(obj: Any, allowed: set[str], required: set[str], where: str) -> dict:
    if not isinstance(obj, dict):
        raise SnapshotFormatError(f"{where}: expected a mapping")
    unknown = set(obj) - allowed
    if unknown:
        raise SnapshotFormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise SnapshotFormatError(f"{where}: missing field(s) {sorted(missing)}")
    return obj


def _socket_from_doc(obj: Any, where: str) -> SocketRecord:
    _check_keys(obj, {"proto", "port", "scope", "process"}, {"proto", "port", "scope"}, where)
    scope = str(obj["scope"])
    if scope not in (LOOPBACK, ALL_INTERFACES):
        scope = classify_address(scope)
    try:
        return SocketRecord(str(obj["proto"]).upper(), obj["port"], scope, obj.get("process"))
    except SnapshotFormatError as exc:
        raise SnapshotFormatError(f"{where}: {exc}") from None


def snapshot_from_dict(doc: Any) -> RuntimeSnapshot:
    _check_keys(
        doc,
        {"version", "application_id", "iteration", "host_baseline", "observations"},
        {"version", "application_id", "iteration"},
        "snapshot",
    )
    if doc["version"] != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {doc['version']!r}")
    app = str(doc["application_id"])
    baseline = tuple(
        _socket_from_doc(s, f"host_baseline[{i}]") for i, s in enumerate(doc.get("host_baseline") or [])
    )
    observations = []
    for i, o in enumerate(doc.get("observations") or []):
        where = f"observations[{i}]"
        _check_keys(o, {"pod", "unit", "sockets"}, {"pod", "unit"}, where)
        u = _check_keys(o["unit"], {"kind", "name", "namespace"}, {"kind", "name"}, f"{where}.unit")
        unit_id = ResourceId(app, str(u.get("namespace") or "default"), str(u["kind"]), str(u["name"]))
        sockets = tuple(
            sorted(_socket_from_doc(s, f"{where}.sockets[{j}]") for j, s in enumerate(o.get("sockets") or []))
        )
        observations.append(PodObservation(str(o["pod"]), unit_id, sockets))
    return RuntimeSnapshot(
        application_id=app,
        iteration=doc["iteration"],
        observations=tuple(sorted(observations, key=lambda o: (o.owner_unit_id, o.pod_name))),
        host_baseline=tuple(sorted(baseline)),
    )


def snapshot_to_dict(snap: RuntimeSnapshot) -> dict[str, Any]:
    return {
        "version": SNAPSHOT_VERSION,
        "application_id": snap.application_id,
        "iteration": snap.iteration,
        "host_baseline": [s.to_dict() for s in sorted(snap.host_baseline)],
        "observations": [
            {
                "pod": o.pod_name,
                "unit": {"kind": o.owner_unit_id.kind, "name": o.owner_unit_id.name, "namespace": o.owner_unit_id.namespace},
                "sockets": [s.to_dict() for s in sorted(o.sockets)],
            }
            for o in sorted(snap.observations, key=lambda o: (o.owner_unit_id, o.pod_name))
        ],
    }


def load_snapshot(path: str | Path) -> RuntimeSnapshot:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SnapshotFormatError(f"{path}: {exc}") from None
    return snapshot_from_dict(doc)


def dump_snapshot(snap: RuntimeSnapshot) -> str:
    return json.dumps(snapshot_to_dict(snap), indent=2, sort_keys=True) + "\n"


def merge_snapshots(snaps: Iterable[RuntimeSnapshot]) -> RuntimeSnapshot:
    """Combine per-pod snapshot documents of one application and iteration."""
    snaps = list(snaps)
    if not snaps:
        raise ValueError("nothing to merge")
    first = snaps[0]
    for s in snaps[1:]:
        if (s.application_id, s.iteration) != (first.application_id, first.iteration):
            raise SnapshotMismatchError("cannot merge snapshots of different applications or iterations")
    return RuntimeSnapshot(
        application_id=first.application_id,
        iteration=first.iteration,
        observations=tuple(o for s in snaps for o in s.observations),
        host_baseline=tuple(sorted({b for s in snaps for b in s.host_baseline})),
    )


# --- pre-processing --------------------------------------------------------


def subtract_host_baseline(snapshot: RuntimeSnapshot, bundle: ApplicationBundle) -> RuntimeSnapshot:
    """Drop host-level sockets from observations of hostNetwork pods.

    A pod on the host network sees every socket of the node, so anything
    already open before the application was installed is removed.
    """
    baseline = {s.key for s in snapshot.host_baseline}
    if not baseline:
        return snapshot
    host_units = {u.id for u in bundle.compute_units if u.host_network}
    observations = []
    for obs in snapshot.observations:
        if obs.owner_unit_id in host_units:
            obs = replace(obs, sockets=tuple(s for s in obs.sockets if s.key not in baseline))
        observations.append(obs)
    return replace(snapshot, observations=tuple(observations))


@dataclass(frozen=True)
class UnitPortDiff:
    stable: frozenset[tuple[str, int, str]]
    only_first: frozenset[tuple[str, int, str]]
    only_second: frozenset[tuple[str, int, str]]

    @property
    def unstable(self) -> frozenset[tuple[str, int, str]]:
        return self.only_first | self.only_second

    @property
    def observed(self) -> frozenset[tuple[str, int, str]]:
        return self.stable | self.unstable


@dataclass(frozen=True)
class IterationDiff:
    units: dict[ResourceId, UnitPortDiff]
    diagnostics: tuple[str, ...] = ()


def diff_iterations(s1: RuntimeSnapshot, s2: RuntimeSnapshot) -> IterationDiff:
    """Compare two runs per owning compute unit.

    Ports are identified by ``(protocol, port, bind_scope)``. Pods are
    grouped by their owner unit since pod names change across restarts.
    """
    if s1.application_id != s2.application_id:
        raise SnapshotMismatchError(
            f"snapshots belong to different applications: {s1.application_id!r} vs {s2.application_id!r}"
        )
    a, b = s1.sockets_by_unit(), s2.sockets_by_unit()
    units = {}
    diagnostics = []
    for uid in sorted(set(a) | set(b)):
        first = {s.identity for s in a.get(uid, ())}
        second = {s.identity for s in b.get(uid, ())}
        if uid not in a or uid not in b:
            which = s1.iteration if uid in a else s2.iteration
            diagnostics.append(f"{uid}: observed only in iteration {which}; all its ports treated as unstable")
        units[uid] = UnitPortDiff(frozenset(first & second), frozenset(first - second), frozenset(second - first))
    return IterationDiff(units, tuple(diagnostics))
