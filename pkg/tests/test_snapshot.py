import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from knetaudit.model import ResourceId
from knetaudit.snapshot import (
    ALL_INTERFACES,
    LOOPBACK,
    PodObservation,
    RuntimeSnapshot,
    SnapshotFormatError,
    SnapshotMismatchError,
    SocketRecord,
    diff_iterations,
    dump_snapshot,
    load_snapshot,
    merge_snapshots,
    parse_socket_listing,
    snapshot_from_dict,
    subtract_host_baseline,
)

from .helpers import FIXTURES, bundle_of, snapshot, workload


def keys(records):
    return {(r.protocol, r.port, r.bind_scope) for r in records}


def test_flink_netstat_listing():
    recs = parse_socket_listing((FIXTURES / "flink" / "netstat-run1.txt").read_text(), "netstat")
    assert keys(recs) == {("TCP", 6123, ALL_INTERFACES), ("TCP", 8081, ALL_INTERFACES), ("TCP", 43271, ALL_INTERFACES)}
    assert all(r.port != 6121 for r in recs)
    assert {r.process_name for r in recs} == {"java"}


def test_flink_ss_listing_skips_established():
    recs = parse_socket_listing((FIXTURES / "flink" / "ss-run2.txt").read_text(), "ss")
    assert sorted(r.port for r in recs) == [6123, 8081, 51844]


def test_loopback_line():
    (rec,) = parse_socket_listing("tcp 0 0 127.0.0.1:9000 0.0.0.0:* LISTEN\n", "netstat")
    assert (rec.protocol, rec.port, rec.bind_scope) == ("TCP", 9000, LOOPBACK)


def test_header_only():
    text = "Active Internet connections (only servers)\nProto Recv-Q Send-Q Local Address Foreign Address State\n"
    assert parse_socket_listing(text, "netstat") == []
    assert parse_socket_listing("", "netstat") == []
    assert parse_socket_listing("Netid State Recv-Q Send-Q Local Address:Port Peer Address:Port\n", "ss") == []


@pytest.mark.parametrize(
    "line,scope",
    [
        ("tcp6 0 0 :::8080 :::* LISTEN 7/nginx", ALL_INTERFACES),
        ("tcp6 0 0 ::1:8080 :::* LISTEN -", LOOPBACK),
        ("tcp 0 0 10.0.0.5:8080 0.0.0.0:* LISTEN", "10.0.0.5"),
        ("tcp6 0 0 ::ffff:127.0.0.1:8080 :::* LISTEN", LOOPBACK),
    ],
)
def test_netstat_scopes(line, scope):
    (rec,) = parse_socket_listing(line, "netstat")
    assert rec.bind_scope == scope


def test_netstat_udp_and_non_listen():
    text = (
        "udp        0      0 0.0.0.0:8125            0.0.0.0:*                           12/statsd\n"
        "tcp        0      0 10.1.1.1:5432           10.1.1.2:40000          ESTABLISHED 3/postgres\n"
    )
    (rec,) = parse_socket_listing(text, "netstat")
    assert (rec.protocol, rec.port, rec.process_name) == ("UDP", 8125, "statsd")


def test_ss_without_netid_and_ipv6():
    text = (
        "State  Recv-Q Send-Q Local Address:Port Peer Address:Port Process\n"
        "LISTEN 0      128    [::]:22            [::]:*\n"
        "LISTEN 0      128    127.0.0.1%lo:53    0.0.0.0:*\n"
    )
    recs = parse_socket_listing(text, "ss")
    assert keys(recs) == {("TCP", 22, ALL_INTERFACES), ("TCP", 53, LOOPBACK)}


def test_ss_udp_unconn():
    (rec,) = parse_socket_listing("udp UNCONN 0 0 *:5353 *:*\n", "ss")
    assert (rec.protocol, rec.port, rec.bind_scope) == ("UDP", 5353, ALL_INTERFACES)


def test_unrecognized_line_reports_number():
    text = "Proto Recv-Q Send-Q Local Address Foreign Address State\ntcp 0 0 0.0.0.0:1 0.0.0.0:* LISTEN\ngarbage here\n"
    with pytest.raises(SnapshotFormatError) as info:
        parse_socket_listing(text, "netstat")
    assert info.value.line == 3


def test_bad_port_reports_number():
    with pytest.raises(SnapshotFormatError) as info:
        parse_socket_listing("tcp 0 0 0.0.0.0:99999 0.0.0.0:* LISTEN\n", "netstat")
    assert info.value.line == 1


# --- snapshot documents -----------------------------------------------------


def test_load_fixture_snapshot():
    s = load_snapshot(FIXTURES / "flink" / "snapshot1.json")
    assert s.iteration == 1 and s.application_id == "flink"
    (obs,) = s.observations
    assert obs.owner_unit_id == ResourceId("flink", "flink", "StatefulSet", "flink-jobmanager")
    assert sorted(r.port for r in obs.sockets) == [6123, 8081, 43271]


def test_document_roundtrip(tmp_path):
    s = load_snapshot(FIXTURES / "flink" / "snapshot2.json")
    p = tmp_path / "s.json"
    p.write_text(dump_snapshot(s))
    assert load_snapshot(p) == s


def base_doc():
    return json.loads((FIXTURES / "flink" / "snapshot1.json").read_text())


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(extra=1),
        lambda d: d.update(version=2),
        lambda d: d.update(iteration=3),
        lambda d: d["observations"][0].update(node="n1"),
        lambda d: d["observations"][0]["sockets"][0].update(pid=4),
        lambda d: d["observations"][0]["sockets"][0].update(proto="ICMP"),
        lambda d: d.pop("application_id"),
    ],
)
def test_document_validation(mutate):
    d = base_doc()
    mutate(d)
    with pytest.raises(SnapshotFormatError):
        snapshot_from_dict(d)


def test_duplicate_pod_names_rejected():
    d = base_doc()
    d["observations"].append(dict(d["observations"][0]))
    with pytest.raises(SnapshotFormatError):
        snapshot_from_dict(d)


def test_merge():
    a = snapshot("app", 1, {("Deployment", "a"): [80]})
    b = snapshot("app", 1, {("Deployment", "b"): [81]})
    m = merge_snapshots([a, b])
    assert len(m.observations) == 2
    with pytest.raises(SnapshotMismatchError):
        merge_snapshots([a, snapshot("app", 2, {})])


# --- host baseline ------------------------------------------------------------


def test_baseline_subtracted_for_host_network_pods():
    b = bundle_of([workload("exporter", {"app": "x"}, kind="DaemonSet", host_network=True)])
    s = snapshot("app", 1, {("DaemonSet", "exporter"): [22, 9100]}, baseline=[22])
    out = subtract_host_baseline(s, b)
    assert [r.port for r in out.observations[0].sockets] == [9100]


def test_baseline_ignored_for_regular_pods():
    b = bundle_of([workload("web", {"app": "x"})])
    s = snapshot("app", 1, {("Deployment", "web"): [22]}, baseline=[22])
    assert subtract_host_baseline(s, b) == s


def test_empty_baseline_is_identity():
    b = bundle_of([workload("exporter", {"app": "x"}, kind="DaemonSet", host_network=True)])
    s = snapshot("app", 1, {("DaemonSet", "exporter"): [22, 9100]})
    assert subtract_host_baseline(s, b) == s


def test_baseline_is_protocol_qualified():
    b = bundle_of([workload("e", {"app": "x"}, kind="DaemonSet", host_network=True)])
    s = snapshot("app", 1, {("DaemonSet", "e"): [(53, "UDP"), 53]}, baseline=[(53, "UDP")])
    assert [(r.protocol, r.port) for r in subtract_host_baseline(s, b).observations[0].sockets] == [("TCP", 53)]


# --- two-run comparison -------------------------------------------------------

U = ("StatefulSet", "flink-jobmanager")
UID = ResourceId("app", "default", *U)


def test_diff_flink_like():
    s1 = snapshot("app", 1, {U: [6123, 8081, 43271]})
    s2 = snapshot("app", 2, {U: [6123, 8081, 51844]})
    d = diff_iterations(s1, s2).units[UID]
    assert {p for _, p, _ in d.stable} == {6123, 8081}
    assert {p for _, p, _ in d.unstable} == {43271, 51844}


def test_diff_identical():
    s1 = snapshot("app", 1, {U: [1, 2]})
    s2 = snapshot("app", 2, {U: [1, 2]})
    assert diff_iterations(s1, s2).units[UID].unstable == frozenset()


def test_diff_unit_missing_in_second_run():
    s1 = snapshot("app", 1, {U: [1, 2]})
    s2 = snapshot("app", 2, {})
    diff = diff_iterations(s1, s2)
    assert {p for _, p, _ in diff.units[UID].unstable} == {1, 2}
    assert diff.diagnostics and "only in iteration 1" in diff.diagnostics[0]


def test_diff_keys_by_unit_not_pod():
    s1 = RuntimeSnapshot("app", 1, (PodObservation("web-abc", UID, (SocketRecord("TCP", 80),)),))
    s2 = RuntimeSnapshot("app", 2, (PodObservation("web-xyz", UID, (SocketRecord("TCP", 80),)),))
    assert diff_iterations(s1, s2).units[UID].unstable == frozenset()


def test_diff_application_mismatch():
    with pytest.raises(SnapshotMismatchError):
        diff_iterations(snapshot("a", 1, {}), snapshot("b", 2, {}))


socket_lists = st.lists(
    st.tuples(st.integers(1, 12), st.sampled_from(["TCP", "UDP"]), st.sampled_from([ALL_INTERFACES, LOOPBACK])),
    max_size=8,
)
units = st.sampled_from([("Deployment", "a"), ("Deployment", "b"), ("StatefulSet", "c")])
observed = st.dictionaries(units, socket_lists, max_size=3)


@given(observed, observed)
def test_diff_properties(o1, o2):
    s1, s2 = snapshot("app", 1, o1), snapshot("app", 2, o2)
    d12 = diff_iterations(s1, s2).units
    d21 = diff_iterations(s2, s1).units
    assert d12.keys() == d21.keys()
    for uid in d12:
        assert d12[uid].stable == d21[uid].stable
        assert d12[uid].unstable == d21[uid].unstable
        seen = {r.identity for s in (s1, s2) for obs in s.observations if obs.owner_unit_id == uid for r in obs.sockets}
        assert d12[uid].stable | d12[uid].unstable == seen


@given(observed, st.lists(st.integers(1, 12), max_size=4), st.sets(units))
def test_baseline_properties(obs, baseline, host_units):
    docs = [workload(name, {"app": name}, kind=kind, host_network=(kind, name) in host_units)
            for kind, name in [("Deployment", "a"), ("Deployment", "b"), ("StatefulSet", "c")]]
    b = bundle_of(docs)
    s = snapshot("app", 1, obs, baseline=baseline)
    out = subtract_host_baseline(s, b)
    for before, after in zip(s.observations, out.observations):
        assert set(after.sockets) <= set(before.sockets)
        kind, name = before.owner_unit_id.kind, before.owner_unit_id.name
        if (kind, name) not in host_units:
            assert after == before
