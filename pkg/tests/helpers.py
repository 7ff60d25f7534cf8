"""Builders for manifest documents and snapshots used across the tests."""

from __future__ import annotations

import yaml

from knetaudit.ingest import normalize, parse_manifests
from knetaudit.model import ResourceId
from knetaudit.snapshot import PodObservation, RuntimeSnapshot, SocketRecord

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def workload(name, labels, ports=(), *, kind="Deployment", ns="default", host_network=False, container="main"):
    """ports: ints, (port, proto) or (port, proto, name) tuples."""
    decls = []
    for p in ports:
        p = (p,) if isinstance(p, int) else tuple(p)
        d = {"containerPort": p[0], "protocol": p[1] if len(p) > 1 else "TCP"}
        if len(p) > 2:
            d["name"] = p[2]
        decls.append(d)
    pod_spec = {"containers": [{"name": container, "image": "example/img:1", "ports": decls}]}
    if host_network:
        pod_spec["hostNetwork"] = True
    template = {"metadata": {"labels": dict(labels)}, "spec": pod_spec}
    if kind == "Pod":
        return {"apiVersion": "v1", "kind": "Pod", "metadata": {"name": name, "namespace": ns, "labels": dict(labels)}, "spec": pod_spec}
    if kind == "CronJob":
        spec = {"schedule": "* * * * *", "jobTemplate": {"spec": {"template": template}}}
    else:
        spec = {"selector": {"matchLabels": dict(labels)}, "template": template}
    return {"apiVersion": "apps/v1", "kind": kind, "metadata": {"name": name, "namespace": ns}, "spec": spec}


def service(name, selector, ports=((80, 8080),), *, ns="default", headless=False, protocol="TCP"):
    spec = {"ports": [{"port": p, "targetPort": t, "protocol": protocol} for p, t in ports]}
    if selector is not None:
        spec["selector"] = dict(selector)
    if headless:
        spec["clusterIP"] = "None"
    return {"apiVersion": "v1", "kind": "Service", "metadata": {"name": name, "namespace": ns}, "spec": spec}


def policy(name, pod_selector, ingress=None, *, ns="default", types=("Ingress",)):
    spec = {"podSelector": {"matchLabels": dict(pod_selector)}, "policyTypes": list(types)}
    if ingress is not None:
        spec["ingress"] = ingress
    return {"apiVersion": "networking.k8s.io/v1", "kind": "NetworkPolicy", "metadata": {"name": name, "namespace": ns}, "spec": spec}


def allow_all_policy(name="allow-all", ns="default"):
    """A select-all policy with an allow-everything rule (clears M6)."""
    return {
        "apiVersion": "networking.k8s.io/v1",
        "kind": "NetworkPolicy",
        "metadata": {"name": name, "namespace": ns},
        "spec": {"podSelector": {}, "policyTypes": ["Ingress"], "ingress": [{}]},
    }


def dump(docs) -> str:
    return yaml.safe_dump_all(list(docs), sort_keys=False)


def bundle_of(docs, app="app"):
    return normalize(parse_manifests(dump(docs)), app)


def snapshot(app, iteration, observed, baseline=()):
    """observed: {(kind, name[, ns]): [port | (port, proto[, scope])]}"""
    obs = []
    for i, (unit, socks) in enumerate(sorted(observed.items())):
        kind, name, *rest = unit
        ns = rest[0] if rest else "default"
        records = []
        for s in socks:
            s = (s,) if isinstance(s, int) else tuple(s)
            records.append(SocketRecord(s[1] if len(s) > 1 else "TCP", s[0], s[2] if len(s) > 2 else "all_interfaces"))
        obs.append(PodObservation(f"{name}-{i}", ResourceId(app, ns, kind, name), tuple(records)))
    base = tuple(SocketRecord(p[1] if isinstance(p, tuple) else "TCP", p[0] if isinstance(p, tuple) else p) for p in baseline)
    return RuntimeSnapshot(app, iteration, tuple(obs), base)
