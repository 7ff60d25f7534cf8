"""NetworkPolicy reachability evaluation.

The model follows the Kubernetes defaults: a pod that no policy selects
accepts traffic from everywhere, policies are additive (union of their
rules), and pods on the host network are outside policy enforcement.
``ipBlock`` peers are treated as matching every in-cluster source since the
cluster CIDR is not known statically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .model import (
    UNRESOLVED,
    ApplicationBundle,
    ComputeUnit,
    Finding,
    LabelSet,
    NetworkPolicySpec,
    PolicyPeer,
    PolicyPort,
    PolicyRule,
    ResourceId,
    Rule,
    resolve_target_port,
)
from .selectors import matches
from .snapshot import RuntimeSnapshot

NamespaceLabels = Callable[[str], LabelSet]

EXPOSURE_RULES = frozenset({Rule.M1, Rule.M2, Rule.M3, Rule.M5A, Rule.M5B, Rule.M5C})


@dataclass(frozen=True)
class Endpoint:
    unit_id: ResourceId
    protocol: str
    port: int
    via: str = "direct_pod"
    # the service the flow goes through, when via == "service"
    service_id: ResourceId | None = None

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} out of range")

    def to_dict(self) -> dict:
        out = {"unit": str(self.unit_id), "protocol": self.protocol, "port": self.port, "via": self.via}
        if self.service_id is not None:
            out["service"] = str(self.service_id)
        return out


def _peer_matches(peer: PolicyPeer, other: ComputeUnit, policy_ns: str, ns_labels: NamespaceLabels) -> bool:
    if peer.ip_block is not None:
        return True
    if not peer.pod_selector.present and not peer.namespace_selector.present:
        return False
    if peer.namespace_selector.present:
        if not matches(peer.namespace_selector, ns_labels(other.id.namespace)):
            return False
    elif other.id.namespace != policy_ns:
        return False
    if peer.pod_selector.present:
        return matches(peer.pod_selector, other.pod_labels)
    return True


def _port_matches(pp: PolicyPort, protocol: str, port: int, dst: ComputeUnit) -> bool:
    if pp.protocol != protocol:
        return False
    if pp.port is None:
        return True
    if isinstance(pp.port, int):
        if pp.end_port is not None:
            return pp.port <= port <= pp.end_port
        return pp.port == port
    decl = dst.port_named(pp.port)
    return decl is not None and decl.number == port and decl.protocol == protocol


def _rule_admits(rule: PolicyRule, other: ComputeUnit, dst: ComputeUnit, protocol: str, port: int,
                 policy_ns: str, ns_labels: NamespaceLabels) -> bool:
    if rule.peers and not any(_peer_matches(p, other, policy_ns, ns_labels) for p in rule.peers):
        return False
    if rule.ports and not any(_port_matches(p, protocol, port, dst) for p in rule.ports):
        return False
    return True


def _selects(policy: NetworkPolicySpec, unit: ComputeUnit) -> bool:
    return policy.id.namespace == unit.id.namespace and matches(policy.pod_selector, unit.pod_labels)


def effective_ingress_policies(dst: ComputeUnit, bundle: ApplicationBundle) -> list[NetworkPolicySpec]:
    return sorted(
        (p for p in bundle.policies if "Ingress" in p.policy_types and _selects(p, dst)),
        key=lambda p: p.id,
    )


def effective_egress_policies(src: ComputeUnit, bundle: ApplicationBundle) -> list[NetworkPolicySpec]:
    return sorted(
        (p for p in bundle.policies if "Egress" in p.policy_types and _selects(p, src)),
        key=lambda p: p.id,
    )


def is_ingress_allowed(src: ComputeUnit, dst: ComputeUnit, protocol: str, port: int,
                       bundle: ApplicationBundle) -> bool:
    if dst.host_network:
        return True
    policies = effective_ingress_policies(dst, bundle)
    if not policies:
        return True
    return any(
        _rule_admits(rule, src, dst, protocol, port, pol.id.namespace, bundle.labels_of_namespace)
        for pol in policies
        for rule in pol.ingress_rules
    )


def is_egress_allowed(src: ComputeUnit, dst: ComputeUnit, protocol: str, port: int,
                      bundle: ApplicationBundle) -> bool:
    if src.host_network:
        return True
    policies = effective_egress_policies(src, bundle)
    if not policies:
        return True
    return any(
        _rule_admits(rule, dst, dst, protocol, port, pol.id.namespace, bundle.labels_of_namespace)
        for pol in policies
        for rule in pol.egress_rules
    )


def is_flow_allowed(src: ComputeUnit, dst: ComputeUnit, protocol: str, port: int,
                    bundle: ApplicationBundle) -> bool:
    return is_egress_allowed(src, dst, protocol, port, bundle) and is_ingress_allowed(src, dst, protocol, port, bundle)


def reachability_matrix(bundle: ApplicationBundle, ports: Iterable[tuple[str, int]]) -> dict:
    """Allowed flows between every ordered pair of units, per (protocol, port)."""
    ports = sorted(set(ports))
    units = sorted(bundle.compute_units, key=lambda u: u.id)
    return {
        (s.id, d.id, proto, port): is_flow_allowed(s, d, proto, port, bundle)
        for s in units
        for d in units
        for proto, port in ports
    }


def uses_ip_block(bundle: ApplicationBundle) -> bool:
    return any(
        peer.ip_block is not None
        for pol in bundle.policies
        for rule in (*pol.ingress_rules, *pol.egress_rules)
        for peer in rule.peers
    )


def _implicated_ports(findings: Iterable[Finding], units: dict[str, ComputeUnit]):
    for f in findings:
        if f.rule not in EXPOSURE_RULES:
            continue
        if f.rule in (Rule.M1, Rule.M3):
            yield units.get(f.subjects[0]), f.evidence["protocol"], f.evidence["port"]
        elif f.rule is Rule.M2:
            for entry in (*f.evidence["iteration1"], *f.evidence["iteration2"]):
                yield units.get(f.subjects[0]), entry["protocol"], entry["port"]
        elif f.evidence.get("resolved") is not None:
            yield units.get(f.subjects[1]), f.evidence["protocol"], f.evidence["resolved"]


def attacker_unit(application_id: str, namespace: str) -> ComputeUnit:
    """A label-less, unprivileged pod: the compromised container."""
    return ComputeUnit(id=ResourceId(application_id, namespace, "Pod", "attacker"), pod_labels=LabelSet())


def residual_exposure(
    bundle: ApplicationBundle,
    findings: Sequence[Finding],
    snapshots: Sequence[RuntimeSnapshot] | None,
    *,
    attacker_namespaces: Sequence[str] | None = None,
) -> list[Endpoint]:
    """Misconfigured endpoints an in-cluster attacker can still reach.

    By default the attacker sits in the destination's own namespace;
    ``attacker_namespaces`` places it elsewhere (reachable from any of them
    counts).
    """
    if not snapshots:
        raise ValueError("residual exposure needs runtime snapshots")
    units = {str(u.id): u for u in bundle.compute_units}
    out: set[Endpoint] = set()
    for unit, proto, port in _implicated_ports(findings, units):
        if unit is None:
            continue
        namespaces = attacker_namespaces or [unit.id.namespace]
        reachable = any(
            is_ingress_allowed(attacker_unit(bundle.application_id, ns), unit, proto, port, bundle)
            for ns in namespaces
        )
        if not reachable:
            continue
        out.add(Endpoint(unit.id, proto, port))
        for svc in bundle.services:
            if svc.id.namespace != unit.id.namespace or not matches(svc.selector, unit.pod_labels):
                continue
            for sp in svc.ports:
                target = resolve_target_port(sp, unit)
                if target is not UNRESOLVED and target == port and sp.protocol == proto:
                    out.add(Endpoint(unit.id, proto, port, "service", svc.id))
    return sorted(out, key=lambda e: (e.unit_id, e.protocol, e.port, e.via, e.service_id or e.unit_id))
