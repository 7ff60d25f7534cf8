"""Typed, immutable view of the cluster resources the analyzer reasons about.

Workload objects (Deployments, StatefulSets, ...) are flattened to
:class:`ComputeUnit` values carrying their pod-template labels, since those
are what services and network policies select on.
"""

from __future__ import annotations

import enum
import re
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any, Union

PROTOCOLS = ("TCP", "UDP", "SCTP")
WORKLOAD_KINDS = ("Pod", "Deployment", "StatefulSet", "DaemonSet", "ReplicaSet", "Job", "CronJob")
SERVICE_TYPES = ("ClusterIP", "NodePort", "LoadBalancer", "ExternalName")
SELECTOR_OPERATORS = ("In", "NotIn", "Exists", "DoesNotExist")

_LABEL_NAME = re.compile(r"^[A-Za-z0-9]([-A-Za-z0-9_.]{0,61}[A-Za-z0-9])?$")
_DNS_SUBDOMAIN = re.compile(r"^[a-z0-9]([-a-z0-9.]{0,251}[a-z0-9])?$")


class ValidationError(ValueError):
    """A resource violates a structural constraint; ``path`` names the field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)


def _check_label_key(key: str, path: str) -> None:
    if not isinstance(key, str) or not key:
        raise ValidationError("label key must be a non-empty string", path)
    prefix, _, name = key.rpartition("/")
    if prefix and (len(prefix) > 253 or not _DNS_SUBDOMAIN.match(prefix)):
        raise ValidationError(f"invalid label key prefix {prefix!r}", path)
    if not _LABEL_NAME.match(name):
        raise ValidationError(f"invalid label key {key!r}", path)


def _check_label_value(value: str, path: str) -> None:
    if not isinstance(value, str) or not value:
        raise ValidationError("label value must be a non-empty string", path)
    if not _LABEL_NAME.match(value):
        raise ValidationError(f"invalid label value {value!r}", path)


class LabelSet(Mapping):
    """Hashable, immutable key/value label map."""

    __slots__ = ("_items",)

    def __init__(self, entries: Mapping[str, str] | None = None, *, validate: bool = True, path: str = "labels"):
        entries = dict(entries or {})
        if validate:
            for key, value in entries.items():
                _check_label_key(key, f"{path}.{key}")
                _check_label_value(value, f"{path}.{key}")
        self._items = tuple(sorted(entries.items()))

    def __getitem__(self, key: str) -> str:
        for k, v in self._items:
            if k == key:
                return v
        raise KeyError(key)

    def __iter__(self) -> Iterator[str]:
        return (k for k, _ in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __hash__(self) -> int:
        return hash(self._items)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, LabelSet):
            return self._items == other._items
        if isinstance(other, Mapping):
            return dict(self._items) == dict(other)
        return NotImplemented

    def __lt__(self, other: LabelSet) -> bool:
        return self._items < other._items

    def __repr__(self) -> str:
        return f"LabelSet({dict(self._items)!r})"

    def union(self, other: Mapping[str, str]) -> LabelSet:
        merged = dict(self._items)
        merged.update(other)
        return LabelSet(merged, validate=False)

    def to_dict(self) -> dict[str, str]:
        return dict(self._items)


@dataclass(frozen=True)
class Requirement:
    key: str
    operator: str
    values: tuple[str, ...] = ()

    def __post_init__(self):
        if self.operator not in SELECTOR_OPERATORS:
            raise ValidationError(f"unknown selector operator {self.operator!r}", "matchExpressions.operator")
        if self.operator in ("In", "NotIn") and not self.values:
            raise ValidationError(f"operator {self.operator} requires at least one value", "matchExpressions.values")
        if self.operator in ("Exists", "DoesNotExist") and self.values:
            raise ValidationError(f"operator {self.operator} takes no values", "matchExpressions.values")
        object.__setattr__(self, "values", tuple(sorted(set(self.values))))

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"key": self.key, "operator": self.operator}
        if self.values:
            out["values"] = list(self.values)
        return out


@dataclass(frozen=True)
class LabelSelector:
    """A label selector.

    ``present=False`` models a selector that was not written at all (a
    selectorless service), which selects nothing. A present selector with no
    terms selects everything.
    """

    match_labels: LabelSet = field(default_factory=LabelSet)
    match_expressions: tuple[Requirement, ...] = ()
    present: bool = True

    @classmethod
    def absent(cls) -> LabelSelector:
        return cls(present=False)

    @property
    def is_empty(self) -> bool:
        return self.present and not self.match_labels and not self.match_expressions

    @property
    def equality_only(self) -> bool:
        return not self.match_expressions

    def to_dict(self) -> dict[str, Any] | None:
        if not self.present:
            return None
        out: dict[str, Any] = {"matchLabels": self.match_labels.to_dict()}
        if self.match_expressions:
            out["matchExpressions"] = [r.to_dict() for r in self.match_expressions]
        return out


@dataclass(frozen=True, order=True)
class ResourceId:
    application_id: str
    namespace: str
    kind: str
    name: str

    def __str__(self) -> str:
        return f"{self.application_id}/{self.namespace}/{self.kind}/{self.name}"

    @property
    def short(self) -> str:
        return f"{self.kind}/{self.name}"


@dataclass(frozen=True)
class PortDecl:
    number: int
    protocol: str = "TCP"
    name: str | None = None

    def __post_init__(self):
        if not isinstance(self.number, int) or not 1 <= self.number <= 65535:
            raise ValidationError(f"port {self.number!r} out of range 1-65535", "containerPort")
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"unknown protocol {self.protocol!r}", "protocol")

    @property
    def key(self) -> tuple[str, int]:
        return (self.protocol, self.number)


@dataclass(frozen=True)
class ContainerSpec:
    name: str
    image: str = ""
    declared_ports: tuple[PortDecl, ...] = ()

    def __post_init__(self):
        names = [p.name for p in self.declared_ports if p.name]
        if len(names) != len(set(names)):
            raise ValidationError(f"duplicate port names in container {self.name!r}", "ports")


@dataclass(frozen=True)
class ComputeUnit:
    id: ResourceId
    pod_labels: LabelSet = field(default_factory=LabelSet)
    containers: tuple[ContainerSpec, ...] = ()
    host_network: bool = False
    replicas: int = 1

    def __post_init__(self):
        if self.id.kind not in WORKLOAD_KINDS:
            raise ValidationError(f"unsupported workload kind {self.id.kind!r}", "kind")
        names = [c.name for c in self.containers]
        if len(names) != len(set(names)):
            raise ValidationError(f"duplicate container names in {self.id}", "spec.containers")
        if self.replicas < 0:
            raise ValidationError("replicas must be >= 0", "spec.replicas")

    @property
    def declared_ports(self) -> frozenset[tuple[str, int]]:
        return frozenset(p.key for c in self.containers for p in c.declared_ports)

    def port_named(self, name: str) -> PortDecl | None:
        for c in self.containers:
            for p in c.declared_ports:
                if p.name == name:
                    return p
        return None

    @property
    def is_runtime_observable(self) -> bool:
        # cron pods come and go; snapshots cannot see them reliably
        return self.id.kind != "CronJob"


@dataclass(frozen=True)
class ServicePort:
    port: int
    target: Union[int, str]
    protocol: str = "TCP"
    name: str | None = None

    def __post_init__(self):
        if not 1 <= self.port <= 65535:
            raise ValidationError(f"service port {self.port} out of range", "spec.ports.port")
        if isinstance(self.target, int) and not 1 <= self.target <= 65535:
            raise ValidationError(f"targetPort {self.target} out of range", "spec.ports.targetPort")
        if self.protocol not in PROTOCOLS:
            raise ValidationError(f"unknown protocol {self.protocol!r}", "spec.ports.protocol")


@dataclass(frozen=True)
class ServiceSpec:
    id: ResourceId
    selector: LabelSelector = field(default_factory=LabelSelector.absent)
    ports: tuple[ServicePort, ...] = ()
    headless: bool = False
    service_type: str = "ClusterIP"

    def __post_init__(self):
        if self.service_type not in SERVICE_TYPES:
            raise ValidationError(f"unknown service type {self.service_type!r}", "spec.type")
        if self.headless and self.service_type != "ClusterIP":
            raise ValidationError("headless services must be of type ClusterIP", "spec.clusterIP")
        if not self.selector.equality_only:
            raise ValidationError("service selectors support equality matching only", "spec.selector")


@dataclass(frozen=True)
class PolicyPeer:
    """One ``from``/``to`` entry. Unset selectors are represented as absent."""

    pod_selector: LabelSelector = field(default_factory=LabelSelector.absent)
    namespace_selector: LabelSelector = field(default_factory=LabelSelector.absent)
    ip_block: str | None = None


@dataclass(frozen=True)
class PolicyPort:
    protocol: str = "TCP"
    port: Union[int, str, None] = None
    end_port: int | None = None


@dataclass(frozen=True)
class PolicyRule:
    peers: tuple[PolicyPeer, ...] = ()
    ports: tuple[PolicyPort, ...] = ()


@dataclass(frozen=True)
class NetworkPolicySpec:
    id: ResourceId
    pod_selector: LabelSelector = field(default_factory=LabelSelector)
    policy_types: frozenset[str] = frozenset({"Ingress"})
    ingress_rules: tuple[PolicyRule, ...] = ()
    egress_rules: tuple[PolicyRule, ...] = ()


@dataclass(frozen=True)
class ApplicationBundle:
    application_id: str
    namespace: str = "default"
    compute_units: tuple[ComputeUnit, ...] = ()
    services: tuple[ServiceSpec, ...] = ()
    policies: tuple[NetworkPolicySpec, ...] = ()
    policy_templates_present_but_disabled: bool = False
    # labels of Namespace objects shipped with the application, keyed by name
    namespace_labels: tuple[tuple[str, LabelSet], ...] = ()
    unanalyzed: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        for res in (*self.compute_units, *self.services, *self.policies):
            if res.id.application_id != self.application_id:
                raise ValidationError(
                    f"{res.id} does not belong to application {self.application_id!r}", "application_id"
                )

    def unit(self, unit_id: ResourceId) -> ComputeUnit | None:
        for u in self.compute_units:
            if u.id == unit_id:
                return u
        return None

    def labels_of_namespace(self, namespace: str) -> LabelSet:
        for ns, labels in self.namespace_labels:
            if ns == namespace:
                return labels.union({"kubernetes.io/metadata.name": namespace})
        return LabelSet({"kubernetes.io/metadata.name": namespace}, validate=False)


class Rule(str, enum.Enum):
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4A = "M4A"
    M4B = "M4B"
    M4C = "M4C"
    M4Star = "M4*"
    M5A = "M5A"
    M5B = "M5B"
    M5C = "M5C"
    M5D = "M5D"
    M6 = "M6"
    M7 = "M7"

    def __str__(self) -> str:
        return self.value

    @property
    def order(self) -> int:
        return list(Rule).index(self)

    @classmethod
    def parse(cls, text: str) -> Rule:
        text = text.strip().upper()
        if text in ("M4STAR", "M4*"):
            return cls.M4Star
        return cls(text)


@dataclass(frozen=True)
class Finding:
    rule: Rule
    subjects: tuple[str, ...]
    evidence: Mapping[str, Any] = field(default_factory=dict, hash=False)
    message: str = ""
    mitigation_hint: str = ""
    possible_attacks: tuple[str, ...] = ()
    severity: str = "medium"

    def __post_init__(self):
        if not self.subjects:
            raise ValidationError("a finding needs at least one subject", "subjects")

    def sort_key(self) -> tuple:
        import json

        return (self.rule.order, self.subjects, json.dumps(self.evidence, sort_keys=True, default=str))

    def to_dict(self) -> dict[str, Any]:
        return {
            "rule": self.rule.value,
            "subjects": list(self.subjects),
            "evidence": self.evidence,
            "message": self.message,
            "mitigation_hint": self.mitigation_hint,
            "possible_attacks": list(self.possible_attacks),
            "severity": self.severity,
        }


class _Unresolved(enum.Enum):
    UNRESOLVED = "unresolved"

    def __repr__(self) -> str:
        return "UNRESOLVED"


UNRESOLVED = _Unresolved.UNRESOLVED


def resolve_target_port(service_port: ServicePort, unit: ComputeUnit) -> int | _Unresolved:
    """Resolve a service's targetPort against one selected compute unit.

    Named targets are looked up across all containers of ``unit``; a name
    the unit does not declare yields :data:`UNRESOLVED`.
    """
    if isinstance(service_port.target, int):
        return service_port.target
    decl = unit.port_named(service_port.target)
    if decl is None:
        return UNRESOLVED
    return decl.number
