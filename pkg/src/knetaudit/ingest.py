"""Manifest parsing, chart rendering and normalization into bundles."""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

from .model import (
    WORKLOAD_KINDS,
    ApplicationBundle,
    ComputeUnit,
    ContainerSpec,
    LabelSelector,
    LabelSet,
    NetworkPolicySpec,
    PolicyPeer,
    PolicyPort,
    PolicyRule,
    PortDecl,
    Requirement,
    ResourceId,
    ServicePort,
    ServiceSpec,
    ValidationError,
)

log = logging.getLogger(__name__)

_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
_Dumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)

ANALYZED_KINDS = frozenset(WORKLOAD_KINDS) | {"Service", "NetworkPolicy", "Namespace"}
DEFAULT_NETPOL_ENABLE_KEY = "networkPolicy.enabled"


class ManifestParseError(ValueError):
    def __init__(self, message: str, document_index: int, line: int | None):
        self.document_index = document_index
        self.line = line
        where = f"document {document_index}" + (f", line {line}" if line is not None else "")
        super().__init__(f"{where}: {message}")


class RenderEnvironmentError(OSError):
    """The chart renderer or the chart itself is unavailable."""


class RenderError(RuntimeError):
    def __init__(self, returncode: int, stderr: str):
        self.returncode = returncode
        self.stderr = stderr
        super().__init__(f"chart renderer exited with status {returncode}: {stderr.strip()}")


@dataclass(frozen=True)
class RawResource:
    api_version: str
    kind: str
    name: str
    namespace: str | None
    labels: dict = field(hash=False, compare=True)
    body: dict = field(hash=False, compare=True, repr=False)
    document_index: int = field(default=0, compare=False)

    @property
    def analyzed(self) -> bool:
        return self.kind in ANALYZED_KINDS


def _pod_spec(doc: dict) -> tuple[dict | None, str]:
    kind = doc.get("kind")
    spec = doc.get("spec") or {}
    if kind == "Pod":
        return spec, "spec"
    if kind == "CronJob":
        tmpl = ((spec.get("jobTemplate") or {}).get("spec") or {}).get("template") or {}
        return tmpl.get("spec"), "spec.jobTemplate.spec.template.spec"
    return (spec.get("template") or {}).get("spec"), "spec.template.spec"


def _require(cond: bool, path: str, message: str = "required field missing") -> None:
    if not cond:
        raise ValidationError(message, path)


def _validate_document(doc: dict) -> None:
    kind = doc.get("kind")
    _require(isinstance(kind, str) and bool(kind), "kind")
    meta = doc.get("metadata")
    _require(isinstance(meta, dict) and bool(meta.get("name")), "metadata.name")
    if kind in WORKLOAD_KINDS:
        pod_spec, path = _pod_spec(doc)
        _require(isinstance(pod_spec, dict), path)
        containers = pod_spec.get("containers")
        _require(isinstance(containers, list) and bool(containers), f"{path}.containers")
    elif kind == "Service":
        spec = doc.get("spec")
        _require(isinstance(spec, dict), "spec")
        if spec.get("type") != "ExternalName" and spec.get("clusterIP") != "None":
            ports = spec.get("ports")
            _require(isinstance(ports, list) and bool(ports), "spec.ports")
    elif kind == "NetworkPolicy":
        spec = doc.get("spec")
        _require(isinstance(spec, dict), "spec")
        _require("podSelector" in spec, "spec.podSelector")


def _to_raw(doc: dict, index: int) -> list[RawResource]:
    if doc.get("kind") == "List" and isinstance(doc.get("items"), list):
        out = []
        for item in doc["items"]:
            if isinstance(item, dict):
                out.extend(_to_raw(item, index))
        return out
    try:
        _validate_document(doc)
    except ValidationError as exc:
        raise ValidationError(f"document {index}: {exc.message}", exc.path) from None
    meta = doc["metadata"]
    return [
        RawResource(
            api_version=str(doc.get("apiVersion", "")),
            kind=doc["kind"],
            name=str(meta["name"]),
            namespace=meta.get("namespace"),
            labels=dict(meta.get("labels") or {}),
            body=doc,
            document_index=index,
        )
    ]


def parse_manifests(text: str) -> list[RawResource]:
    """Parse a multi-document YAML stream.

    Document indices in errors are 1-based positions in the stream. Any
    syntax or validation error aborts the whole parse.
    """
    resources: list[RawResource] = []
    index = 0
    docs = yaml.load_all(text, Loader=_Loader)
    while True:
        try:
            doc = next(docs)
        except StopIteration:
            break
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None) or getattr(exc, "context_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ManifestParseError(str(getattr(exc, "problem", exc)), index + 1, line) from exc
        index += 1
        if doc is None:
            continue
        if not isinstance(doc, dict):
            raise ValidationError(f"document {index}: expected a mapping, got {type(doc).__name__}", "")
        resources.extend(_to_raw(doc, index))
    return resources


def serialize_manifests(resources: Iterable[RawResource]) -> str:
    return yaml.dump_all([r.body for r in resources], Dumper=_Dumper, sort_keys=True)


def read_manifest_paths(paths: Sequence[str | os.PathLike]) -> str:
    """Concatenate YAML files (directories are walked) into one stream."""
    chunks = []
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise FileNotFoundError(f"manifest path not found: {p}")
        files = sorted(f for f in p.rglob("*") if f.suffix in (".yaml", ".yml")) if p.is_dir() else [p]
        for f in files:
            chunks.append(f.read_text(encoding="utf-8"))
    return "\n---\n".join(chunks)


def render_chart(
    chart_path: str | os.PathLike,
    value_overrides: Sequence[str] = (),
    *,
    renderer: str = "helm",
    release: str = "release",
) -> str:
    """Run ``<renderer> template <release> <chart> --set k=v ...``; return stdout."""
    binary = shutil.which(renderer)
    if binary is None:
        raise RenderEnvironmentError(
            f"chart renderer {renderer!r} not found on PATH; install it or pass --renderer <binary>"
        )
    if not Path(chart_path).exists():
        raise RenderEnvironmentError(f"chart path does not exist: {chart_path}")
    cmd = [binary, "template", release, str(chart_path)]
    for kv in value_overrides:
        cmd += ["--set", kv]
    log.debug("rendering chart: %s", cmd)
    proc = subprocess.run(cmd, capture_output=True)
    if proc.returncode != 0:
        raise RenderError(proc.returncode, proc.stderr.decode("utf-8", "replace"))
    return proc.stdout.decode("utf-8")


# --- normalization -------------------------------------------------------


def _as_port(value: Any, path: str) -> int:
    if isinstance(value, bool):
        raise ValidationError(f"invalid port {value!r}", path)
    if isinstance(value, int):
        return value
    if isinstance(value, str) and value.strip().isdigit():
        return int(value.strip())
    raise ValidationError(f"invalid port {value!r}", path)


def _int_or_name(value: Any) -> int | str:
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().isdigit():
        return int(value.strip())
    return str(value)


def _labels(value: Any, path: str) -> LabelSet:
    if value is None:
        return LabelSet()
    if not isinstance(value, dict):
        raise ValidationError("labels must be a mapping", path)
    return LabelSet({str(k): str(v) for k, v in value.items()}, path=path)


def parse_selector(value: Any, path: str, *, allow_expressions: bool = True) -> LabelSelector:
    """Build a selector from a ``{matchLabels, matchExpressions}`` mapping."""
    if value is None:
        return LabelSelector.absent()
    if not isinstance(value, dict):
        raise ValidationError("selector must be a mapping", path)
    exprs = []
    for i, e in enumerate(value.get("matchExpressions") or []):
        if not allow_expressions:
            raise ValidationError("matchExpressions not allowed here", f"{path}.matchExpressions")
        try:
            exprs.append(Requirement(str(e["key"]), str(e["operator"]), tuple(str(v) for v in e.get("values") or ())))
        except (KeyError, TypeError):
            raise ValidationError("malformed expression", f"{path}.matchExpressions[{i}]") from None
    return LabelSelector(
        match_labels=_labels(value.get("matchLabels"), f"{path}.matchLabels"),
        match_expressions=tuple(sorted(exprs, key=lambda r: (r.key, r.operator, r.values))),
    )


def _containers(pod_spec: dict, path: str) -> tuple[ContainerSpec, ...]:
    out = []
    # init and ephemeral containers are deliberately skipped
    for ci, c in enumerate(pod_spec.get("containers") or []):
        cpath = f"{path}.containers[{ci}]"
        decls = []
        for pi, p in enumerate(c.get("ports") or []):
            ppath = f"{cpath}.ports[{pi}]"
            if "containerPort" not in p:
                raise ValidationError("required field missing", f"{ppath}.containerPort")
            try:
                decls.append(
                    PortDecl(
                        _as_port(p["containerPort"], f"{ppath}.containerPort"),
                        str(p.get("protocol", "TCP")).upper(),
                        p.get("name"),
                    )
                )
            except ValidationError as exc:
                raise ValidationError(exc.message, ppath) from None
        out.append(
            ContainerSpec(
                name=str(c.get("name", f"container-{ci}")),
                image=str(c.get("image", "")),
                declared_ports=tuple(sorted(decls, key=lambda d: (d.number, d.protocol, d.name or ""))),
            )
        )
    return tuple(out)


def _replicas(raw: RawResource) -> int:
    spec = raw.body.get("spec") or {}
    if raw.kind in ("Deployment", "StatefulSet", "ReplicaSet"):
        r = spec.get("replicas", 1)
        return int(r) if r is not None else 1
    if raw.kind == "Job":
        return int(spec.get("parallelism", 1) or 1)
    return 1


def _compute_unit(raw: RawResource, rid: ResourceId) -> ComputeUnit:
    pod_spec, path = _pod_spec(raw.body)
    if raw.kind == "Pod":
        labels, lpath = raw.labels, "metadata.labels"
    elif raw.kind == "CronJob":
        tmpl = raw.body["spec"]["jobTemplate"]["spec"]["template"]
        labels, lpath = (tmpl.get("metadata") or {}).get("labels"), "spec.jobTemplate.spec.template.metadata.labels"
    else:
        tmpl = raw.body["spec"]["template"]
        labels, lpath = (tmpl.get("metadata") or {}).get("labels"), "spec.template.metadata.labels"
    return ComputeUnit(
        id=rid,
        pod_labels=_labels(labels, lpath),
        containers=_containers(pod_spec, path),
        host_network=bool(pod_spec.get("hostNetwork", False)),
        replicas=_replicas(raw),
    )


def _service(raw: RawResource, rid: ResourceId) -> ServiceSpec:
    spec = raw.body["spec"]
    sel = spec.get("selector")
    if sel is not None and not isinstance(sel, dict):
        raise ValidationError("selector must be a mapping", "spec.selector")
    # an empty service selector is the same as none: endpoints are managed externally
    selector = LabelSelector(_labels(sel, "spec.selector")) if sel else LabelSelector.absent()
    ports = []
    for i, p in enumerate(spec.get("ports") or []):
        path = f"spec.ports[{i}]"
        if "port" not in p:
            raise ValidationError("required field missing", f"{path}.port")
        port = _as_port(p["port"], f"{path}.port")
        ports.append(
            ServicePort(
                port=port,
                target=_int_or_name(p.get("targetPort", port)),
                protocol=str(p.get("protocol", "TCP")).upper(),
                name=p.get("name"),
            )
        )
    return ServiceSpec(
        id=rid,
        selector=selector,
        ports=tuple(ports),
        headless=spec.get("clusterIP") == "None",
        service_type=str(spec.get("type", "ClusterIP")),
    )


def _policy_rules(rules: Any, peer_key: str, path: str) -> tuple[PolicyRule, ...]:
    out = []
    for i, r in enumerate(rules or []):
        r = r or {}
        peers = []
        for j, p in enumerate(r.get(peer_key) or []):
            ppath = f"{path}[{i}].{peer_key}[{j}]"
            ip = p.get("ipBlock")
            peers.append(
                PolicyPeer(
                    pod_selector=parse_selector(p.get("podSelector"), f"{ppath}.podSelector"),
                    namespace_selector=parse_selector(p.get("namespaceSelector"), f"{ppath}.namespaceSelector"),
                    ip_block=str(ip.get("cidr")) if isinstance(ip, dict) else None,
                )
            )
        ports = []
        for j, p in enumerate(r.get("ports") or []):
            port = p.get("port")
            end = p.get("endPort")
            ports.append(
                PolicyPort(
                    protocol=str(p.get("protocol", "TCP")).upper(),
                    port=_int_or_name(port) if port is not None else None,
                    end_port=_as_port(end, f"{path}[{i}].ports[{j}].endPort") if end is not None else None,
                )
            )
        out.append(PolicyRule(peers=tuple(peers), ports=tuple(ports)))
    return tuple(out)


def _policy(raw: RawResource, rid: ResourceId) -> NetworkPolicySpec:
    spec = raw.body["spec"]
    types = spec.get("policyTypes")
    if types is None:
        types = ["Ingress"] + (["Egress"] if "egress" in spec else [])
    return NetworkPolicySpec(
        id=rid,
        pod_selector=parse_selector(spec.get("podSelector") or {}, "spec.podSelector"),
        policy_types=frozenset(str(t) for t in types),
        ingress_rules=_policy_rules(spec.get("ingress"), "from", "spec.ingress"),
        egress_rules=_policy_rules(spec.get("egress"), "to", "spec.egress"),
    )


def normalize(
    resources: Sequence[RawResource],
    application_id: str,
    *,
    enabled_render: Sequence[RawResource] | None = None,
) -> ApplicationBundle:
    """Flatten raw resources into an :class:`ApplicationBundle`.

    ``enabled_render`` is the resource list obtained by re-rendering the
    chart with its network-policy switch turned on; it only feeds the
    "policies available but disabled" flag.
    """
    ordered = sorted(resources, key=lambda r: (r.kind, r.namespace or "default", r.name))
    units, services, policies, namespaces, unanalyzed = [], [], [], [], []
    seen: set[ResourceId] = set()
    for raw in ordered:
        ns = raw.namespace or "default"
        rid = ResourceId(application_id, ns, raw.kind, raw.name)
        if rid in seen:
            raise ValidationError(f"duplicate resource {rid}", "metadata.name")
        seen.add(rid)
        try:
            if raw.kind in WORKLOAD_KINDS:
                units.append(_compute_unit(raw, rid))
            elif raw.kind == "Service":
                services.append(_service(raw, rid))
            elif raw.kind == "NetworkPolicy":
                policies.append(_policy(raw, rid))
            elif raw.kind == "Namespace":
                namespaces.append((raw.name, _labels(raw.labels, "metadata.labels")))
            else:
                unanalyzed.append((raw.kind, raw.name))
        except ValidationError as exc:
            raise ValidationError(f"{raw.kind}/{raw.name}: {exc.message}", exc.path) from None

    disabled = False
    if not policies and enabled_render is not None:
        disabled = any(r.kind == "NetworkPolicy" for r in enabled_render)

    ns_counts = Counter(r.id.namespace for r in (*units, *services, *policies))
    namespace = min(ns_counts, key=lambda n: (-ns_counts[n], n)) if ns_counts else "default"
    return ApplicationBundle(
        application_id=application_id,
        namespace=namespace,
        compute_units=tuple(units),
        services=tuple(services),
        policies=tuple(policies),
        policy_templates_present_but_disabled=disabled,
        namespace_labels=tuple(sorted(namespaces)),
        unanalyzed=tuple(sorted(unanalyzed)),
    )


def bundle_from_chart(
    chart_path: str | os.PathLike,
    application_id: str,
    value_overrides: Sequence[str] = (),
    *,
    renderer: str = "helm",
    release: str | None = None,
    netpol_enable_key: str = DEFAULT_NETPOL_ENABLE_KEY,
) -> ApplicationBundle:
    release = release or application_id
    default = parse_manifests(render_chart(chart_path, value_overrides, renderer=renderer, release=release))
    enabled = None
    if not any(r.kind == "NetworkPolicy" for r in default) and netpol_enable_key:
        overrides = [*value_overrides, f"{netpol_enable_key}=true"]
        try:
            enabled = parse_manifests(render_chart(chart_path, overrides, renderer=renderer, release=release))
        except RenderError as exc:
            log.warning("network-policy probe render failed: %s", exc)
    return normalize(default, application_id, enabled_render=enabled)


def bundle_from_manifests(paths: Sequence[str | os.PathLike], application_id: str) -> ApplicationBundle:
    return normalize(parse_manifests(read_manifest_paths(paths)), application_id)
