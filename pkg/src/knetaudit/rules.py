"""Detection rules for the thirteen network misconfiguration variants.

Static rules (M4, M5B, M5D, M6, M7) only need the normalized bundle. The
runtime rules (M1, M2, M3, M5A, M5C) also need port snapshots; without them
they are reported as skipped rather than silently passing.
"""

from __future__ import annotations

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .model import (
    UNRESOLVED,
    ApplicationBundle,
    ComputeUnit,
    Finding,
    NetworkPolicySpec,
    Rule,
    ServiceSpec,
    resolve_target_port,
)
from .selectors import label_set_equal, matches, select_units
from .snapshot import (
    LOOPBACK,
    IterationDiff,
    RuntimeSnapshot,
    SnapshotMismatchError,
    UnitPortDiff,
    diff_iterations,
    subtract_host_baseline,
)

log = logging.getLogger(__name__)

DEFAULT_EPHEMERAL_RANGE = (32768, 60999)
RUNTIME_RULES = (Rule.M1, Rule.M2, Rule.M3, Rule.M5A, Rule.M5C)


@dataclass(frozen=True)
class RuleInfo:
    title: str
    attacks: tuple[str, ...]
    mitigation: str
    severity: str = "medium"


_LABEL_FIX = (
    "Give each component labels that identify it uniquely (for example an "
    "app.kubernetes.io/component label) and narrow selectors to match."
)
_LABEL_ATTACKS = ("Man in the middle", "Server impersonation")

RULES: dict[Rule, RuleInfo] = {
    Rule.M1: RuleInfo(
        "Port open on container is not declared",
        ("Command and control", "Sensitive port information"),
        "Declare the port in the container spec, or bind the listener to localhost if it is internal only.",
    ),
    Rule.M2: RuleInfo(
        "Container allocates dynamic ports",
        ("Loosened security policies",),
        "Configure the application to use fixed ports; if it cannot, document the dynamic ports "
        "so that traffic-based policy generators do not pin them.",
    ),
    Rule.M3: RuleInfo(
        "Port declared on container is not open",
        ("Data interception / spoofing", "Data exfiltration"),
        "Remove the port declaration, or declare it only when the feature that opens it is enabled.",
        severity="low",
    ),
    Rule.M4A: RuleInfo("Compute unit collision", _LABEL_ATTACKS, _LABEL_FIX, "high"),
    Rule.M4B: RuleInfo("Service label collision", _LABEL_ATTACKS, _LABEL_FIX, "high"),
    Rule.M4C: RuleInfo("Compute unit subset collision", _LABEL_ATTACKS, _LABEL_FIX, "high"),
    Rule.M4Star: RuleInfo("Global label collision", _LABEL_ATTACKS, _LABEL_FIX, "high"),
    Rule.M5A: RuleInfo(
        "Service targets unopened port",
        ("Data interception",),
        "Point the service at a port the workload actually listens on.",
    ),
    Rule.M5B: RuleInfo(
        "Service targets undeclared port",
        ("Data spoofing",),
        "Declare the target port on the container, or point the service at a declared port.",
    ),
    Rule.M5C: RuleInfo(
        "Headless service port is not available",
        ("Denial of service",),
        "Drop the port settings from the headless service; headless services do not proxy ports.",
    ),
    Rule.M5D: RuleInfo(
        "Service without target",
        ("Bypassing security checks",),
        "Make the selector match the pod labels of an existing workload "
        "(kubectl get pods -l <selector> should list pods).",
    ),
    Rule.M6: RuleInfo(
        "Lack of network policies",
        ("Data interception / spoofing", "Privilege escalation"),
        "Define or enable network policies; each policy should select at least one pod "
        "and allow only the connections the application needs.",
    ),
    Rule.M7: RuleInfo(
        "Container binds to host network",
        ("Bypassing network controls",),
        "Set hostNetwork to false if the workload can run without it; otherwise audit the pod, "
        "since network policies do not apply to it.",
    ),
}


def make_finding(rule: Rule, subjects: Iterable[Any], message: str, **evidence: Any) -> Finding:
    info = RULES[rule]
    return Finding(
        rule=rule,
        subjects=tuple(str(s) for s in subjects),
        evidence=evidence,
        message=message,
        mitigation_hint=info.mitigation,
        possible_attacks=info.attacks,
        severity=info.severity,
    )


@dataclass(frozen=True)
class RuleContext:
    bundle: ApplicationBundle
    # baseline-subtracted snapshots: (), (run1,) or (run1, run2)
    snapshots: tuple[RuntimeSnapshot, ...] = ()
    ephemeral_range: tuple[int, int] = DEFAULT_EPHEMERAL_RANGE

    def __post_init__(self):
        lo, hi = self.ephemeral_range
        if not (1 <= lo <= hi <= 65535):
            raise ValueError(f"invalid ephemeral range {lo}-{hi}")
        if len(self.snapshots) > 2:
            raise ValueError("at most two snapshot iterations are supported")
        for s in self.snapshots:
            if s.application_id != self.bundle.application_id:
                raise SnapshotMismatchError(
                    f"snapshot for {s.application_id!r} given for application {self.bundle.application_id!r}"
                )
            for obs in s.observations:
                if self.bundle.unit(obs.owner_unit_id) is None:
                    raise SnapshotMismatchError(f"pod {obs.pod_name} belongs to unknown unit {obs.owner_unit_id}")

    @classmethod
    def build(
        cls,
        bundle: ApplicationBundle,
        snapshot1: RuntimeSnapshot | None = None,
        snapshot2: RuntimeSnapshot | None = None,
        ephemeral_range: tuple[int, int] = DEFAULT_EPHEMERAL_RANGE,
    ) -> RuleContext:
        """Context from raw snapshots; host baselines are subtracted here."""
        snaps = tuple(subtract_host_baseline(s, bundle) for s in (snapshot1, snapshot2) if s is not None)
        return cls(bundle, snaps, ephemeral_range)

    @property
    def has_runtime(self) -> bool:
        return bool(self.snapshots)

    @property
    def has_two_runs(self) -> bool:
        return len(self.snapshots) == 2

    def in_ephemeral_range(self, port: int) -> bool:
        return self.ephemeral_range[0] <= port <= self.ephemeral_range[1]

    def port_diff(self) -> IterationDiff:
        if self.has_two_runs:
            return diff_iterations(*self.snapshots)
        # a single run: everything seen counts as stable
        units = {
            uid: UnitPortDiff(frozenset(s.identity for s in socks), frozenset(), frozenset())
            for uid, socks in self.snapshots[0].sockets_by_unit().items()
        }
        return IterationDiff(units)

    def processes(self) -> dict[tuple, str]:
        out = {}
        for snap in self.snapshots:
            for obs in snap.observations:
                for s in obs.sockets:
                    if s.process_name:
                        out.setdefault((obs.owner_unit_id, s.identity), s.process_name)
        return out


@dataclass
class AnalysisResult:
    application_id: str
    findings: list[Finding] = field(default_factory=list)
    skipped_rules: dict[str, str] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class _UnitPorts:
    """Runtime port classification of one compute unit."""

    m1: dict[tuple[str, int], list[tuple[str, int, str]]]
    m2_first: list[tuple[str, int, str]]
    m2_second: list[tuple[str, int, str]]
    observed_keys: frozenset[tuple[str, int]]


def _classify_unit(unit: ComputeUnit, diff: UnitPortDiff, diagnostics: list[str]) -> _UnitPorts:
    declared = unit.declared_ports
    stable_keys = {(p, n) for p, n, _ in diff.stable}
    dynamic_first, dynamic_second = [], []
    for bucket, target in ((diff.only_first, dynamic_first), (diff.only_second, dynamic_second)):
        for ident in sorted(bucket):
            proto, port, scope = ident
            if proto == "UDP":
                diagnostics.append(f"{unit.id}: UDP {port} seen in one run only; ignored as runtime noise")
            elif (proto, port) in declared:
                diagnostics.append(f"{unit.id}: declared {proto} {port} seen in one run only")
            elif (proto, port) in stable_keys:
                diagnostics.append(f"{unit.id}: {proto} {port} changed bind address between runs")
            else:
                target.append(ident)
    dynamic_keys = {(p, n) for p, n, _ in dynamic_first + dynamic_second}

    m1: dict[tuple[str, int], list] = defaultdict(list)
    loopback_only: set[tuple[str, int]] = set()
    for ident in sorted(diff.stable):
        proto, port, scope = ident
        key = (proto, port)
        if key in declared or key in dynamic_keys:
            continue
        if scope == LOOPBACK:
            loopback_only.add(key)
        else:
            m1[key].append(ident)
    for proto, port in sorted(loopback_only - set(m1)):
        diagnostics.append(f"{unit.id}: undeclared {proto} {port} bound to loopback only; not reachable from the cluster")
    return _UnitPorts(dict(m1), dynamic_first, dynamic_second, frozenset((p, n) for p, n, _ in diff.observed))


def _runtime_view(ctx: RuleContext, diagnostics: list[str]) -> dict:
    diff = ctx.port_diff()
    diagnostics.extend(diff.diagnostics)
    empty = UnitPortDiff(frozenset(), frozenset(), frozenset())
    return {
        u.id: _classify_unit(u, diff.units.get(u.id, empty), diagnostics)
        for u in ctx.bundle.compute_units
        if u.is_runtime_observable
    }


def detect_m1(ctx: RuleContext, _view: dict | None = None, diagnostics: list[str] | None = None) -> list[Finding]:
    if not ctx.has_runtime:
        return []
    view = _view if _view is not None else _runtime_view(ctx, diagnostics if diagnostics is not None else [])
    procs = ctx.processes()
    out = []
    for uid, ports in view.items():
        for (proto, port), idents in sorted(ports.m1.items()):
            process = next((procs[(uid, i)] for i in idents if (uid, i) in procs), None)
            evidence = {"protocol": proto, "port": port, "bind_scopes": sorted({i[2] for i in idents})}
            if process:
                evidence["process"] = process
            out.append(make_finding(Rule.M1, [uid], f"{uid.short} listens on undeclared {proto} port {port}", **evidence))
    return out


def detect_m2(ctx: RuleContext, _view: dict | None = None, diagnostics: list[str] | None = None) -> list[Finding]:
    if not ctx.has_two_runs:
        return []
    view = _view if _view is not None else _runtime_view(ctx, diagnostics if diagnostics is not None else [])
    out = []
    lo, hi = ctx.ephemeral_range
    for uid, ports in view.items():
        if not (ports.m2_first or ports.m2_second):
            continue

        def describe(idents):
            return [
                {"protocol": p, "port": n, "bind_scope": s, "in_ephemeral_range": ctx.in_ephemeral_range(n)}
                for p, n, s in idents
            ]

        outside = sorted({n for _, n, _ in ports.m2_first + ports.m2_second if not ctx.in_ephemeral_range(n)})
        evidence: dict[str, Any] = {
            "iteration1": describe(ports.m2_first),
            "iteration2": describe(ports.m2_second),
            "ephemeral_range": [lo, hi],
        }
        if outside:
            evidence["note"] = f"ports {outside} outside configured ephemeral range"
        nums = sorted({n for _, n, _ in ports.m2_first + ports.m2_second})
        out.append(make_finding(Rule.M2, [uid], f"{uid.short} opens dynamic ports that change between runs: {nums}", **evidence))
    return out


def detect_m3(ctx: RuleContext, _view: dict | None = None, diagnostics: list[str] | None = None) -> list[Finding]:
    if not ctx.has_runtime:
        return []
    view = _view if _view is not None else _runtime_view(ctx, diagnostics if diagnostics is not None else [])
    out = []
    for unit in ctx.bundle.compute_units:
        if unit.id not in view:
            continue
        observed = view[unit.id].observed_keys
        seen = set()
        for c in unit.containers:
            for decl in c.declared_ports:
                if decl.key in observed or decl.key in seen:
                    continue
                seen.add(decl.key)
                evidence = {"protocol": decl.protocol, "port": decl.number, "container": c.name}
                if decl.name:
                    evidence["port_name"] = decl.name
                out.append(
                    make_finding(
                        Rule.M3, [unit.id], f"{unit.id.short} declares {decl.protocol} port {decl.number} but never listens on it", **evidence
                    )
                )
    return out


def _service_targets(svc: ServiceSpec, bundle: ApplicationBundle) -> list[ComputeUnit]:
    return select_units(svc.selector, bundle, namespace=svc.id.namespace)


def detect_m4(bundle: ApplicationBundle) -> list[Finding]:
    out = []
    units = sorted(bundle.compute_units, key=lambda u: u.id)
    for a, b in itertools.combinations(units, 2):
        if a.pod_labels and label_set_equal(a.pod_labels, b.pod_labels):
            out.append(
                make_finding(
                    Rule.M4A, [a.id, b.id], f"{a.id.short} and {b.id.short} carry identical pod labels",
                    labels=a.pod_labels.to_dict(),
                )
            )

    services = [s for s in sorted(bundle.services, key=lambda s: s.id) if s.service_type != "ExternalName"]
    targets = {s.id: _service_targets(s, bundle) for s in services}
    by_unit: dict = defaultdict(list)
    for s in services:
        for u in targets[s.id]:
            by_unit[u.id].append(s)
    for uid in sorted(by_unit):
        svcs = by_unit[uid]
        if len(svcs) < 2:
            continue
        evidence: dict[str, Any] = {"services": [str(s.id) for s in svcs]}
        if any(s.headless for s in svcs) and any(not s.headless for s in svcs):
            evidence["note"] = "load-balanced and headless services on the same pods; this pairing is sometimes deliberate"
        out.append(make_finding(Rule.M4B, [uid, *(s.id for s in svcs)], f"{uid.short} is targeted by {len(svcs)} services", **evidence))

    for s in services:
        selected = targets[s.id]
        if len(selected) >= 2:
            out.append(
                make_finding(
                    Rule.M4C, [s.id, *(u.id for u in selected)],
                    f"service {s.id.name} selects {len(selected)} distinct compute units",
                    selector=s.selector.match_labels.to_dict(),
                    units={str(u.id): u.pod_labels.to_dict() for u in selected},
                )
            )
    return out


def detect_m4_star(bundles: Sequence[ApplicationBundle]) -> list[Finding]:
    """Label collisions between different applications in one cluster."""
    out = []
    ordered = sorted(bundles, key=lambda b: b.application_id)
    for a, b in itertools.combinations(ordered, 2):
        if a.application_id == b.application_id:
            raise ValueError(f"duplicate application id {a.application_id!r}")
        for ua in sorted(a.compute_units, key=lambda u: u.id):
            for ub in sorted(b.compute_units, key=lambda u: u.id):
                if ua.pod_labels and label_set_equal(ua.pod_labels, ub.pod_labels):
                    out.append(
                        make_finding(
                            Rule.M4Star, [ua.id, ub.id],
                            f"{a.application_id}:{ua.id.short} and {b.application_id}:{ub.id.short} carry identical pod labels",
                            kind="equal_labels", applications=[a.application_id, b.application_id],
                            labels=ua.pod_labels.to_dict(),
                        )
                    )
        for src, dst in ((a, b), (b, a)):
            for svc in sorted(src.services, key=lambda s: s.id):
                if svc.service_type == "ExternalName":
                    continue
                for u in select_units(svc.selector, dst, namespace=svc.id.namespace):
                    out.append(
                        make_finding(
                            Rule.M4Star, [svc.id, u.id],
                            f"service {src.application_id}:{svc.id.name} also selects {dst.application_id}:{u.id.short}",
                            kind="cross_selection", applications=[src.application_id, dst.application_id],
                            selector=svc.selector.match_labels.to_dict(),
                        )
                    )
    return sorted(out, key=Finding.sort_key)


def detect_m5(ctx: RuleContext, _view: dict | None = None, diagnostics: list[str] | None = None) -> list[Finding]:
    bundle = ctx.bundle
    view = None
    if ctx.has_runtime:
        view = _view if _view is not None else _runtime_view(ctx, diagnostics if diagnostics is not None else [])
    out = []
    for svc in sorted(bundle.services, key=lambda s: s.id):
        if svc.service_type == "ExternalName":
            continue
        selected = _service_targets(svc, bundle)
        if not selected:
            reason = "no selector" if not svc.selector.present else "selector matches no compute unit"
            out.append(
                make_finding(
                    Rule.M5D, [svc.id], f"service {svc.id.name} has no target: {reason}",
                    selector=svc.selector.to_dict(), reason=reason,
                )
            )
            continue
        for unit in selected:
            for sp in svc.ports:
                target = resolve_target_port(sp, unit)
                base = {"service_port": sp.port, "target_port": sp.target, "protocol": sp.protocol}
                if target is UNRESOLVED:
                    out.append(
                        make_finding(
                            Rule.M5B, [svc.id, unit.id],
                            f"service {svc.id.name} targets port name {sp.target!r} which {unit.id.short} does not declare",
                            resolved=None, **base,
                        )
                    )
                    continue
                key = (sp.protocol, target)
                declared = key in unit.declared_ports
                if not declared:
                    out.append(
                        make_finding(
                            Rule.M5B, [svc.id, unit.id],
                            f"service {svc.id.name} targets {sp.protocol} {target}, not declared by {unit.id.short}",
                            resolved=target, **base,
                        )
                    )
                if view is None or unit.id not in view:
                    continue
                if key in view[unit.id].observed_keys:
                    continue
                if svc.headless:
                    out.append(
                        make_finding(
                            Rule.M5C, [svc.id, unit.id],
                            f"headless service {svc.id.name} points at {sp.protocol} {target}, which {unit.id.short} does not open",
                            resolved=target, **base,
                        )
                    )
                elif declared:
                    out.append(
                        make_finding(
                            Rule.M5A, [svc.id, unit.id],
                            f"service {svc.id.name} targets {sp.protocol} {target}, declared but never opened by {unit.id.short}",
                            resolved=target, **base,
                        )
                    )
    return out


def policy_selects(policy: NetworkPolicySpec, unit: ComputeUnit) -> bool:
    return policy.id.namespace == unit.id.namespace and matches(policy.pod_selector, unit.pod_labels)


def detect_m6(bundle: ApplicationBundle) -> list[Finding]:
    out = []
    if not bundle.policies:
        if bundle.policy_templates_present_but_disabled:
            status, msg = "available_but_disabled", "network policies are shipped but not enabled"
        else:
            status, msg = "none_defined", "no network policies are defined"
        out.append(make_finding(Rule.M6, [bundle.application_id], f"{bundle.application_id}: {msg}", status=status))
    for pol in sorted(bundle.policies, key=lambda p: p.id):
        if not any(policy_selects(pol, u) for u in bundle.compute_units):
            out.append(
                make_finding(
                    Rule.M6, [pol.id], f"network policy {pol.id.name} selects no pods",
                    status="selects_no_pods", pod_selector=pol.pod_selector.to_dict(),
                )
            )
    return out


def detect_m7(bundle: ApplicationBundle) -> list[Finding]:
    out = []
    for unit in sorted(bundle.compute_units, key=lambda u: u.id):
        if not unit.host_network:
            continue
        pols = [str(p.id) for p in sorted(bundle.policies, key=lambda p: p.id) if policy_selects(p, unit)]
        out.append(
            make_finding(
                Rule.M7, [unit.id], f"{unit.id.short} runs on the host network",
                policies=pols, policy_ineffective=bool(pols),
            )
        )
    return out


def analyze_application(ctx: RuleContext) -> AnalysisResult:
    result = AnalysisResult(ctx.bundle.application_id)
    diags = result.diagnostics
    view = _runtime_view(ctx, diags) if ctx.has_runtime else None
    findings: list[Finding] = []
    if ctx.has_runtime:
        findings += detect_m1(ctx, view)
        findings += detect_m3(ctx, view)
        if ctx.has_two_runs:
            findings += detect_m2(ctx, view)
        else:
            result.skipped_rules[Rule.M2.value] = "skipped: requires two runtime iterations"
    else:
        for rule in RUNTIME_RULES:
            result.skipped_rules[rule.value] = "skipped: requires runtime data"
    findings += detect_m4(ctx.bundle)
    findings += detect_m5(ctx, view)
    findings += detect_m6(ctx.bundle)
    findings += detect_m7(ctx.bundle)
    if ctx.bundle.unanalyzed:
        diags.append(f"{len(ctx.bundle.unanalyzed)} resource(s) of unanalyzed kinds ignored")
    result.findings = sorted(findings, key=Finding.sort_key)
    result.diagnostics = sorted(set(diags))
    return result


def m1_rollup(findings: Iterable[Finding]) -> dict[str, list[str]]:
    """Undeclared open ports grouped per compute unit."""
    out: dict[str, list[str]] = defaultdict(list)
    for f in findings:
        if f.rule is Rule.M1:
            out[f.subjects[0]].append(f"{f.evidence['protocol']}/{f.evidence['port']}")
    return {k: sorted(v) for k, v in sorted(out.items())}
