"""Report assembly, suppressions and rendering.

Exit codes follow linter conventions: 0 when nothing is reported, 1 when
findings remain after suppressions, 2 when the run itself failed.
"""

from __future__ import annotations

import datetime as _dt
import fnmatch
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

from . import __version__
from .model import Finding, Rule
from .netpol import Endpoint
from .rules import RULES, AnalysisResult, m1_rollup

SCHEMA_VERSION = 1
RULE_COLUMNS = [r.value for r in Rule]

EXIT_CLEAN, EXIT_FINDINGS, EXIT_ERROR = 0, 1, 2


class ConfigError(ValueError):
    """Malformed suppression file or pattern."""


@dataclass(frozen=True)
class Suppression:
    rule: str
    subject: str
    justification: str

    def __post_init__(self):
        if self.rule != "*":
            try:
                object.__setattr__(self, "rule", Rule.parse(self.rule).value)
            except ValueError:
                raise ConfigError(f"unknown rule id {self.rule!r} in suppression") from None
        if not self.subject:
            raise ConfigError("suppression subject pattern must not be empty")
        if self.subject.count("[") != self.subject.count("]"):
            raise ConfigError(f"unbalanced brackets in subject pattern {self.subject!r}")
        if not self.justification or not self.justification.strip():
            raise ConfigError(f"suppression for {self.rule} {self.subject} needs a justification")

    def covers(self, finding: Finding) -> bool:
        if self.rule != "*" and self.rule != finding.rule.value:
            return False
        return any(fnmatch.fnmatchcase(s, self.subject) for s in finding.subjects)

    def to_dict(self) -> dict[str, str]:
        return {"rule": self.rule, "subject": self.subject, "justification": self.justification}


def load_suppressions(path: str | Path) -> list[Suppression]:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("suppressions")
    if not isinstance(doc, list):
        raise ConfigError(f"{path}: expected a list of {{rule, subject, justification}} entries")
    out = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or set(entry) - {"rule", "subject", "justification"}:
            raise ConfigError(f"{path}: entry {i} must have exactly rule, subject and justification")
        out.append(Suppression(str(entry.get("rule", "")), str(entry.get("subject", "")), str(entry.get("justification") or "")))
    return out


@dataclass(frozen=True)
class SuppressedFinding:
    finding: Finding
    justifications: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"finding": self.finding.to_dict(), "justifications": list(self.justifications)}


@dataclass
class ApplicationReport:
    application_id: str
    findings: list[Finding] = field(default_factory=list)
    skipped_rules: dict[str, str] = field(default_factory=dict)
    diagnostics: list[str] = field(default_factory=list)
    suppressed: list[SuppressedFinding] = field(default_factory=list)
    unanalyzed_kinds: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_result(cls, result: AnalysisResult, unanalyzed: Iterable[tuple[str, str]] = ()) -> ApplicationReport:
        kinds: dict[str, int] = {}
        for kind, _ in unanalyzed:
            kinds[kind] = kinds.get(kind, 0) + 1
        return cls(result.application_id, list(result.findings), dict(result.skipped_rules), list(result.diagnostics),
                   unanalyzed_kinds=kinds)

    def to_dict(self) -> dict[str, Any]:
        return {
            "application_id": self.application_id,
            "findings": [f.to_dict() for f in self.findings],
            "suppressed": [s.to_dict() for s in self.suppressed],
            "skipped_rules": dict(self.skipped_rules),
            "diagnostics": list(self.diagnostics),
            "unanalyzed_kinds": dict(self.unanalyzed_kinds),
            "m1_by_unit": m1_rollup(self.findings),
        }


@dataclass
class Report:
    applications: list[ApplicationReport] = field(default_factory=list)
    cluster_findings: list[Finding] = field(default_factory=list)
    cluster_suppressed: list[SuppressedFinding] = field(default_factory=list)
    exposure: list[Endpoint] | None = None
    stale_suppressions: list[Suppression] = field(default_factory=list)
    tool_version: str = __version__

    def __post_init__(self):
        self.applications = sorted(self.applications, key=lambda a: a.application_id)
        self.cluster_findings = sorted(self.cluster_findings, key=Finding.sort_key)

    @property
    def summary(self) -> dict[str, Any]:
        return aggregate(self.applications, self.cluster_findings)

    @property
    def has_findings(self) -> bool:
        return bool(self.cluster_findings) or any(a.findings for a in self.applications)

    def to_dict(self, *, timestamp: str | None = None) -> dict[str, Any]:
        out = {
            "schema_version": SCHEMA_VERSION,
            "tool_version": self.tool_version,
            "applications": [a.to_dict() for a in self.applications],
            "cluster_findings": [f.to_dict() for f in self.cluster_findings],
            "cluster_suppressed": [s.to_dict() for s in self.cluster_suppressed],
            "exposure": None if self.exposure is None else [e.to_dict() for e in self.exposure],
            "stale_suppressions": [s.to_dict() for s in self.stale_suppressions],
            "summary": self.summary,
        }
        if timestamp is not None:
            out["generated_at"] = timestamp
        return out


def _involved_apps(finding: Finding) -> list[str]:
    return list(finding.evidence.get("applications", ()))


def aggregate(applications: Sequence[ApplicationReport], cluster_findings: Sequence[Finding] = ()) -> dict[str, Any]:
    """Per-application and total finding counts per rule.

    Cluster-wide (M4*) findings are counted once in the totals and once in
    the row of every application they involve.
    """
    rows = []
    totals = dict.fromkeys(RULE_COLUMNS, 0)
    for app in sorted(applications, key=lambda a: a.application_id):
        counts = dict.fromkeys(RULE_COLUMNS, 0)
        for f in app.findings:
            counts[f.rule.value] += 1
            totals[f.rule.value] += 1
        counts[Rule.M4Star.value] = sum(app.application_id in _involved_apps(f) for f in cluster_findings)
        rows.append({"application_id": app.application_id, "counts": counts, "total": sum(counts.values())})
    totals[Rule.M4Star.value] = len(cluster_findings)
    return {
        "columns": RULE_COLUMNS,
        "rows": rows,
        "totals": totals,
        "total": sum(totals.values()),
        "affected_apps": sum(1 for r in rows if r["total"] > 0),
        "applications": len(rows),
    }


def _split(findings: Iterable[Finding], suppressions: Sequence[Suppression], used: set[int]):
    visible, hidden = [], []
    for f in findings:
        hits = [i for i, s in enumerate(suppressions) if s.covers(f)]
        if hits:
            used.update(hits)
            hidden.append(SuppressedFinding(f, tuple(suppressions[i].justification for i in hits)))
        else:
            visible.append(f)
    return visible, hidden


def apply_suppressions(report: Report, suppressions: Sequence[Suppression]) -> Report:
    used: set[int] = set()
    apps = []
    for app in report.applications:
        visible, hidden = _split(app.findings, suppressions, used)
        apps.append(replace(app, findings=visible, suppressed=[*app.suppressed, *hidden]))
    cluster, cluster_hidden = _split(report.cluster_findings, suppressions, used)
    stale = [s for i, s in enumerate(suppressions) if i not in used]
    return Report(
        applications=apps,
        cluster_findings=cluster,
        cluster_suppressed=[*report.cluster_suppressed, *cluster_hidden],
        exposure=report.exposure,
        stale_suppressions=[*report.stale_suppressions, *stale],
        tool_version=report.tool_version,
    )


# --- rendering -------------------------------------------------------------


def _table(headers: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)] if rows else [len(h) for h in headers]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*headers), "  ".join("-" * w for w in widths)]
    lines += [fmt.format(*map(str, r)) for r in rows]
    return [line.rstrip() for line in lines]


def _finding_block(f: Finding) -> list[str]:
    return [
        f"[{f.rule.value}] {RULES[f.rule].title} ({f.severity})",
        f"  {f.message}",
        f"  subjects: {', '.join(f.subjects)}",
        f"  possible attacks: {', '.join(f.possible_attacks)}",
        f"  mitigation: {f.mitigation_hint}",
    ]


def render_text(report: Report) -> str:
    lines = [f"knetaudit {report.tool_version}", ""]
    for app in report.applications:
        lines.append(f"== {app.application_id}: {len(app.findings)} finding(s)")
        for f in app.findings:
            lines += _finding_block(f)
        for rule, why in sorted(app.skipped_rules.items()):
            lines.append(f"  {rule}: {why}")
        for d in app.diagnostics:
            lines.append(f"  note: {d}")
        for s in app.suppressed:
            lines.append(f"  suppressed [{s.finding.rule.value}] {', '.join(s.finding.subjects)}: {'; '.join(s.justifications)}")
        lines.append("")
    if report.cluster_findings:
        lines.append(f"== cluster: {len(report.cluster_findings)} finding(s)")
        for f in report.cluster_findings:
            lines += _finding_block(f)
        lines.append("")
    if report.exposure is not None:
        lines.append(f"== residual exposure: {len(report.exposure)} reachable endpoint(s)")
        for e in report.exposure:
            via = f"via service {e.service_id}" if e.service_id else "direct to pod"
            lines.append(f"  {e.unit_id} {e.protocol}/{e.port} {via}")
        lines.append("")
    for s in report.stale_suppressions:
        lines.append(f"warning: stale suppression {s.rule} {s.subject} matched nothing")
    summary = report.summary
    cols = summary["columns"]
    rows = [[r["application_id"], *(r["counts"][c] for c in cols), r["total"]] for r in summary["rows"]]
    rows.append(["total", *(summary["totals"][c] for c in cols), summary["total"]])
    lines += _table(["application", *cols, "all"], rows)
    lines.append(f"affected applications: {summary['affected_apps']}/{summary['applications']}")
    return "\n".join(lines) + "\n"


def render(report: Report, format: str = "json", *, timestamps: bool = False) -> tuple[bytes, int]:
    """Serialize ``report``; returns the bytes and the process exit code."""
    if format == "json":
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat() if timestamps else None
        body = json.dumps(report.to_dict(timestamp=stamp), sort_keys=True, indent=2) + "\n"
    elif format == "text":
        body = render_text(report)
    else:
        raise ValueError(f"unknown report format {format!r}")
    return body.encode("utf-8"), EXIT_FINDINGS if report.has_findings else EXIT_CLEAN
