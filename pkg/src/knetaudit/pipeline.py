"""End-to-end analysis of one or many applications."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .model import ApplicationBundle
from .netpol import residual_exposure, uses_ip_block
from .report import ApplicationReport, Report
from .rules import DEFAULT_EPHEMERAL_RANGE, RuleContext, analyze_application, detect_m4_star
from .snapshot import RuntimeSnapshot


@dataclass(frozen=True)
class AppInput:
    bundle: ApplicationBundle
    snapshot1: RuntimeSnapshot | None = None
    snapshot2: RuntimeSnapshot | None = None


def analyze_one(app: AppInput, ephemeral_range=DEFAULT_EPHEMERAL_RANGE) -> tuple[ApplicationReport, RuleContext]:
    ctx = RuleContext.build(app.bundle, app.snapshot1, app.snapshot2, ephemeral_range)
    result = analyze_application(ctx)
    return ApplicationReport.from_result(result, app.bundle.unanalyzed), ctx


def analyze(
    apps: Sequence[AppInput],
    *,
    ephemeral_range: tuple[int, int] = DEFAULT_EPHEMERAL_RANGE,
    cluster: bool | None = None,
    exposure: bool = False,
    attacker_namespaces: Sequence[str] | None = None,
) -> Report:
    """Run per-application rules, then the cluster-wide collision check.

    ``cluster`` defaults to running M4* whenever more than one application
    is given. ``exposure`` adds residual reachability of misconfigured
    endpoints for applications that have snapshots.
    """
    reports = []
    endpoints = [] if exposure else None
    for app in sorted(apps, key=lambda a: a.bundle.application_id):
        report, ctx = analyze_one(app, ephemeral_range)
        reports.append(report)
        if exposure and ctx.has_runtime:
            endpoints += residual_exposure(
                app.bundle, report.findings, ctx.snapshots, attacker_namespaces=attacker_namespaces
            )
            if uses_ip_block(app.bundle):
                report.diagnostics.append(
                    "approximation: ipBlock peers are treated as matching every in-cluster source"
                )
    if cluster is None:
        cluster = len(apps) > 1
    cluster_findings = detect_m4_star([a.bundle for a in apps]) if cluster else []
    return Report(applications=reports, cluster_findings=cluster_findings, exposure=endpoints)
