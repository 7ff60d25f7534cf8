import json

import pytest

from knetaudit.ingest import bundle_from_manifests
from knetaudit.model import Finding, Rule
from knetaudit.pipeline import AppInput, analyze
from knetaudit.report import (
    EXIT_CLEAN,
    EXIT_FINDINGS,
    ApplicationReport,
    ConfigError,
    Report,
    Suppression,
    aggregate,
    apply_suppressions,
    load_suppressions,
    render,
)
from knetaudit.rules import make_finding
from knetaudit.snapshot import load_snapshot

from . import corpus
from .helpers import FIXTURES, bundle_of, service, workload


def flink_input():
    bundle = bundle_from_manifests([FIXTURES / "flink" / "manifest.yaml"], "flink")
    s1, s2 = (load_snapshot(FIXTURES / "flink" / f"snapshot{i}.json") for i in (1, 2))
    return AppInput(bundle, s1, s2)


def app_report(app_id, *rules):
    return ApplicationReport(app_id, [make_finding(Rule.parse(r), [f"{app_id}/x"], "m") for r in rules])


def test_aggregate_two_apps():
    s = aggregate([app_report("a", "M1", "M6"), app_report("b")])
    assert s["affected_apps"] == 1 and s["applications"] == 2
    assert s["totals"]["M1"] == 1 and s["totals"]["M6"] == 1 and s["total"] == 2


def test_aggregate_empty():
    s = aggregate([])
    assert s["rows"] == [] and s["affected_apps"] == 0 and s["applications"] == 0 and s["total"] == 0


def test_aggregate_cluster_findings():
    f = make_finding(Rule.M4Star, ["a/x", "b/y"], "m", applications=["a", "b"])
    s = aggregate([app_report("a"), app_report("b"), app_report("c")], [f])
    assert s["totals"]["M4*"] == 1
    assert [r["counts"]["M4*"] for r in s["rows"]] == [1, 1, 0]
    assert s["affected_apps"] == 2


def test_corpus_columns_all_nonzero():
    fixtures = corpus.build()
    apps, cluster = [], []
    for fx in fixtures:
        rep = analyze(fx.apps)
        for a in rep.applications:
            a.application_id = f"{fx.name}-{a.application_id}"
            apps.append(a)
        cluster += rep.cluster_findings
    s = Report(apps, cluster).summary
    assert all(s["totals"][c] >= 1 for c in s["columns"])
    # summary counts equal the finding lists
    assert s["total"] == sum(len(a.findings) for a in apps) + len(cluster)


def mariadb_report():
    docs = [
        workload("mariadb", {"app": "mariadb"}, [3306], kind="StatefulSet"),
        service("mariadb", {"app": "mariadb"}, [(3306, 3306)]),
        service("mariadb-headless", {"app": "mariadb"}, [(3306, 3306)], headless=True),
    ]
    return analyze([AppInput(bundle_of(docs, "db"))])


def test_suppression_moves_finding():
    rep = mariadb_report()
    before = rep.summary["totals"]["M4B"]
    out = apply_suppressions(rep, [Suppression("M4B", "*/mariadb-headless", "primary plus headless is intended")])
    assert before == 1 and out.summary["totals"]["M4B"] == 0
    (app,) = out.applications
    assert [s.finding.rule for s in app.suppressed] == [Rule.M4B]
    assert out.stale_suppressions == []
    # soundness: visible + suppressed equals the unsuppressed total
    assert len(app.findings) + len(app.suppressed) == len(rep.applications[0].findings)


def test_stale_suppression():
    out = apply_suppressions(mariadb_report(), [Suppression("M7", "*", "no host network here")])
    assert [s.rule for s in out.stale_suppressions] == ["M7"]


def test_double_match_suppressed_once():
    sups = [Suppression("M4B", "*/mariadb-headless", "one"), Suppression("*", "db/*", "two")]
    rep = mariadb_report()
    out = apply_suppressions(rep, sups)
    (app,) = out.applications
    m4b = [s for s in app.suppressed if s.finding.rule is Rule.M4B]
    assert len(m4b) == 1 and m4b[0].justifications == ("one", "two")
    assert out.stale_suppressions == []
    # the application-level M6 subject is the bare id "db", outside "db/*"
    assert [f.rule for f in app.findings] == [Rule.M6]


@pytest.mark.parametrize(
    "rule,subject,why",
    [("M9", "*", "x"), ("M1", "", "x"), ("M1", "a[b", "x"), ("M1", "*", ""), ("M1", "*", "   ")],
)
def test_bad_suppressions(rule, subject, why):
    with pytest.raises(ConfigError):
        Suppression(rule, subject, why)


def test_load_suppressions(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("- rule: m4b\n  subject: '*/x'\n  justification: ok\n")
    assert load_suppressions(p) == [Suppression("M4B", "*/x", "ok")]
    p.write_text("suppressions:\n- {rule: M1, subject: '*', justification: ok}\n")
    assert len(load_suppressions(p)) == 1
    p.write_text("- {rule: M1, subject: '*', justification: ok, extra: 1}\n")
    with pytest.raises(ConfigError):
        load_suppressions(p)
    p.write_text("just text")
    with pytest.raises(ConfigError):
        load_suppressions(p)


def test_render_empty():
    body, code = render(Report(), "json")
    doc = json.loads(body)
    assert code == EXIT_CLEAN
    assert doc["applications"] == [] and doc["schema_version"] == 1
    assert "generated_at" not in doc


def test_render_timestamps():
    body, _ = render(Report(), "json", timestamps=True)
    assert "generated_at" in json.loads(body)


def test_render_flink_text():
    rep = analyze([flink_input()])
    body, code = render(rep, "text")
    text = body.decode()
    assert code == EXIT_FINDINGS
    assert "[M3]" in text and "[M2]" in text and "[M6]" in text and "6121" in text
    assert "possible attacks: Data interception / spoofing, Data exfiltration" in text
    assert "mitigation:" in text


def test_render_json_keys_sorted_and_deterministic():
    rep = mariadb_report()
    a, _ = render(rep, "json")
    b, _ = render(mariadb_report(), "json")
    assert a == b
    doc = json.loads(a)
    assert list(doc) == sorted(doc)
    f = doc["applications"][0]["findings"][0]
    assert set(f) >= {"rule", "subjects", "evidence", "message", "mitigation_hint", "possible_attacks", "severity"}


def test_render_unknown_format():
    with pytest.raises(ValueError):
        render(Report(), "xml")


def test_finding_validation():
    with pytest.raises(ValueError):
        Finding(Rule.M1, (), {}, "m", "h", ("a",), "medium")
