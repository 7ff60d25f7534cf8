"""Label-selector matching and label-collision primitives."""

from __future__ import annotations

from collections.abc import Mapping

from .model import ApplicationBundle, ComputeUnit, LabelSelector, LabelSet, Requirement


def _requirement_holds(req: Requirement, labels: Mapping[str, str]) -> bool:
    if req.operator == "In":
        return req.key in labels and labels[req.key] in req.values
    if req.operator == "NotIn":
        return req.key not in labels or labels[req.key] not in req.values
    if req.operator == "Exists":
        return req.key in labels
    return req.key not in labels


def matches(selector: LabelSelector, labels: Mapping[str, str]) -> bool:
    if not selector.present:
        return False
    for key, value in selector.match_labels.items():
        if labels.get(key) != value:
            return False
    return all(_requirement_holds(req, labels) for req in selector.match_expressions)


def select_units(
    selector: LabelSelector, bundle: ApplicationBundle, namespace: str | None = None
) -> list[ComputeUnit]:
    """Units of ``bundle`` whose pod labels match, sorted by unit id.

    Passing ``namespace`` restricts the result to that namespace, which is
    how services and policies actually scope their selection.
    """
    return sorted(
        (
            u
            for u in bundle.compute_units
            if (namespace is None or u.id.namespace == namespace) and matches(selector, u.pod_labels)
        ),
        key=lambda u: u.id,
    )


def label_set_equal(a: Mapping[str, str], b: Mapping[str, str]) -> bool:
    return LabelSet(a, validate=False) == LabelSet(b, validate=False)
