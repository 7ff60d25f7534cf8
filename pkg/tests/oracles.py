"""Brute-force evaluators written straight from the Kubernetes definitions.

They work on plain dicts/tuples and share no code with the package, so the
package can be checked against them.
"""


def requirement_oracle(key, op, values, labels):
    present = key in labels.keys()
    if op == "In":
        return present and labels[key] in set(values)
    if op == "NotIn":
        return (not present) or labels[key] not in set(values)
    if op == "Exists":
        return present
    if op == "DoesNotExist":
        return not present
    raise AssertionError(op)


def selector_oracle(present, match_labels, expressions, labels):
    if not present:
        return False
    ok = True
    for k in match_labels:
        ok = ok and (k in labels and labels[k] == match_labels[k])
    for key, op, values in expressions:
        ok = ok and requirement_oracle(key, op, values, labels)
    return ok


def ingress_oracle(instance, src, dst, proto, port):
    """instance: {"units": {name: {"labels", "host", "ports": {pname: (proto, num)}}},
                  "policies": [{"selector", "types", "rules": [{"peers", "ports"}]}]}

    peers: list of dict labels (pod selectors, same namespace) or "ANY".
    ports: list of (proto, port-or-None-or-name, end) triples.
    Literal clause enumeration: allowed iff host, or unguarded, or some
    (policy, rule, peer, port) clause admits the flow.
    """
    d = instance["units"][dst]
    if d["host"]:
        return True
    guards = [
        p for p in instance["policies"]
        if "Ingress" in p["types"] and selector_oracle(True, p["selector"], [], d["labels"])
    ]
    if len(guards) == 0:
        return True
    s_labels = instance["units"][src]["labels"]
    clauses = []
    for pol in guards:
        for rule in pol["rules"]:
            peers = rule["peers"] if rule["peers"] else ["ANY"]
            ports = rule["ports"] if rule["ports"] else ["ANY"]
            for peer in peers:
                for pp in ports:
                    clauses.append((peer, pp))
    for peer, pp in clauses:
        peer_ok = peer == "ANY" or selector_oracle(True, peer, [], s_labels)
        if pp == "ANY":
            port_ok = True
        else:
            p_proto, p_port, p_end = pp
            if p_proto != proto:
                port_ok = False
            elif p_port is None:
                port_ok = True
            elif isinstance(p_port, str):
                port_ok = d["ports"].get(p_port) == (proto, port)
            elif p_end is not None:
                port_ok = p_port <= port <= p_end
            else:
                port_ok = p_port == port
        if peer_ok and port_ok:
            return True
    return False
