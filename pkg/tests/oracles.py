"""Independent reference implementations used only by the tests."""

import math

from endogov.domain import (
    Grade,
    Histology,
    Lvsi,
    MolecularSubtype,
    MyometrialInvasion,
    RiskTier,
    Stage,
)

M, S, H, G = MolecularSubtype, Stage, Histology, Grade
LATE = (S.III, S.IVA, S.IVB)
NON_ENDO_HIGH = (H.SEROUS, H.CLEAR_CELL, H.UNDIFFERENTIATED)


def table1(subtype, stage, histology, grade, mi, lvsi) -> RiskTier:
    """Nested-conditional reading of the risk table, written without the rule engine."""
    if subtype is M.POLEMUT:
        return RiskTier.LOW
    if subtype is M.P53ABN:
        if stage is S.IA and mi is MyometrialInvasion.NONE:
            return RiskTier.HIGH_INTERMEDIATE
        return RiskTier.HIGH
    if subtype is M.MMRD and stage not in (S.IA, S.IB):
        return RiskTier.HIGH_INTERMEDIATE
    if stage in LATE or histology in NON_ENDO_HIGH:
        return RiskTier.HIGH
    # soft layer: the most severe applicable Table-2 row, Intermediate when none applies
    if subtype is M.MMRD:
        if lvsi is Lvsi.POSITIVE or mi is MyometrialInvasion.DEEP:
            return RiskTier.HIGH_INTERMEDIATE
        return RiskTier.INTERMEDIATE
    # NSMP, stage IA/IB/II, endometrioid or mixed
    if stage is S.IB or grade is G.G3:
        return RiskTier.INTERMEDIATE
    if stage is S.IA and grade in (G.G1, G.G2) and histology is H.ENDOMETRIOID:
        return RiskTier.LOW
    return RiskTier.INTERMEDIATE


def cosine(a, b):
    dot = math.fsum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))


def auc_all_pairs(labels, scores):
    """Mann-Whitney AUC by explicit pair counting, ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def two_hop_by_paths(entities, edges, seeds):
    """Best weight product over every simple path of length <= 2 from any seed."""
    adj = {e: [] for e in entities}
    for a, b, w in edges:
        adj[a].append((b, w))
        adj[b].append((a, w))
    rel = {e: 0.0 for e in entities}
    for s in seeds:
        rel[s] = 1.0
    for s in seeds:
        for u, w1 in adj[s]:
            rel[u] = max(rel[u], w1)
            for v, w2 in adj[u]:
                if v != s:
                    rel[v] = max(rel[v], w1 * w2)
    return rel


def topk_by_paths(graph, ev, k):
    """Top-k context entities ranked by explicit two-hop path enumeration."""
    from endogov.kg.graph import evidence_terms

    terms = evidence_terms(ev)
    ids = [e.entity_id for e in graph.entities]
    seeds = [e.entity_id for e in graph.entities if e.label.lower() in terms]
    edges = [(e.source, e.target, e.weight) for e in graph.reference_edges]
    rel = two_hop_by_paths(ids, edges, seeds)
    ranked = sorted(ids, key=lambda i: (-rel[i], i))[:k]
    return [(i, rel[i]) for i in ranked]


def permuted_priorities(perm):
    """The shipped rule set with hard-rule priorities relabelled through ``perm``."""
    from endogov.ruleset import default_rules_source, parse_ruleset

    out = []
    for line in default_rules_source().splitlines():
        stripped = line.strip()
        if stripped.startswith("priority ") and stripped != "priority 10":
            line = f"  priority {perm[int(stripped.split()[1])]}"
        out.append(line)
    return parse_ruleset("\n".join(out) + "\n")
