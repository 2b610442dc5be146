"""Hierarchical tagging of entities by average-linkage agglomerative clustering."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class TagNode:
    node_id: int
    members: tuple  # entity ids, sorted
    tag: str
    children: tuple = ()
    similarity: float = 1.0  # average linkage at which the children merged


@dataclass(frozen=True)
class TagHierarchy:
    """Leaves are nodes 0..n-1 in entity order; each merge appends one node."""

    nodes: tuple
    merges: tuple  # (left, right, similarity, new_node_id), in merge order
    roots: tuple

    @classmethod
    def empty(cls) -> "TagHierarchy":
        return cls((), (), ())

    def to_dict(self) -> dict:
        return {
            "nodes": [[n.node_id, list(n.members), n.tag, list(n.children), n.similarity] for n in self.nodes],
            "merges": [list(m) for m in self.merges],
            "roots": list(self.roots),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TagHierarchy":
        nodes = tuple(TagNode(i, tuple(m), t, tuple(c), s) for i, m, t, c, s in data["nodes"])
        return cls(nodes, tuple(tuple(m) for m in data["merges"]), tuple(data["roots"]))


def _majority_tag(types) -> str:
    counts = Counter(types)
    best = max(counts.values())
    return min(t for t, c in counts.items() if c == best)


def cluster_tags(entities, merge_threshold: float) -> TagHierarchy:
    """Merge the most similar pair of clusters until no pair reaches ``merge_threshold``.

    Similarity between clusters is the mean pairwise cosine of their members.
    Ties go to the pair with the smallest (left, right) node ids.
    """
    entities = list(entities)
    n = len(entities)
    if n == 0:
        raise ValueError("cluster_tags needs at least one entity")
    emb = np.ascontiguousarray([e.embedding for e in entities], dtype=np.float64)
    norms = kernels.row_norms(emb)
    unit = emb / norms[:, None]
    sim = unit @ unit.T

    nodes = [
        TagNode(i, (e.entity_id,), e.semantic_type)
        for i, e in enumerate(entities)
    ]
    types_of = {i: [e.semantic_type] for i, e in enumerate(entities)}
    size = {i: 1 for i in range(n)}
    active = list(range(n))
    # pairwise linkage keyed by (a, b) with a < b
    link = {(a, b): float(sim[a, b]) for ai, a in enumerate(active) for b in active[ai + 1 :]}
    merges = []

    while len(active) > 1:
        best_pair, best = None, -np.inf
        for ai, a in enumerate(active):
            for b in active[ai + 1 :]:
                s = link[(a, b)]
                if s > best:
                    best_pair, best = (a, b), s
        if best < merge_threshold:
            break
        a, b = best_pair
        new = len(nodes)
        members = tuple(sorted(nodes[a].members + nodes[b].members))
        types_of[new] = types_of[a] + types_of[b]
        nodes.append(TagNode(new, members, _majority_tag(types_of[new]), (a, b), best))
        size[new] = size[a] + size[b]
        active = [c for c in active if c not in (a, b)]
        for c in active:
            sa = link[(min(a, c), max(a, c))]
            sb = link[(min(b, c), max(b, c))]
            link[(c, new)] = (size[a] * sa + size[b] * sb) / size[new]
        active.append(new)
        merges.append((a, b, best, new))

    return TagHierarchy(tuple(nodes), tuple(merges), tuple(sorted(active)))
