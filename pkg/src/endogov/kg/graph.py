"""Guideline knowledge graph: corpus loading, evidence-weighted linking, retrieval."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from ..domain import FigoStage, PatientEvidence
from ..ruleset import RuleSet, match_rules
from . import kernels
from .tags import TagHierarchy, cluster_tags

DEFAULT_DELTA_R = 0.6
DEDUP_COSINE = 0.95
DEFAULT_TOP_K = 25
MAX_CHUNK_TOKENS = 1200
DEFAULT_TAG_THRESHOLD = 0.5

SEMANTIC_TYPES = frozenset(
    {
        "MolecularMarker",
        "HistologicalType",
        "StagingConcept",
        "ClinicalFeature",
        "Procedure",
        "Medication",
        "RiskConcept",
    }
)


class CorpusFormatError(ValueError):
    pass


class DanglingSource(ValueError):
    def __init__(self, rule_id: str, chunk_id: str):
        super().__init__(f"rule {rule_id} cites unknown chunk {chunk_id!r}")
        self.rule_id = rule_id
        self.chunk_id = chunk_id


class ZeroVector(ValueError):
    pass


class SourceTier(enum.Enum):
    GUIDELINE = "guideline"
    CONSENSUS = "consensus"


class RuleEdgeType(enum.Enum):
    ACTIVATED_BY = "ACTIVATED_BY"
    LEADS_TO = "LEADS_TO"
    OVERRIDES = "OVERRIDES"
    EXCEPTION_OF = "EXCEPTION_OF"
    DERIVED_FROM = "DERIVED_FROM"


@dataclass(frozen=True)
class DocumentChunk:
    chunk_id: str
    doc_id: str
    tier: SourceTier
    evidence_level: int
    text: str
    token_count: int

    @property
    def alpha(self) -> float:
        return 1.0 / self.evidence_level


@dataclass(frozen=True)
class EntityNode:
    entity_id: str
    label: str
    semantic_type: str
    embedding: tuple
    home_chunk: str


@dataclass(frozen=True)
class ReferenceEdge:
    source: str
    target: str
    weight: float


@dataclass(frozen=True)
class RuleLayerEdge:
    kind: RuleEdgeType
    source: str
    target: str


@dataclass(frozen=True)
class Corpus:
    docs: dict  # doc_id -> (tier, evidence_level, title)
    chunks: tuple
    entities: tuple


@dataclass(frozen=True)
class EvidencePacket:
    matched_rules: tuple
    provenance_chunks: tuple
    context_entities: tuple  # ((EntityNode, relevance), ...)

    def to_dict(self) -> dict:
        return {
            "matched_rules": [r.rule_id for r in self.matched_rules],
            "provenance_chunks": [c.chunk_id for c in self.provenance_chunks],
            "context_entities": [[e.entity_id, e.label, s] for e, s in self.context_entities],
        }


def link_score(e_i: EntityNode, e_j: EntityNode, level_i: int, level_j: int) -> float:
    """Cosine similarity scaled by the mean evidence weight 1/level of both sources."""
    h_i, h_j = e_i.embedding, e_j.embedding
    if len(h_i) != len(h_j):
        raise ValueError(f"embedding dimensions differ: {len(h_i)} vs {len(h_j)}")
    dot = 0.0
    for a, b in zip(h_i, h_j):
        dot += a * b
    sq_i = 0.0
    for a in h_i:
        sq_i += a * a
    sq_j = 0.0
    for b in h_j:
        sq_j += b * b
    n_i, n_j = math.sqrt(sq_i), math.sqrt(sq_j)
    if n_i == 0.0 or n_j == 0.0:
        raise ZeroVector(f"zero-norm embedding in pair ({e_i.entity_id}, {e_j.entity_id})")
    alpha_i, alpha_j = 1.0 / level_i, 1.0 / level_j
    return dot / (n_i * n_j) * (0.5 * (alpha_i + alpha_j))


def hash_embedding(text: str, dim: int = 16) -> tuple:
    """Deterministic unit vector derived from ``text``; a stand-in embedding provider."""
    seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
    v = np.random.default_rng(seed).standard_normal(dim)
    return tuple(float(x) for x in v / np.linalg.norm(v))


# ---------------------------------------------------------------------------
# Corpus IO
# ---------------------------------------------------------------------------


def parse_corpus(lines: Iterable[str]) -> Corpus:
    docs, chunks, entities = {}, [], []
    dim = None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"line {lineno}: {exc}") from None
        kind = rec.get("kind")
        try:
            if kind == "doc":
                tier = SourceTier(rec["tier"])
                level = int(rec["evidence_level"])
                if not 1 <= level <= 5:
                    raise CorpusFormatError(f"line {lineno}: evidence_level {level} outside 1..5")
                if tier is SourceTier.GUIDELINE and level != 1:
                    raise CorpusFormatError(f"line {lineno}: guideline documents must have evidence_level 1")
                if rec["doc_id"] in docs:
                    raise CorpusFormatError(f"line {lineno}: duplicate doc {rec['doc_id']!r}")
                docs[rec["doc_id"]] = (tier, level, rec.get("title", ""))
            elif kind == "chunk":
                if rec["doc_id"] not in docs:
                    raise CorpusFormatError(f"line {lineno}: chunk references unknown doc {rec['doc_id']!r}")
                tier, level, _ = docs[rec["doc_id"]]
                tokens = int(rec["token_count"])
                if tokens > MAX_CHUNK_TOKENS:
                    raise CorpusFormatError(f"line {lineno}: chunk has {tokens} tokens (max {MAX_CHUNK_TOKENS})")
                chunks.append(DocumentChunk(rec["chunk_id"], rec["doc_id"], tier, level, rec.get("text", ""), tokens))
            elif kind == "entity":
                emb = tuple(float(x) for x in rec["embedding"])
                if dim is None:
                    dim = len(emb)
                elif len(emb) != dim:
                    raise CorpusFormatError(f"line {lineno}: embedding dimension {len(emb)} != {dim}")
                if rec["semantic_type"] not in SEMANTIC_TYPES:
                    raise CorpusFormatError(f"line {lineno}: unknown semantic type {rec['semantic_type']!r}")
                entities.append(
                    EntityNode(rec["entity_id"], rec["label"], rec["semantic_type"], emb, rec["chunk_id"])
                )
            else:
                raise CorpusFormatError(f"line {lineno}: unknown record kind {kind!r}")
        except KeyError as exc:
            raise CorpusFormatError(f"line {lineno}: missing key {exc}") from None
        except ValueError as exc:
            if isinstance(exc, CorpusFormatError):
                raise
            raise CorpusFormatError(f"line {lineno}: {exc}") from None

    chunk_ids = {c.chunk_id for c in chunks}
    if len(chunk_ids) != len(chunks):
        raise CorpusFormatError("duplicate chunk ids")
    if len({e.entity_id for e in entities}) != len(entities):
        raise CorpusFormatError("duplicate entity ids")
    for e in entities:
        if e.home_chunk not in chunk_ids:
            raise CorpusFormatError(f"entity {e.entity_id} references unknown chunk {e.home_chunk!r}")
    return Corpus(docs=docs, chunks=tuple(chunks), entities=tuple(entities))


def load_corpus(path=None) -> Corpus:
    if path is None:
        text = resources.files("endogov.data").joinpath("fixture_corpus.jsonl").read_text(encoding="utf-8")
        return parse_corpus(text.splitlines())
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GuidelineGraph:
    chunks: tuple
    entities: tuple  # sorted by entity_id
    reference_edges: tuple
    containment_edges: tuple  # (chunk_id, entity_id)
    rule_layer_edges: tuple
    tag_hierarchy: TagHierarchy
    merged: tuple  # (removed_entity_id, kept_entity_id)
    delta_r: float
    ruleset_hash: str
    _csr: tuple = field(default=None, compare=False, repr=False)
    _derived: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        index = {e.entity_id: i for i, e in enumerate(self.entities)}
        n = len(self.entities)
        nbrs = [[] for _ in range(n)]
        for edge in self.reference_edges:
            i, j = index[edge.source], index[edge.target]
            nbrs[i].append((j, edge.weight))
            nbrs[j].append((i, edge.weight))
        indptr = np.zeros(n + 1, dtype=np.int64)
        indices, weights = [], []
        for i, row in enumerate(nbrs):
            row.sort()
            indices.extend(j for j, _ in row)
            weights.extend(w for _, w in row)
            indptr[i + 1] = len(indices)
        csr = (indptr, np.asarray(indices, dtype=np.int64), np.asarray(weights, dtype=np.float64), index)
        object.__setattr__(self, "_csr", csr)
        derived = {}
        for e in self.rule_layer_edges:
            if e.kind is RuleEdgeType.DERIVED_FROM:
                derived.setdefault(e.source, []).append(e.target)
        object.__setattr__(self, "_derived", derived)

    @property
    def chunk_index(self) -> dict:
        return {c.chunk_id: c for c in self.chunks}

    def entity(self, entity_id: str) -> EntityNode:
        return self.entities[self._csr[3][entity_id]]

    def derived_from(self, rule_id: str) -> list[str]:
        return list(self._derived.get(rule_id, ()))

    def to_dict(self) -> dict:
        return {
            "delta_r": self.delta_r,
            "ruleset_hash": self.ruleset_hash,
            "chunks": [
                {
                    "chunk_id": c.chunk_id,
                    "doc_id": c.doc_id,
                    "tier": c.tier.value,
                    "evidence_level": c.evidence_level,
                    "text": c.text,
                    "token_count": c.token_count,
                }
                for c in self.chunks
            ],
            "entities": [
                {
                    "entity_id": e.entity_id,
                    "label": e.label,
                    "semantic_type": e.semantic_type,
                    "embedding": list(e.embedding),
                    "home_chunk": e.home_chunk,
                }
                for e in self.entities
            ],
            "reference_edges": [[e.source, e.target, e.weight] for e in self.reference_edges],
            "containment_edges": [list(e) for e in self.containment_edges],
            "rule_layer_edges": [[e.kind.value, e.source, e.target] for e in self.rule_layer_edges],
            "tag_hierarchy": self.tag_hierarchy.to_dict(),
            "merged": [list(m) for m in self.merged],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GuidelineGraph":
        return cls(
            chunks=tuple(
                DocumentChunk(
                    c["chunk_id"], c["doc_id"], SourceTier(c["tier"]), c["evidence_level"], c["text"], c["token_count"]
                )
                for c in data["chunks"]
            ),
            entities=tuple(
                EntityNode(e["entity_id"], e["label"], e["semantic_type"], tuple(e["embedding"]), e["home_chunk"])
                for e in data["entities"]
            ),
            reference_edges=tuple(ReferenceEdge(s, t, w) for s, t, w in data["reference_edges"]),
            containment_edges=tuple(tuple(e) for e in data["containment_edges"]),
            rule_layer_edges=tuple(RuleLayerEdge(RuleEdgeType(k), s, t) for k, s, t in data["rule_layer_edges"]),
            tag_hierarchy=TagHierarchy.from_dict(data["tag_hierarchy"]),
            merged=tuple(tuple(m) for m in data["merged"]),
            delta_r=data["delta_r"],
            ruleset_hash=data["ruleset_hash"],
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def save_graph(g: GuidelineGraph, path) -> str:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(g.to_json())
        fh.write("\n")
    return g.digest()


def load_graph(path) -> GuidelineGraph:
    with open(path, encoding="utf-8") as fh:
        return GuidelineGraph.from_dict(json.load(fh))


def deduplicate(entities: Sequence[EntityNode], threshold: float = DEDUP_COSINE):
    """Merge near-duplicates; each survivor absorbs later ids within ``threshold`` cosine."""
    ordered = sorted(entities, key=lambda e: e.entity_id)
    if not ordered:
        return [], []
    emb = np.ascontiguousarray([e.embedding for e in ordered], dtype=np.float64)
    if np.any(kernels.row_norms(emb) == 0.0):
        raise ZeroVector("entity with zero-norm embedding")
    src, dst = kernels.cosine_pairs_above(emb, threshold)
    nbrs = [[] for _ in ordered]
    for i, j in zip(src.tolist(), dst.tolist()):
        nbrs[i].append(j)
    absorbed = {}
    for i in range(len(ordered)):
        if i in absorbed:
            continue
        for j in nbrs[i]:
            if j not in absorbed:
                absorbed[j] = i
    kept = [e for i, e in enumerate(ordered) if i not in absorbed]
    merged = [(ordered[j].entity_id, ordered[i].entity_id) for j, i in sorted(absorbed.items())]
    return kept, merged


def build_graph(
    corpus: Corpus,
    rs: RuleSet,
    delta_r: float = DEFAULT_DELTA_R,
    tag_threshold: float = DEFAULT_TAG_THRESHOLD,
) -> GuidelineGraph:
    if not 0.0 < delta_r <= 1.0:
        raise ValueError(f"delta_r must lie in (0, 1], got {delta_r}")
    chunk_by_id = {c.chunk_id: c for c in corpus.chunks}
    for rule in rs.rules:
        for src in rule.derived_from:
            if src not in chunk_by_id:
                raise DanglingSource(rule.rule_id, src)

    kept, merged = deduplicate(corpus.entities)
    alias = dict(merged)
    containment = sorted({(e.home_chunk, alias.get(e.entity_id, e.entity_id)) for e in corpus.entities})

    reference_edges = []
    if kept:
        emb = np.ascontiguousarray([e.embedding for e in kept], dtype=np.float64)
        homes = [chunk_by_id[e.home_chunk] for e in kept]
        alpha = np.asarray([c.alpha for c in homes], dtype=np.float64)
        doc_ids = sorted({c.doc_id for c in homes})
        doc_index = np.asarray([doc_ids.index(c.doc_id) for c in homes], dtype=np.int64)
        src, dst, wts = kernels.link_edges(emb, alpha, doc_index, float(delta_r))
        reference_edges = [
            ReferenceEdge(kept[i].entity_id, kept[j].entity_id, float(w))
            for i, j, w in zip(src.tolist(), dst.tolist(), wts.tolist())
        ]

    rule_edges = []
    for rule in rs.rules:
        for atom in rule.trigger.atoms:
            rule_edges.append(RuleLayerEdge(RuleEdgeType.ACTIVATED_BY, rule.rule_id, f"trigger:{atom}"))
        rule_edges.append(RuleLayerEdge(RuleEdgeType.LEADS_TO, rule.rule_id, f"outcome:{rule.outcome.value}"))
        for target in rule.overrides:
            rule_edges.append(RuleLayerEdge(RuleEdgeType.OVERRIDES, rule.rule_id, target))
        if rule.exception_of:
            rule_edges.append(RuleLayerEdge(RuleEdgeType.EXCEPTION_OF, rule.rule_id, rule.exception_of))
        for src_chunk in rule.derived_from:
            rule_edges.append(RuleLayerEdge(RuleEdgeType.DERIVED_FROM, rule.rule_id, src_chunk))

    tags = cluster_tags(kept, tag_threshold) if kept else TagHierarchy.empty()
    return GuidelineGraph(
        chunks=tuple(sorted(corpus.chunks, key=lambda c: c.chunk_id)),
        entities=tuple(kept),
        reference_edges=tuple(reference_edges),
        containment_edges=tuple(containment),
        rule_layer_edges=tuple(rule_edges),
        tag_hierarchy=tags,
        merged=tuple(merged),
        delta_r=float(delta_r),
        ruleset_hash=rs.source_hash,
    )


# ---------------------------------------------------------------------------
# Query
# ---------------------------------------------------------------------------


def evidence_terms(ev: PatientEvidence) -> set[str]:
    """Lower-cased surfaced evidence values used to anchor retrieval."""
    terms = set()
    for value in (ev.subtype, ev.stage, ev.histology, ev.grade, ev.myometrial_invasion, ev.lvsi):
        if isinstance(value, FigoStage):
            value = value.stage
        if isinstance(value, enum.Enum) and value.value != "Unknown":
            terms.add(value.value.lower())
    return terms


def retrieve_context(g: GuidelineGraph, ev: PatientEvidence, k: int = DEFAULT_TOP_K) -> tuple:
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = evidence_terms(ev)
    seeds = np.asarray([e.label.lower() in terms for e in g.entities], dtype=np.uint8)
    indptr, indices, weights, _ = g._csr
    rel = kernels.two_hop_relevance(indptr, indices, weights, seeds)
    order = sorted(range(len(g.entities)), key=lambda i: (-rel[i], g.entities[i].entity_id))
    return tuple((g.entities[i], float(rel[i])) for i in order[:k])


def query(g: GuidelineGraph, rs: RuleSet, ev: PatientEvidence, k: int = DEFAULT_TOP_K) -> EvidencePacket:
    matched = match_rules(rs, ev)
    chunks = g.chunk_index
    seen, provenance = set(), []
    for rule in matched:
        for cid in g.derived_from(rule.rule_id):
            if cid not in seen:
                seen.add(cid)
                provenance.append(chunks[cid])
    return EvidencePacket(
        matched_rules=tuple(matched),
        provenance_chunks=tuple(provenance),
        context_entities=retrieve_context(g, ev, k),
    )
