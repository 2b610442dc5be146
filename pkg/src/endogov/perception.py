"""Tier-1 specialist simulation: prototype libraries, subtype calling and report fusion."""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .domain import (
    BiomarkerPanel,
    CaseRecord,
    DetectionSource,
    Grade,
    Histology,
    Lvsi,
    MmrStatus,
    MolecularSubtype,
    MyometrialInvasion,
    P53Status,
    PatientEvidence,
    PoleStatus,
    ReportKind,
    SpecialistReport,
    UnrecognizedStage,
    normalize_stage,
)

CLINICAL_REPORT_CONFIDENCE = 0.9
DEFAULT_TOP_K_HITS = 3

PATHOLOGY_CONCEPTS = (
    "Serous",
    "ClearCell",
    "Undifferentiated",
    "Mixed",
    "Endometrioid G1/G2",
    "Endometrioid G3",
)
MOLECULAR_CONCEPTS = tuple(s.value for s in MolecularSubtype)


class EmptyClass(ValueError):
    def __init__(self, concept: str):
        super().__init__(f"no training samples for concept {concept!r}")
        self.concept = concept


class DegenerateCentroid(EmptyClass):
    def __init__(self, concept: str):
        ValueError.__init__(self, f"training embeddings for {concept!r} sum to the zero vector")
        self.concept = concept


class ZeroVector(ValueError):
    pass


class PanelUnavailable(ValueError):
    pass


class LibrarySource(enum.Enum):
    PATHOLOGY = "pathology"
    MOLECULAR = "molecular"


@dataclass(frozen=True)
class PrototypeLibrary:
    prototypes: Mapping[str, tuple]
    fold_id: str
    source: LibrarySource

    def __post_init__(self):
        expected = PATHOLOGY_CONCEPTS if self.source is LibrarySource.PATHOLOGY else MOLECULAR_CONCEPTS
        if set(self.prototypes) != set(expected):
            raise ValueError(f"{self.source.value} library needs concepts {expected}, got {sorted(self.prototypes)}")
        dims = {len(v) for v in self.prototypes.values()}
        if len(dims) != 1:
            raise ValueError("prototype dimensions differ")
        for label, v in self.prototypes.items():
            if abs(math.sqrt(math.fsum(x * x for x in v)) - 1.0) > 1e-9:
                raise ValueError(f"prototype {label!r} is not unit norm")

    @property
    def dim(self) -> int:
        return len(next(iter(self.prototypes.values())))

    @property
    def labels(self) -> tuple:
        """Concepts in canonical order, which is also the tie-break order."""
        order = PATHOLOGY_CONCEPTS if self.source is LibrarySource.PATHOLOGY else MOLECULAR_CONCEPTS
        return order

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.source.value.encode())
        for label in self.labels:
            h.update(label.encode())
            h.update(np.asarray(self.prototypes[label], dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class PrototypeHit:
    concept: str
    score: float


def build_centroids(
    samples: Sequence[tuple],
    fold: Iterable[int],
    source: LibrarySource,
    fold_id: str = "0",
) -> PrototypeLibrary:
    """Normalised per-class sums of the training samples selected by ``fold``.

    Sums use ``math.fsum`` per coordinate, so the result is independent of the
    order of training samples and untouched by anything outside the fold.
    """
    concepts = PATHOLOGY_CONCEPTS if source is LibrarySource.PATHOLOGY else MOLECULAR_CONCEPTS
    members: dict[str, list] = {c: [] for c in concepts}
    for idx in sorted(set(fold)):
        emb, label = samples[idx]
        if label not in members:
            raise ValueError(f"unknown {source.value} concept {label!r}")
        members[label].append(emb)
    prototypes = {}
    for concept in concepts:
        vecs = members[concept]
        if not vecs:
            raise EmptyClass(concept)
        dim = len(vecs[0])
        total = [math.fsum(v[k] for v in vecs) for k in range(dim)]
        norm = math.sqrt(math.fsum(x * x for x in total))
        if norm <= 1e-12 * len(vecs):
            raise DegenerateCentroid(concept)
        prototypes[concept] = tuple(x / norm for x in total)
    return PrototypeLibrary(prototypes, fold_id, source)


def _cosine(z: Sequence[float], c: Sequence[float]) -> float:
    nz = math.sqrt(math.fsum(x * x for x in z))
    nc = math.sqrt(math.fsum(x * x for x in c))
    if nz == 0.0 or nc == 0.0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return math.fsum(a * b for a, b in zip(z, c)) / (nz * nc)


def match_prototypes(z: Sequence[float], lib: PrototypeLibrary, k: int = DEFAULT_TOP_K_HITS) -> list[PrototypeHit]:
    if len(z) != lib.dim:
        raise ValueError(f"embedding dimension {len(z)} does not match library dimension {lib.dim}")
    scored = [(label, _cosine(z, lib.prototypes[label])) for label in lib.labels]
    order = {label: i for i, label in enumerate(lib.labels)}
    scored.sort(key=lambda t: (-t[1], order[t[0]]))
    return [PrototypeHit(label, score) for label, score in scored[:k]]


def subtype_from_biomarkers(panel: BiomarkerPanel) -> tuple:
    if not panel.available:
        raise PanelUnavailable("all biomarker fields are missing")
    if panel.pole is PoleStatus.MUTATED:
        subtype = MolecularSubtype.POLEMUT
    elif panel.mmr is MmrStatus.DEFICIENT:
        subtype = MolecularSubtype.MMRD
    elif panel.p53 is P53Status.ABNORMAL:
        subtype = MolecularSubtype.P53ABN
    else:
        subtype = MolecularSubtype.NSMP
    return subtype, DetectionSource.DNA_DIRECT, 1.0


def subtype_from_embedding(z: Sequence[float], lib: PrototypeLibrary) -> tuple:
    if lib.source is not LibrarySource.MOLECULAR:
        raise ValueError("subtype inference needs the molecular prototype library")
    best = match_prototypes(z, lib, k=1)[0]
    confidence = min(1.0, max(0.0, best.score))
    return MolecularSubtype(best.concept), DetectionSource.RNA_FALLBACK, confidence


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


def _enum_or(enum_cls, raw, default):
    if raw is None:
        return default
    text = str(raw).strip().lower()
    for member in enum_cls:
        if member.value.lower() == text or member.name.lower() == text:
            return member
    return default


def parse_panel(case: CaseRecord) -> BiomarkerPanel:
    return BiomarkerPanel(
        pole=_enum_or(PoleStatus, case.pole, PoleStatus.MISSING),
        mmr=_enum_or(MmrStatus, case.mmr, MmrStatus.MISSING),
        p53=_enum_or(P53Status, case.p53, P53Status.MISSING),
    )


def concept_for(histology: Histology, grade: Grade) -> Optional[str]:
    """Pathology concept a structured (histology, grade) pair belongs to."""
    if histology is Histology.ENDOMETRIOID:
        if grade in (Grade.G1, Grade.G2):
            return "Endometrioid G1/G2"
        if grade is Grade.G3:
            return "Endometrioid G3"
        return None
    return histology.value


def _map_concept(concept: str, structured_grade: Grade) -> tuple:
    if concept == "Endometrioid G3":
        return Histology.ENDOMETRIOID, Grade.G3
    if concept == "Endometrioid G1/G2":
        # merged prototype: only the structured record can say G1 vs G2
        grade = structured_grade if structured_grade in (Grade.G1, Grade.G2) else Grade.UNKNOWN
        return Histology.ENDOMETRIOID, grade
    return Histology(concept), structured_grade


EmbeddingLookup = Callable[[str], Optional[Sequence[float]]]


@dataclass(frozen=True)
class Libraries:
    pathology: Optional[PrototypeLibrary]
    molecular: Optional[PrototypeLibrary]


def pathology_report(case: CaseRecord, lib: Optional[PrototypeLibrary], embeddings: EmbeddingLookup, k: int):
    structured_grade = _enum_or(Grade, case.grade, Grade.UNKNOWN)
    mi = _enum_or(MyometrialInvasion, case.mi, MyometrialInvasion.UNKNOWN)
    z = embeddings(case.path_embedding_ref) if case.path_embedding_ref else None
    if z is not None and lib is not None:
        hits = match_prototypes(z, lib, k)
        histology, grade = _map_concept(hits[0].concept, structured_grade)
        confidence = min(1.0, max(0.0, hits[0].score))
        provenance = f"prototype match fold={lib.fold_id}"
        top = tuple((h.concept, h.score) for h in hits)
    else:
        histology = _enum_or(Histology, case.histology, None)
        grade = structured_grade
        confidence = 1.0 if histology is not None else 0.0
        provenance = "structured record"
        top = ()
    fields = {"histology": histology, "grade": grade, "myometrial_invasion": mi, "top_concepts": top}
    return SpecialistReport(ReportKind.PATHOLOGY, fields, confidence, provenance)


def molecular_report(case: CaseRecord, lib: Optional[PrototypeLibrary], embeddings: EmbeddingLookup):
    panel = parse_panel(case)
    if panel.available:
        subtype, source, conf = subtype_from_biomarkers(panel)
        provenance = "direct biomarker fields"
    else:
        z = embeddings(case.rna_embedding_ref) if case.rna_embedding_ref else None
        if z is not None and lib is not None:
            subtype, source, conf = subtype_from_embedding(z, lib)
            provenance = f"RNA centroid match fold={lib.fold_id}"
        else:
            subtype, source, conf = None, DetectionSource.UNKNOWN, 0.0
            provenance = "no biomarker panel and no RNA profile"
    fields = {"molecular_subtype": subtype, "detection_source": source, "confidence": conf}
    return SpecialistReport(ReportKind.MOLECULAR, fields, conf, provenance)


def clinical_report(case: CaseRecord):
    try:
        stage = normalize_stage(case.stage) if case.stage else None
        provenance = "FIGO normalised"
    except UnrecognizedStage:
        stage = None
        provenance = f"unrecognised stage text {case.stage!r}"
    mi = _enum_or(MyometrialInvasion, case.mi, MyometrialInvasion.UNKNOWN)
    lvsi = _enum_or(Lvsi, case.lvsi, Lvsi.UNKNOWN)
    fields = {
        "stage": stage,
        "lvsi": lvsi,
        "deep_mi": mi is MyometrialInvasion.DEEP,
        "no_mi": mi is MyometrialInvasion.NONE,
    }
    return SpecialistReport(ReportKind.CLINICAL, fields, CLINICAL_REPORT_CONFIDENCE, provenance)


def fuse_reports(r_path: SpecialistReport, r_mol: SpecialistReport, r_cli: SpecialistReport) -> PatientEvidence:
    return PatientEvidence(
        subtype=r_mol.fields["molecular_subtype"],
        detection_source=r_mol.fields["detection_source"],
        subtype_confidence=r_mol.fields["confidence"],
        stage=r_cli.fields["stage"],
        lvsi=r_cli.fields["lvsi"],
        histology=r_path.fields["histology"],
        grade=r_path.fields["grade"],
        myometrial_invasion=r_path.fields["myometrial_invasion"],
    )


def generate_reports(
    case: CaseRecord,
    libs: Libraries,
    embeddings: EmbeddingLookup,
    k: int = DEFAULT_TOP_K_HITS,
) -> tuple:
    """Run the three specialists on one case and fuse their reports into evidence."""
    r_path = pathology_report(case, libs.pathology, embeddings, k)
    r_mol = molecular_report(case, libs.molecular, embeddings)
    r_cli = clinical_report(case)
    return r_path, r_mol, r_cli, fuse_reports(r_path, r_mol, r_cli)


# ---------------------------------------------------------------------------
# Embedding store: header "dim\t<d>", then "<key>\t<comma-separated floats>"
# ---------------------------------------------------------------------------


class EmbeddingStore:
    def __init__(self, vectors: Mapping[str, tuple], dim: int):
        self.vectors = dict(vectors)
        self.dim = dim

    def __call__(self, key: str):
        return self.vectors.get(key)

    def __len__(self):
        return len(self.vectors)

    @classmethod
    def read(cls, path) -> "EmbeddingStore":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split("\t")
            if len(header) != 2 or header[0] != "dim":
                raise ValueError(f"{path}: first line must be 'dim<TAB><d>'")
            dim = int(header[1])
            vectors = {}
            for lineno, line in enumerate(fh, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                key, _, body = line.partition("\t")
                vec = tuple(float(x) for x in body.split(","))
                if len(vec) != dim:
                    raise ValueError(f"{path}:{lineno}: vector has {len(vec)} values, header says {dim}")
                vectors[key] = vec
        return cls(vectors, dim)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"dim\t{self.dim}\n")
            for key in sorted(self.vectors):
                fh.write(key + "\t" + ",".join(repr(float(x)) for x in self.vectors[key]) + "\n")
