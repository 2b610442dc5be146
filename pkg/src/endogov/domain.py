"""Core vocabulary shared by every stage of the pipeline.

All evidence types are frozen dataclasses. Absent information is an explicit
enum member (``Unknown`` / ``Missing``); a ``None`` field means the value was
never surfaced at all and is always a schema violation.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, fields
from typing import Any, Mapping, Optional


class UnrecognizedStage(ValueError):
    def __init__(self, raw: str):
        super().__init__(f"unrecognized FIGO stage: {raw!r}")
        self.raw = raw


@enum.unique
class RiskTier(enum.Enum):
    LOW = "Low"
    INTERMEDIATE = "Intermediate"
    HIGH_INTERMEDIATE = "HighIntermediate"
    HIGH = "High"

    @property
    def rank(self) -> int:
        return _TIER_RANK[self]

    def __lt__(self, other):
        if not isinstance(other, RiskTier):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other):
        if not isinstance(other, RiskTier):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other):
        if not isinstance(other, RiskTier):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other):
        if not isinstance(other, RiskTier):
            return NotImplemented
        return self.rank >= other.rank


_TIER_RANK = {t: i for i, t in enumerate(RiskTier)}
RISK_TIERS = tuple(RiskTier)


@enum.unique
class MolecularSubtype(enum.Enum):
    """Listed in dominance order: earlier members win."""

    POLEMUT = "POLEmut"
    MMRD = "MMRd"
    P53ABN = "p53abn"
    NSMP = "NSMP"


@enum.unique
class DetectionSource(enum.Enum):
    DNA_DIRECT = "dna_direct"
    RNA_FALLBACK = "rna_fallback"
    UNKNOWN = "unknown"


class PoleStatus(enum.Enum):
    MUTATED = "mutated"
    WILD_TYPE = "wildtype"
    MISSING = "missing"


class MmrStatus(enum.Enum):
    DEFICIENT = "deficient"
    PROFICIENT = "proficient"
    MISSING = "missing"


class P53Status(enum.Enum):
    ABNORMAL = "abnormal"
    NORMAL = "normal"
    MISSING = "missing"


@enum.unique
class Stage(enum.Enum):
    IA = "IA"
    IB = "IB"
    II = "II"
    III = "III"
    IVA = "IVA"
    IVB = "IVB"

    @property
    def rank(self) -> int:
        return _STAGE_RANK[self]


_STAGE_RANK = {s: i for i, s in enumerate(Stage)}


class Histology(enum.Enum):
    ENDOMETRIOID = "Endometrioid"
    SEROUS = "Serous"
    CLEAR_CELL = "ClearCell"
    UNDIFFERENTIATED = "Undifferentiated"
    MIXED = "Mixed"


class Grade(enum.Enum):
    G1 = "G1"
    G2 = "G2"
    G3 = "G3"
    UNKNOWN = "Unknown"


class MyometrialInvasion(enum.Enum):
    NONE = "None"
    SUPERFICIAL = "Superficial"
    DEEP = "Deep"
    UNKNOWN = "Unknown"


class Lvsi(enum.Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class BiomarkerPanel:
    pole: PoleStatus = PoleStatus.MISSING
    mmr: MmrStatus = MmrStatus.MISSING
    p53: P53Status = P53Status.MISSING

    @property
    def available(self) -> bool:
        return not (
            self.pole is PoleStatus.MISSING
            and self.mmr is MmrStatus.MISSING
            and self.p53 is P53Status.MISSING
        )


@dataclass(frozen=True)
class FigoStage:
    stage: Stage
    raw_text: str = ""

    @property
    def rank(self) -> int:
        return self.stage.rank

    def __eq__(self, other):
        if isinstance(other, FigoStage):
            return self.stage is other.stage
        if isinstance(other, Stage):
            return self.stage is other
        return NotImplemented

    def __hash__(self):
        return hash(self.stage)


_STAGE_RE = re.compile(r"^\s*(?:figo\s+)?(?:stage\s*)?(i{1,3}|iv)\s*([ab])?\s*$", re.IGNORECASE)


def normalize_stage(raw: str) -> FigoStage:
    """Map free-form FIGO text ("Stage IA", "stage ivb", "IB") to a canonical stage."""
    if not raw or not raw.strip():
        raise UnrecognizedStage(raw)
    m = _STAGE_RE.match(raw)
    if m is None:
        raise UnrecognizedStage(raw)
    token = (m.group(1) + (m.group(2) or "")).upper()
    try:
        stage = Stage(token)
    except ValueError:
        raise UnrecognizedStage(raw) from None
    return FigoStage(stage, raw)


@dataclass(frozen=True)
class PatientEvidence:
    """Structured evidence vector consumed by rule matching.

    Fields are typed as enums but are deliberately not coerced: loaders pass
    through ``None`` or raw strings for values that failed to parse so that
    ``assert_schema`` can report them.
    """

    subtype: Optional[MolecularSubtype]
    stage: Optional[FigoStage]
    histology: Optional[Histology]
    grade: Optional[Grade] = Grade.UNKNOWN
    myometrial_invasion: Optional[MyometrialInvasion] = MyometrialInvasion.UNKNOWN
    lvsi: Optional[Lvsi] = Lvsi.UNKNOWN
    detection_source: Optional[DetectionSource] = DetectionSource.DNA_DIRECT
    subtype_confidence: Any = 1.0

    def replace(self, **changes) -> "PatientEvidence":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return PatientEvidence(**values)

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, FigoStage):
                return v.stage.value
            if isinstance(v, enum.Enum):
                return v.value
            return v

        return {f.name: enc(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientEvidence":
        """Inverse of ``to_dict``; undecodable values are kept raw for the schema check."""

        def dec(enum_cls, key, default=None):
            if key not in data:
                return default
            v = data[key]
            if v is None:
                return None
            try:
                return enum_cls(v)
            except ValueError:
                return v

        stage_raw = data.get("stage")
        stage: Any
        if stage_raw is None:
            stage = None
        else:
            try:
                stage = normalize_stage(str(stage_raw))
            except UnrecognizedStage:
                stage = stage_raw
        return cls(
            subtype=dec(MolecularSubtype, "subtype"),
            stage=stage,
            histology=dec(Histology, "histology"),
            grade=dec(Grade, "grade", Grade.UNKNOWN),
            myometrial_invasion=dec(MyometrialInvasion, "myometrial_invasion", MyometrialInvasion.UNKNOWN),
            lvsi=dec(Lvsi, "lvsi", Lvsi.UNKNOWN),
            detection_source=dec(DetectionSource, "detection_source", DetectionSource.DNA_DIRECT),
            subtype_confidence=data.get("subtype_confidence", 1.0),
        )


class ReportKind(enum.Enum):
    PATHOLOGY = "pathology"
    MOLECULAR = "molecular"
    CLINICAL = "clinical"


REPORT_SCHEMAS = {
    ReportKind.PATHOLOGY: frozenset({"histology", "grade", "myometrial_invasion", "top_concepts"}),
    ReportKind.MOLECULAR: frozenset({"molecular_subtype", "detection_source", "confidence"}),
    ReportKind.CLINICAL: frozenset({"stage", "lvsi", "deep_mi", "no_mi"}),
}


@dataclass(frozen=True)
class SpecialistReport:
    kind: ReportKind
    fields: Mapping[str, Any]
    confidence: float
    provenance: str = ""

    def __post_init__(self):
        extra = set(self.fields) - REPORT_SCHEMAS[self.kind]
        if extra:
            raise ValueError(f"{self.kind.value} report carries undeclared fields: {sorted(extra)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"report confidence out of range: {self.confidence}")

    def render(self) -> str:
        body = ", ".join(f"{k}={_render_value(v)}" for k, v in sorted(self.fields.items()))
        return f"[{self.kind.value}] {body} (confidence={self.confidence:.3f}; {self.provenance})"


def _render_value(v):
    if isinstance(v, FigoStage):
        return v.stage.value
    if isinstance(v, enum.Enum):
        return v.value
    return v


# Field name -> declared type, in the order violations are reported.
SCHEMA_FIELDS = (
    ("subtype", MolecularSubtype),
    ("stage", FigoStage),
    ("histology", Histology),
    ("grade", Grade),
    ("myometrial_invasion", MyometrialInvasion),
    ("lvsi", Lvsi),
    ("detection_source", DetectionSource),
)


@dataclass(frozen=True)
class SchemaViolation:
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


def assert_schema(ev: PatientEvidence) -> list[SchemaViolation]:
    """Return every field-level violation; an empty list means the evidence is valid."""
    violations = []
    for name, typ in SCHEMA_FIELDS:
        value = getattr(ev, name)
        if value is None:
            violations.append(SchemaViolation(name, "missing"))
        elif not isinstance(value, typ):
            violations.append(SchemaViolation(name, f"undeclared value {value!r}"))
    conf = ev.subtype_confidence
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or conf != conf:
        violations.append(SchemaViolation("subtype_confidence", f"not a number: {conf!r}"))
    elif not 0.0 <= conf <= 1.0:
        violations.append(SchemaViolation("subtype_confidence", f"{conf} outside [0, 1]"))
    return violations


_HIGH_GRADE_HISTOLOGY = (Histology.SEROUS, Histology.CLEAR_CELL, Histology.UNDIFFERENTIATED)


def check_consistency(ev: PatientEvidence) -> list[str]:
    """Cross-field admissibility checks on schema-valid evidence.

    These catch clinically impossible combinations that every single field
    passes on its own, such as stage IA with deep invasion.
    """
    problems = []
    stage = ev.stage.stage if isinstance(ev.stage, FigoStage) else None
    mi = ev.myometrial_invasion
    if stage is Stage.IA and mi is MyometrialInvasion.DEEP:
        problems.append("stage IA is incompatible with deep myometrial invasion")
    if stage is Stage.IB and mi in (MyometrialInvasion.NONE, MyometrialInvasion.SUPERFICIAL):
        problems.append(f"stage IB requires deep myometrial invasion, got {mi.value}")
    if ev.histology in _HIGH_GRADE_HISTOLOGY and ev.grade in (Grade.G1, Grade.G2):
        problems.append(f"{ev.histology.value} histology is high-grade by definition, got {ev.grade.value}")
    if ev.detection_source is DetectionSource.DNA_DIRECT and ev.subtype_confidence != 1.0:
        problems.append("dna_direct subtype must carry confidence 1.0")
    if ev.detection_source is DetectionSource.UNKNOWN and ev.subtype_confidence > 0.0:
        problems.append("subtype asserted with confidence but no detection route")
    return problems


def admissible_mi(stage: Stage) -> tuple[MyometrialInvasion, ...]:
    if stage is Stage.IA:
        return (MyometrialInvasion.NONE, MyometrialInvasion.SUPERFICIAL)
    if stage is Stage.IB:
        return (MyometrialInvasion.DEEP,)
    return (MyometrialInvasion.NONE, MyometrialInvasion.SUPERFICIAL, MyometrialInvasion.DEEP)


def admissible_grades(histology: Histology) -> tuple[Grade, ...]:
    if histology in _HIGH_GRADE_HISTOLOGY:
        return (Grade.G3,)
    return (Grade.G1, Grade.G2, Grade.G3)


def evidence_grid():
    """Yield every combination of the six rule-facing fields (5,760 vectors)."""
    for subtype in MolecularSubtype:
        for stage in Stage:
            fs = FigoStage(stage, stage.value)
            for histology in Histology:
                for grade in Grade:
                    for mi in MyometrialInvasion:
                        for lvsi in Lvsi:
                            yield PatientEvidence(
                                subtype=subtype,
                                stage=fs,
                                histology=histology,
                                grade=grade,
                                myometrial_invasion=mi,
                                lvsi=lvsi,
                            )


# Case record file: one JSON object per line with exactly these keys.
CASE_RECORD_KEYS = (
    "case_id",
    "pole",
    "mmr",
    "p53",
    "rna_embedding_ref",
    "path_embedding_ref",
    "stage",
    "histology",
    "grade",
    "mi",
    "lvsi",
    "oracle_label",
)
REQUIRED_CASE_KEYS = frozenset(CASE_RECORD_KEYS) - {"oracle_label", "path_embedding_ref"}


class CaseFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    pole: Optional[str] = None
    mmr: Optional[str] = None
    p53: Optional[str] = None
    rna_embedding_ref: Optional[str] = None
    path_embedding_ref: Optional[str] = None
    stage: Optional[str] = None
    histology: Optional[str] = None
    grade: Optional[str] = None
    mi: Optional[str] = None
    lvsi: Optional[str] = None
    oracle_label: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CaseRecord":
        missing = REQUIRED_CASE_KEYS - set(data)
        if missing:
            raise CaseFormatError(f"case record missing keys: {sorted(missing)}")
        unknown = set(data) - set(CASE_RECORD_KEYS)
        if unknown:
            raise CaseFormatError(f"case record has unknown keys: {sorted(unknown)}")
        return cls(**{k: data.get(k) for k in CASE_RECORD_KEYS})

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in CASE_RECORD_KEYS}
