"""Seeded synthetic cohorts with oracle labels, detection noise and the adversarial suite.

Per-case draws, in this order from one ``numpy`` generator:

* subtype from ``subtype_prevalence`` (POLEmut, MMRd, p53abn, NSMP);
* stage uniform over IA..IVB, histology uniform over the five types;
* grade uniform over the grades admissible for the histology
  (G3 only for serous, clear cell and undifferentiated);
* myometrial invasion uniform over the values admissible for the stage,
  LVSI uniform over Positive/Negative;
* biomarker panel present with probability ``panel_availability_rate``;
* for RNA-fallback cases, a confusion draw against ``trigger_miss_rate``;
* one drop draw per optional field (grade, MI, LVSI) against ``missing_field_rate``;
* RNA and pathology embeddings: class base vector plus isotropic noise.

Every uniform is drawn whether or not it is used, so changing a rate never
shifts the stream for later cases.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import (
    CaseFormatError,
    CaseRecord,
    DetectionSource,
    FigoStage,
    Grade,
    Histology,
    Lvsi,
    MolecularSubtype,
    MyometrialInvasion,
    PatientEvidence,
    RiskTier,
    Stage,
    admissible_grades,
    admissible_mi,
)
from .governance import DecisionPath, oracle_label
from .perception import MOLECULAR_CONCEPTS, PATHOLOGY_CONCEPTS, EmbeddingStore, concept_for
from .ruleset import RuleSet

SUBTYPES = tuple(MolecularSubtype)
DEFAULT_COUNTS = (48, 147, 158, 188)
DEFAULT_PREVALENCE = tuple(c / sum(DEFAULT_COUNTS) for c in DEFAULT_COUNTS)
DEFAULT_PANEL_RATE = 365 / 541
EMBEDDING_DIM = 16
DEFAULT_EMBEDDING_NOISE = 0.1
N_FOLDS = 5

# perceived subtype for a confused RNA-fallback case: (target, weight)
CONFUSION_TABLE = {
    MolecularSubtype.P53ABN: ((MolecularSubtype.NSMP, 1.0),),
    MolecularSubtype.NSMP: (
        (MolecularSubtype.P53ABN, 8.0),
        (MolecularSubtype.MMRD, 3.0),
        (MolecularSubtype.POLEMUT, 1.0),
    ),
}
DROPPABLE_FIELDS = ("grade", "mi", "lvsi")
_STAGE_FORMATS = ("Stage {}", "FIGO {}", "{}", "stage {}")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CohortConfig:
    n_cases: int = 541
    subtype_prevalence: tuple = DEFAULT_PREVALENCE
    trigger_miss_rate: float = 0.0
    panel_availability_rate: float = DEFAULT_PANEL_RATE
    missing_field_rate: float = 0.0
    random_seed: int = 0
    embedding_noise: float = DEFAULT_EMBEDDING_NOISE

    def __post_init__(self):
        object.__setattr__(self, "subtype_prevalence", tuple(float(p) for p in self.subtype_prevalence))
        if self.n_cases < 1:
            raise ConfigError("n_cases must be positive")
        if len(self.subtype_prevalence) != len(SUBTYPES):
            raise ConfigError("subtype_prevalence needs one entry per subtype")
        if any(p < 0 for p in self.subtype_prevalence) or abs(math.fsum(self.subtype_prevalence) - 1) > 1e-9:
            raise ConfigError("subtype_prevalence must be non-negative and sum to 1")
        if not 0.0 <= self.trigger_miss_rate < 1.0:
            raise ConfigError("trigger_miss_rate must lie in [0, 1)")
        for name in ("panel_availability_rate", "missing_field_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.embedding_noise < 0:
            raise ConfigError("embedding_noise must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subtype_prevalence"] = list(self.subtype_prevalence)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        return cls(**{**d, "subtype_prevalence": tuple(d["subtype_prevalence"])})


@dataclass(frozen=True)
class NoiseAnnotation:
    case_id: str
    subtype_confused: Optional[tuple] = None  # (true subtype, perceived subtype)
    fields_dropped: tuple = ()
    adversarial_tag: Optional[str] = None

    @property
    def is_clean(self) -> bool:
        return self.subtype_confused is None and not self.fields_dropped and self.adversarial_tag is None


@dataclass(frozen=True)
class CohortRecord:
    case: CaseRecord
    clean: PatientEvidence  # ground-truth structured evidence
    noise: NoiseAnnotation
    fold: int

    @property
    def case_id(self) -> str:
        return self.case.case_id

    @property
    def oracle(self) -> RiskTier:
        return RiskTier(self.case.oracle_label)


@dataclass
class Cohort:
    config: CohortConfig
    records: list
    embeddings: EmbeddingStore
    ruleset_hash: str = ""

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def files(self) -> dict:
        """Serialized file contents keyed by file name."""
        cases = "".join(json.dumps(r.case.to_dict(), separators=(",", ":")) + "\n" for r in self.records)
        noise = "".join(json.dumps(_noise_row(r), separators=(",", ":")) + "\n" for r in self.records)
        emb = [f"dim\t{self.embeddings.dim}\n"]
        for key in sorted(self.embeddings.vectors):
            emb.append(key + "\t" + ",".join(repr(float(x)) for x in self.embeddings.vectors[key]) + "\n")
        config = json.dumps(
            {"config": self.config.to_dict(), "ruleset_hash": self.ruleset_hash}, indent=2, sort_keys=True
        )
        return {
            "cases.jsonl": cases,
            "noise.jsonl": noise,
            "embeddings.tsv": "".join(emb),
            "cohort.json": config + "\n",
        }

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, body in sorted(self.files().items()):
            h.update(name.encode())
            h.update(body.encode())
        return h.hexdigest()


def _noise_row(r: CohortRecord) -> dict:
    n = r.noise
    return {
        "case_id": r.case_id,
        "fold": r.fold,
        "subtype_confused": [s.value for s in n.subtype_confused] if n.subtype_confused else None,
        "fields_dropped": list(n.fields_dropped),
        "adversarial_tag": n.adversarial_tag,
        "clean": r.clean.to_dict(),
    }


def _bases(rng: np.random.Generator, count: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((EMBEDDING_DIM, EMBEDDING_DIM)))
    return q.T[:count]


def _biomarkers(subtype: MolecularSubtype, u: np.ndarray) -> tuple:
    """Raw (pole, mmr, p53) strings consistent with ``subtype``; u supplies two coin flips."""
    if subtype is MolecularSubtype.POLEMUT:
        return "mutated", "deficient" if u[0] < 0.1 else "proficient", "abnormal" if u[1] < 0.1 else "normal"
    if subtype is MolecularSubtype.MMRD:
        return "wildtype", "deficient", "abnormal" if u[1] < 0.1 else "normal"
    if subtype is MolecularSubtype.P53ABN:
        return "wildtype", "proficient", "abnormal"
    return "wildtype", "proficient", "normal"


def _confuse(subtype: MolecularSubtype, u: float) -> MolecularSubtype:
    table = CONFUSION_TABLE[subtype]
    total = sum(w for _, w in table)
    acc = 0.0
    for target, w in table:
        acc += w / total
        if u < acc:
            return target
    return table[-1][0]


def generate_cohort(cfg: CohortConfig, rs: RuleSet) -> Cohort:
    rng = np.random.default_rng(cfg.random_seed)
    mol_bases = _bases(rng, len(MOLECULAR_CONCEPTS))
    path_bases = _bases(rng, len(PATHOLOGY_CONCEPTS))
    stages, histologies = tuple(Stage), tuple(Histology)
    vectors, records = {}, []

    for i in range(cfg.n_cases):
        case_id = f"SYN{cfg.random_seed}-{i:05d}"
        subtype = SUBTYPES[int(rng.choice(len(SUBTYPES), p=cfg.subtype_prevalence))]
        stage = stages[int(rng.integers(len(stages)))]
        histology = histologies[int(rng.integers(len(histologies)))]
        grades = admissible_grades(histology)
        grade = grades[int(rng.integers(len(grades)))]
        mis = admissible_mi(stage)
        mi = mis[int(rng.integers(len(mis)))]
        lvsi = (Lvsi.POSITIVE, Lvsi.NEGATIVE)[int(rng.integers(2))]
        stage_text = _STAGE_FORMATS[int(rng.integers(len(_STAGE_FORMATS)))].format(stage.value)
        u_panel, u_confuse, u_target = rng.random(3)
        u_markers = rng.random(2)
        u_drop = rng.random(len(DROPPABLE_FIELDS))

        panel = u_panel < cfg.panel_availability_rate
        perceived = subtype
        confused = None
        if not panel and subtype in CONFUSION_TABLE and u_confuse < cfg.trigger_miss_rate:
            perceived = _confuse(subtype, u_target)
            confused = (subtype, perceived)
        dropped = tuple(f for f, u in zip(DROPPABLE_FIELDS, u_drop) if u < cfg.missing_field_rate)

        rna = mol_bases[MOLECULAR_CONCEPTS.index(perceived.value)] + cfg.embedding_noise * rng.standard_normal(
            EMBEDDING_DIM
        )
        concept = concept_for(histology, grade)
        path = path_bases[PATHOLOGY_CONCEPTS.index(concept)] + cfg.embedding_noise * rng.standard_normal(
            EMBEDDING_DIM
        )
        vectors[f"rna/{case_id}"] = tuple(float(x) for x in rna)
        vectors[f"path/{case_id}"] = tuple(float(x) for x in path)

        clean = PatientEvidence(
            subtype=subtype,
            stage=FigoStage(stage, stage_text),
            histology=histology,
            grade=grade,
            myometrial_invasion=mi,
            lvsi=lvsi,
            detection_source=DetectionSource.DNA_DIRECT if panel else DetectionSource.RNA_FALLBACK,
            subtype_confidence=1.0,
        )
        pole, mmr, p53 = _biomarkers(subtype, u_markers) if panel else (None, None, None)
        case = CaseRecord(
            case_id=case_id,
            pole=pole,
            mmr=mmr,
            p53=p53,
            rna_embedding_ref=f"rna/{case_id}",
            path_embedding_ref=f"path/{case_id}",
            stage=stage_text,
            histology=histology.value,
            grade=None if "grade" in dropped else grade.value,
            mi=None if "mi" in dropped else mi.value,
            lvsi=None if "lvsi" in dropped else lvsi.value,
            oracle_label=oracle_label(clean, rs).value,
        )
        records.append(CohortRecord(case, clean, NoiseAnnotation(case_id, confused, dropped), i % N_FOLDS))

    return Cohort(cfg, records, EmbeddingStore(vectors, EMBEDDING_DIM), rs.source_hash)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_cohort(cohort: Cohort, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, body in sorted(cohort.files().items()):
        _atomic_write(out / name, body)
        written.append(out / name)
    return written


def read_cohort(in_dir) -> Cohort:
    """Load a cohort directory; the noise sidecar supplies ground-truth evidence and folds."""
    d = Path(in_dir)
    for name in ("cases.jsonl", "noise.jsonl", "embeddings.tsv", "cohort.json"):
        if not (d / name).exists():
            raise CaseFormatError(f"cohort directory {d} is missing {name}")
    meta = json.loads((d / "cohort.json").read_text(encoding="utf-8"))
    cases = []
    with open(d / "cases.jsonl", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    cases.append(CaseRecord.from_dict(json.loads(line)))
                except json.JSONDecodeError as exc:
                    raise CaseFormatError(f"cases.jsonl:{lineno}: {exc}") from exc
    noise = {}
    with open(d / "noise.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                noise[row["case_id"]] = row
    records = []
    for case in cases:
        row = noise.get(case.case_id)
        if row is None:
            raise CaseFormatError(f"no noise annotation for {case.case_id}")
        conf = row["subtype_confused"]
        annotation = NoiseAnnotation(
            case.case_id,
            tuple(MolecularSubtype(s) for s in conf) if conf else None,
            tuple(row["fields_dropped"]),
            row["adversarial_tag"],
        )
        records.append(CohortRecord(case, PatientEvidence.from_dict(row["clean"]), annotation, row["fold"]))
    return Cohort(
        CohortConfig.from_dict(meta["config"]),
        records,
        EmbeddingStore.read(d / "embeddings.tsv"),
        meta.get("ruleset_hash", ""),
    )


# ---------------------------------------------------------------------------
# Adversarial suite
# ---------------------------------------------------------------------------


class AdversarialCategory(enum.Enum):
    CONTRADICTION = "contradictory_rule_decision"
    MISSING = "missing_null_field"
    IMPOSSIBLE = "abnormal_combination"
    BOUNDARY = "boundary_stage"


@dataclass(frozen=True)
class AdversarialCase:
    case_id: str
    category: AdversarialCategory
    description: str
    evidence: PatientEvidence
    forged_label: Optional[RiskTier] = None
    forged_path: Optional[DecisionPath] = None
    noise: NoiseAnnotation = field(default=None)

    def __post_init__(self):
        if self.noise is None:
            object.__setattr__(self, "noise", NoiseAnnotation(self.case_id, adversarial_tag=self.category.value))

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "category": self.category.value,
            "description": self.description,
            "evidence": self.evidence.to_dict(),
            "forged_label": self.forged_label.value if self.forged_label else None,
            "forged_path": self.forged_path.value if self.forged_path else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdversarialCase":
        return cls(
            case_id=d["case_id"],
            category=AdversarialCategory(d["category"]),
            description=d["description"],
            evidence=PatientEvidence.from_dict(d["evidence"]),
            forged_label=RiskTier(d["forged_label"]) if d.get("forged_label") else None,
            forged_path=DecisionPath(d["forged_path"]) if d.get("forged_path") else None,
        )


def _ev(subtype, stage, histology, grade, mi, lvsi=Lvsi.NEGATIVE, **extra) -> PatientEvidence:
    return PatientEvidence(
        subtype=subtype,
        stage=FigoStage(stage, stage.value) if isinstance(stage, Stage) else stage,
        histology=histology,
        grade=grade,
        myometrial_invasion=mi,
        lvsi=lvsi,
        **extra,
    )


def adversarial_suite() -> list:
    M, S, H, G, MI = MolecularSubtype, Stage, Histology, Grade, MyometrialInvasion
    T, P = RiskTier, DecisionPath
    cases = []

    def add(cat, desc, ev, forged=None, path=None):
        cases.append(AdversarialCase(f"ADV-{len(cases) + 1:02d}", cat, desc, ev, forged, path))

    C = AdversarialCategory.CONTRADICTION
    add(C, "POLEmut stage III serous, chair proposes High", _ev(M.POLEMUT, S.III, H.SEROUS, G.G3, MI.DEEP), T.HIGH, P.SOFT_CHAIR)
    add(C, "POLEmut stage IA, chair proposes HighIntermediate", _ev(M.POLEMUT, S.IA, H.ENDOMETRIOID, G.G1, MI.SUPERFICIAL), T.HIGH_INTERMEDIATE, P.SOFT_CHAIR)
    add(C, "p53abn stage IB, chair proposes Low", _ev(M.P53ABN, S.IB, H.ENDOMETRIOID, G.G1, MI.DEEP), T.LOW, P.SOFT_CHAIR)
    add(C, "p53abn IA without invasion, chair proposes Low", _ev(M.P53ABN, S.IA, H.ENDOMETRIOID, G.G2, MI.NONE), T.LOW, P.SOFT_CHAIR)
    add(C, "MMRd stage II, chair proposes Low", _ev(M.MMRD, S.II, H.ENDOMETRIOID, G.G2, MI.DEEP), T.LOW, P.SOFT_CHAIR)
    add(C, "NSMP stage III, chair proposes Intermediate", _ev(M.NSMP, S.III, H.ENDOMETRIOID, G.G1, MI.SUPERFICIAL), T.INTERMEDIATE, P.SOFT_CHAIR)
    add(C, "NSMP IA serous, chair proposes Low", _ev(M.NSMP, S.IA, H.SEROUS, G.G3, MI.SUPERFICIAL), T.LOW, P.SOFT_CHAIR)
    add(C, "NSMP stage IVB, chair proposes Intermediate", _ev(M.NSMP, S.IVB, H.ENDOMETRIOID, G.G2, MI.DEEP), T.INTERMEDIATE, P.SOFT_CHAIR)

    base = _ev(M.NSMP, S.IA, H.ENDOMETRIOID, G.G1, MI.SUPERFICIAL)
    N = AdversarialCategory.MISSING
    add(N, "molecular subtype missing", base.replace(subtype=None))
    add(N, "FIGO stage missing", base.replace(stage=None))
    add(N, "histology missing", base.replace(histology=None))
    add(N, "myometrial invasion null", base.replace(myometrial_invasion=None))
    add(N, "LVSI null", base.replace(lvsi=None))

    A = AdversarialCategory.IMPOSSIBLE
    add(A, "stage IA with deep invasion", _ev(M.NSMP, S.IA, H.ENDOMETRIOID, G.G1, MI.DEEP))
    add(A, "stage IB without invasion", _ev(M.NSMP, S.IB, H.ENDOMETRIOID, G.G2, MI.NONE))
    add(A, "stage IB with superficial invasion", _ev(M.MMRD, S.IB, H.ENDOMETRIOID, G.G2, MI.SUPERFICIAL))
    add(A, "serous graded G1", _ev(M.NSMP, S.II, H.SEROUS, G.G1, MI.DEEP))
    add(A, "clear cell graded G2", _ev(M.P53ABN, S.IA, H.CLEAR_CELL, G.G2, MI.SUPERFICIAL))
    add(A, "undifferentiated graded G1", _ev(M.NSMP, S.III, H.UNDIFFERENTIATED, G.G1, MI.DEEP))
    add(
        A,
        "DNA-direct subtype with fractional confidence",
        _ev(M.POLEMUT, S.IA, H.ENDOMETRIOID, G.G1, MI.NONE, subtype_confidence=0.6),
    )
    add(
        A,
        "subtype asserted without a detection route",
        _ev(M.P53ABN, S.II, H.ENDOMETRIOID, G.G3, MI.DEEP, detection_source=DetectionSource.UNKNOWN, subtype_confidence=0.8),
    )

    B = AdversarialCategory.BOUNDARY
    add(B, "p53abn IA on the no-invasion exception, mapping says High", _ev(M.P53ABN, S.IA, H.ENDOMETRIOID, G.G2, MI.NONE), T.HIGH, P.SOFT_TABLE2)
    add(B, "p53abn IA superficial just outside the exception, mapping says HighIntermediate", _ev(M.P53ABN, S.IA, H.ENDOMETRIOID, G.G2, MI.SUPERFICIAL), T.HIGH_INTERMEDIATE, P.SOFT_TABLE2)
    add(B, "NSMP IB G1 across the IA/IB line, mapping says Low", _ev(M.NSMP, S.IB, H.ENDOMETRIOID, G.G1, MI.DEEP), T.LOW, P.SOFT_TABLE2)
    add(B, "NSMP IA G3 across the G2/G3 line, mapping says Low", _ev(M.NSMP, S.IA, H.ENDOMETRIOID, G.G3, MI.SUPERFICIAL), T.LOW, P.SOFT_TABLE2)
    add(B, "MMRd stage II at the advanced-stage line, mapping says Intermediate", _ev(M.MMRD, S.II, H.ENDOMETRIOID, G.G1, MI.SUPERFICIAL), T.INTERMEDIATE, P.SOFT_TABLE2)
    return cases


def write_adversarial(cases, fh) -> None:
    for c in cases:
        fh.write(json.dumps(c.to_dict(), separators=(",", ":")) + "\n")


def read_adversarial(lines) -> list:
    return [AdversarialCase.from_dict(json.loads(line)) for line in lines if line.strip()]
