"""End-to-end evaluation: perception, retrieval, governance and metric records per case."""

from __future__ import annotations

from dataclasses import dataclass

from .cohort import N_FOLDS, AdversarialCase, Cohort, CohortRecord
from .domain import PatientEvidence
from .governance import (
    DEFAULT_TAU,
    Decision,
    DecisionPath,
    GreyZoneResolver,
    Verdict,
    expected_decision,
    govern,
    validate,
)
from .kg.graph import DEFAULT_TOP_K, GuidelineGraph, query
from .metrics import EvaluationRecord, class_scores_for
from .perception import (
    EmptyClass,
    Libraries,
    LibrarySource,
    build_centroids,
    concept_for,
    generate_reports,
    parse_panel,
    subtype_from_biomarkers,
)
from .ruleset import RuleSet, match_rules, resolve_priority


def train_libraries(cohort: Cohort, fold: int) -> Libraries:
    """Prototype libraries from every case outside ``fold``.

    Molecular centroids use DNA-direct training cases labelled by their
    biomarker panel. If some subtype has no DNA-direct training case (tiny
    cohorts), the RNA cases' ground-truth subtypes fill in.
    """
    train = [r for r in cohort if r.fold != fold]
    emb = cohort.embeddings

    path_samples = [(emb(r.case.path_embedding_ref), concept_for(r.clean.histology, r.clean.grade)) for r in train]
    pathology = build_centroids(path_samples, range(len(path_samples)), LibrarySource.PATHOLOGY, str(fold))

    dna, rna = [], []
    for r in train:
        panel = parse_panel(r.case)
        z = emb(r.case.rna_embedding_ref)
        if panel.available:
            dna.append((z, subtype_from_biomarkers(panel)[0].value))
        else:
            rna.append((z, r.clean.subtype.value))
    try:
        molecular = build_centroids(dna, range(len(dna)), LibrarySource.MOLECULAR, str(fold))
    except EmptyClass:
        samples = dna + rna
        molecular = build_centroids(samples, range(len(samples)), LibrarySource.MOLECULAR, str(fold))
    return Libraries(pathology, molecular)


def hard_winner(ev: PatientEvidence, rs: RuleSet):
    hard = [r for r in match_rules(rs, ev) if r.is_hard]
    return resolve_priority(hard).winner if hard else None


@dataclass(frozen=True)
class CaseOutcome:
    record: EvaluationRecord
    decision: Decision
    audit: object
    evidence: PatientEvidence


def evaluate_case(
    rec: CohortRecord,
    libs: Libraries,
    cohort: Cohort,
    graph: GuidelineGraph,
    rs: RuleSet,
    resolver: GreyZoneResolver,
    tau: float,
    k: int,
) -> CaseOutcome:
    _, _, _, ev = generate_reports(rec.case, libs, cohort.embeddings)
    packet = query(graph, rs, ev, k)
    decision, audit = govern(ev, packet, rs, resolver, tau, case_id=rec.case_id)

    truth = hard_winner(rec.clean, rs)
    seen = hard_winner(ev, rs)
    is_trigger = truth is not None
    if is_trigger:
        detected = seen is not None and seen.rule_id == truth.rule_id
    else:
        detected = seen is not None  # a hard rule fired on a case that has none
    source = ev.detection_source.value
    record = EvaluationRecord(
        case_id=rec.case_id,
        oracle_label=rec.oracle,
        predicted_label=decision.label,
        predicted_confidence=decision.confidence,
        class_scores=class_scores_for(decision.label, decision.confidence),
        is_trigger=is_trigger,
        trigger_detected=detected,
        rule_mandated_label=truth.outcome if is_trigger else None,
        detection_source=source,
        path=decision.path.value,
    )
    return CaseOutcome(record, decision, audit, ev)


def evaluate_cohort(
    cohort: Cohort,
    graph: GuidelineGraph,
    rs: RuleSet,
    resolver: GreyZoneResolver,
    tau: float = DEFAULT_TAU,
    k: int = DEFAULT_TOP_K,
) -> list:
    """Evaluate every case with libraries trained on the other folds; results keep cohort order."""
    libs = {f: train_libraries(cohort, f) for f in sorted({r.fold for r in cohort})} if len(cohort) else {}
    if len(libs) == 1 and N_FOLDS > 1:
        # a single populated fold has no training data of its own
        raise ValueError("cohort too small for cross-fold centroids")
    return [evaluate_case(r, libs[r.fold], cohort, graph, rs, resolver, tau, k) for r in cohort]


# ---------------------------------------------------------------------------
# Adversarial stress run
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StressRow:
    case_id: str
    category: str
    description: str
    proposal_label: str
    final_label: str
    verdict: str
    message: str

    @property
    def intercepted(self) -> bool:
        return self.verdict in (Verdict.CORRECTED.value, Verdict.REJECTED.value)


def run_adversarial(
    cases,
    graph: GuidelineGraph,
    rs: RuleSet,
    resolver: GreyZoneResolver,
    tau: float = DEFAULT_TAU,
    k: int = DEFAULT_TOP_K,
) -> list:
    """Forged proposals go straight to the validator; everything else runs the full workflow."""
    rows = []
    for c in cases:
        c: AdversarialCase
        if c.forged_label is not None:
            path = c.forged_path or DecisionPath.SOFT_CHAIR
            conf = 1.0 if path is DecisionPath.HARD else 0.9
            forged_rule = expected_decision(c.evidence, rs).winning_rule
            proposal = Decision(c.forged_label, conf, path, forged_rule, (("forged", c.description),))
            final, report = validate(proposal, c.evidence, rs)
            verdict, message, pre = report.verdict.value, report.reason, proposal.label.value
        else:
            packet = query(graph, rs, c.evidence, k)
            final, audit = govern(c.evidence, packet, rs, resolver, tau, case_id=c.case_id)
            verdict, message, pre = audit.validator_verdict, audit.validator_message, audit.pre_validation_label
        rows.append(StressRow(c.case_id, c.category.value, c.description, pre, final.label.value, verdict, message))
    return rows
