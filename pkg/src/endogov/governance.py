"""Chair workflow: hard-path arbitration, soft-path mapping, grey-zone resolvers and the validator."""

from __future__ import annotations

import enum
import json
import math
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .domain import (
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
    assert_schema,
    check_consistency,
)
from .kg.graph import EvidencePacket
from .ruleset import DEFAULT_RULE_ID, ExecutableRule, RuleSet, match_rules, resolve_priority

DEFAULT_TAU = 0.6
TABLE2_CONFIDENCE = 0.75
PLACEHOLDER_CONFIDENCE = 0.5
PLACEHOLDER_LABEL = RiskTier.INTERMEDIATE
HARD_CONFIDENCE = 1.0
CHAIR_TIER_TOLERANCE = 1
RESOLVER_URL_ENV = "ENDOGOV_RESOLVER_URL"


class DecisionPath(enum.Enum):
    HARD = "Hard"
    SOFT_TABLE2 = "SoftTable2"
    SOFT_CHAIR = "SoftChair"


class Verdict(enum.Enum):
    ACCEPTED = "Accepted"
    CORRECTED = "Corrected"
    REJECTED = "Rejected"


class ResolverFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class Decision:
    label: RiskTier
    confidence: float
    path: DecisionPath
    winning_rule: str
    trace: tuple = ()
    # the proposal this decision was validated from; None for raw proposals
    proposal: Optional["Decision"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.label, RiskTier):
            raise TypeError(f"decision label must be a RiskTier, got {self.label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"decision confidence out of range: {self.confidence}")
        if self.path is DecisionPath.HARD and self.confidence != HARD_CONFIDENCE:
            raise ValueError("hard-path decisions carry confidence 1.0")

    def key(self) -> tuple:
        """The fields compared when checking decisions for equality across runs."""
        return (self.label.value, self.confidence, self.path.value, self.winning_rule)


@dataclass(frozen=True)
class ValidatorReport:
    expected_label: RiskTier
    proposal_label: RiskTier
    verdict: Verdict
    reason: str


AUDIT_FIELDS = (
    "case_id",
    "matched_rule_ids",
    "decision_path",
    "winning_rule",
    "detection_source",
    "provenance_chunk_ids",
    "resolver",
    "validator_verdict",
    "validator_message",
    "pre_validation_label",
    "final_label",
    "final_confidence",
    "ruleset_version",
    "ruleset_hash",
)


@dataclass(frozen=True)
class AuditRecord:
    case_id: str
    matched_rule_ids: tuple
    decision_path: str
    winning_rule: str
    detection_source: str
    provenance_chunk_ids: tuple
    resolver: str
    validator_verdict: str
    validator_message: str
    pre_validation_label: str
    final_label: str
    final_confidence: float
    ruleset_version: str
    ruleset_hash: str

    def __post_init__(self):
        if self.validator_verdict == Verdict.CORRECTED.value and self.pre_validation_label == self.final_label:
            raise ValueError("a corrected record must change the label")
        for name in AUDIT_FIELDS:
            value = getattr(self, name)
            if value is None or (isinstance(value, (str, tuple)) and len(value) == 0):
                raise ValueError(f"audit field {name!r} is empty")

    def to_dict(self) -> dict:
        out = {}
        for name in AUDIT_FIELDS:
            value = getattr(self, name)
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "AuditRecord":
        values = {k: data[k] for k in AUDIT_FIELDS}
        values["matched_rule_ids"] = tuple(values["matched_rule_ids"])
        values["provenance_chunk_ids"] = tuple(values["provenance_chunk_ids"])
        return cls(**values)


def write_audit(records: Sequence[AuditRecord], fh) -> None:
    for rec in records:
        fh.write(rec.to_json() + "\n")


def read_audit(lines) -> list[AuditRecord]:
    return [AuditRecord.from_dict(json.loads(line)) for line in lines if line.strip()]


# ---------------------------------------------------------------------------
# Rule-derived expectations
# ---------------------------------------------------------------------------


def map_table2(ev: PatientEvidence, matched: Sequence[ExecutableRule]) -> tuple:
    """Soft-path proposal from the Table-2 rules that matched.

    ``ev`` is accepted for interface symmetry; the mapping depends only on
    which soft rules matched.
    """
    if any(r.is_hard for r in matched):
        raise ValueError("map_table2 is only defined when no hard rule matched")
    specific = [r for r in matched if r.rule_id != DEFAULT_RULE_ID]
    if not specific:
        return PLACEHOLDER_LABEL, PLACEHOLDER_CONFIDENCE, DEFAULT_RULE_ID
    winner = resolve_priority(specific).winner
    return winner.outcome, TABLE2_CONFIDENCE, winner.rule_id


def expected_decision(ev: PatientEvidence, rs: RuleSet) -> Decision:
    """Recompute the guideline-expected decision from evidence and rules alone."""
    matched = match_rules(rs, ev)
    hard = [r for r in matched if r.is_hard]
    if hard:
        winner = resolve_priority(hard).winner
        return Decision(winner.outcome, HARD_CONFIDENCE, DecisionPath.HARD, winner.rule_id)
    label, conf, rule_id = map_table2(ev, matched)
    return Decision(label, conf, DecisionPath.SOFT_TABLE2, rule_id)


def oracle_label(ev: PatientEvidence, rs: RuleSet) -> RiskTier:
    return expected_decision(ev, rs).label


# ---------------------------------------------------------------------------
# Validator
# ---------------------------------------------------------------------------


def _corrected(proposal: Decision, expected: Decision, reason: str) -> tuple:
    step = ("validator", f"Corrected: {reason}")
    final = Decision(
        expected.label,
        expected.confidence,
        expected.path,
        expected.winning_rule,
        proposal.trace + (step,),
        proposal=proposal,
    )
    return final, ValidatorReport(expected.label, proposal.label, Verdict.CORRECTED, reason)


def validate(proposal: Decision, ev: PatientEvidence, rs: RuleSet) -> tuple:
    """Accept, correct or reject a proposal against rules recomputed from ``ev``.

    A decision that already went through the validator is judged by its
    original proposal, so validating twice gives the same verdict and label.
    """
    if proposal.proposal is not None:
        proposal = proposal.proposal
    expected = expected_decision(ev, rs)

    # consistency checks assume well-typed fields, so they only run on schema-valid evidence
    problems = [str(v) for v in assert_schema(ev)] or check_consistency(ev)
    if problems:
        reason = "evidence rejected: " + "; ".join(problems)
        # the released label is still the rule-derived one, never the proposal
        final = Decision(
            expected.label,
            expected.confidence,
            expected.path,
            expected.winning_rule,
            proposal.trace + (("validator", f"Rejected: {reason}"),),
            proposal=proposal,
        )
        return final, ValidatorReport(expected.label, proposal.label, Verdict.REJECTED, reason)

    if expected.path is DecisionPath.HARD:
        if proposal.label is not expected.label:
            reason = (
                f"hard rule {expected.winning_rule} mandates {expected.label.value}, "
                f"proposal was {proposal.label.value}"
            )
            return _corrected(proposal, expected, reason)
    elif proposal.path is DecisionPath.SOFT_CHAIR:
        if expected.winning_rule != DEFAULT_RULE_ID:
            gap = abs(proposal.label.rank - expected.label.rank)
            if gap > CHAIR_TIER_TOLERANCE:
                reason = (
                    f"chair proposal {proposal.label.value} is {gap} tiers from "
                    f"{expected.winning_rule} outcome {expected.label.value}"
                )
                return _corrected(proposal, expected, reason)
    elif proposal.label is not expected.label:
        reason = (
            f"soft rule {expected.winning_rule} maps to {expected.label.value}, "
            f"proposal was {proposal.label.value}"
        )
        return _corrected(proposal, expected, reason)

    reason = f"proposal {proposal.label.value} consistent with {expected.winning_rule}"
    final = Decision(
        proposal.label,
        proposal.confidence,
        proposal.path,
        proposal.winning_rule,
        proposal.trace + (("validator", f"Accepted: {reason}"),),
        proposal=proposal,
    )
    return final, ValidatorReport(expected.label, proposal.label, Verdict.ACCEPTED, reason)


# ---------------------------------------------------------------------------
# Grey-zone resolvers
# ---------------------------------------------------------------------------


class GreyZoneResolver(Protocol):
    name: str

    def __call__(self, ev: PatientEvidence, packet: EvidencePacket, trace: tuple) -> tuple:
        """Return (RiskTier, confidence, reasoning steps)."""


class DeterministicTable2Echo:
    """Returns the Table-2 proposal unchanged."""

    name = "table2"

    def __call__(self, ev, packet, trace):
        label, conf, rule_id = map_table2(ev, packet.matched_rules)
        return label, conf, (f"echo of {rule_id}",)


# One-hot feature weights for the linear scorer. The score is compared with
# LINEAR_CUTS to pick a tier; confidence is the softmax mass of that tier
# over negative distances to the tier centres.
LINEAR_WEIGHTS = {
    "subtype": {
        MolecularSubtype.POLEMUT: -2.0,
        MolecularSubtype.MMRD: 0.5,
        MolecularSubtype.P53ABN: 2.0,
        MolecularSubtype.NSMP: 0.0,
    },
    "stage": {Stage.IA: 0.0, Stage.IB: 0.5, Stage.II: 1.0, Stage.III: 2.0, Stage.IVA: 2.5, Stage.IVB: 3.0},
    "histology": {
        Histology.ENDOMETRIOID: 0.0,
        Histology.SEROUS: 1.5,
        Histology.CLEAR_CELL: 1.5,
        Histology.UNDIFFERENTIATED: 1.5,
        Histology.MIXED: 1.0,
    },
    "grade": {Grade.G1: 0.0, Grade.G2: 0.0, Grade.G3: 0.75, Grade.UNKNOWN: 0.25},
    "myometrial_invasion": {
        MyometrialInvasion.NONE: 0.0,
        MyometrialInvasion.SUPERFICIAL: 0.25,
        MyometrialInvasion.DEEP: 0.75,
        MyometrialInvasion.UNKNOWN: 0.25,
    },
    "lvsi": {Lvsi.POSITIVE: 0.75, Lvsi.NEGATIVE: 0.0, Lvsi.UNKNOWN: 0.25},
}
LINEAR_CUTS = (1.0, 2.0, 3.0)
LINEAR_CENTRES = (0.5, 1.5, 2.5, 3.5)


class LinearScorer:
    name = "linear"

    def __init__(self, weights=None, cuts=LINEAR_CUTS, centres=LINEAR_CENTRES):
        self.weights = weights or LINEAR_WEIGHTS
        self.cuts = tuple(cuts)
        self.centres = tuple(centres)

    def score(self, ev: PatientEvidence) -> tuple:
        total, steps = 0.0, []
        for fname, table in self.weights.items():
            value = getattr(ev, fname)
            if isinstance(value, FigoStage):
                value = value.stage
            w = table.get(value, 0.0) if isinstance(value, enum.Enum) else 0.0
            total += w
            shown = value.value if isinstance(value, enum.Enum) else value
            steps.append(f"{fname}={shown} w={w:+.2f}")
        return total, steps

    def __call__(self, ev, packet, trace):
        s, steps = self.score(ev)
        tier_idx = sum(s >= c for c in self.cuts)
        logits = [-abs(s - c) for c in self.centres]
        m = max(logits)
        exps = [math.exp(v - m) for v in logits]
        conf = exps[tier_idx] / math.fsum(exps)
        tier = tuple(RiskTier)[tier_idx]
        return tier, conf, tuple(steps) + (f"score={s:.2f} -> {tier.value}",)


class ExternalAdapter:
    """Posts the case to an out-of-process resolver and reads back one JSON answer.

    Request body: ``{"evidence": ..., "packet": ..., "trace": [...]}``.
    Response body: ``{"label": "<tier>", "confidence": <0..1>, "reasoning": [...]}``.
    The endpoint comes from the constructor or ``ENDOGOV_RESOLVER_URL``;
    without one every call fails, which govern turns into a Table-2 fallback.
    """

    name = "external"

    def __init__(self, url: Optional[str] = None, timeout: float = 10.0):
        self.url = url if url is not None else os.environ.get(RESOLVER_URL_ENV, "")
        self.timeout = timeout

    def __call__(self, ev, packet, trace):
        if not self.url:
            raise ResolverFailure(f"no resolver endpoint configured (set {RESOLVER_URL_ENV})")
        body = json.dumps(
            {"evidence": ev.to_dict(), "packet": packet.to_dict(), "trace": [list(s) for s in trace]},
            sort_keys=True,
        ).encode()
        req = urllib.request.Request(self.url, data=body, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ResolverFailure(f"resolver request failed: {exc}") from exc
        try:
            label = RiskTier(payload["label"])
            conf = float(payload["confidence"])
            reasoning = tuple(str(s) for s in payload.get("reasoning", ()))
        except (KeyError, TypeError, ValueError) as exc:
            raise ResolverFailure(f"malformed resolver response: {payload!r}") from exc
        return label, conf, reasoning


RESOLVERS = {"table2": DeterministicTable2Echo, "linear": LinearScorer, "external": ExternalAdapter}


def make_resolver(kind: str) -> GreyZoneResolver:
    try:
        return RESOLVERS[kind]()
    except KeyError:
        raise ValueError(f"unknown resolver {kind!r}; choose from {sorted(RESOLVERS)}") from None


def _call_resolver(resolver, ev, packet, trace) -> tuple:
    try:
        out = resolver(ev, packet, trace)
    except ResolverFailure:
        raise
    except Exception as exc:  # a resolver bug must not take the pipeline down
        raise ResolverFailure(f"resolver raised {type(exc).__name__}: {exc}") from exc
    try:
        label, conf, reasoning = out
    except (TypeError, ValueError):
        raise ResolverFailure(f"malformed resolver output: {out!r}") from None
    if not isinstance(label, RiskTier):
        raise ResolverFailure(f"resolver returned a non-tier label: {label!r}")
    if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
        raise ResolverFailure(f"resolver returned an invalid confidence: {conf!r}")
    return label, float(conf), tuple(str(s) for s in reasoning)


# ---------------------------------------------------------------------------
# Governance entry points
# ---------------------------------------------------------------------------


def govern(
    ev: PatientEvidence,
    packet: EvidencePacket,
    rs: RuleSet,
    resolver: GreyZoneResolver,
    tau: float = DEFAULT_TAU,
    case_id: str = "case",
) -> tuple:
    matched = match_rules(rs, ev)
    trace = (("match", ",".join(r.rule_id for r in matched)),)
    hard = [r for r in matched if r.is_hard]
    resolver_note = "not invoked"

    if hard:
        result = resolve_priority(hard)
        w = result.winner
        for rule_id, why in result.dominance_trace:
            trace += (("arbitrate", f"{rule_id}: {why}"),)
        trace += (("hard", f"{w.rule_id} -> {w.outcome.value}"),)
        proposal = Decision(w.outcome, HARD_CONFIDENCE, DecisionPath.HARD, w.rule_id, trace)
    else:
        label, conf, rule_id = map_table2(ev, matched)
        trace += (("table2", f"{rule_id} -> {label.value} ({conf:.2f})"),)
        proposal = Decision(label, conf, DecisionPath.SOFT_TABLE2, rule_id, trace)
        if conf < tau:
            try:
                r_label, r_conf, reasoning = _call_resolver(resolver, ev, packet, trace)
            except ResolverFailure as exc:
                resolver_note = f"{resolver.name} failed: {exc}"
                trace += (("resolver", f"failure, keeping Table-2 proposal: {exc}"),)
                proposal = Decision(label, conf, DecisionPath.SOFT_TABLE2, rule_id, trace)
            else:
                resolver_note = f"{resolver.name} invoked"
                trace += tuple(("resolver", s) for s in reasoning)
                trace += (("chair", f"{r_label.value} ({r_conf:.2f})"),)
                proposal = Decision(r_label, r_conf, DecisionPath.SOFT_CHAIR, rule_id, trace)

    final, report = validate(proposal, ev, rs)
    source = ev.detection_source
    audit = AuditRecord(
        case_id=case_id,
        matched_rule_ids=tuple(r.rule_id for r in matched),
        decision_path=final.path.value,
        winning_rule=final.winning_rule,
        detection_source=source.value if isinstance(source, DetectionSource) else str(source),
        provenance_chunk_ids=tuple(c.chunk_id for c in packet.provenance_chunks),
        resolver=resolver_note,
        validator_verdict=report.verdict.value,
        validator_message=report.reason,
        pre_validation_label=proposal.label.value,
        final_label=final.label.value,
        final_confidence=final.confidence,
        ruleset_version=rs.version,
        ruleset_hash=rs.source_hash,
    )
    return final, audit


def posthoc_wrap(baseline_label: RiskTier, ev: PatientEvidence, rs: RuleSet) -> RiskTier:
    """Baseline-then-rules wrapper: hard rules overwrite the label, nothing is recorded."""
    hard = [r for r in match_rules(rs, ev) if r.is_hard]
    if hard:
        return resolve_priority(hard).winner.outcome
    return baseline_label
