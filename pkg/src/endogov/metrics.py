"""Safety and discrimination metrics over per-case evaluation records."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .domain import RISK_TIERS, RiskTier

DEFAULT_ECE_BINS = 10


class EmptyDenominator(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class NoScorableClass(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationRecord:
    case_id: str
    oracle_label: RiskTier
    predicted_label: RiskTier
    predicted_confidence: float
    class_scores: tuple  # one score per tier, in RISK_TIERS order
    is_trigger: bool
    trigger_detected: bool
    rule_mandated_label: Optional[RiskTier] = None
    detection_source: str = "dna_direct"
    path: str = "Hard"

    def __post_init__(self):
        if self.is_trigger and self.rule_mandated_label is None:
            raise ValueError(f"{self.case_id}: trigger records need a rule-mandated label")
        if len(self.class_scores) != len(RISK_TIERS):
            raise ValueError(f"{self.case_id}: expected {len(RISK_TIERS)} class scores")
        if abs(math.fsum(self.class_scores) - 1.0) > 1e-9:
            raise ValueError(f"{self.case_id}: class scores sum to {math.fsum(self.class_scores)}")

    @property
    def correct(self) -> bool:
        return self.predicted_label is self.oracle_label

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "oracle_label": self.oracle_label.value,
            "predicted_label": self.predicted_label.value,
            "predicted_confidence": self.predicted_confidence,
            "class_scores": list(self.class_scores),
            "is_trigger": self.is_trigger,
            "trigger_detected": self.trigger_detected,
            "rule_mandated_label": self.rule_mandated_label.value if self.rule_mandated_label else None,
            "detection_source": self.detection_source,
            "path": self.path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationRecord":
        mandated = d.get("rule_mandated_label")
        return cls(
            case_id=d["case_id"],
            oracle_label=RiskTier(d["oracle_label"]),
            predicted_label=RiskTier(d["predicted_label"]),
            predicted_confidence=d["predicted_confidence"],
            class_scores=tuple(d["class_scores"]),
            is_trigger=d["is_trigger"],
            trigger_detected=d["trigger_detected"],
            rule_mandated_label=RiskTier(mandated) if mandated else None,
            detection_source=d["detection_source"],
            path=d["path"],
        )


def class_scores_for(label: RiskTier, confidence: float) -> tuple:
    """Put ``confidence`` on ``label`` and spread the rest evenly over the other tiers."""
    rest = (1.0 - confidence) / (len(RISK_TIERS) - 1)
    return tuple(confidence if t is label else rest for t in RISK_TIERS)


# ---------------------------------------------------------------------------
# Logic-violation rates
# ---------------------------------------------------------------------------


def _violates(r: EvaluationRecord) -> bool:
    return r.predicted_label is not r.rule_mandated_label


def lvr(records: Sequence[EvaluationRecord]) -> float:
    trig = [r for r in records if r.is_trigger]
    if not trig:
        raise EmptyDenominator("no trigger cases")
    return sum(_violates(r) for r in trig) / len(trig)


def c_lvr(records: Sequence[EvaluationRecord]) -> float:
    exposed = [r for r in records if r.is_trigger and r.trigger_detected]
    if not exposed:
        raise EmptyDenominator("no detected trigger cases")
    return sum(_violates(r) for r in exposed) / len(exposed)


def e2e_lvr(records: Sequence[EvaluationRecord]) -> float:
    trig = [r for r in records if r.is_trigger]
    if not trig:
        raise EmptyDenominator("no trigger cases")
    return sum(not r.correct for r in trig) / len(trig)


@dataclass(frozen=True)
class SafetyDecomposition:
    n_trigger: int
    n_detected: int
    n_missed: int
    n_recovered_by_soft_path: int
    n_final_correct: int
    n_false_triggers: int
    n_non_trigger: int
    n_detected_violations: int
    sensitivity: Optional[float]
    specificity: Optional[float]
    governance_c_lvr: Optional[float]
    e2e_lvr: Optional[float]

    @classmethod
    def from_counts(
        cls,
        n_trigger: int,
        n_detected: int,
        n_final_correct: int,
        n_false_triggers: int = 0,
        n_recovered_by_soft_path: int = 0,
        n_non_trigger: int = 0,
        n_detected_violations: int = 0,
    ) -> "SafetyDecomposition":
        if not 0 <= n_detected <= n_trigger or not 0 <= n_final_correct <= n_trigger:
            raise ValueError("detected and final-correct counts must lie in [0, n_trigger]")
        if n_detected_violations > n_detected:
            raise ValueError("more violations than detected triggers")
        if n_non_trigger and n_false_triggers > n_non_trigger:
            raise ValueError("more false triggers than non-trigger cases")
        if n_recovered_by_soft_path > n_trigger - n_detected:
            raise ValueError("more recovered cases than missed triggers")
        return cls(
            n_trigger=n_trigger,
            n_detected=n_detected,
            n_missed=n_trigger - n_detected,
            n_recovered_by_soft_path=n_recovered_by_soft_path,
            n_final_correct=n_final_correct,
            n_false_triggers=n_false_triggers,
            n_non_trigger=n_non_trigger,
            n_detected_violations=n_detected_violations,
            sensitivity=n_detected / n_trigger if n_trigger else None,
            specificity=(n_non_trigger - n_false_triggers) / n_non_trigger if n_non_trigger else None,
            governance_c_lvr=n_detected_violations / n_detected if n_detected else None,
            e2e_lvr=(n_trigger - n_final_correct) / n_trigger if n_trigger else None,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def safety_decomposition(records: Sequence[EvaluationRecord]) -> SafetyDecomposition:
    trig = [r for r in records if r.is_trigger]
    non = [r for r in records if not r.is_trigger]
    detected = [r for r in trig if r.trigger_detected]
    missed = [r for r in trig if not r.trigger_detected]
    return SafetyDecomposition.from_counts(
        n_trigger=len(trig),
        n_detected=len(detected),
        n_final_correct=sum(r.correct for r in trig),
        n_false_triggers=sum(r.trigger_detected for r in non),
        n_recovered_by_soft_path=sum(r.correct for r in missed),
        n_non_trigger=len(non),
        n_detected_violations=sum(_violates(r) for r in detected),
    )


# ---------------------------------------------------------------------------
# Discrimination and calibration
# ---------------------------------------------------------------------------


def accuracy(records: Sequence[EvaluationRecord]) -> float:
    if not records:
        raise EmptyInput("accuracy of an empty record set")
    return sum(r.correct for r in records) / len(records)


def confusion(records: Sequence[EvaluationRecord]) -> list:
    """4x4 counts; rows are oracle tiers, columns predicted tiers."""
    if not records:
        raise EmptyInput("confusion of an empty record set")
    m = [[0] * len(RISK_TIERS) for _ in RISK_TIERS]
    for r in records:
        m[r.oracle_label.rank][r.predicted_label.rank] += 1
    return m


def _midranks(values: Sequence[float]) -> list:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mid = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = mid
        i = j + 1
    return ranks


def binary_auc(labels: Sequence[bool], scores: Sequence[float]) -> float:
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise NoScorableClass("AUC needs both positives and negatives")
    ranks = _midranks(scores)
    rank_sum = math.fsum(rk for rk, y in zip(ranks, labels) if y)
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def per_class_auc(records: Sequence[EvaluationRecord]) -> dict:
    out = {}
    for k, tier in enumerate(RISK_TIERS):
        labels = [r.oracle_label is tier for r in records]
        if all(labels) or not any(labels):
            continue
        out[tier] = binary_auc(labels, [r.class_scores[k] for r in records])
    return out


def macro_auc(records: Sequence[EvaluationRecord]) -> float:
    """Unweighted mean one-vs-rest AUC over tiers that have both positives and negatives."""
    per_class = per_class_auc(records)
    if not per_class:
        raise NoScorableClass("no tier has both positive and negative records")
    return math.fsum(per_class.values()) / len(per_class)


def ece(records: Sequence[EvaluationRecord], bins: int = DEFAULT_ECE_BINS) -> float:
    """Top-label calibration error with equal-width, right-closed bins on [0, 1]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not records:
        raise EmptyInput("ece of an empty record set")
    conf_sum = [[] for _ in range(bins)]
    hits = [0] * bins
    for r in records:
        conf = max(r.class_scores)
        b = max(0, math.ceil(conf * bins) - 1)
        b = min(b, bins - 1)
        conf_sum[b].append(conf)
        hits[b] += r.correct
    n = len(records)
    total = []
    for b in range(bins):
        nb = len(conf_sum[b])
        if nb:
            total.append(nb / n * abs(hits[b] / nb - math.fsum(conf_sum[b]) / nb))
    return math.fsum(total)


# ---------------------------------------------------------------------------
# Referral
# ---------------------------------------------------------------------------


class ReferralKind(enum.Enum):
    DNA_DIRECT_ONLY = "DnaDirectOnly"
    CONFIDENCE_AT_LEAST = "ConfidenceAtLeast"


@dataclass(frozen=True)
class ReferralPolicy:
    kind: ReferralKind
    threshold: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"referral threshold {self.threshold} outside [0, 1]")

    @classmethod
    def dna_direct_only(cls) -> "ReferralPolicy":
        return cls(ReferralKind.DNA_DIRECT_ONLY)

    @classmethod
    def confidence_at_least(cls, threshold: float) -> "ReferralPolicy":
        return cls(ReferralKind.CONFIDENCE_AT_LEAST, threshold)

    def releases(self, r: EvaluationRecord) -> bool:
        if self.kind is ReferralKind.DNA_DIRECT_ONLY:
            return r.detection_source == "dna_direct"
        return r.predicted_confidence >= self.threshold

    def describe(self) -> str:
        if self.kind is ReferralKind.DNA_DIRECT_ONLY:
            return self.kind.value
        return f"{self.kind.value}({self.threshold:g})"


@dataclass(frozen=True)
class ReferralOutcome:
    coverage: float
    accuracy_on_released: Optional[float]  # None when nothing is released
    referred_error_count: int
    n_released: int
    n_referred: int


def referral_simulate(records: Sequence[EvaluationRecord], policy: ReferralPolicy) -> ReferralOutcome:
    if not records:
        raise EmptyInput("referral over an empty record set")
    released = [r for r in records if policy.releases(r)]
    referred = [r for r in records if not policy.releases(r)]
    acc = sum(r.correct for r in released) / len(released) if released else None
    return ReferralOutcome(
        coverage=len(released) / len(records),
        accuracy_on_released=acc,
        referred_error_count=sum(not r.correct for r in referred),
        n_released=len(released),
        n_referred=len(referred),
    )


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def metrics_report(records: Sequence[EvaluationRecord]) -> str:
    """Flat ``key=value`` lines followed by the confusion matrix."""
    sd = safety_decomposition(records)
    lines = [
        f"n_cases={len(records)}",
        f"accuracy={_fmt(accuracy(records))}",
    ]
    try:
        lines.append(f"macro_auc={_fmt(macro_auc(records))}")
    except NoScorableClass:
        lines.append("macro_auc=n/a")
    lines.append(f"ece={_fmt(ece(records))}")
    for key, value in sd.to_dict().items():
        lines.append(f"{key}={_fmt(value)}")
    trig = sd.n_trigger
    lines.append(f"lvr={_fmt(lvr(records)) if trig else 'n/a'}")
    lines.append(f"lvr_denominator_trigger_cases={trig}")
    lines.append(f"c_lvr_denominator_exposed_triggers={sd.n_detected}")
    lines.append(f"c_lvr_violations={sd.n_detected_violations}")
    lines.append("")
    lines.append(confusion_text(confusion(records)))
    return "\n".join(lines) + "\n"


def confusion_text(m: list) -> str:
    names = [t.value for t in RISK_TIERS]
    width = max(len(n) for n in names) + 2
    out = ["oracle\\predicted".ljust(width + 2) + "".join(n.rjust(width) for n in names)]
    for name, row in zip(names, m):
        out.append(name.ljust(width + 2) + "".join(str(c).rjust(width) for c in row))
    return "\n".join(out)
