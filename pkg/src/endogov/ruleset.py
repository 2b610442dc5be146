"""Executable rule layer: DSL parser, trigger matching and priority arbitration.

Rule source format (one block per rule)::

    ruleset <name>
    version "<text>"

    rule <ID>
      priority <int>
      path hard|soft
      when <atom> and <atom> ...
      outcome Low|Intermediate|HighIntermediate|High|chair
      overrides <ID>, <ID>          # optional
      exception_of <ID>             # optional
      sources <chunk-id>, ...
    end

Atoms: ``field == Value``, ``field in {A, B}``, ``stage >= II``,
``any(<atom>, <atom>)`` and the bare keyword ``always``.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional, Sequence, Union

from .domain import (
    FigoStage,
    Grade,
    Histology,
    Lvsi,
    MolecularSubtype,
    MyometrialInvasion,
    PatientEvidence,
    RiskTier,
    Stage,
    evidence_grid,
)

HARD_MAX_PRIORITY = 4
SOFT_PRIORITY = 10
DEFAULT_RULE_ID = "S5_DEFAULT"


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class CompletenessError(ValueError):
    def __init__(self, witness: PatientEvidence):
        super().__init__(f"no rule matches evidence {witness.to_dict()}")
        self.witness = witness


class RulePath(enum.Enum):
    HARD = "hard"
    SOFT = "soft"


class ChairReferral(enum.Enum):
    """Outcome of the default rule: defer to the grey-zone resolver."""

    CHAIR = "chair"


Outcome = Union[RiskTier, ChairReferral]


# Evidence attribute and value vocabulary for each DSL field name.
FIELDS = {
    "subtype": ("subtype", MolecularSubtype),
    "stage": ("stage", Stage),
    "histology": ("histology", Histology),
    "grade": ("grade", Grade),
    "mi": ("myometrial_invasion", MyometrialInvasion),
    "lvsi": ("lvsi", Lvsi),
}

# Values that stand for absent evidence never satisfy an atom.
_ABSENT = frozenset({Grade.UNKNOWN, MyometrialInvasion.UNKNOWN, Lvsi.UNKNOWN})


def _read(ev: PatientEvidence, name: str):
    attr, enum_cls = FIELDS[name]
    value = getattr(ev, attr)
    if isinstance(value, FigoStage):
        value = value.stage
    if not isinstance(value, enum_cls) or value in _ABSENT:
        return None
    return value


@dataclass(frozen=True)
class Equals:
    field: str
    value: enum.Enum

    def __call__(self, ev: PatientEvidence) -> bool:
        return _read(ev, self.field) is self.value

    def __str__(self):
        return f"{self.field} == {self.value.value}"


@dataclass(frozen=True)
class MemberOf:
    field: str
    values: frozenset

    def __call__(self, ev: PatientEvidence) -> bool:
        return _read(ev, self.field) in self.values

    def __str__(self):
        names = sorted(v.value for v in self.values)
        return f"{self.field} in {{{', '.join(names)}}}"


@dataclass(frozen=True)
class StageAtLeast:
    stage: Stage

    field = "stage"

    def __call__(self, ev: PatientEvidence) -> bool:
        value = _read(ev, "stage")
        return value is not None and value.rank >= self.stage.rank

    def __str__(self):
        return f"stage >= {self.stage.value}"


@dataclass(frozen=True)
class AnyOf:
    atoms: tuple

    @property
    def field(self) -> str:
        return self.atoms[0].field

    def __call__(self, ev: PatientEvidence) -> bool:
        return any(a(ev) for a in self.atoms)

    def __str__(self):
        return f"any({', '.join(str(a) for a in self.atoms)})"


@dataclass(frozen=True)
class Always:
    field = "*"

    def __call__(self, ev: PatientEvidence) -> bool:
        return True

    def __str__(self):
        return "always"


Atom = Union[Equals, MemberOf, StageAtLeast, AnyOf, Always]


@dataclass(frozen=True)
class TriggerCondition:
    atoms: tuple

    def __call__(self, ev: PatientEvidence) -> bool:
        return all(a(ev) for a in self.atoms)

    @property
    def locus(self) -> str:
        """Field of the leading atom, the rule's dominant trigger field."""
        return self.atoms[0].field

    @property
    def universal(self) -> bool:
        return all(isinstance(a, Always) for a in self.atoms)

    def fields(self) -> set[str]:
        out = set()
        for a in self.atoms:
            if isinstance(a, AnyOf):
                out.update(x.field for x in a.atoms)
            elif not isinstance(a, Always):
                out.add(a.field)
        return out

    def __str__(self):
        return " and ".join(str(a) for a in self.atoms)


@dataclass(frozen=True)
class ExecutableRule:
    rule_id: str
    priority: int
    path: RulePath
    trigger: TriggerCondition
    outcome: Outcome
    overrides: tuple = ()
    exception_of: Optional[str] = None
    derived_from: tuple = ()

    @property
    def is_hard(self) -> bool:
        return self.path is RulePath.HARD

    def matches(self, ev: PatientEvidence) -> bool:
        return self.trigger(ev)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple
    version: str
    source_hash: str
    name: str = ""
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {r.rule_id: r for r in self.rules})

    def __getitem__(self, rule_id: str) -> ExecutableRule:
        return self._index[rule_id]

    def __contains__(self, rule_id: str) -> bool:
        return rule_id in self._index

    def __iter__(self):
        return iter(self.rules)

    def __len__(self):
        return len(self.rules)

    @property
    def hard_rules(self) -> tuple:
        return tuple(r for r in self.rules if r.is_hard)

    @property
    def soft_rules(self) -> tuple:
        return tuple(r for r in self.rules if not r.is_hard)


@dataclass(frozen=True)
class MatchResult:
    matched: tuple
    winner: ExecutableRule
    dominance_trace: tuple  # (rule_id, reason) in elimination order


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(==|>=|[{}(),]|[A-Za-z_][A-Za-z0-9_+#.\-]*)")
_ID_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_]*$")
_OUTCOMES = {t.value: t for t in RiskTier}
_OUTCOMES["chair"] = ChairReferral.CHAIR


def _value_lookup(enum_cls) -> dict:
    table = {}
    for member in enum_cls:
        table[member.value.lower()] = member
        table[member.name.lower()] = member
    return table


_VALUE_TABLES = {name: _value_lookup(cls) for name, (_, cls) in FIELDS.items()}


def _tokenize(text: str, lineno: int) -> list[str]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(lineno, f"unexpected character {text[pos:].strip()[:1]!r}")
        out.append(m.group(1))
        pos = m.end()
    return out


class _TriggerParser:
    def __init__(self, tokens: list[str], lineno: int):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno

    def error(self, msg):
        raise ParseError(self.lineno, msg)

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self, expected=None):
        tok = self.peek()
        if tok is None:
            self.error("unexpected end of trigger expression")
        if expected is not None and tok != expected:
            self.error(f"expected {expected!r}, found {tok!r}")
        self.pos += 1
        return tok

    def parse(self) -> TriggerCondition:
        atoms = [self.atom(top=True)]
        while self.peek() == "and":
            self.take()
            atoms.append(self.atom(top=True))
        if self.peek() is not None:
            self.error(f"unexpected token {self.peek()!r} in trigger")
        if any(isinstance(a, Always) for a in atoms) and len(atoms) > 1:
            self.error("'always' cannot be combined with other atoms")
        return TriggerCondition(tuple(atoms))

    def value(self, fname: str):
        tok = self.take()
        member = _VALUE_TABLES[fname].get(tok.lower())
        if member is None:
            self.error(f"unknown value {tok!r} for field {fname!r}")
        if member in _ABSENT:
            self.error(f"atom on absent value {tok!r} can never match")
        return member

    def atom(self, top: bool) -> Atom:
        tok = self.take()
        if tok == "always":
            if not top:
                self.error("'always' is not allowed inside any(...)")
            return Always()
        if tok == "any":
            if not top:
                self.error("nested any(...) groups are not supported")
            self.take("(")
            parts = [self.atom(top=False)]
            while self.peek() == ",":
                self.take()
                parts.append(self.atom(top=False))
            self.take(")")
            if len(parts) < 2:
                self.error("any(...) needs at least two atoms")
            return AnyOf(tuple(parts))
        if tok not in FIELDS:
            self.error(f"unknown evidence field {tok!r}")
        op = self.take()
        if op == "==":
            return Equals(tok, self.value(tok))
        if op == ">=":
            if tok != "stage":
                self.error("'>=' is only defined for stage")
            return StageAtLeast(self.value(tok))
        if op == "in":
            self.take("{")
            values = [self.value(tok)]
            while self.peek() == ",":
                self.take()
                values.append(self.value(tok))
            self.take("}")
            return MemberOf(tok, frozenset(values))
        self.error(f"unknown operator {op!r}")


def _split_list(rest: str, lineno: int) -> tuple:
    items = tuple(x.strip() for x in rest.split(",") if x.strip())
    if not items:
        raise ParseError(lineno, "empty list")
    return items


def _strip_comment(line: str) -> str:
    # '#' also appears inside chunk ids (doc#c01); a comment starts at a
    # leading '#' or at ' #' followed by whitespace or end of line
    if line.lstrip().startswith("#"):
        return ""
    m = re.search(r"\s#(\s|$)", line)
    return line[: m.start()] if m else line


def parse_ruleset(source: str, check_completeness: bool = True) -> RuleSet:
    if not source or not source.strip():
        raise ParseError(0, "empty rule source")
    name, version = "", ""
    rules: list[ExecutableRule] = []
    current: Optional[dict] = None
    rule_lines: dict[str, int] = {}

    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        rest = rest.strip()
        if current is None:
            if keyword == "ruleset":
                name = rest
            elif keyword == "version":
                version = rest.strip('"')
            elif keyword == "rule":
                if not _ID_RE.match(rest):
                    raise ParseError(lineno, f"invalid rule id {rest!r}")
                if rest in rule_lines:
                    raise ParseError(lineno, f"duplicate rule id {rest!r} (first defined on line {rule_lines[rest]})")
                rule_lines[rest] = lineno
                current = {"rule_id": rest, "line": lineno}
            else:
                raise ParseError(lineno, f"unexpected {keyword!r} outside a rule block")
            continue

        if keyword == "end":
            rules.append(_finish_rule(current, lineno))
            current = None
        elif keyword in current:
            raise ParseError(lineno, f"repeated clause {keyword!r}")
        elif keyword == "priority":
            try:
                current["priority"] = int(rest)
            except ValueError:
                raise ParseError(lineno, f"priority must be an integer, got {rest!r}") from None
            if current["priority"] < 1:
                raise ParseError(lineno, "priority must be positive")
        elif keyword == "path":
            try:
                current["path"] = RulePath(rest.lower())
            except ValueError:
                raise ParseError(lineno, f"path must be hard or soft, got {rest!r}") from None
        elif keyword == "when":
            current["trigger"] = _TriggerParser(_tokenize(rest, lineno), lineno).parse()
        elif keyword == "outcome":
            if rest not in _OUTCOMES:
                raise ParseError(lineno, f"unknown outcome {rest!r}")
            current["outcome"] = _OUTCOMES[rest]
        elif keyword == "overrides":
            current["overrides"] = _split_list(rest, lineno)
        elif keyword == "exception_of":
            current["exception_of"] = rest
        elif keyword == "sources":
            current["derived_from"] = _split_list(rest, lineno)
        elif keyword == "rule":
            raise ParseError(lineno, f"rule {current['rule_id']!r} is missing 'end'")
        else:
            raise ParseError(lineno, f"unknown clause {keyword!r}")

    if current is not None:
        raise ParseError(current["line"], f"rule {current['rule_id']!r} is missing 'end'")
    if not rules:
        raise ParseError(0, "no rules defined")

    _check_references(rules, rule_lines)
    rs = RuleSet(
        rules=tuple(rules),
        version=version or name or "unversioned",
        source_hash=hashlib.sha256(source.encode("utf-8")).hexdigest(),
        name=name,
    )
    if check_completeness:
        check_ruleset_completeness(rs)
    return rs


def _finish_rule(block: dict, lineno: int) -> ExecutableRule:
    rid = block["rule_id"]
    for required in ("priority", "path", "trigger", "outcome", "derived_from"):
        if required not in block:
            clause = "sources" if required == "derived_from" else required
            raise ParseError(lineno, f"rule {rid!r} lacks a {clause!r} clause")
    rule = ExecutableRule(
        rule_id=rid,
        priority=block["priority"],
        path=block["path"],
        trigger=block["trigger"],
        outcome=block["outcome"],
        overrides=block.get("overrides", ()),
        exception_of=block.get("exception_of"),
        derived_from=block["derived_from"],
    )
    if rule.is_hard:
        if rule.priority > HARD_MAX_PRIORITY:
            raise ParseError(lineno, f"hard rule {rid!r} must have priority <= {HARD_MAX_PRIORITY}")
        if not isinstance(rule.outcome, RiskTier):
            raise ParseError(lineno, f"hard rule {rid!r} needs a concrete risk tier outcome")
    elif rule.priority != SOFT_PRIORITY:
        raise ParseError(lineno, f"soft rule {rid!r} must have priority {SOFT_PRIORITY}")
    return rule


def _check_references(rules: Sequence[ExecutableRule], lines: dict) -> None:
    by_id = {r.rule_id: r for r in rules}
    for r in rules:
        for target in r.overrides:
            if target not in by_id:
                raise ParseError(lines[r.rule_id], f"{r.rule_id} overrides unknown rule {target!r}")
            if target == r.rule_id:
                raise ParseError(lines[r.rule_id], f"{r.rule_id} overrides itself")
        if r.exception_of is not None:
            target = by_id.get(r.exception_of)
            if target is None:
                raise ParseError(lines[r.rule_id], f"{r.rule_id} is an exception of unknown rule {r.exception_of!r}")
            if target.trigger.locus != r.trigger.locus:
                raise ParseError(
                    lines[r.rule_id],
                    f"{r.rule_id} and its target {target.rule_id} do not share a trigger locus",
                )


def check_ruleset_completeness(rs: RuleSet) -> None:
    """Raise CompletenessError with a witness if some grid point matches no rule."""
    if not any(r.trigger.universal for r in rs.rules):
        for ev in evidence_grid():
            if not any(r.matches(ev) for r in rs.rules):
                raise CompletenessError(ev)


def default_rules_source() -> str:
    return resources.files("endogov.rules").joinpath("esmo2022.rules").read_text(encoding="utf-8")


def load_ruleset(path=None) -> RuleSet:
    if path is None:
        return parse_ruleset(default_rules_source())
    with open(path, encoding="utf-8") as fh:
        return parse_ruleset(fh.read())


# ---------------------------------------------------------------------------
# Matching and arbitration
# ---------------------------------------------------------------------------


def match_rules(rs: RuleSet, ev: PatientEvidence) -> list[ExecutableRule]:
    return [r for r in rs.rules if r.matches(ev)]


def _outcome_rank(outcome: Outcome) -> int:
    # a concrete tier always outranks a chair referral in conservative fallback
    return outcome.rank if isinstance(outcome, RiskTier) else -1


def resolve_priority(matched: Iterable[ExecutableRule]) -> MatchResult:
    """Pick one winner from a non-empty match set, recording why the rest lost."""
    matched = tuple(matched)
    if not matched:
        raise ValueError("resolve_priority needs at least one matched rule")
    trace = []

    best = min(r.priority for r in matched)
    alive = []
    for r in matched:
        if r.priority > best:
            trace.append((r.rule_id, f"priority {r.priority} > {best}"))
        else:
            alive.append(r)

    alive_ids = {r.rule_id for r in alive}
    displaced = {}
    for r in alive:
        if r.exception_of in alive_ids:
            displaced.setdefault(r.exception_of, r.rule_id)
    if displaced:
        kept = []
        for r in alive:
            if r.rule_id in displaced:
                trace.append((r.rule_id, f"displaced by exception {displaced[r.rule_id]}"))
            else:
                kept.append(r)
        alive = kept

    alive_ids = {r.rule_id for r in alive}
    overridden = {}
    for r in alive:
        for target in r.overrides:
            if target in alive_ids and target != r.rule_id:
                overridden.setdefault(target, r.rule_id)
    if overridden and len(overridden) < len(alive):
        kept = []
        for r in alive:
            if r.rule_id in overridden:
                trace.append((r.rule_id, f"overridden by {overridden[r.rule_id]}"))
            else:
                kept.append(r)
        alive = kept

    top = max(_outcome_rank(r.outcome) for r in alive)
    winner = None
    for r in alive:
        if _outcome_rank(r.outcome) < top:
            trace.append((r.rule_id, f"conservative fallback: outcome {r.outcome.value} below {_tier_name(top)}"))
        elif winner is None:
            winner = r
        else:
            trace.append((r.rule_id, f"same outcome as {winner.rule_id}, declared later"))
    return MatchResult(matched=matched, winner=winner, dominance_trace=tuple(trace))


def _tier_name(rank: int) -> str:
    for t in RiskTier:
        if t.rank == rank:
            return t.value
    return ChairReferral.CHAIR.value
