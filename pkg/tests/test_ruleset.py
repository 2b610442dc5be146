import time

import pytest
from hypothesis import given, strategies as st

from endogov.domain import (
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
from endogov.governance import map_table2
from endogov.ruleset import (
    ChairReferral,
    CompletenessError,
    ParseError,
    RulePath,
    default_rules_source,
    load_ruleset,
    match_rules,
    parse_ruleset,
    resolve_priority,
)

from oracles import table1

M, S, H, G, MI = MolecularSubtype, Stage, Histology, Grade, MyometrialInvasion
_RS = load_ruleset()  # module-level so hypothesis tests avoid function-scoped fixtures


def _ev(subtype, stage, histology=H.ENDOMETRIOID, grade=G.G1, mi=MI.SUPERFICIAL, lvsi=Lvsi.NEGATIVE):
    return PatientEvidence(subtype, FigoStage(stage), histology, grade, mi, lvsi)


def _ids(rules):
    return [r.rule_id for r in rules]


evidence = st.builds(
    lambda m, s, h, g, mi, l: PatientEvidence(m, FigoStage(s), h, g, mi, l),
    st.sampled_from(list(M)),
    st.sampled_from(list(S)),
    st.sampled_from(list(H)),
    st.sampled_from(list(G)),
    st.sampled_from(list(MI)),
    st.sampled_from(list(Lvsi)),
)


def test_shipped_rules_shape(rs):
    assert len(rs) == 12
    assert sorted(r.priority for r in rs.hard_rules) == [1, 2, 2, 3, 4, 4, 4]
    assert [r.priority for r in rs.soft_rules] == [10] * 5
    assert all(isinstance(r.outcome, RiskTier) for r in rs.hard_rules)
    assert rs["S5_DEFAULT"].outcome is ChairReferral.CHAIR
    assert rs["R2_P53_EX"].exception_of == "R2_P53"
    assert len(rs.source_hash) == 64


def test_source_hash_tracks_source():
    src = default_rules_source()
    assert parse_ruleset(src).source_hash == parse_ruleset(src).source_hash
    assert parse_ruleset(src + "\n# trailing comment\n").source_hash != parse_ruleset(src).source_hash


def test_match_pole_stage3_serous(rs):
    ids = _ids(match_rules(rs, _ev(M.POLEMUT, S.III, H.SEROUS, G.G3)))
    assert {"R1_POLE", "R5_ADV", "R6_HISTO"} <= set(ids)
    assert set(ids) - {"R1_POLE", "R5_ADV", "R6_HISTO"} == {"S5_DEFAULT"}
    result = resolve_priority(match_rules(rs, _ev(M.POLEMUT, S.III, H.SEROUS, G.G3)))
    assert result.winner.rule_id == "R1_POLE" and result.winner.outcome is RiskTier.LOW


def test_match_nsmp_low(rs):
    ev = _ev(M.NSMP, S.IA, H.ENDOMETRIOID, G.G1, MI.NONE, Lvsi.NEGATIVE)
    assert _ids(match_rules(rs, ev)) == ["S1_NSMP_LO", "S5_DEFAULT"]


def test_p53_exception_displaces_target(rs):
    matched = match_rules(rs, _ev(M.P53ABN, S.IA, mi=MI.NONE))
    assert {"R2_P53", "R2_P53_EX"} <= set(_ids(matched))
    result = resolve_priority(matched)
    assert result.winner.rule_id == "R2_P53_EX"
    assert result.winner.outcome is RiskTier.HIGH_INTERMEDIATE
    assert ("R2_P53", "displaced by exception R2_P53_EX") in result.dominance_trace


def test_trace_names_every_loser(rs):
    for ev in list(evidence_grid())[::37]:
        result = resolve_priority(match_rules(rs, ev))
        losers = {r.rule_id for r in result.matched} - {result.winner.rule_id}
        assert {rid for rid, _ in result.dominance_trace} == losers
        assert result.winner in result.matched


SYNTH = """
ruleset t
rule A
  priority 3
  path hard
  when stage >= II
  outcome Intermediate
  sources x#1
end
rule B
  priority 3
  path hard
  when histology == Serous
  outcome High
  sources x#1
end
rule D
  priority 10
  path soft
  when always
  outcome chair
  sources x#1
end
"""


def test_conservative_fallback_picks_higher_tier():
    rs = parse_ruleset(SYNTH)
    result = resolve_priority(match_rules(rs, _ev(M.NSMP, S.III, H.SEROUS, G.G3)))
    assert result.winner.rule_id == "B"
    assert result.dominance_trace[-1][0] == "A"


def test_duplicate_rule_id_is_parse_error():
    dup = SYNTH.replace("rule B", "rule A")
    with pytest.raises(ParseError) as exc:
        parse_ruleset(dup)
    assert "duplicate" in str(exc.value) and exc.value.line > 0


def test_missing_default_is_completeness_error():
    src = default_rules_source()
    head, _, tail = src.partition("rule S5_DEFAULT")
    with pytest.raises(CompletenessError) as exc:
        parse_ruleset(head)
    w = exc.value.witness
    assert not match_rules(parse_ruleset(head, check_completeness=False), w)


@pytest.mark.parametrize(
    "mutation, needle",
    [
        (lambda s: s.replace("priority 1\n", "priority 5\n", 1), "priority <= 4"),
        (lambda s: s.replace("outcome Low", "outcome chair", 1), "concrete risk tier"),
        (lambda s: s.replace("priority 10\n  path soft", "priority 9\n  path soft", 1), "priority 10"),
        (lambda s: s.replace("exception_of R2_P53", "exception_of R9"), "unknown rule"),
        (lambda s: s.replace("overrides R5_ADV, R6_HISTO, R7_IVB", "overrides R5_ADV, NOPE", 1), "unknown rule"),
        (lambda s: s.replace("when subtype == POLEmut", "when subtype == POLE", 1), "POLE"),
        (lambda s: s.replace("  sources esmo2022#c05\n", "", 1), "sources"),
        (lambda s: s.replace("end\n\nrule S5_DEFAULT", "\nrule S5_DEFAULT"), "missing 'end'"),
        (lambda s: s.replace("path soft", "path fuzzy", 1), "hard or soft"),
    ],
)
def test_parse_errors(mutation, needle):
    with pytest.raises(ParseError) as exc:
        parse_ruleset(mutation(default_rules_source()))
    assert needle in str(exc.value)


def test_exception_must_share_locus():
    src = default_rules_source().replace(
        "when subtype == p53abn and stage == IA and mi == None", "when stage == IA and mi == None"
    )
    with pytest.raises(ParseError, match="locus"):
        parse_ruleset(src)


def test_empty_source():
    with pytest.raises(ParseError):
        parse_ruleset("   \n")


def _engine_label(rs, ev):
    matched = match_rules(rs, ev)
    hard = [r for r in matched if r.is_hard]
    if hard:
        return resolve_priority(hard).winner.outcome
    return map_table2(ev, matched)[0]


def test_grid_matches_table_oracle(rs):
    t0 = time.perf_counter()
    mismatches = []
    for ev in evidence_grid():
        got = _engine_label(rs, ev)
        want = table1(ev.subtype, ev.stage.stage, ev.histology, ev.grade, ev.myometrial_invasion, ev.lvsi)
        if got is not want:
            mismatches.append((ev, got, want))
    assert not mismatches, mismatches[:3]
    assert time.perf_counter() - t0 < 5.0


@given(evidence)
def test_hard_dominance(ev):
    matched = match_rules(_RS, ev)
    assert matched, "completeness"
    winner = resolve_priority(matched).winner
    if any(r.is_hard for r in matched):
        assert winner.path is RulePath.HARD


@given(evidence)
def test_pole_supremacy(ev):
    ev = ev.replace(subtype=M.POLEMUT)
    w = resolve_priority(match_rules(_RS, ev)).winner
    assert w.rule_id == "R1_POLE" and w.outcome is RiskTier.LOW


@given(evidence)
def test_p53_supremacy_modulo_exception(ev):
    ev = ev.replace(subtype=M.P53ABN)
    w = resolve_priority(match_rules(_RS, ev)).winner
    if ev.stage.stage is S.IA and ev.myometrial_invasion is MI.NONE:
        assert w.outcome is RiskTier.HIGH_INTERMEDIATE
    else:
        assert w.outcome is RiskTier.HIGH


@given(evidence)
def test_matching_is_deterministic(ev):
    a = resolve_priority(match_rules(_RS, ev))
    b = resolve_priority(match_rules(_RS, ev))
    assert a == b


@given(evidence)
def test_fail_closed_on_unknown_fields(ev):
    """Blanking a field can only remove matches of rules that read it."""
    blank = ev.replace(grade=G.UNKNOWN, myometrial_invasion=MI.UNKNOWN, lvsi=Lvsi.UNKNOWN)
    before = set(_ids(match_rules(_RS, ev)))
    after = set(_ids(match_rules(_RS, blank)))
    for rid in after - before:
        pytest.fail(f"{rid} started matching on blanked evidence")
