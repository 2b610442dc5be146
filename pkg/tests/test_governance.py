import http.server
import io
import json
import threading
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

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
from endogov.governance import (
    AUDIT_FIELDS,
    AuditRecord,
    Decision,
    DecisionPath,
    DeterministicTable2Echo,
    ExternalAdapter,
    LinearScorer,
    ResolverFailure,
    Verdict,
    expected_decision,
    govern,
    make_resolver,
    map_table2,
    posthoc_wrap,
    read_audit,
    validate,
    write_audit,
)
from endogov.kg.graph import build_graph, load_corpus, query
from endogov.ruleset import load_ruleset, match_rules, resolve_priority

M, S, H, G, MI, L = MolecularSubtype, Stage, Histology, Grade, MyometrialInvasion, Lvsi
_RS = load_ruleset()
_GRAPH = build_graph(load_corpus(), _RS)


def _ev(subtype, stage, histology=H.ENDOMETRIOID, grade=G.G1, mi=MI.SUPERFICIAL, lvsi=L.NEGATIVE):
    return PatientEvidence(subtype, FigoStage(stage), histology, grade, mi, lvsi)


def _govern(ev, resolver=None, tau=0.6):
    return govern(ev, query(_GRAPH, _RS, ev, 25), _RS, resolver or DeterministicTable2Echo(), tau, case_id="c1")


class Spy:
    name = "spy"

    def __init__(self, answer=(RiskTier.INTERMEDIATE, 0.7, ("spy",))):
        self.answer = answer
        self.calls = 0

    def __call__(self, ev, packet, trace):
        self.calls += 1
        return self.answer


def _hard_winner(ev):
    hard = [r for r in match_rules(_RS, ev) if r.is_hard]
    return resolve_priority(hard).winner if hard else None


# --- govern examples --------------------------------------------------------


def test_pole_serous_stage3_is_hard_low():
    spy = Spy()
    d, audit = _govern(_ev(M.POLEMUT, S.III, H.SEROUS, G.G3, MI.DEEP), spy)
    assert (d.label, d.path, d.winning_rule, d.confidence) == (RiskTier.LOW, DecisionPath.HARD, "R1_POLE", 1.0)
    assert spy.calls == 0
    assert audit.validator_verdict == "Accepted" and audit.resolver == "not invoked"


def test_nsmp_ia_g2_table2_low_without_resolver():
    spy = Spy()
    d, _ = _govern(_ev(M.NSMP, S.IA, grade=G.G2), spy)
    assert (d.label, d.path, d.winning_rule, d.confidence) == (RiskTier.LOW, DecisionPath.SOFT_TABLE2, "S1_NSMP_LO", 0.75)
    assert spy.calls == 0


def test_default_only_invokes_resolver():
    ev = _ev(M.NSMP, S.II, H.MIXED, G.G1, MI.SUPERFICIAL)
    assert [r.rule_id for r in match_rules(_RS, ev)] == ["S5_DEFAULT"]
    spy = Spy()
    d, audit = _govern(ev, spy)
    assert spy.calls == 1 and d.path is DecisionPath.SOFT_CHAIR and d.label is RiskTier.INTERMEDIATE
    d, _ = _govern(ev, DeterministicTable2Echo())
    assert (d.label, d.confidence, d.winning_rule) == (RiskTier.INTERMEDIATE, 0.5, "S5_DEFAULT")


def test_tau_controls_resolver_invocation():
    ev = _ev(M.NSMP, S.IA, grade=G.G2)
    spy = Spy((RiskTier.LOW, 0.9, ()))
    _govern(ev, spy, tau=0.8)
    assert spy.calls == 1


# --- map_table2 -------------------------------------------------------------


def _map(ev):
    matched = match_rules(_RS, ev)
    return map_table2(ev, matched)


def test_map_table2_examples():
    assert _map(_ev(M.NSMP, S.IB, mi=MI.DEEP)) == (RiskTier.INTERMEDIATE, 0.75, "S2_NSMP_INT")
    assert _map(_ev(M.MMRD, S.IA, lvsi=L.POSITIVE)) == (RiskTier.HIGH_INTERMEDIATE, 0.75, "S4_MMRd_HI")
    assert _map(_ev(M.NSMP, S.II, H.MIXED)) == (RiskTier.INTERMEDIATE, 0.5, "S5_DEFAULT")


def test_map_table2_refuses_hard_matches():
    ev = _ev(M.POLEMUT, S.IA)
    with pytest.raises(ValueError):
        map_table2(ev, match_rules(_RS, ev))


# --- validator --------------------------------------------------------------


def test_validator_corrects_high_on_pole():
    ev = _ev(M.POLEMUT, S.IA)
    proposal = Decision(RiskTier.HIGH, 0.9, DecisionPath.SOFT_CHAIR, "S5_DEFAULT")
    final, report = validate(proposal, ev, _RS)
    assert report.verdict is Verdict.CORRECTED and final.label is RiskTier.LOW
    assert "R1_POLE" in report.reason and report.expected_label is RiskTier.LOW


def test_validator_accepts_expected():
    ev = _ev(M.NSMP, S.IB, mi=MI.DEEP)
    final, report = validate(expected_decision(ev, _RS), ev, _RS)
    assert report.verdict is Verdict.ACCEPTED and final.label is RiskTier.INTERMEDIATE


def test_chair_tolerance_is_one_tier():
    ev = _ev(M.NSMP, S.IA, grade=G.G2)  # S1 -> Low
    ok = Decision(RiskTier.INTERMEDIATE, 0.7, DecisionPath.SOFT_CHAIR, "S1_NSMP_LO")
    far = Decision(RiskTier.HIGH_INTERMEDIATE, 0.7, DecisionPath.SOFT_CHAIR, "S1_NSMP_LO")
    assert validate(ok, ev, _RS)[1].verdict is Verdict.ACCEPTED
    final, report = validate(far, ev, _RS)
    assert report.verdict is Verdict.CORRECTED and final.label is RiskTier.LOW


def test_chair_free_on_default_only():
    ev = _ev(M.NSMP, S.II, H.MIXED)
    d = Decision(RiskTier.HIGH, 0.55, DecisionPath.SOFT_CHAIR, "S5_DEFAULT")
    assert validate(d, ev, _RS)[1].verdict is Verdict.ACCEPTED


def test_schema_failure_rejected():
    ev = PatientEvidence(M.POLEMUT, None, H.ENDOMETRIOID, G.G1, MI.NONE, L.NEGATIVE)
    final, report = validate(Decision(RiskTier.HIGH, 0.9, DecisionPath.SOFT_CHAIR, "S5_DEFAULT"), ev, _RS)
    assert report.verdict is Verdict.REJECTED and "stage" in report.reason
    assert final.label is RiskTier.LOW


def test_inconsistent_evidence_rejected():
    ev = _ev(M.NSMP, S.IA, mi=MI.DEEP)
    final, report = validate(expected_decision(ev, _RS), ev, _RS)
    assert report.verdict is Verdict.REJECTED


def test_hard_decision_needs_unit_confidence():
    with pytest.raises(ValueError):
        Decision(RiskTier.LOW, 0.9, DecisionPath.HARD, "R1_POLE")
    with pytest.raises(TypeError):
        Decision("Low", 0.9, DecisionPath.SOFT_CHAIR, "S5_DEFAULT")


def test_validator_sound_on_grid():
    for ev in evidence_grid():
        w = _hard_winner(ev)
        for label in RiskTier:
            for path in (DecisionPath.SOFT_CHAIR, DecisionPath.SOFT_TABLE2):
                final, _ = validate(Decision(label, 0.5, path, "S5_DEFAULT"), ev, _RS)
                if w is not None:
                    assert final.label is w.outcome


# --- properties -------------------------------------------------------------

evidence = st.builds(
    lambda m, s, h, g, mi, l: PatientEvidence(m, FigoStage(s), h, g, mi, l),
    st.sampled_from(list(M)), st.sampled_from(list(S)), st.sampled_from(list(H)),
    st.sampled_from(list(G)), st.sampled_from(list(MI)), st.sampled_from(list(L)),
)
proposals = st.builds(
    lambda label, conf, path: Decision(label, 1.0 if path is DecisionPath.HARD else conf, path, "S5_DEFAULT"),
    st.sampled_from(list(RiskTier)), st.floats(0, 1), st.sampled_from(list(DecisionPath)),
)


@given(evidence, proposals)
def test_validate_is_idempotent(ev, proposal):
    once, r1 = validate(proposal, ev, _RS)
    twice, r2 = validate(once, ev, _RS)
    assert (r1.verdict, once.label) == (r2.verdict, twice.label)


@given(evidence, proposals)
def test_expected_label_ignores_proposal(ev, proposal):
    _, report = validate(proposal, ev, _RS)
    assert report.expected_label is expected_decision(ev, _RS).label


@settings(max_examples=200, deadline=None)
@given(evidence)
def test_hard_path_resolver_invariance(ev):
    if _hard_winner(ev) is None:
        return
    keys = {_govern(ev, r)[0].key() for r in (DeterministicTable2Echo(), LinearScorer(), ExternalAdapter(url=""))}
    assert len(keys) == 1


def test_pole_immunity_over_full_ranges():
    base = _ev(M.POLEMUT, S.IA)
    for stage in S:
        for h in H:
            for g in G:
                for mi in MI:
                    for lvsi in L:
                        ev = _ev(M.POLEMUT, stage, h, g, mi, lvsi)
                        assert _govern(ev, LinearScorer())[0].label is RiskTier.LOW
    assert _govern(base)[0].label is RiskTier.LOW


# --- audit ------------------------------------------------------------------


def test_audit_complete_and_roundtrips():
    records = []
    for i, ev in enumerate(evidence_grid()):
        if i % 37:
            continue
        _, audit = _govern(ev, LinearScorer())
        for f in AUDIT_FIELDS:
            v = getattr(audit, f)
            assert v is not None and v != "" and v != ()
        records.append(audit)
    buf = io.StringIO()
    write_audit(records, buf)
    assert read_audit(buf.getvalue().splitlines()) == records


def test_audit_record_invariants():
    _, audit = _govern(_ev(M.POLEMUT, S.IA))
    with pytest.raises(ValueError):
        replace(audit, validator_message="")
    with pytest.raises(ValueError):
        replace(audit, validator_verdict="Corrected")
    assert AuditRecord.from_dict(json.loads(audit.to_json())) == audit


def test_corrected_audit_changes_label():
    ev = _ev(M.NSMP, S.IA, grade=G.G2)
    _, audit = _govern(ev, Spy((RiskTier.HIGH, 0.55, ())), tau=0.8)
    assert audit.validator_verdict == "Corrected"
    assert (audit.pre_validation_label, audit.final_label) == ("High", "Low")


# --- post-hoc wrapper -------------------------------------------------------


def test_posthoc_examples():
    assert posthoc_wrap(RiskTier.HIGH, _ev(M.POLEMUT, S.III, H.SEROUS, G.G3), _RS) is RiskTier.LOW
    assert posthoc_wrap(RiskTier.INTERMEDIATE, _ev(M.NSMP, S.II, H.MIXED), _RS) is RiskTier.INTERMEDIATE


def test_posthoc_returns_bare_label():
    out = posthoc_wrap(RiskTier.HIGH, _ev(M.POLEMUT, S.IA), _RS)
    assert isinstance(out, RiskTier)
    assert not hasattr(out, "trace") and not isinstance(out, tuple)
    _, audit = _govern(_ev(M.POLEMUT, S.IA))
    assert isinstance(audit, AuditRecord)


def test_posthoc_matches_govern_on_hard_grid():
    n = 0
    for ev in evidence_grid():
        if _hard_winner(ev) is None:
            continue
        n += 1
        assert posthoc_wrap(RiskTier.INTERMEDIATE, ev, _RS) is _govern(ev)[0].label
    assert n > 0


# --- resolvers --------------------------------------------------------------


class _Stub(http.server.BaseHTTPRequestHandler):
    reply = b""
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append(body)
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(type(self).reply)

    def log_message(self, *a):
        pass


@pytest.fixture()
def stub():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Stub.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}/", _Stub
    server.shutdown()
    server.server_close()


def test_external_adapter_roundtrip(stub):
    url, handler = stub
    handler.reply = json.dumps({"label": "High", "confidence": 0.65, "reasoning": ["stub"]}).encode()
    ev = _ev(M.NSMP, S.II, H.MIXED)
    d, audit = _govern(ev, ExternalAdapter(url=url))
    assert d.path is DecisionPath.SOFT_CHAIR and d.label is RiskTier.HIGH and d.confidence == 0.65
    assert audit.resolver == "external invoked"
    sent = handler.seen[0]
    assert set(sent) == {"evidence", "packet", "trace"} and sent["evidence"]["subtype"] == "NSMP"


def test_external_adapter_env_url(stub, monkeypatch):
    url, handler = stub
    handler.reply = json.dumps({"label": "Low", "confidence": 0.55}).encode()
    monkeypatch.setenv("ENDOGOV_RESOLVER_URL", url)
    assert make_resolver("external")(_ev(M.NSMP, S.II, H.MIXED), query(_GRAPH, _RS, _ev(M.NSMP, S.II, H.MIXED), 25), ())[0] is RiskTier.LOW


@pytest.mark.parametrize("reply", [b"not json", b'{"label": "Huge", "confidence": 0.5}', b'{"confidence": 0.5}'])
def test_external_malformed_reply_falls_back(stub, reply):
    url, handler = stub
    handler.reply = reply
    d, audit = _govern(_ev(M.NSMP, S.II, H.MIXED), ExternalAdapter(url=url))
    assert d.path is DecisionPath.SOFT_TABLE2 and (d.label, d.confidence) == (RiskTier.INTERMEDIATE, 0.5)
    assert "failed" in audit.resolver


def test_unconfigured_adapter_falls_back(monkeypatch):
    monkeypatch.delenv("ENDOGOV_RESOLVER_URL", raising=False)
    with pytest.raises(ResolverFailure):
        ExternalAdapter()(None, None, ())
    d, audit = _govern(_ev(M.NSMP, S.II, H.MIXED), ExternalAdapter())
    assert d.winning_rule == "S5_DEFAULT" and audit.resolver.startswith("external failed")


@pytest.mark.parametrize("answer", [
    ("High", 0.7, ()),
    (RiskTier.HIGH, 1.5, ()),
    (RiskTier.HIGH, True, ()),
    (RiskTier.HIGH,),
    None,
])
def test_malformed_resolver_output_falls_back(answer):
    d, audit = _govern(_ev(M.NSMP, S.II, H.MIXED), Spy(answer))
    assert d.path is DecisionPath.SOFT_TABLE2 and "failed" in audit.resolver


def test_raising_resolver_falls_back():
    class Boom:
        name = "boom"

        def __call__(self, *a):
            raise KeyError("x")

    d, audit = _govern(_ev(M.NSMP, S.II, H.MIXED), Boom())
    assert d.label is RiskTier.INTERMEDIATE and "KeyError" in audit.resolver


def test_resolvers_do_not_mutate_inputs():
    ev = _ev(M.NSMP, S.II, H.MIXED)
    packet = query(_GRAPH, _RS, ev, 25)
    before = (ev.to_dict(), packet.to_dict())
    for r in (DeterministicTable2Echo(), LinearScorer()):
        r(ev, packet, ())
    assert (ev.to_dict(), packet.to_dict()) == before


def test_linear_scorer_tiers():
    lin = LinearScorer()
    low = lin(_ev(M.NSMP, S.IA), None, ())
    high = lin(_ev(M.P53ABN, S.III, H.SEROUS, G.G3, MI.DEEP, L.POSITIVE), None, ())
    assert low[0] is RiskTier.LOW and high[0] is RiskTier.HIGH
    assert 0 < low[1] <= 1 and 0 < high[1] <= 1


def test_make_resolver():
    assert make_resolver("table2").name == "table2"
    with pytest.raises(ValueError):
        make_resolver("oracle")
