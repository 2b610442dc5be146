import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from endogov import perception
from endogov.cohort import CohortConfig, generate_cohort
from endogov.domain import (
    BiomarkerPanel,
    CaseRecord,
    DetectionSource,
    Grade,
    Histology,
    MmrStatus,
    MolecularSubtype,
    P53Status,
    PoleStatus,
)
from endogov.perception import (
    MOLECULAR_CONCEPTS,
    PATHOLOGY_CONCEPTS,
    DegenerateCentroid,
    EmbeddingStore,
    EmptyClass,
    Libraries,
    LibrarySource,
    PanelUnavailable,
    PrototypeLibrary,
    ZeroVector,
    build_centroids,
    generate_reports,
    match_prototypes,
    subtype_from_biomarkers,
    subtype_from_embedding,
)
from endogov.pipeline import train_libraries

from oracles import cosine


def _eye(n, d=8):
    return [tuple(float(i == k) for k in range(d)) for i in range(n)]


def _mol_lib():
    return PrototypeLibrary(dict(zip(MOLECULAR_CONCEPTS, _eye(4))), "f", LibrarySource.MOLECULAR)


def _path_lib():
    return PrototypeLibrary(dict(zip(PATHOLOGY_CONCEPTS, _eye(6))), "f", LibrarySource.PATHOLOGY)


# --- centroids --------------------------------------------------------------


def test_one_sample_per_class_is_normalised():
    samples = [((3.0 * (i + 1),) + (0.0,) * i + (4.0 * (i + 1),) + (0.0,) * (4 - i), c)
               for i, c in enumerate(MOLECULAR_CONCEPTS)]
    lib = build_centroids(samples, range(4), LibrarySource.MOLECULAR)
    for (emb, c) in samples:
        norm = math.sqrt(sum(x * x for x in emb))
        assert lib.prototypes[c] == pytest.approx(tuple(x / norm for x in emb), abs=1e-15)


def test_antipodal_class_is_degenerate():
    samples = [(v, c) for v, c in zip(_eye(4), MOLECULAR_CONCEPTS)]
    samples.append((tuple(-x for x in samples[0][0]), MOLECULAR_CONCEPTS[0]))
    with pytest.raises(DegenerateCentroid) as exc:
        build_centroids(samples, range(5), LibrarySource.MOLECULAR)
    assert isinstance(exc.value, EmptyClass)
    assert exc.value.concept == MOLECULAR_CONCEPTS[0]


def test_missing_class_in_fold():
    samples = [(v, c) for v, c in zip(_eye(4), MOLECULAR_CONCEPTS)]
    with pytest.raises(EmptyClass) as exc:
        build_centroids(samples, [0, 1, 2], LibrarySource.MOLECULAR)
    assert exc.value.concept == MOLECULAR_CONCEPTS[3]


def _fixture(n=50, seed=5):
    rng = np.random.default_rng(seed)
    labels = [PATHOLOGY_CONCEPTS[i % 6] for i in range(n)]
    return [(tuple(rng.standard_normal(8) + 2 * np.eye(8)[PATHOLOGY_CONCEPTS.index(l)]), l) for l in labels]


def test_centroids_match_mean_then_normalise():
    samples = _fixture()
    fold = [i for i in range(len(samples)) if i % 5 != 0]
    lib = build_centroids(samples, fold, LibrarySource.PATHOLOGY)
    for c in PATHOLOGY_CONCEPTS:
        vs = np.array([samples[i][0] for i in fold if samples[i][1] == c])
        mean = vs.mean(axis=0)
        assert lib.prototypes[c] == pytest.approx(tuple(mean / np.linalg.norm(mean)), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(50))))
def test_heldout_and_order_never_leak(perm):
    samples = _fixture()
    train = [i for i in range(50) if i % 5 != 0]
    ref = build_centroids(samples, train, LibrarySource.PATHOLOGY).digest()
    # scramble the held-out samples and the order of the training list
    scrambled = list(samples)
    held = [i for i in range(50) if i % 5 == 0]
    for i, j in zip(held, reversed(held)):
        scrambled[i] = (tuple(-x for x in samples[j][0]), samples[j][1])
    order = [i for i in perm if i % 5 != 0]
    assert build_centroids(scrambled, order, LibrarySource.PATHOLOGY).digest() == ref


def test_library_invariants():
    with pytest.raises(ValueError):
        PrototypeLibrary({"POLEmut": (1.0, 0.0)}, "f", LibrarySource.MOLECULAR)
    bad = dict(zip(MOLECULAR_CONCEPTS, _eye(4)))
    bad["NSMP"] = (2.0,) + (0.0,) * 7
    with pytest.raises(ValueError):
        PrototypeLibrary(bad, "f", LibrarySource.MOLECULAR)


# --- matching ---------------------------------------------------------------


def test_match_exact_prototype():
    lib = _path_lib()
    hits = match_prototypes(lib.prototypes["Serous"], lib, k=3)
    assert hits[0].concept == "Serous" and hits[0].score == 1.0


def test_match_orthogonal_orders_by_label():
    lib = _path_lib()
    z = (0.0,) * 6 + (1.0, 0.0)
    hits = match_prototypes(z, lib, k=6)
    assert [h.concept for h in hits] == list(PATHOLOGY_CONCEPTS)
    assert all(h.score == 0.0 for h in hits)


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=8, max_size=8).filter(lambda v: sum(x * x for x in v) > 1e-6),
       st.integers(1, 6))
def test_match_equals_exhaustive_oracle(z, k):
    rng = np.random.default_rng(3)
    protos = {}
    for c in PATHOLOGY_CONCEPTS:
        v = rng.standard_normal(8)
        protos[c] = tuple(v / np.linalg.norm(v))
    lib = PrototypeLibrary(protos, "r", LibrarySource.PATHOLOGY)
    expected = sorted(PATHOLOGY_CONCEPTS, key=lambda c: (-cosine(z, protos[c]), PATHOLOGY_CONCEPTS.index(c)))[:k]
    hits = match_prototypes(z, lib, k)
    assert [h.concept for h in hits] == expected
    for h in hits:
        assert h.score == pytest.approx(cosine(z, protos[h.concept]), abs=1e-12)


def test_match_errors():
    with pytest.raises(ZeroVector):
        match_prototypes((0.0,) * 8, _path_lib())
    with pytest.raises(ValueError):
        match_prototypes((1.0,) * 3, _path_lib())


# --- subtype calling --------------------------------------------------------


def _truth(pole, mmr, p53):
    if pole is PoleStatus.MUTATED:
        return MolecularSubtype.POLEMUT
    if mmr is MmrStatus.DEFICIENT:
        return MolecularSubtype.MMRD
    if p53 is P53Status.ABNORMAL:
        return MolecularSubtype.P53ABN
    return MolecularSubtype.NSMP


def test_biomarker_truth_table():
    n = 0
    for pole, mmr, p53 in itertools.product(PoleStatus, MmrStatus, P53Status):
        panel = BiomarkerPanel(pole, mmr, p53)
        if not panel.available:
            with pytest.raises(PanelUnavailable):
                subtype_from_biomarkers(panel)
            continue
        n += 1
        assert subtype_from_biomarkers(panel) == (_truth(pole, mmr, p53), DetectionSource.DNA_DIRECT, 1.0)
    assert n == 26


def test_multiple_classifier_resolves_to_pole():
    panel = BiomarkerPanel(PoleStatus.MUTATED, MmrStatus.DEFICIENT, P53Status.ABNORMAL)
    assert subtype_from_biomarkers(panel)[0] is MolecularSubtype.POLEMUT


def test_embedding_at_centroid():
    lib = _mol_lib()
    assert subtype_from_embedding(lib.prototypes["NSMP"], lib) == (
        MolecularSubtype.NSMP, DetectionSource.RNA_FALLBACK, 1.0)


def test_embedding_tie_breaks_by_label_order():
    lib = _mol_lib()
    z = tuple(a + b for a, b in zip(lib.prototypes["MMRd"], lib.prototypes["p53abn"]))
    subtype, source, conf = subtype_from_embedding(z, lib)
    assert subtype is MolecularSubtype.MMRD
    assert conf == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_embedding_requires_molecular_library():
    with pytest.raises(ValueError):
        subtype_from_embedding((1.0,) + (0.0,) * 7, _path_lib())


# --- report assembly --------------------------------------------------------


def _case(**kw):
    base = dict(case_id="X", pole="wildtype", mmr="proficient", p53="abnormal", rna_embedding_ref="rna/X",
                path_embedding_ref="path/X", stage="Stage IA", histology="Endometrioid", grade="G2",
                mi="None", lvsi="Negative")
    base.update(kw)
    return CaseRecord(**base)


class CountingStore:
    def __init__(self, vectors):
        self.vectors = vectors
        self.calls = []

    def __call__(self, key):
        self.calls.append(key)
        return self.vectors.get(key)


def _store():
    return CountingStore({"rna/X": _eye(4)[3], "path/X": _eye(6)[4]})


def test_dna_first_never_consults_embedding(monkeypatch):
    def boom(*a, **k):
        raise AssertionError("embedding path used")

    monkeypatch.setattr(perception, "subtype_from_embedding", boom)
    store = _store()
    _, r_mol, _, ev = generate_reports(_case(), Libraries(_path_lib(), _mol_lib()), store)
    assert r_mol.fields["detection_source"] is DetectionSource.DNA_DIRECT
    assert ev.subtype is MolecularSubtype.P53ABN and ev.subtype_confidence == 1.0
    assert not any(k.startswith("rna/") for k in store.calls)


def test_rna_fallback_when_panel_missing():
    store = _store()
    _, r_mol, _, ev = generate_reports(_case(pole=None, mmr=None, p53=None), Libraries(_path_lib(), _mol_lib()), store)
    assert ev.detection_source is DetectionSource.RNA_FALLBACK
    assert ev.subtype is MolecularSubtype.NSMP and ev.subtype_confidence == 1.0
    assert "rna/X" in store.calls


def test_no_route_leaves_subtype_unset():
    _, _, _, ev = generate_reports(_case(pole=None, mmr=None, p53=None, rna_embedding_ref=None),
                                   Libraries(_path_lib(), _mol_lib()), _store())
    assert ev.subtype is None and ev.detection_source is DetectionSource.UNKNOWN


def test_merged_grade_concept_uses_structured_grade():
    libs = Libraries(_path_lib(), _mol_lib())
    _, _, _, ev = generate_reports(_case(grade="G1"), libs, _store())
    assert (ev.histology, ev.grade) == (Histology.ENDOMETRIOID, Grade.G1)
    _, _, _, ev = generate_reports(_case(grade=None), libs, _store())
    assert ev.grade is Grade.UNKNOWN


def test_clinical_report_flags_and_bad_stage():
    libs = Libraries(_path_lib(), _mol_lib())
    _, _, r_cli, ev = generate_reports(_case(mi="Deep", stage="Stage IB", lvsi="Positive"), libs, _store())
    assert r_cli.fields["deep_mi"] and not r_cli.fields["no_mi"]
    assert r_cli.confidence == 0.9 and ev.stage.stage.value == "IB"
    _, _, r_cli, ev = generate_reports(_case(stage="Stage V"), libs, _store())
    assert ev.stage is None and "unrecognised" in r_cli.provenance


def test_generated_cases_roundtrip_to_ground_truth(rs):
    cohort = generate_cohort(CohortConfig(n_cases=250, random_seed=11), rs)
    libs = {f: train_libraries(cohort, f) for f in range(5)}
    for rec in cohort.records[:50]:
        _, _, _, ev = generate_reports(rec.case, libs[rec.fold], cohort.embeddings)
        for field in ("subtype", "stage", "histology", "grade", "myometrial_invasion", "lvsi", "detection_source"):
            assert getattr(ev, field) == getattr(rec.clean, field), (rec.case_id, field)


def test_embedding_store_roundtrip(tmp_path):
    store = EmbeddingStore({"b": (0.1, 0.2), "a": (1.0 / 3.0, -2.0)}, 2)
    store.write(tmp_path / "e.tsv")
    back = EmbeddingStore.read(tmp_path / "e.tsv")
    assert back.vectors == store.vectors and back.dim == 2
    (tmp_path / "bad.tsv").write_text("dim\t3\na\t1.0,2.0\n")
    with pytest.raises(ValueError):
        EmbeddingStore.read(tmp_path / "bad.tsv")
    (tmp_path / "nohdr.tsv").write_text("a\t1.0\n")
    with pytest.raises(ValueError):
        EmbeddingStore.read(tmp_path / "nohdr.tsv")


def test_injected_confusion_rate_is_recovered(rs):
    cohort = generate_cohort(CohortConfig(n_cases=5000, trigger_miss_rate=0.2, random_seed=21), rs)
    libs = {f: train_libraries(cohort, f) for f in range(5)}
    wrong = total = 0
    for rec in cohort:
        if rec.clean.subtype is MolecularSubtype.P53ABN and rec.clean.detection_source is DetectionSource.RNA_FALLBACK:
            total += 1
            ev = generate_reports(rec.case, libs[rec.fold], cohort.embeddings)[3]
            wrong += ev.subtype is MolecularSubtype.NSMP
    assert abs(wrong / total - 0.2) <= 3.29 * math.sqrt(0.2 * 0.8 / total), (wrong, total)
