"""Regenerate src/endogov/data/fixture_corpus.jsonl.

Two guideline documents (level 1) and three consensus documents (levels 3-5)
carrying 40 entity occurrences. Occurrences of one concept share a base
direction plus per-occurrence noise, so cross-document pairs of the same
concept land around cosine 0.8-0.93. One pair is a deliberate near-duplicate
(cosine > 0.95) to exercise deduplication.
"""

import json
import sys
from pathlib import Path

import numpy as np

DIM = 16
SEED = 2022

DOCS = [
    ("esmo2022", "guideline", 1, "ESMO 2022 endometrial cancer guideline"),
    ("esgo2021", "guideline", 1, "ESGO/ESTRO/ESP 2021 endometrial carcinoma guideline"),
    ("cn-molecular", "consensus", 3, "Consensus on molecular classification workflow"),
    ("cn-fertility", "consensus", 4, "Consensus on fertility-sparing management"),
    ("cn-regional", "consensus", 5, "Regional practice adaptation statement"),
]

CHUNKS = [
    ("esmo2022#c01", "esmo2022", "Risk group definitions integrating molecular classification.", 640),
    ("esmo2022#c02", "esmo2022", "POLE-mutated and p53-abnormal carcinoma risk assignment.", 910),
    ("esmo2022#c03", "esmo2022", "Stage IA p53abn without invasion; MMRd stage II and above.", 780),
    ("esmo2022#c04", "esmo2022", "Advanced stage and non-endometrioid histology.", 1020),
    ("esmo2022#c05", "esmo2022", "NSMP low and intermediate risk criteria.", 860),
    ("esmo2022#c06", "esmo2022", "MMRd early stage with LVSI or deep invasion.", 700),
    ("esgo2021#c01", "esgo2021", "Molecular classifier precedence.", 1100),
    ("esgo2021#c02", "esgo2021", "Adjuvant treatment by molecular group.", 1190),
    ("esgo2021#c03", "esgo2021", "Histological type, grade and LVSI in risk grouping.", 990),
    ("cn-molecular#c01", "cn-molecular", "Testing algorithm for POLE, MMR and p53.", 1150),
    ("cn-molecular#c02", "cn-molecular", "Multiple classifier cases.", 540),
    ("cn-fertility#c01", "cn-fertility", "Conservative management in grade 1 stage IA.", 880),
    ("cn-regional#c01", "cn-regional", "Local adjuvant practice.", 430),
]

CONCEPTS = {
    "POLEmut": "MolecularMarker",
    "MMRd": "MolecularMarker",
    "p53abn": "MolecularMarker",
    "NSMP": "MolecularMarker",
    "Serous": "HistologicalType",
    "ClearCell": "HistologicalType",
    "Endometrioid": "HistologicalType",
    "Undifferentiated": "HistologicalType",
    "IA": "StagingConcept",
    "IB": "StagingConcept",
    "III": "StagingConcept",
    "IVB": "StagingConcept",
    "G3": "ClinicalFeature",
    "lymphovascular space invasion": "ClinicalFeature",
    "vaginal brachytherapy": "Procedure",
    "chemoradiotherapy": "Procedure",
    "sentinel lymph node biopsy": "Procedure",
    "pembrolizumab": "Medication",
    "carboplatin paclitaxel": "Medication",
    "high risk group": "RiskConcept",
    "low risk group": "RiskConcept",
}

# (chunk, concept) occurrences; 40 in total
OCCURRENCES = [
    ("esmo2022#c01", "high risk group"),
    ("esmo2022#c01", "low risk group"),
    ("esmo2022#c02", "POLEmut"),
    ("esmo2022#c02", "p53abn"),
    ("esmo2022#c03", "IA"),
    ("esmo2022#c03", "MMRd"),
    ("esmo2022#c04", "III"),
    ("esmo2022#c04", "IVB"),
    ("esmo2022#c04", "Serous"),
    ("esmo2022#c04", "ClearCell"),
    ("esmo2022#c05", "NSMP"),
    ("esmo2022#c05", "Endometrioid"),
    ("esmo2022#c05", "IB"),
    ("esmo2022#c06", "lymphovascular space invasion"),
    ("esmo2022#c06", "vaginal brachytherapy"),
    ("esgo2021#c01", "POLEmut"),
    ("esgo2021#c01", "MMRd"),
    ("esgo2021#c02", "p53abn"),
    ("esgo2021#c02", "chemoradiotherapy"),
    ("esgo2021#c02", "carboplatin paclitaxel"),
    ("esgo2021#c03", "Serous"),
    ("esgo2021#c03", "G3"),
    ("esgo2021#c03", "Undifferentiated"),
    ("esgo2021#c03", "lymphovascular space invasion"),
    ("cn-molecular#c01", "POLEmut"),
    ("cn-molecular#c01", "p53abn"),
    ("cn-molecular#c01", "NSMP"),
    ("cn-molecular#c02", "MMRd"),
    ("cn-molecular#c02", "pembrolizumab"),
    ("cn-molecular#c02", "high risk group"),
    ("cn-fertility#c01", "IA"),
    ("cn-fertility#c01", "Endometrioid"),
    ("cn-fertility#c01", "G3"),
    ("cn-fertility#c01", "low risk group"),
    ("cn-regional#c01", "vaginal brachytherapy"),
    ("cn-regional#c01", "chemoradiotherapy"),
    ("cn-regional#c01", "sentinel lymph node biopsy"),
    ("cn-regional#c01", "III"),
    ("esmo2022#c05", "sentinel lymph node biopsy"),
]
NEAR_DUPLICATE = ("esgo2021#c02", "p53abn", "TP53 abnormal")


def slug(label: str) -> str:
    return label.lower().replace(" ", "-")


def build(rng: np.random.Generator) -> list[dict]:
    bases = {}
    for label in CONCEPTS:
        v = rng.standard_normal(DIM)
        bases[label] = v / np.linalg.norm(v)
    records = [
        {"kind": "doc", "doc_id": d, "tier": t, "evidence_level": lvl, "title": title}
        for d, t, lvl, title in DOCS
    ]
    records += [
        {"kind": "chunk", "chunk_id": c, "doc_id": d, "text": text, "token_count": tok}
        for c, d, text, tok in CHUNKS
    ]
    for chunk, label in OCCURRENCES:
        noise = rng.standard_normal(DIM) * 0.10
        emb = bases[label] + noise
        records.append(
            {
                "kind": "entity",
                "entity_id": f"{chunk.split('#')[0]}:{slug(label)}",
                "label": label,
                "semantic_type": CONCEPTS[label],
                "chunk_id": chunk,
                "embedding": [round(float(x), 6) for x in emb],
            }
        )
    chunk, concept, label = NEAR_DUPLICATE
    original = next(r for r in records if r.get("entity_id") == f"{chunk.split('#')[0]}:{slug(concept)}")
    emb = np.asarray(original["embedding"]) + rng.standard_normal(DIM) * 0.01
    records.append(
        {
            "kind": "entity",
            "entity_id": f"{chunk.split('#')[0]}:{slug(label)}",
            "label": label,
            "semantic_type": CONCEPTS[concept],
            "chunk_id": chunk,
            "embedding": [round(float(x), 6) for x in emb],
        }
    )
    return records


def main(out: Path) -> None:
    records = build(np.random.default_rng(SEED))
    n_entities = sum(r["kind"] == "entity" for r in records)
    assert n_entities == 40, n_entities
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    print(f"wrote {len(records)} records ({n_entities} entities) to {out}")


if __name__ == "__main__":
    default = Path(__file__).resolve().parents[1] / "src" / "endogov" / "data" / "fixture_corpus.jsonl"
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else default)
