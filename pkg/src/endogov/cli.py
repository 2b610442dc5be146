"""Batch command line: ``endogov <command> [flags]``.

Every command writes its outputs into ``--out`` and finishes with a
``manifest.json`` that records the resolved inputs and a sha256 per output
file. ``endogov replay --manifest M --out D`` reruns the command into ``D``
and checks the new files against those digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .cohort import CohortConfig, adversarial_suite, generate_cohort, read_adversarial, read_cohort
from .domain import RISK_TIERS, CaseFormatError
from .governance import DEFAULT_TAU, RESOLVERS, make_resolver
from .kg.graph import DEFAULT_DELTA_R, DEFAULT_TOP_K, build_graph, load_corpus, load_graph
from .metrics import ReferralPolicy, confusion, metrics_report, referral_simulate, safety_decomposition
from .pipeline import evaluate_cohort, run_adversarial
from .ruleset import load_ruleset

MANIFEST = "manifest.json"
DEFAULT_THRESHOLDS = "0.5,0.75,1.0"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    tool_version: str = __version__
    ruleset_hash: str = ""
    graph_digest: str = ""
    cohort: dict = field(default_factory=dict)
    resolver: str = ""
    tau: float = DEFAULT_TAU
    topk: int = DEFAULT_TOP_K
    delta_r: float = DEFAULT_DELTA_R
    seed: int = 0
    outputs: dict = field(default_factory=dict)  # file name -> sha256

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


class Outputs:
    """Collects output files in memory and writes them atomically at the end."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def commit(self, manifest: RunManifest) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.files):
            data = self.files[name].encode("utf-8")
            manifest.outputs[name] = _sha(data)
            _atomic_write(self.dir / name, data)
        _atomic_write(self.dir / MANIFEST, manifest.to_json().encode("utf-8"))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------


def _existing(path, what: str):
    if path is not None and not Path(path).is_file():
        raise UsageError(f"{what} file not found: {path}")
    return path


def _load_rules(args):
    return load_ruleset(_existing(args.rules, "rules"))


def _check_delta(delta_r: float) -> float:
    if not 0.0 < delta_r <= 1.0:
        raise UsageError(f"--delta-r must lie in (0, 1], got {delta_r}")
    return delta_r


def _graph_for(args, rs):
    if getattr(args, "graph", None):
        g = load_graph(_existing(args.graph, "graph"))
        if g.ruleset_hash != rs.source_hash:
            raise UsageError("graph was built from a different rule set")
        return g
    corpus = load_corpus(_existing(args.corpus, "corpus"))
    return build_graph(corpus, rs, delta_r=_check_delta(args.delta_r))


def _check_tau_k(args):
    if not 0.0 <= args.tau <= 1.0:
        raise UsageError(f"--tau must lie in [0, 1], got {args.tau}")
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")


def _cohort_dir(args):
    if not args.cohort:
        raise UsageError("--cohort is required")
    if not Path(args.cohort).is_dir():
        raise UsageError(f"cohort directory not found: {args.cohort}")
    return read_cohort(args.cohort)


def _base_manifest(args, argv, rs) -> RunManifest:
    return RunManifest(
        command=args.command,
        argv=list(argv),
        ruleset_hash=rs.source_hash,
        delta_r=getattr(args, "delta_r", DEFAULT_DELTA_R),
        tau=getattr(args, "tau", DEFAULT_TAU),
        topk=getattr(args, "topk", DEFAULT_TOP_K),
        resolver=getattr(args, "resolver", ""),
        seed=getattr(args, "seed", 0),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_kg(args, argv) -> int:
    rs = _load_rules(args)
    _check_delta(args.delta_r)
    g = build_graph(load_corpus(_existing(args.corpus, "corpus")), rs, delta_r=args.delta_r)
    out = Outputs(args.out)
    out.add("graph.json", g.to_json())
    m = _base_manifest(args, argv, rs)
    m.graph_digest = g.digest()
    out.commit(m)
    print(f"graph digest {m.graph_digest}")
    print(f"entities={len(g.entities)} reference_edges={len(g.reference_edges)} merged={len(g.merged)}")
    return 0


def cmd_generate_cohort(args, argv) -> int:
    rs = _load_rules(args)
    cfg = CohortConfig(
        n_cases=args.n,
        trigger_miss_rate=args.miss_rate,
        panel_availability_rate=args.panel_rate,
        missing_field_rate=args.missing_rate,
        random_seed=args.seed,
    )
    cohort = generate_cohort(cfg, rs)
    out = Outputs(args.out)
    for name, body in cohort.files().items():
        out.add(name, body)
    m = _base_manifest(args, argv, rs)
    m.cohort = cfg.to_dict()
    out.commit(m)
    print(f"wrote {len(cohort)} cases to {args.out} (digest {cohort.digest()})")
    return 0


def _evaluate(args, rs):
    _check_tau_k(args)
    cohort = _cohort_dir(args)
    g = _graph_for(args, rs)
    outcomes = evaluate_cohort(cohort, g, rs, make_resolver(args.resolver), args.tau, args.topk)
    return cohort, g, outcomes


def cmd_evaluate(args, argv) -> int:
    rs = _load_rules(args)
    cohort, g, outcomes = _evaluate(args, rs)
    records = [o.record for o in outcomes]
    out = Outputs(args.out)
    report = metrics_report(records)
    out.add("metrics.txt", report)
    tiers = [t.value for t in RISK_TIERS]
    matrix = confusion(records)
    out.add(
        "confusion.tsv",
        "oracle\\predicted\t" + "\t".join(tiers) + "\n"
        + "".join(t + "\t" + "\t".join(map(str, row)) + "\n" for t, row in zip(tiers, matrix)),
    )
    sd = safety_decomposition(records)
    out.add("safety.json", json.dumps(sd.to_dict(), indent=2, sort_keys=True) + "\n")
    out.add("records.jsonl", "".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in records))
    out.add("audit.jsonl", "".join(o.audit.to_json() + "\n" for o in outcomes))
    failures = sum("failed" in o.audit.resolver for o in outcomes)
    m = _base_manifest(args, argv, rs)
    m.graph_digest = g.digest()
    m.cohort = cohort.config.to_dict()
    m.seed = cohort.config.random_seed
    out.commit(m)
    print(report, end="")
    print(f"exposed-trigger denominator={sd.n_detected} adjudicated trigger denominator={sd.n_trigger}")
    if failures:
        print(f"resolver failures: {failures} grey-zone cases fell back to the Table-2 proposal")
    return 0


def cmd_stress(args, argv) -> int:
    rs = _load_rules(args)
    _check_tau_k(args)
    g = _graph_for(args, rs)
    if args.cases:
        with open(_existing(args.cases, "adversarial cases"), encoding="utf-8") as fh:
            cases = read_adversarial(fh)
    else:
        cases = adversarial_suite()
    rows = run_adversarial(cases, g, rs, make_resolver(args.resolver), args.tau, args.topk)
    header = "case_id\tcategory\tproposal\tfinal\tverdict\tmessage\n"
    body = "".join(
        f"{r.case_id}\t{r.category}\t{r.proposal_label}\t{r.final_label}\t{r.verdict}\t{r.message}\n" for r in rows
    )
    n_hit = sum(r.intercepted for r in rows)
    n_rejected = sum(r.verdict == "Rejected" for r in rows)
    summary = f"intercepted={n_hit}/{len(rows)}\nrejected={n_rejected}\ninterception_rate={n_hit / len(rows):.6f}\n"
    out = Outputs(args.out)
    out.add("stress_report.tsv", header + body)
    out.add("stress_summary.txt", summary)
    out.add("adversarial_cases.jsonl", "".join(json.dumps(c.to_dict(), separators=(",", ":")) + "\n" for c in cases))
    m = _base_manifest(args, argv, rs)
    m.graph_digest = g.digest()
    out.commit(m)
    print(summary, end="")
    return 0


def _parse_thresholds(text: str) -> list:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad --thresholds value: {text!r}") from None
    if not values or any(not 0.0 <= v <= 1.0 for v in values):
        raise UsageError("--thresholds must be comma-separated values in [0, 1]")
    return sorted(values)


def cmd_referral(args, argv) -> int:
    rs = _load_rules(args)
    thresholds = _parse_thresholds(args.thresholds)
    cohort, g, outcomes = _evaluate(args, rs)
    records = [o.record for o in outcomes]
    policies = [ReferralPolicy.dna_direct_only()] + [ReferralPolicy.confidence_at_least(t) for t in thresholds]
    rows = ["policy\tcoverage\taccuracy_on_released\treleased\treferred\treferred_errors\n"]
    for p in policies:
        o = referral_simulate(records, p)
        acc = "n/a" if o.accuracy_on_released is None else f"{o.accuracy_on_released:.6f}"
        rows.append(f"{p.describe()}\t{o.coverage:.6f}\t{acc}\t{o.n_released}\t{o.n_referred}\t{o.referred_error_count}\n")
    out = Outputs(args.out)
    out.add("referral.tsv", "".join(rows))
    m = _base_manifest(args, argv, rs)
    m.graph_digest = g.digest()
    m.cohort = cohort.config.to_dict()
    m.seed = cohort.config.random_seed
    out.commit(m)
    print("".join(rows), end="")
    return 0


def _replace_out(argv: list, new_out: str) -> list:
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = new_out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={new_out}"
            return argv
    return argv + ["--out", new_out]


def cmd_replay(args, argv) -> int:
    manifest = RunManifest.read(_existing(args.manifest, "manifest"))
    if manifest.command == "replay":
        raise UsageError("cannot replay a replay manifest")
    rerun = _replace_out(manifest.argv, args.out)
    status = main(rerun)
    if status != 0:
        return status
    fresh = RunManifest.read(Path(args.out) / MANIFEST)
    mismatched = sorted(
        name for name in set(manifest.outputs) | set(fresh.outputs) if manifest.outputs.get(name) != fresh.outputs.get(name)
    )
    if mismatched:
        print(f"replay differs in: {', '.join(mismatched)}", file=sys.stderr)
        return 1
    print(f"replay identical: {len(fresh.outputs)} files match")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endogov", description="Guideline-governed risk stratification pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, graph=True, gov=True):
        sp.add_argument("--rules", help="rule DSL file (default: bundled rule set)")
        sp.add_argument("--out", required=True, help="output directory")
        if graph:
            sp.add_argument("--corpus", help="guideline corpus JSONL (default: bundled fixture)")
            sp.add_argument("--delta-r", type=float, default=DEFAULT_DELTA_R, help="REFERENCE edge threshold")
        if gov:
            sp.add_argument("--graph", help="prebuilt graph.json (default: build from --corpus)")
            sp.add_argument("--resolver", choices=sorted(RESOLVERS), default="table2")
            sp.add_argument("--tau", type=float, default=DEFAULT_TAU, help="resolver confidence threshold")
            sp.add_argument("--topk", type=int, default=DEFAULT_TOP_K, help="context entities per case")

    sp = sub.add_parser("build-kg", help="build and persist the guideline graph")
    common(sp, gov=False)

    sp = sub.add_parser("generate-cohort", help="write a synthetic cohort directory")
    common(sp, graph=False, gov=False)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=541, help="number of cases")
    sp.add_argument("--miss-rate", type=float, default=0.0, help="subtype confusion rate for RNA-fallback cases")
    sp.add_argument("--panel-rate", type=float, default=365 / 541, help="biomarker panel availability")
    sp.add_argument("--missing-rate", type=float, default=0.0, help="per-field drop rate for grade, MI and LVSI")

    sp = sub.add_parser("evaluate", help="run the governed pipeline over a cohort")
    common(sp)
    sp.add_argument("--cohort", required=True, help="cohort directory from generate-cohort")

    sp = sub.add_parser("stress", help="run the adversarial validator suite")
    common(sp)
    sp.add_argument("--cases", help="adversarial cases JSONL (default: built-in 26-case suite)")

    sp = sub.add_parser("referral", help="coverage/accuracy under referral policies")
    common(sp)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--thresholds", default=DEFAULT_THRESHOLDS, help="comma-separated confidence thresholds")

    sp = sub.add_parser("replay", help="rerun a command from its manifest and compare outputs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    return p


COMMANDS = {
    "build-kg": cmd_build_kg,
    "generate-cohort": cmd_generate_cohort,
    "evaluate": cmd_evaluate,
    "stress": cmd_stress,
    "referral": cmd_referral,
    "replay": cmd_replay,
}


PATH_FLAGS = ("--rules", "--corpus", "--cohort", "--graph", "--cases", "--manifest")


def _absolute_inputs(argv: list) -> list:
    """Resolve input paths so a manifest replays from any working directory."""
    out = list(argv)
    for i, a in enumerate(out):
        if a in PATH_FLAGS and i + 1 < len(out):
            out[i + 1] = str(Path(out[i + 1]).resolve())
        else:
            flag, eq, value = a.partition("=")
            if eq and flag in PATH_FLAGS:
                out[i] = f"{flag}={Path(value).resolve()}"
    return out


def main(argv=None) -> int:
    argv = _absolute_inputs(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (ValueError, CaseFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
