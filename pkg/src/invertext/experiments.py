"""Config-driven experiment runner, result persistence and the audit check."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import STRENGTHS, Corpus, load_jsonl_corpus
from .defense import ABSMAX, NOISE, NOISE_GRID, NONE, ZEROPOINT, DefenseConfig, apply_defense
from .encoder import load_encoder
from .inversion import BaseModel, CorrectorModel, InversionConfig, invert
from .metrics import MetricsReport, bleu, corpus_report, cosine_sim, token_f1
from .retrieval import build_index, load_qrels_tsv, make_dropout_queries, per_query_ndcg
from .text import CHAR, WORD, canonical, tokenize
from .training import load_checkpoint

log = logging.getLogger(__name__)

RESULTS_SCHEMA_VERSION = 1
IN_DOMAIN, OOD, LENGTH, NOISE_DEFENSE, QUANT_DEFENSE, PASSWORD, PARAM_SWEEP = (
    "in_domain", "ood", "length_sensitivity", "noise_defense", "quant_defense", "password", "param_sweep",
)
KINDS = (IN_DOMAIN, OOD, LENGTH, NOISE_DEFENSE, QUANT_DEFENSE, PASSWORD, PARAM_SWEEP)
SWEEP_STEPS = (1, 2, 4, 8, 16, 32, 64, 128)
SWEEP_BEAMS = (1, 2, 4, 8, 16, 32)
LENGTH_BUCKETS = (4, 8, 12, 16, 24, 32)
MIN_BUCKET = 5
# excluded from determinism hashes
TIMING_FIELDS = frozenset({"wall_time_s", "mean_runtime_s"})
# files whose content depends on timing beyond the excluded columns
TIMING_DERIVED_FILES = frozenset({"tables/pareto.csv"})


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    encoder: str | None = None
    base: str | None = None
    corrector: str | None = None
    corpus: str | None = None
    eval_corpora: dict[str, str] = field(default_factory=dict)
    token_mode: str = WORD
    inversion: InversionConfig = field(default_factory=InversionConfig)
    cells: list[tuple[int, int]] | None = None
    noise_scales: list[float] = field(default_factory=lambda: list(NOISE_GRID))
    sweep_steps: list[int] = field(default_factory=lambda: list(SWEEP_STEPS))
    sweep_beams: list[int] = field(default_factory=lambda: list(SWEEP_BEAMS))
    length_buckets: list[int] = field(default_factory=lambda: list(LENGTH_BUCKETS))
    queries: str | None = None
    qrels: str | None = None
    n_queries: int = 200
    retrieval_k: int = 10
    sample_size: int | None = None
    seed: int = 0
    output_dir: str = "results"

    def __post_init__(self):
        if isinstance(self.inversion, dict):
            self.inversion = InversionConfig.from_dict(self.inversion)
        if self.cells is not None:
            self.cells = [tuple(int(v) for v in c) for c in self.cells]
        if self.sample_size is None:
            self.sample_size = 1000 if self.kind == IN_DOMAIN else 200
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.token_mode not in (WORD, CHAR):
            raise ConfigError(f"unknown token mode {self.token_mode!r}")
        missing = [k for k in ("encoder", "base", "corrector") if not getattr(self, k)]
        if self.kind in (OOD, PASSWORD):
            if not self.eval_corpora:
                missing.append("eval_corpora")
        elif not self.corpus:
            missing.append("corpus")
        if self.kind == OOD and not self.corpus:
            missing.append("corpus")
        if missing:
            raise ConfigError(f"{self.kind}: missing required fields {missing}")
        if self.kind == PASSWORD and set(self.eval_corpora) - set(STRENGTHS):
            raise ConfigError(f"password eval_corpora keys must be among {STRENGTHS}")
        if self.sample_size < 1 or self.n_queries < 1 or self.retrieval_k < 1:
            raise ConfigError("sample_size, n_queries and retrieval_k must be >= 1")
        if any(v < 0 for v in self.noise_scales):
            raise ConfigError("noise_scales must be >= 0")
        if sorted(set(self.length_buckets)) != list(self.length_buckets):
            raise ConfigError("length_buckets must be strictly increasing")
        if (self.queries is None) != (self.qrels is None):
            raise ConfigError("queries and qrels come together")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        if "kind" not in d:
            raise ConfigError("config needs a 'kind'")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["inversion"] = self.inversion.to_dict()
        if self.cells is not None:
            d["cells"] = [list(c) for c in self.cells]
        return d


@dataclass
class ResultRecord:
    cell: str
    sample_id: str
    target_text: str
    reconstructed_text: str
    cosine: float
    bleu: float
    token_f1: float
    exact: bool
    steps: int
    beam_width: int
    token_decode: str
    defense: dict
    steps_run: int
    encoder_calls: int
    wall_time_s: float
    seed: int
    # best-of-beam cosine after each correction step, base hypothesis first
    trace_cosines: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RetrievalRecord:
    cell: str
    query_id: str
    ndcg: float


@dataclass(frozen=True)
class ParetoPoint:
    mean_runtime_s: float
    mean_bleu: float
    steps: int
    beam_width: int

    def __post_init__(self):
        if not (math.isfinite(self.mean_runtime_s) and math.isfinite(self.mean_bleu)):
            raise ValueError("pareto points must be finite")


@dataclass
class Resources:
    encoder: object
    base: BaseModel
    corrector: CorrectorModel
    corpus: Corpus | None = None
    eval_corpora: dict[str, Corpus] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[ResultRecord]
    retrieval: list[RetrievalRecord] = field(default_factory=list)
    failed_cells: dict[str, str] = field(default_factory=dict)

    def summary(self) -> tuple[dict, dict[str, list[dict]]]:
        return summarize(self.config, self.records, self.retrieval, self.failed_cells)


def load_resources(cfg: ExperimentConfig) -> Resources:
    """Load everything a run needs; fails before any inversion if a reference is missing."""
    for name in ("encoder", "base", "corrector"):
        if not Path(getattr(cfg, name)).exists():
            raise FileNotFoundError(f"{name} not found: {getattr(cfg, name)}")
    encoder = load_encoder(cfg.encoder)
    base = load_checkpoint(cfg.base)
    corrector = load_checkpoint(cfg.corrector, vocab=base.vocab)
    if not isinstance(base, BaseModel) or not isinstance(corrector, CorrectorModel):
        raise ValueError("base/corrector checkpoints have the wrong roles")
    corpus = load_jsonl_corpus(cfg.corpus, token_mode=cfg.token_mode) if cfg.corpus else None
    evals = {k: load_jsonl_corpus(p, token_mode=cfg.token_mode) for k, p in cfg.eval_corpora.items()}
    return Resources(encoder, base, corrector, corpus, evals)


# -- inversion over samples -------------------------------------------------

def sample_entries(corpus: Corpus, n: int, seed: int) -> list[tuple[str, str]]:
    if n >= len(corpus):
        return list(corpus.entries)
    keep = np.sort(np.random.default_rng(seed).choice(len(corpus), size=n, replace=False))
    return [corpus.entries[i] for i in keep]


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([master, *path]).generate_state(1)[0])


def invert_samples(res: Resources, entries: Sequence[tuple[str, str]], inv: InversionConfig,
                   cell: str, defense: DefenseConfig = DefenseConfig(),
                   mode: str = WORD) -> list[ResultRecord]:
    records = []
    for i, (sample_id, text) in enumerate(entries):
        clean = res.encoder.encode(text)
        attacked = apply_defense(defense, clean, np.random.default_rng([defense.seed, 2, i]))
        steps = inv.steps
        start = time.perf_counter()
        out = invert(res.corrector if steps else None, res.base, res.encoder, attacked, inv)
        wall = time.perf_counter() - start
        ref, hyp = tokenize(text, mode).tokens, tokenize(out.best_text, mode).tokens
        records.append(ResultRecord(
            cell=cell,
            sample_id=sample_id,
            target_text=text,
            reconstructed_text=out.best_text,
            cosine=cosine_sim(res.encoder.encode(out.best_text), clean),
            bleu=bleu(ref, hyp),
            token_f1=token_f1(ref, hyp),
            exact=canonical(text, mode) == canonical(out.best_text, mode),
            steps=steps,
            beam_width=inv.beam_width,
            token_decode=str(inv.token_decode),
            defense=defense.to_dict(),
            steps_run=out.steps_run,
            encoder_calls=out.encoder_calls,
            wall_time_s=wall,
            seed=inv.seed,
            trace_cosines=[score for _, score in out.trace],
        ))
    return records


def _retrieval_setup(cfg: ExperimentConfig, corpus: Corpus):
    if cfg.qrels:
        qrels = load_qrels_tsv(cfg.qrels)
        qcorpus = load_jsonl_corpus(cfg.queries, token_mode=cfg.token_mode)
        return list(qcorpus.entries), qrels
    return make_dropout_queries(corpus, cfg.seed, cfg.n_queries)


def _defense_rows(cfg: ExperimentConfig, res: Resources, defenses: Sequence[DefenseConfig]):
    entries = sample_entries(res.corpus, cfg.sample_size, cfg.seed)
    queries, qrels = _retrieval_setup(cfg, res.corpus)
    records, retrieval = [], []
    for d in defenses:
        cell = d.label()
        index = build_index(res.corpus, res.encoder, d, np.random.default_rng([d.seed, 1]))
        for qid, v in per_query_ndcg(index, queries, qrels, res.encoder, cfg.retrieval_k):
            retrieval.append(RetrievalRecord(cell, qid, v))
        records += invert_samples(res, entries, cfg.inversion, cell, d, cfg.token_mode)
    return records, retrieval


# -- experiment kinds -------------------------------------------------------

def _cell(steps: int, beam: int) -> str:
    return f"steps={steps},beam={beam}"


def run_in_domain(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    """Invert a seeded sample of the test corpus for each (steps, beam) cell, base row included."""
    cells = cfg.cells or [(0, cfg.inversion.beam_width), (cfg.inversion.steps, cfg.inversion.beam_width)]
    entries = sample_entries(res.corpus, cfg.sample_size, cfg.seed)
    records = []
    for steps, beam in cells:
        inv = replace(cfg.inversion, steps=steps, beam_width=beam)
        records += invert_samples(res, entries, inv, _cell(steps, beam), mode=cfg.token_mode)
    return ExperimentResult(cfg, records)


def run_ood(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    records = []
    for name, corpus in [(IN_DOMAIN, res.corpus), *sorted(res.eval_corpora.items())]:
        entries = sample_entries(corpus, cfg.sample_size, cfg.seed)
        records += invert_samples(res, entries, cfg.inversion, name, mode=cfg.token_mode)
    return ExperimentResult(cfg, records)


def length_bucket(n_tokens: int, edges: Sequence[int]) -> int:
    """Smallest edge >= ``n_tokens``; longer texts fall in the last bucket."""
    for edge in edges:
        if n_tokens <= edge:
            return edge
    return edges[-1]


def run_length_sensitivity(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    entries = sample_entries(res.corpus, cfg.sample_size, cfg.seed)
    records = invert_samples(res, entries, cfg.inversion, "all", mode=cfg.token_mode)
    for r in records:
        n = len(tokenize(r.target_text, cfg.token_mode).tokens)
        r.cell = f"len<={length_bucket(n, cfg.length_buckets)}"
    return ExperimentResult(cfg, records)


def run_noise_defense(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    defenses = [DefenseConfig(NOISE, v, cfg.seed) for v in cfg.noise_scales]
    records, retrieval = _defense_rows(cfg, res, defenses)
    return ExperimentResult(cfg, records, retrieval)


def run_quant_defense(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    defenses = [DefenseConfig(NONE), DefenseConfig(ABSMAX), DefenseConfig(ZEROPOINT)]
    records, retrieval = _defense_rows(cfg, res, defenses)
    return ExperimentResult(cfg, records, retrieval)


def run_password(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    records = []
    for strength in STRENGTHS:
        if strength in res.eval_corpora:
            entries = sample_entries(res.eval_corpora[strength], cfg.sample_size, cfg.seed)
            records += invert_samples(res, entries, cfg.inversion, strength, mode=cfg.token_mode)
    return ExperimentResult(cfg, records)


def run_param_sweep(cfg: ExperimentConfig, res: Resources) -> ExperimentResult:
    """One cell per (steps, beam); a failing cell is recorded and the sweep goes on."""
    entries = sample_entries(res.corpus, cfg.sample_size, cfg.seed)
    records, failed = [], {}
    grid = [(s, b) for b in cfg.sweep_beams for s in cfg.sweep_steps]
    seeds = [derive_seed(cfg.seed, i) for i in range(len(grid))]
    assert len(set(seeds)) == len(seeds)
    for (steps, beam), seed in zip(grid, seeds):
        try:
            inv = replace(cfg.inversion, steps=steps, beam_width=beam, seed=seed)
            records += invert_samples(res, entries, inv, _cell(steps, beam), mode=cfg.token_mode)
        except Exception as exc:
            log.error("sweep cell %s failed: %s", _cell(steps, beam), exc)
            failed[_cell(steps, beam)] = f"{type(exc).__name__}: {exc}"
    return ExperimentResult(cfg, records, failed_cells=failed)


RUNNERS = {
    IN_DOMAIN: run_in_domain,
    OOD: run_ood,
    LENGTH: run_length_sensitivity,
    NOISE_DEFENSE: run_noise_defense,
    QUANT_DEFENSE: run_quant_defense,
    PASSWORD: run_password,
    PARAM_SWEEP: run_param_sweep,
}


def run_experiment(cfg: ExperimentConfig, res: Resources | None = None) -> ExperimentResult:
    cfg.validate()
    if res is None:
        res = load_resources(cfg)
    return RUNNERS[cfg.kind](cfg, res)


# -- aggregation --------------------------------------------------------------

def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Points no other point strictly dominates (runtime <=, BLEU >=, one strict), by runtime."""
    if not points:
        raise ValueError("need at least one point")

    def dominated(p):
        return any(
            q.mean_runtime_s <= p.mean_runtime_s and q.mean_bleu >= p.mean_bleu
            and (q.mean_runtime_s < p.mean_runtime_s or q.mean_bleu > p.mean_bleu)
            for q in points
        )

    front = [p for p in points if not dominated(p)]
    return sorted(front, key=lambda p: (p.mean_runtime_s, -p.mean_bleu, p.steps, p.beam_width))


def _by_cell(records: Sequence) -> dict[str, list]:
    groups: dict[str, list] = {}
    for r in records:
        groups.setdefault(r.cell, []).append(r)
    return groups


def _report(records: Sequence[ResultRecord], mode: str) -> MetricsReport:
    return corpus_report([r.target_text for r in records], [r.reconstructed_text for r in records],
                         [r.cosine for r in records], mode)


def summarize(cfg: ExperimentConfig, records: Sequence[ResultRecord],
              retrieval: Sequence[RetrievalRecord] = (), failed: dict | None = None):
    """Aggregate reports and plot tables, computed only from persisted records."""
    failed = failed or {}
    reports: dict[str, dict] = {}
    tables: dict[str, list[dict]] = {}
    groups = _by_cell(records)
    ndcg = {c: float(np.mean([r.ndcg for r in rs])) for c, rs in _by_cell(retrieval).items()}
    for cell, rs in groups.items():
        rep = _report(rs, cfg.token_mode).to_dict()
        rep["mean_runtime_s"] = float(np.mean([r.wall_time_s for r in rs]))
        if cell in ndcg:
            rep[f"ndcg@{cfg.retrieval_k}"] = ndcg[cell]
        reports[cell] = rep
    for cell, err in failed.items():
        reports[cell] = {"failed": err}

    kind = cfg.kind
    cols = ("bleu", "token_f1", "exact_match", "cosine", "n_samples")
    if kind == IN_DOMAIN:
        tables["cells"] = [
            {"steps": rs[0].steps, "beam_width": rs[0].beam_width, **{k: reports[c][k] for k in cols}}
            for c, rs in groups.items()
        ]
    elif kind == OOD:
        tables["datasets"] = [{"dataset": c, **{k: reports[c][k] for k in cols}} for c in groups]
    elif kind == LENGTH:
        rows = []
        for c in sorted(groups, key=lambda c: int(c.split("<=")[1])):
            rows.append({"bucket": int(c.split("<=")[1]), "n": reports[c]["n_samples"],
                         "mean_bleu": reports[c]["bleu"], "reliable": reports[c]["n_samples"] >= MIN_BUCKET})
        tables["length_buckets"] = rows
    elif kind in (NOISE_DEFENSE, QUANT_DEFENSE):
        key = f"ndcg@{cfg.retrieval_k}"
        rows = []
        for c, rs in groups.items():
            d = rs[0].defense
            label = {"noise_scale": d.get("noise_scale", 0.0)} if kind == NOISE_DEFENSE else {"scheme": d["kind"]}
            rows.append({**label, "bleu": reports[c]["bleu"], key: reports[c].get(key)})
        tables["noise_sweep" if kind == NOISE_DEFENSE else "quantization"] = rows
    elif kind == PASSWORD:
        tables["passwords"] = [
            {"strength": c, "exact_match": reports[c]["exact_match"], "token_f1": reports[c]["token_f1"],
             "n": reports[c]["n_samples"]}
            for c in groups
        ]
    elif kind == PARAM_SWEEP:
        grid, points = [], []
        for beam in cfg.sweep_beams:
            for steps in cfg.sweep_steps:
                c = _cell(steps, beam)
                if c in failed or c not in reports:
                    grid.append({"steps": steps, "beam_width": beam, "mean_bleu": None,
                                 "mean_runtime_s": None, "status": "failed"})
                    continue
                rep = reports[c]
                grid.append({"steps": steps, "beam_width": beam, "mean_bleu": rep["bleu"],
                             "mean_runtime_s": rep["mean_runtime_s"], "status": "ok"})
                points.append(ParetoPoint(rep["mean_runtime_s"], rep["bleu"], steps, beam))
        tables["sweep_grid"] = grid
        if points:
            tables["pareto"] = [asdict(p) for p in pareto_front(points)]
    return reports, tables


# -- persistence --------------------------------------------------------------

def _jsonl(rows: Sequence[dict]) -> bytes:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows).encode()


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode()


def _csv(rows: Sequence[dict]) -> bytes:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue().encode()


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def content_hash(rel: str, data: bytes) -> str | None:
    """sha256 of a file with timing fields removed; ``None`` for timing-derived files."""
    if rel in TIMING_DERIVED_FILES:
        return None
    text = data.decode()
    if rel.endswith(".jsonl"):
        canon = [_strip_timing(json.loads(line)) for line in text.splitlines() if line]
    elif rel.endswith(".json"):
        canon = _strip_timing(json.loads(text))
    elif rel.endswith(".csv"):
        canon = _strip_timing(list(csv.DictReader(io.StringIO(text))))
    else:
        return hashlib.sha256(data).hexdigest()
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def render(result: ExperimentResult) -> dict[str, bytes]:
    """Every result file as ``relative path -> bytes``."""
    reports, tables = result.summary()
    files = {
        "records.jsonl": _jsonl([r.to_dict() for r in result.records]),
        "reports.json": _json(reports),
    }
    if result.retrieval:
        files["retrieval.jsonl"] = _jsonl([asdict(r) for r in result.retrieval])
    if result.failed_cells:
        files["failed_cells.json"] = _json(result.failed_cells)
    for name, rows in tables.items():
        files[f"tables/{name}.csv"] = _csv(rows)
    return files


def write_results(result: ExperimentResult, output_dir=None) -> Path:
    """Write records, reports, tables and a hashed manifest; returns the manifest path."""
    out = Path(output_dir or result.config.output_dir)
    files = render(result)
    entries = []
    for rel, data in files.items():
        path = out / rel
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        entries.append({"path": rel, "sha256": hashlib.sha256(data).hexdigest(),
                        "content_hash": content_hash(rel, data)})
    manifest = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "artifact_version": __version__,
        "kind": result.config.kind,
        "master_seed": result.config.seed,
        "config": result.config.to_dict(),
        "files": entries,
        "timing_fields": sorted(TIMING_FIELDS),
        "runtime_measurement": "wall clock per inversion call, including encoder calls that re-score candidates",
    }
    path = out / "manifest.json"
    path.write_bytes(_json(manifest))
    return path


def _load_records(path: Path, cls) -> list:
    if not path.exists():
        return []
    return [cls(**json.loads(line)) for line in path.read_text().splitlines() if line]


def verify(output_dir) -> list[str]:
    """Check file hashes and recompute every aggregate from the raw records.

    Returns a list of discrepancies; empty means the directory checks out.
    """
    out = Path(output_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    problems = []
    for entry in manifest["files"]:
        path = out / entry["path"]
        if not path.exists():
            problems.append(f"{entry['path']}: missing")
        elif hashlib.sha256(path.read_bytes()).hexdigest() != entry["sha256"]:
            problems.append(f"{entry['path']}: hash mismatch")
    if problems:
        return problems

    cfg = ExperimentConfig.from_dict(manifest["config"])
    failed_path = out / "failed_cells.json"
    result = ExperimentResult(
        cfg,
        _load_records(out / "records.jsonl", ResultRecord),
        _load_records(out / "retrieval.jsonl", RetrievalRecord),
        json.loads(failed_path.read_text()) if failed_path.exists() else {},
    )
    for r in result.records:
        ref = tokenize(r.target_text, cfg.token_mode).tokens
        hyp = tokenize(r.reconstructed_text, cfg.token_mode).tokens
        if not (math.isclose(r.bleu, bleu(ref, hyp), abs_tol=1e-9)
                and math.isclose(r.token_f1, token_f1(ref, hyp), abs_tol=1e-9)
                and r.exact == (canonical(r.target_text, cfg.token_mode)
                                == canonical(r.reconstructed_text, cfg.token_mode))):
            problems.append(f"records.jsonl: per-sample metrics differ for {r.cell}/{r.sample_id}")
    listed = {e["path"] for e in manifest["files"]}
    for rel, data in render(result).items():
        if rel not in listed:
            problems.append(f"{rel}: not in manifest")
        elif (out / rel).read_bytes() != data:
            problems.append(f"{rel}: differs from recomputation")
    return problems
