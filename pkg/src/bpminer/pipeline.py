"""End-to-end pipeline: ingest -> filter -> extract -> parse -> validate ->
analyze, with content-addressed stage caching and a run manifest.

Every stage writes a newline-delimited JSON file keyed by pmid, so each
step is independently inspectable and resumable. A rerun with unchanged
config and inputs skips completed stages (digest match) and leaves the
outputs byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional

from bpminer import __version__
from bpminer.backends import (
    BackendRequest,
    BackendTelemetry,
    DecodeParams,
    DEFAULT_CREDENTIAL_ENV,
    MockBackend,
    RateLimiter,
    RemoteBackend,
    RequestBudget,
    ResponseCache,
    query_backend,
)
from bpminer.density import density_grid, iso_contours, peak, study_ellipses
from bpminer.errors import (
    BudgetExhaustedError,
    ConfigError,
    EmptyAnswerError,
    StageError,
)
from bpminer.extraction import (
    BPExtraction,
    PromptTemplate,
    build_prompt,
    is_complete,
    parse_answer,
)
from bpminer.gmm import fit_gmm, select_components, to_points
from bpminer.ingest import (
    AbstractRecord,
    FilterStats,
    KeywordStageConfig,
    ParseStats,
    filter_corpus,
    parse_baseline_stream,
)
from bpminer.validation import (
    ValidationConfig,
    ground_check,
    passes_cohort_filter,
    summarize_review,
    validate_ranges,
)

logger = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "filter", "extract", "parse", "validate", "analyze")


# --- small deterministic I/O helpers ---------------------------------------

def json_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_jsonl(path: Path, rows: Iterable[dict]) -> int:
    """Atomically write rows as NDJSON; returns the row count."""
    tmp = path.with_name(path.name + ".tmp")
    count = 0
    with tmp.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json_line(row) + "\n")
            count += 1
    tmp.replace(path)
    return count


def read_jsonl(path: Path) -> Iterator[dict]:
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
                   encoding="utf-8")
    tmp.replace(path)


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        while chunk := fh.read(1 << 20):
            h.update(chunk)
    return h.hexdigest()


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def round6(value):
    """Recursively format floats to 6 significant digits."""
    if isinstance(value, float):
        return float(f"{value:.6g}")
    if isinstance(value, dict):
        return {k: round6(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round6(v) for v in value]
    return value


def fmt6(value: float) -> str:
    return f"{value:.6g}"


# --- configuration ----------------------------------------------------------

@dataclass
class AnalysisConfig:
    """GMM and grid settings for the analyze stage."""

    k: Optional[int] = None  # fixed component count; None selects by BIC
    k_max: int = 5
    seed: int = 0
    tol: float = 1e-8
    max_iter: int = 500
    reg: float = 1e-6
    sbp_bounds: tuple = (60.0, 200.0)
    dbp_bounds: tuple = (30.0, 120.0)
    grid_resolution: int = 256
    contour_levels: tuple = (0.25, 0.5, 0.75)
    weight_by_cohort: bool = True

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "k_max": self.k_max,
            "seed": self.seed,
            "tol": self.tol,
            "max_iter": self.max_iter,
            "reg": self.reg,
            "sbp_bounds": list(self.sbp_bounds),
            "dbp_bounds": list(self.dbp_bounds),
            "grid_resolution": self.grid_resolution,
            "contour_levels": list(self.contour_levels),
            "weight_by_cohort": self.weight_by_cohort,
        }


_CONFIG_KEYS = {
    "out_dir", "baseline_files", "records_file", "keywords", "template_path",
    "backend", "model_id", "endpoint_url", "credential_env", "decode",
    "cache_dir", "validation", "analysis", "max_requests", "parallelism",
    "rate_limit_per_sec", "stages",
}


@dataclass
class PipelineConfig:
    """Everything a run needs; loadable from a JSON file."""

    out_dir: Path
    baseline_files: list = field(default_factory=list)
    records_file: Optional[Path] = None
    keywords: KeywordStageConfig = field(default_factory=KeywordStageConfig)
    template_path: Optional[Path] = None
    backend: str = "mock"
    model_id: str = "mock-bp-extractor"
    endpoint_url: Optional[str] = None
    credential_env: str = DEFAULT_CREDENTIAL_ENV
    decode: DecodeParams = field(default_factory=DecodeParams)
    cache_dir: Optional[Path] = None
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    max_requests: Optional[int] = None
    parallelism: int = 1
    rate_limit_per_sec: Optional[float] = None
    stages: Optional[list] = None  # None runs every stage

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        return cls.from_dict(raw, base_dir=path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Optional[Path] = None) -> "PipelineConfig":
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "out_dir" not in raw:
            raise ConfigError("config must set out_dir")

        def resolve(p):
            if p is None:
                return None
            p = Path(p)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            return p

        try:
            keywords = KeywordStageConfig(**raw.get("keywords", {}))
            decode = DecodeParams(**raw.get("decode", {}))
            validation = ValidationConfig(**raw.get("validation", {}))
            analysis = AnalysisConfig(**{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in raw.get("analysis", {}).items()
            })
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config section: {exc}")

        return cls(
            out_dir=resolve(raw["out_dir"]),
            baseline_files=[resolve(p) for p in raw.get("baseline_files", [])],
            records_file=resolve(raw.get("records_file")),
            keywords=keywords,
            template_path=resolve(raw.get("template_path")),
            backend=raw.get("backend", "mock"),
            model_id=raw.get("model_id", "mock-bp-extractor"),
            endpoint_url=raw.get("endpoint_url"),
            credential_env=raw.get("credential_env", DEFAULT_CREDENTIAL_ENV),
            decode=decode,
            cache_dir=resolve(raw.get("cache_dir")),
            validation=validation,
            analysis=analysis,
            max_requests=raw.get("max_requests"),
            parallelism=int(raw.get("parallelism", 1)),
            rate_limit_per_sec=raw.get("rate_limit_per_sec"),
            stages=raw.get("stages"),
        )

    def validate(self) -> None:
        if self.backend not in ("mock", "remote"):
            raise ConfigError(f"backend must be 'mock' or 'remote', got {self.backend!r}")
        if self.backend == "remote" and not self.endpoint_url:
            raise ConfigError("remote backend requires endpoint_url")
        if self.template_path is not None and not Path(self.template_path).is_file():
            raise ConfigError(f"template file not found: {self.template_path}")
        for p in self.baseline_files:
            if not Path(p).is_file():
                raise ConfigError(f"baseline file not found: {p}")
        if self.records_file is not None and not Path(self.records_file).is_file():
            raise ConfigError(f"records file not found: {self.records_file}")
        if self.baseline_files and self.records_file:
            raise ConfigError("set baseline_files or records_file, not both")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.stages is not None:
            bad = [s for s in self.stages if s not in STAGE_ORDER]
            if bad:
                raise ConfigError(f"unknown stages: {bad}")

    def load_template(self) -> PromptTemplate:
        if self.template_path is not None:
            return PromptTemplate.from_file(self.template_path)
        return PromptTemplate.default()

    def make_backend(self):
        if self.backend == "mock":
            return MockBackend()
        return RemoteBackend(self.endpoint_url, credential_env=self.credential_env)

    def stage_config_payload(self, stage: str) -> dict:
        """The config subset a stage's outputs depend on (for resume digests)."""
        if stage == "ingest":
            return {
                "baseline_files": [Path(p).name for p in self.baseline_files],
                "records_file": Path(self.records_file).name if self.records_file else None,
            }
        if stage == "filter":
            return {
                "stage1_terms": list(self.keywords.stage1_terms),
                "stage2_terms": list(self.keywords.stage2_terms),
                "case_insensitive": self.keywords.case_insensitive,
            }
        if stage == "extract":
            return {
                "template_sha": text_digest(self.load_template().template_text),
                "backend": self.backend,
                "model_id": self.model_id,
                "endpoint_url": self.endpoint_url,
                "temperature": self.decode.temperature,
                "max_answer_length": self.decode.max_answer_length,
            }
        if stage == "parse":
            return {}
        if stage == "validate":
            v = self.validation
            return {
                "dbp_min": v.dbp_min, "dbp_max": v.dbp_max,
                "sbp_min": v.sbp_min, "sbp_max": v.sbp_max,
                "min_total_cohort": v.min_total_cohort,
                "grounding_rel_tol": v.grounding_rel_tol,
                "grounding_abs_tol": v.grounding_abs_tol,
                "max_subset_size": v.max_subset_size,
                "max_numbers": v.max_numbers,
            }
        if stage == "analyze":
            return self.analysis.to_dict()
        raise ValueError(f"unknown stage {stage!r}")

    def config_digest(self) -> str:
        payload = {stage: self.stage_config_payload(stage) for stage in STAGE_ORDER}
        return text_digest(json.dumps(payload, sort_keys=True))


# --- manifest ----------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    status: str = "pending"  # completed | failed
    config_digest: str = ""
    input_digests: dict = field(default_factory=dict)
    output_digests: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""
    skipped: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "config_digest": self.config_digest,
            "input_digests": self.input_digests,
            "output_digests": self.output_digests,
            "counts": self.counts,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "skipped": self.skipped,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        return cls(**d)


@dataclass
class RunManifest:
    """Per-stage digests and counts; persisted after every stage."""

    tool_version: str = __version__
    config_digest: str = ""
    seed: int = 0
    stages: dict = field(default_factory=dict)  # name -> StageRecord

    def funnel(self) -> dict:
        """Record counts surviving each stage, in pipeline order."""
        out = {}
        ingest = self.stages.get("ingest")
        if ingest:
            out["ingested"] = ingest.counts.get("records", 0)
        filt = self.stages.get("filter")
        if filt:
            out["filtered"] = filt.counts.get("stage2", 0)
        validate = self.stages.get("validate")
        if validate:
            out["complete"] = validate.counts.get("complete", 0)
            out["in_range"] = validate.counts.get("in_range", 0)
            out["cohort_pass"] = validate.counts.get("cohort_pass", 0)
        return out

    def to_dict(self) -> dict:
        return {
            "tool_version": self.tool_version,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "stages": {name: rec.to_dict() for name, rec in self.stages.items()},
            "funnel": self.funnel(),
        }

    def save(self, path: Path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Path) -> Optional["RunManifest"]:
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None
        manifest = cls(
            tool_version=raw.get("tool_version", ""),
            config_digest=raw.get("config_digest", ""),
            seed=raw.get("seed", 0),
        )
        for name, rec in raw.get("stages", {}).items():
            manifest.stages[name] = StageRecord.from_dict(rec)
        return manifest


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# --- stage implementations ----------------------------------------------------

def _paths(out_dir: Path) -> dict:
    analysis = out_dir / "analysis"
    return {
        "records": out_dir / "records.ndjson",
        "filtered": out_dir / "filtered.ndjson",
        "answers": out_dir / "answers.ndjson",
        "extractions": out_dir / "extractions.ndjson",
        "validated": out_dir / "validated.ndjson",
        "review": out_dir / "review.json",
        "analysis_dir": analysis,
        "comparison": analysis / "comparison.json",
        "manifest": out_dir / "manifest.json",
    }


def _stage_ingest(config: PipelineConfig, paths: dict):
    seen = set()
    n_dup = 0
    parse_stats = ParseStats()
    rows = []
    if config.records_file is not None:
        for raw in read_jsonl(Path(config.records_file)):
            record = AbstractRecord.from_dict(raw)
            if record.pmid in seen or not record.abstract_text:
                n_dup += record.pmid in seen
                continue
            seen.add(record.pmid)
            rows.append(record.to_dict())
        parse_stats.n_yielded = len(rows)
    else:
        for path in config.baseline_files:
            path = Path(path)
            for record in parse_baseline_stream(path, source_name=path.name,
                                                stats=parse_stats):
                if record.pmid in seen:
                    n_dup += 1
                    continue
                seen.add(record.pmid)
                rows.append(record.to_dict())
    write_jsonl(paths["records"], rows)
    counts = {
        "citations": parse_stats.n_citations,
        "records": len(rows),
        "no_abstract": parse_stats.n_no_abstract,
        "duplicates": n_dup,
    }
    return counts, [paths["records"]]


def _stage_filter(config: PipelineConfig, paths: dict):
    records = (AbstractRecord.from_dict(d) for d in read_jsonl(paths["records"]))
    survivors, stats = filter_corpus(records, config.keywords)
    write_jsonl(paths["filtered"], (r.to_dict() for r in survivors))
    counts = {"input": stats.n_input, "stage1": stats.n_stage1, "stage2": stats.n_stage2}
    return counts, [paths["filtered"]]


def _stage_extract(config: PipelineConfig, paths: dict):
    template = config.load_template()
    records = [AbstractRecord.from_dict(d) for d in read_jsonl(paths["filtered"])]
    backend = config.make_backend()
    cache = ResponseCache(config.cache_dir or paths["records"].parent / "cache")
    telemetry = BackendTelemetry()
    budget = RequestBudget(config.max_requests)
    limiter = RateLimiter(config.rate_limit_per_sec)

    def worker(record: AbstractRecord):
        prompt = build_prompt(record, template)
        request = BackendRequest(prompt=prompt, model_id=config.model_id,
                                 decode_params=config.decode)
        try:
            answer = query_backend(
                request, backend, cache, pmid=record.pmid,
                rate_limiter=limiter, budget=budget, telemetry=telemetry,
            )
        except EmptyAnswerError:
            logger.warning("extract: empty answer for %s, skipping", record.pmid)
            return record.pmid, None
        return record.pmid, answer

    rows = []
    n_empty = 0

    def collect(result):
        nonlocal n_empty
        pmid, answer = result
        if answer is None:
            n_empty += 1
            return
        # cached-ness is run telemetry, not content: keeping it out of the
        # row makes warm-cache reruns byte-identical to cold runs
        rows.append({
            "pmid": pmid,
            "answer": answer.text,
            "backend_id": answer.backend_id,
        })

    try:
        if config.parallelism > 1:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                for result in pool.map(worker, records):
                    collect(result)
        else:
            for record in records:
                collect(worker(record))
    except BudgetExhaustedError:
        # Retain the answers gathered so far; a rerun resumes via the cache.
        write_jsonl(paths["answers"], rows)
        raise
    write_jsonl(paths["answers"], rows)
    counts = {"input": len(records), "answers": len(rows), "empty_answers": n_empty}
    counts.update(telemetry.to_dict())
    del counts["total_latency_s"]
    return counts, [paths["answers"]]


def _stage_parse(config: PipelineConfig, paths: dict):
    rows = []
    n_complete = 0
    for raw in read_jsonl(paths["answers"]):
        extraction = parse_answer(raw["answer"], pmid=raw["pmid"])
        n_complete += is_complete(extraction)
        rows.append(extraction.to_dict())
    write_jsonl(paths["extractions"], rows)
    counts = {"answers": len(rows), "extractions": len(rows), "complete": n_complete}
    return counts, [paths["extractions"]]


def _stage_validate(config: PipelineConfig, paths: dict):
    cfg = config.validation
    abstracts = {
        d["pmid"]: AbstractRecord.from_dict(d) for d in read_jsonl(paths["records"])
    }
    extractions = [BPExtraction.from_dict(d) for d in read_jsonl(paths["extractions"])]

    complete = [x for x in extractions if is_complete(x)]
    reports = {}
    for x in complete:
        abstract = abstracts.get(x.pmid)
        if abstract is None:
            raise StageError("validate", f"no ingested record for pmid {x.pmid}")
        reports[x.pmid] = ground_check(x, abstract, cfg)
    summary = summarize_review(list(reports.values()), complete)

    range_failures = []
    in_range = []
    for x in complete:
        verdict = validate_ranges(x, cfg)
        if verdict.passed:
            in_range.append(x)
        else:
            range_failures.extend(
                {"pmid": x.pmid, "field": name, "value": value}
                for name, value in verdict.failures
            )
    cohort_pass = [x for x in in_range if passes_cohort_filter(x, cfg)]

    rows = []
    for x in cohort_pass:
        row = x.to_dict()
        row["verdicts"] = {
            name: verdict.value for name, verdict in reports[x.pmid].verdicts.items()
        }
        rows.append(row)
    write_jsonl(paths["validated"], rows)

    counts = {
        "extractions": len(extractions),
        "complete": len(complete),
        "in_range": len(in_range),
        "cohort_pass": len(cohort_pass),
    }
    review = {
        "counts": counts,
        "grounding": summary.to_dict(),
        "range_failures": range_failures,
    }
    write_json(paths["review"], review)
    return counts, [paths["validated"], paths["review"]]


def _sex_outputs(analysis_dir: Path, sex: str) -> dict:
    return {
        "model": analysis_dir / f"model_{sex}.json",
        "density": analysis_dir / f"density_{sex}.csv",
        "axes": analysis_dir / f"density_{sex}_axes.json",
        "contours": analysis_dir / f"contours_{sex}.csv",
        "ellipses": analysis_dir / f"ellipses_{sex}.csv",
    }


def _write_density_csv(path: Path, grid) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for row in grid.values:
            fh.write(",".join(fmt6(v) for v in row) + "\n")
    tmp.replace(path)


def _write_contours_csv(path: Path, levels) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write("level,polyline,sbp,dbp\n")
        for level in levels:
            for pid, line in enumerate(level.polylines):
                verts = line.vertices
                if line.closed and len(verts):
                    verts = list(verts) + [verts[0]]  # re-close for plotting
                for sbp, dbp in verts:
                    fh.write(f"{fmt6(level.fraction)},{pid},{fmt6(sbp)},{fmt6(dbp)}\n")
    tmp.replace(path)


def _write_ellipses_csv(path: Path, ellipses) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write("pmid,center_sbp,center_dbp,radius_sbp,radius_dbp\n")
        for e in ellipses:
            fh.write(
                f"{e.pmid},{fmt6(e.center_sbp)},{fmt6(e.center_dbp)},"
                f"{fmt6(e.radius_sbp)},{fmt6(e.radius_dbp)}\n"
            )
    tmp.replace(path)


def _stage_analyze(config: PipelineConfig, paths: dict):
    acfg = config.analysis
    records = [BPExtraction.from_dict(d) for d in read_jsonl(paths["validated"])]
    analysis_dir = paths["analysis_dir"]
    analysis_dir.mkdir(parents=True, exist_ok=True)
    bounds = (acfg.sbp_bounds, acfg.dbp_bounds)

    outputs = []
    comparison = {}
    counts = {"validated": len(records)}
    for sex in ("male", "female"):
        points = to_points(records, sex)
        if not acfg.weight_by_cohort:
            points = [replace(p, weight=1.0) for p in points]
        counts[f"points_{sex}"] = len(points)
        if not points:
            logger.warning("analyze: no %s points, skipping that side", sex)
            comparison[sex] = None
            continue
        if acfg.k is not None:
            model = fit_gmm(points, acfg.k, seed=acfg.seed, tol=acfg.tol,
                            max_iter=acfg.max_iter, reg=acfg.reg)
            chosen_k = acfg.k
        else:
            chosen_k, model = select_components(
                points, min(acfg.k_max, len(points)), seed=acfg.seed,
                tol=acfg.tol, max_iter=acfg.max_iter, reg=acfg.reg,
            )
        grid = density_grid(model, bounds, acfg.grid_resolution)
        sex_peak = peak(model, bounds, acfg.grid_resolution)
        contours = iso_contours(grid, acfg.contour_levels)
        ellipses = study_ellipses(records, sex)

        files = _sex_outputs(analysis_dir, sex)
        model_doc = round6(model.to_dict())
        model_doc["n_points"] = len(points)
        write_json(files["model"], model_doc)
        _write_density_csv(files["density"], grid)
        write_json(files["axes"], {
            "sbp": {"min": grid.sbp_axis.lo, "max": grid.sbp_axis.hi, "n": grid.sbp_axis.n},
            "dbp": {"min": grid.dbp_axis.lo, "max": grid.dbp_axis.hi, "n": grid.dbp_axis.n},
            "convention": "values sampled at cell centers, row=dbp, col=sbp",
        })
        _write_contours_csv(files["contours"], contours)
        _write_ellipses_csv(files["ellipses"], ellipses)
        outputs.extend(files.values())

        comparison[sex] = {
            "peak_sbp": sex_peak[0],
            "peak_dbp": sex_peak[1],
            "k": chosen_k,
            "n_points": len(points),
        }

    if comparison.get("male") and comparison.get("female"):
        comparison["delta"] = {
            "peak_sbp": comparison["male"]["peak_sbp"] - comparison["female"]["peak_sbp"],
            "peak_dbp": comparison["male"]["peak_dbp"] - comparison["female"]["peak_dbp"],
        }
    else:
        comparison["delta"] = None
    write_json(paths["comparison"], round6(comparison))
    outputs.append(paths["comparison"])
    return counts, outputs


_STAGE_FUNCS = {
    "ingest": _stage_ingest,
    "filter": _stage_filter,
    "extract": _stage_extract,
    "parse": _stage_parse,
    "validate": _stage_validate,
    "analyze": _stage_analyze,
}

_STAGE_INPUTS = {
    "ingest": lambda cfg, paths: [Path(p) for p in cfg.baseline_files]
    + ([Path(cfg.records_file)] if cfg.records_file else []),
    "filter": lambda cfg, paths: [paths["records"]],
    "extract": lambda cfg, paths: [paths["filtered"]],
    "parse": lambda cfg, paths: [paths["answers"]],
    "validate": lambda cfg, paths: [paths["extractions"], paths["records"]],
    "analyze": lambda cfg, paths: [paths["validated"]],
}


def run(config: PipelineConfig) -> RunManifest:
    """Execute the configured stages with digest-based resume.

    A stage is skipped when its config subset, input digests, and output
    digests all match the previous completed run. Failures are recorded in
    the manifest and raised; partial outputs stay on disk for resume.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = _paths(out_dir)

    previous = RunManifest.load(paths["manifest"])
    manifest = RunManifest(config_digest=config.config_digest(),
                           seed=config.analysis.seed)
    if previous is not None:
        manifest.stages.update(previous.stages)

    stages = config.stages if config.stages is not None else list(STAGE_ORDER)
    for stage in STAGE_ORDER:
        if stage not in stages:
            continue
        payload_digest = text_digest(
            json.dumps(config.stage_config_payload(stage), sort_keys=True)
        )
        inputs = _STAGE_INPUTS[stage](config, paths)
        missing = [p for p in inputs if not p.is_file()]
        if missing:
            record = StageRecord(name=stage, status="failed",
                                 error=f"missing inputs: {[str(p) for p in missing]}")
            manifest.stages[stage] = record
            manifest.save(paths["manifest"])
            raise StageError(stage, f"missing inputs: {[p.name for p in missing]} "
                                    "(run earlier stages first)")
        input_digests = {p.name: file_digest(p) for p in inputs}

        prior = manifest.stages.get(stage)
        if (
            prior is not None
            and prior.status == "completed"
            and prior.config_digest == payload_digest
            and prior.input_digests == input_digests
            and all(Path(out_dir / name).is_file() and file_digest(out_dir / name) == d
                    for name, d in prior.output_digests.items())
        ):
            logger.info("stage %s: up to date, skipping", stage)
            prior.skipped = True
            manifest.save(paths["manifest"])
            continue

        logger.info("stage %s: running", stage)
        record = StageRecord(name=stage, config_digest=payload_digest,
                             input_digests=input_digests, started_at=_now())
        try:
            counts, outputs = _STAGE_FUNCS[stage](config, paths)
        except BudgetExhaustedError as exc:
            record.status = "failed"
            record.error = str(exc)
            record.finished_at = _now()
            manifest.stages[stage] = record
            manifest.save(paths["manifest"])
            raise
        except StageError as exc:
            record.status = "failed"
            record.error = str(exc)
            record.finished_at = _now()
            manifest.stages[stage] = record
            manifest.save(paths["manifest"])
            raise
        except Exception as exc:
            record.status = "failed"
            record.error = f"{type(exc).__name__}: {exc}"
            record.finished_at = _now()
            manifest.stages[stage] = record
            manifest.save(paths["manifest"])
            raise StageError(stage, str(exc)) from exc

        record.status = "completed"
        record.skipped = False
        record.counts = counts
        record.finished_at = _now()
        record.output_digests = {
            str(p.relative_to(out_dir)): file_digest(p) for p in outputs
        }
        manifest.stages[stage] = record
        manifest.save(paths["manifest"])

    return manifest


# --- report -------------------------------------------------------------------

def report(manifest: RunManifest, out_dir) -> str:
    """Human-readable run summary: stage funnel, grounding, per-sex peaks."""
    out_dir = Path(out_dir)
    paths = _paths(out_dir)
    lines = []
    lines.append("bpminer run report")
    lines.append("==================")
    lines.append(f"tool version {manifest.tool_version}, "
                 f"config digest {manifest.config_digest[:12]}")
    lines.append("")

    funnel = manifest.funnel()
    if funnel:
        lines.append("stage funnel")
        labels = {
            "ingested": "ingested records",
            "filtered": "keyword filtered",
            "complete": "complete extractions",
            "in_range": "in-range",
            "cohort_pass": "cohort-pass",
        }
        for key, label in labels.items():
            if key in funnel:
                lines.append(f"  {label + ':':<24}{funnel[key]:>8}")
        lines.append("")

    extract = manifest.stages.get("extract")
    if extract and extract.status == "completed":
        c = extract.counts
        lines.append("extraction")
        lines.append(f"  backend calls: {c.get('backend_calls', 0)}, "
                     f"cache hits: {c.get('cache_hits', 0)}, "
                     f"retries: {c.get('retries', 0)}, "
                     f"empty answers: {c.get('empty_answers', 0)}")
        lines.append("")

    validate = manifest.stages.get("validate")
    if validate and validate.status == "completed" and paths["review"].is_file():
        review = json.loads(paths["review"].read_text(encoding="utf-8"))
        grounding = review.get("grounding", {})
        lines.append("grounding (complete extractions)")
        lines.append(f"  fully grounded: {grounding.get('n_fully_grounded', 0)}"
                     f" / {grounding.get('n_complete', 0)}")
        lines.append(f"  with unsupported fields: {grounding.get('n_with_unsupported', 0)}")
        hists = grounding.get("field_histograms", {})
        if hists:
            lines.append("  per-field verdicts:")
            for name in sorted(hists):
                parts = ", ".join(f"{k}={v}" for k, v in sorted(hists[name].items()))
                lines.append(f"    {name}: {parts}")
        lines.append("")

    analyze = manifest.stages.get("analyze")
    if analyze and analyze.status == "completed" and paths["comparison"].is_file():
        comparison = json.loads(paths["comparison"].read_text(encoding="utf-8"))
        lines.append("analysis")
        for sex in ("male", "female"):
            side = comparison.get(sex)
            if side:
                lines.append(
                    f"  {sex} peak: SBP {fmt6(side['peak_sbp'])} mmHg, "
                    f"DBP {fmt6(side['peak_dbp'])} mmHg "
                    f"(k={side['k']}, {side['n_points']} studies)"
                )
        delta = comparison.get("delta")
        if delta:
            lines.append(
                f"  male - female peak delta: SBP {delta['peak_sbp']:+.6g} mmHg, "
                f"DBP {delta['peak_dbp']:+.6g} mmHg"
            )
        lines.append("")

    return "\n".join(lines)
