"""Stream PubMed/MEDLINE baseline XML into abstract records and filter them.

Baseline files are gzip-compressed citation sets. Parsing is streaming
(one citation in memory at a time); citations without an abstract are
skipped and counted. The two-stage keyword refinement keeps records whose
abstract mentions a stage-1 term ("blood pressure") and a stage-2 unit
term ("mmHg" / "mm Hg").
"""

from __future__ import annotations

import gzip
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Optional, Sequence, Union

import requests

from bpminer.errors import IngestError

logger = logging.getLogger(__name__)

DEFAULT_STAGE1_TERMS = ("blood pressure",)
DEFAULT_STAGE2_TERMS = ("mmHg", "mm Hg")


@dataclass(frozen=True)
class AbstractRecord:
    """One publication: identifier, title, and plain abstract text."""

    pmid: str
    title: str
    abstract_text: str
    source_file: str = ""

    def to_dict(self) -> dict:
        return {
            "pmid": self.pmid,
            "title": self.title,
            "abstract_text": self.abstract_text,
            "source_file": self.source_file,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AbstractRecord":
        return cls(
            pmid=d["pmid"],
            title=d.get("title", ""),
            abstract_text=d["abstract_text"],
            source_file=d.get("source_file", ""),
        )


@dataclass
class KeywordStageConfig:
    """Two-stage keyword refinement settings."""

    stage1_terms: Sequence[str] = DEFAULT_STAGE1_TERMS
    stage2_terms: Sequence[str] = DEFAULT_STAGE2_TERMS
    case_insensitive: bool = True

    def __post_init__(self):
        if not self.stage1_terms or not self.stage2_terms:
            raise ValueError("keyword term lists must be non-empty")


@dataclass
class ParseStats:
    """Per-file parse accounting."""

    n_citations: int = 0
    n_yielded: int = 0
    n_no_abstract: int = 0
    n_no_pmid: int = 0

    def __add__(self, other: "ParseStats") -> "ParseStats":
        return ParseStats(
            self.n_citations + other.n_citations,
            self.n_yielded + other.n_yielded,
            self.n_no_abstract + other.n_no_abstract,
            self.n_no_pmid + other.n_no_pmid,
        )


@dataclass
class FilterStats:
    """Keyword-funnel accounting; merges associatively across files."""

    n_input: int = 0
    n_stage1: int = 0
    n_stage2: int = 0

    def __add__(self, other: "FilterStats") -> "FilterStats":
        return FilterStats(
            self.n_input + other.n_input,
            self.n_stage1 + other.n_stage1,
            self.n_stage2 + other.n_stage2,
        )


def _collapse_ws(text: str) -> str:
    return " ".join(text.split())


def _element_text(elem: Optional[ET.Element]) -> str:
    if elem is None:
        return ""
    return _collapse_ws("".join(elem.itertext()))


def _citation_record(citation: ET.Element, source_name: str, stats: ParseStats):
    stats.n_citations += 1
    pmid = (citation.findtext("PMID") or "").strip()
    if not pmid:
        stats.n_no_pmid += 1
        return None
    article = citation.find("Article")
    title = _element_text(article.find("ArticleTitle")) if article is not None else ""
    sections = []
    if article is not None:
        for sect in article.findall("Abstract/AbstractText"):
            text = _element_text(sect)
            if text:
                sections.append(text)
    abstract = " ".join(sections)
    if not abstract:
        stats.n_no_abstract += 1
        return None
    stats.n_yielded += 1
    return AbstractRecord(pmid=pmid, title=title, abstract_text=abstract,
                          source_file=source_name)


def parse_baseline_stream(
    source: Union[str, Path, IO[bytes]],
    source_name: Optional[str] = None,
    stats: Optional[ParseStats] = None,
) -> Iterator[AbstractRecord]:
    """Yield one AbstractRecord per citation that has a non-empty abstract.

    ``source`` is a path to a gzip-compressed baseline XML file or a binary
    stream of one. Multi-section abstracts are joined with single spaces in
    document order. Malformed gzip or XML raises IngestError naming the
    source and position; citations without an abstract are skipped and
    counted in ``stats``.
    """
    if stats is None:
        stats = ParseStats()
    if isinstance(source, (str, Path)):
        name = source_name or str(source)
        stream = gzip.open(source, "rb")
    else:
        name = source_name or getattr(source, "name", "<stream>")
        stream = gzip.GzipFile(fileobj=source, mode="rb")

    try:
        events = ET.iterparse(stream, events=("start", "end"))
        _, root = next(events)
        for event, elem in events:
            if event != "end" or elem.tag != "MedlineCitation":
                continue
            record = _citation_record(elem, name, stats)
            elem.clear()
            # Drop completed citations from the tree so memory stays
            # bounded by a single citation regardless of file size.
            root.clear()
            if record is not None:
                yield record
    except ET.ParseError as exc:
        raise IngestError(name, f"malformed XML: {exc}", position=exc.position) from exc
    except (gzip.BadGzipFile, EOFError, OSError) as exc:
        raise IngestError(name, f"bad gzip stream: {exc}") from exc
    except StopIteration:
        return  # empty document
    finally:
        stream.close()


def keyword_match(record: AbstractRecord, terms: Sequence[str],
                  case_insensitive: bool = True) -> bool:
    """True iff any term occurs as a substring of the abstract text.

    Titles are deliberately excluded; matching is against the plain
    abstract body only.
    """
    text = record.abstract_text
    if case_insensitive:
        text = text.casefold()
        return any(term.casefold() in text for term in terms)
    return any(term in text for term in terms)


def filter_corpus(
    records: Iterable[AbstractRecord],
    config: Optional[KeywordStageConfig] = None,
) -> tuple[list[AbstractRecord], FilterStats]:
    """Keep records passing stage 1 AND stage 2, preserving input order."""
    if config is None:
        config = KeywordStageConfig()
    stats = FilterStats()
    survivors: list[AbstractRecord] = []
    for record in records:
        stats.n_input += 1
        if not keyword_match(record, config.stage1_terms, config.case_insensitive):
            continue
        stats.n_stage1 += 1
        if not keyword_match(record, config.stage2_terms, config.case_insensitive):
            continue
        stats.n_stage2 += 1
        survivors.append(record)
    return survivors, stats


def fetch_files(urls: Iterable[str], dest_dir: Union[str, Path],
                skip_existing: bool = True, timeout: float = 60.0) -> list[Path]:
    """Download baseline files by URL list; returns the local paths."""
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for url in urls:
        name = url.rstrip("/").rsplit("/", 1)[-1]
        target = dest_dir / name
        if skip_existing and target.exists():
            logger.info("fetch: %s already present, skipping", name)
            paths.append(target)
            continue
        logger.info("fetch: downloading %s", url)
        resp = requests.get(url, stream=True, timeout=timeout)
        resp.raise_for_status()
        partial = target.with_suffix(target.suffix + ".part")
        with partial.open("wb") as fh:
            for chunk in resp.iter_content(chunk_size=1 << 16):
                fh.write(chunk)
        partial.replace(target)
        paths.append(target)
    return paths
