"""Corpus -> fragments -> extraction -> resolution -> refinement -> graph file.

Each stage can also run on its own (see :mod:`histkg.cli`). With a state
directory, finished fragment extractions are kept on disk and a manifest
records which stages completed, so a crashed run resumes without calling
the model again for fragments it already has.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from .chunker import ChunkConfig, EmptyDocument, Fragment, split_document
from .evaluator import ComparisonReport, align_deterministic, align_with_model, report
from .extractor import DEFAULT_CATALOG, FragmentExtraction, PromptCatalog, extract_fragment
from .gateway import Backend, Gateway, GatewayConfig, HttpBackend, load_mock_fixtures
from .graphfile import GraphFile, dumps_json, write_text
from .model import Entity, KnowledgeGraph, Relation
from .refinery import RefinementReport, refine
from .resolver import MergeMap, ResolutionReport, resolve_graph

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class CorpusEmpty(PipelineError):
    pass


def log_event(event: str, **fields: object) -> None:
    log.info(json.dumps({"event": event, **fields}, sort_keys=True, default=str))


@dataclass
class PipelineConfig:
    corpus_dir: str = "corpus"
    output_path: str = "graph.json"
    chunk: ChunkConfig = field(default_factory=ChunkConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    backend: str = "http"
    mock_fixtures: str | None = None
    resolution_mode: str = "deterministic"
    parallelism: int = 4
    state_dir: str | None = None
    debug: bool = False
    corpus_glob: str = "*.txt"

    def validate(self) -> None:
        if self.backend not in ("http", "mock"):
            raise ValueError(f"backend must be 'http' or 'mock', got {self.backend!r}")
        if self.backend == "mock" and not self.mock_fixtures:
            raise ValueError("the mock backend needs mock_fixtures")
        if self.resolution_mode not in ("deterministic", "model-assisted"):
            raise ValueError(f"unknown resolution_mode {self.resolution_mode!r}")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not Path(self.corpus_dir).is_dir():
            raise ValueError(f"corpus_dir {self.corpus_dir!r} is not a directory")

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        data = dict(data)
        if isinstance(data.get("chunk"), dict):
            data["chunk"] = ChunkConfig(**data["chunk"])
        if isinstance(data.get("gateway"), dict):
            data["gateway"] = GatewayConfig(**data["gateway"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def digest(self, catalog: PromptCatalog = DEFAULT_CATALOG) -> str:
        """Hash of everything that shapes the output; paths are left out."""
        gw = asdict(self.gateway)
        for key in ("cache_dir", "api_key_env", "api_base_url", "parallelism", "retry_backoff", "request_timeout"):
            gw.pop(key)
        payload = {
            "chunk": asdict(self.chunk),
            "gateway": gw,
            "backend": self.backend,
            "resolution_mode": self.resolution_mode,
            "prompts": catalog.digest(),
            "mock_fixtures": _file_digest(self.mock_fixtures) if self.mock_fixtures else None,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- corpus and chunking ----------------------------------------------------


def load_corpus(corpus_dir: str | Path, pattern: str = "*.txt") -> list[tuple[str, str]]:
    """(doc_id, text) pairs sorted by doc_id; doc_id is the path relative to the root."""
    root = Path(corpus_dir)
    docs = []
    for path in sorted(root.rglob(pattern)):
        if path.is_file():
            docs.append((path.relative_to(root).as_posix(), path.read_text(encoding="utf-8")))
    docs.sort()
    return docs


def corpus_digest(docs: Iterable[tuple[str, str]]) -> str:
    h = hashlib.sha256()
    for doc_id, text in sorted(docs):
        h.update(doc_id.encode("utf-8") + b"\0")
        h.update(hashlib.sha256(text.encode("utf-8")).digest())
    return h.hexdigest()


def chunk_corpus(docs: Iterable[tuple[str, str]], cfg: ChunkConfig) -> list[Fragment]:
    fragments = []
    for doc_id, text in docs:
        try:
            fragments.extend(split_document(doc_id, text, cfg))
        except EmptyDocument:
            log.warning(json.dumps({"event": "document_skipped", "doc_id": doc_id, "reason": "empty"}))
    return fragments


# -- extraction ---------------------------------------------------------------


class StageState:
    """Manifest plus per-fragment extraction files under a state directory."""

    def __init__(self, root: str | Path, config_digest: str):
        self.root = Path(root)
        self.config_digest = config_digest
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "extractions").mkdir(exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = {"config_digest": config_digest, "stages": {}}
        if self.manifest_path.exists():
            existing = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            if existing.get("config_digest") == config_digest:
                self.manifest = existing
            else:
                log_event("state_reset", reason="config changed")

    def _fragment_path(self, fragment: Fragment) -> Path:
        key = hashlib.sha256(
            f"{self.config_digest}\0{fragment.origin_reference}\0{fragment.text}".encode("utf-8")
        ).hexdigest()
        return self.root / "extractions" / f"{key}.json"

    def load(self, fragment: Fragment) -> FragmentExtraction | None:
        path = self._fragment_path(fragment)
        if not path.exists():
            return None
        try:
            return FragmentExtraction.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, KeyError):
            return None

    def save(self, fragment: Fragment, result: FragmentExtraction) -> None:
        write_text(self._fragment_path(fragment), dumps_json(result.to_dict()))

    def mark(self, stage: str, **info: object) -> None:
        self.manifest["stages"][stage] = {"done": True, **info}
        write_text(self.manifest_path, dumps_json(self.manifest))


def extract_all(
    fragments: list[Fragment],
    gateway: Gateway,
    parallelism: int = 4,
    state: StageState | None = None,
    catalog: PromptCatalog = DEFAULT_CATALOG,
) -> list[FragmentExtraction]:
    def work(fragment: Fragment) -> FragmentExtraction:
        if state is not None:
            done = state.load(fragment)
            if done is not None:
                return done
        result = extract_fragment(fragment, gateway, catalog)
        if state is not None:
            state.save(fragment, result)
        log_event(
            "fragment_extracted",
            fragment=fragment.origin_reference,
            entities=len(result.entities),
            relations=len(result.relations),
        )
        return result

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(work, fragments))


def assemble(extractions: Iterable[FragmentExtraction]) -> KnowledgeGraph:
    """Give fragment-local entities and relations graph-wide ids, in fragment order."""
    graph = KnowledgeGraph()
    next_entity, next_relation = 1, 1
    for ex in extractions:
        local: dict[int, int] = {}
        for e in ex.entities:
            local[e.id] = next_entity
            graph.add_entity(Entity(next_entity, e.kinds, e.attributes, e.summaries, e.origin_references))
            next_entity += 1
        for r in ex.relations:
            graph.add_relation(
                Relation(next_relation, r.kind, local[r.from_id], local[r.to_id], r.nature, r.date, r.summaries, r.origin_references)
            )
            next_relation += 1
    return graph


def extraction_audit(extractions: Iterable[FragmentExtraction]) -> dict:
    return {ex.origin_reference: {"counts": ex.stats, "calls_skipped": ex.calls_skipped} for ex in extractions}


# -- wiring -------------------------------------------------------------------


def make_gateway(cfg: PipelineConfig, backend: Backend | None = None) -> Gateway:
    gw_cfg = cfg.gateway
    if gw_cfg.parallelism != cfg.parallelism:
        gw_cfg = GatewayConfig(**{**asdict(gw_cfg), "parallelism": cfg.parallelism})
    if backend is None:
        if cfg.backend == "mock":
            backend = load_mock_fixtures(cfg.mock_fixtures)
        else:
            backend = HttpBackend.from_config(gw_cfg)
    return Gateway(backend, gw_cfg)


def audit_path(output_path: str | Path) -> Path:
    p = Path(output_path)
    return p.with_name(p.stem + ".audit.json")


@dataclass
class PipelineResult:
    graph_file: GraphFile
    merge_map: MergeMap
    resolution: ResolutionReport
    refinement: RefinementReport
    fragments: list[Fragment]
    gateway: Gateway

    def audit(self) -> dict:
        return {
            "merge_map": self.merge_map.to_dict(),
            "resolution": self.resolution.to_dict(),
            "refinement": self.refinement.to_dict(),
        }


def run_pipeline(cfg: PipelineConfig, backend: Backend | None = None, gateway: Gateway | None = None) -> PipelineResult:
    cfg.validate()
    config_digest = cfg.digest()
    docs = load_corpus(cfg.corpus_dir, cfg.corpus_glob)
    if not docs:
        raise CorpusEmpty(f"no {cfg.corpus_glob} files under {cfg.corpus_dir}")
    fragments = chunk_corpus(docs, cfg.chunk)
    if not fragments:
        raise CorpusEmpty(f"every document under {cfg.corpus_dir} is empty")
    log_event("chunked", documents=len(docs), fragments=len(fragments))
    provenance = {"corpus_digest": corpus_digest(docs), "config_digest": config_digest}

    gateway = gateway or make_gateway(cfg, backend)
    state = StageState(cfg.state_dir, config_digest) if cfg.state_dir else None
    if state:
        state.mark("chunk", fragments=len(fragments))
    extractions = extract_all(fragments, gateway, cfg.parallelism, state)
    extracted = assemble(extractions)
    extracted.validate()
    if state:
        state.mark("extract", entities=len(extracted.entities), relations=len(extracted.relations))
    log_event("extracted", entities=len(extracted.entities), relations=len(extracted.relations))
    out_dir = Path(cfg.output_path).parent
    stem = Path(cfg.output_path).stem
    if cfg.debug:
        write_text(out_dir / f"{stem}.stage-extracted.json", GraphFile(extracted, provenance).dumps())
        write_text(out_dir / f"{stem}.stage-extraction-audit.json", dumps_json(extraction_audit(extractions)))

    resolved, merge_map, resolution = resolve_graph(extracted, cfg.resolution_mode, gateway)
    resolved.validate()
    if state:
        state.mark("resolve", entities=len(resolved.entities), relations=len(resolved.relations))
    log_event("resolved", **resolution.to_dict())
    if cfg.debug:
        write_text(out_dir / f"{stem}.stage-resolved.json", GraphFile(resolved, provenance).dumps())

    refinement = RefinementReport()
    refined = refine(resolved, report=refinement)
    refined.validate()
    if state:
        state.mark("refine", entities=len(refined.entities), relations=len(refined.relations))
    log_event(
        "refined",
        loops_removed=refinement.loops_removed,
        removed_by_rule=refinement.removed_by_rule,
        collisions_merged=refinement.collisions_merged,
        events_merged=refinement.events_merged,
        iterations=refinement.iterations,
    )

    graph_file = GraphFile(refined, provenance)
    result = PipelineResult(graph_file, merge_map, resolution, refinement, fragments, gateway)
    graph_file.write(cfg.output_path)
    write_text(audit_path(cfg.output_path), dumps_json(result.audit()))
    if state:
        state.mark("export", output=Path(cfg.output_path).name)
    log_event("written", path=str(cfg.output_path), entities=len(refined.entities), relations=len(refined.relations))
    return result


def run_evaluation(
    auto_path: str | Path,
    gold_path: str | Path,
    mode: str = "deterministic",
    gateway: Gateway | None = None,
    out_path: str | Path | None = None,
) -> ComparisonReport:
    auto = GraphFile.read(auto_path).graph
    gold = GraphFile.read(gold_path).graph
    if mode == "deterministic":
        alignment = align_deterministic(auto, gold)
    elif mode == "model-assisted":
        if gateway is None:
            raise ValueError("model-assisted evaluation needs a gateway")
        alignment = align_with_model(auto, gold, gateway)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    rep = report(auto, gold, alignment)
    if out_path is not None:
        write_text(out_path, dumps_json(rep.to_dict()))
        write_text(Path(out_path).with_suffix(".txt"), rep.render())
    log_event("evaluated", **{k.value: vars(c) for k, c in rep.counts.items()})
    return rep
