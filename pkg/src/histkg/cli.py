"""Command line entry point: ``histkg <pipeline|chunk|extract|resolve|refine|evaluate>``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then flags. The API key is only ever read from the
environment variable named by ``api_key_env``.

Exit status: 0 on success, 1 on usage errors, 2 when a stage fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .chunker import Fragment
from .extractor import ExtractionError
from .gateway import GatewayError
from .graphfile import GraphFile, GraphFileError, dumps_json, write_text
from .ontology import OntologyError
from .pipeline import (
    PipelineConfig,
    PipelineError,
    assemble,
    audit_path,
    chunk_corpus,
    corpus_digest,
    extract_all,
    extraction_audit,
    load_corpus,
    make_gateway,
    run_evaluation,
    run_pipeline,
)
from .refinery import RefinementReport, refine
from .resolver import resolve_graph

log = logging.getLogger("histkg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# flag dest -> (section, field) in PipelineConfig
_FLAG_FIELDS = {
    "corpus": (None, "corpus_dir"),
    "out": (None, "output_path"),
    "backend": (None, "backend"),
    "mock_fixtures": (None, "mock_fixtures"),
    "resolution_mode": (None, "resolution_mode"),
    "parallelism": (None, "parallelism"),
    "state_dir": (None, "state_dir"),
    "debug": (None, "debug"),
    "glob": (None, "corpus_glob"),
    "target_size": ("chunk", "target_size"),
    "overlay_fraction": ("chunk", "overlay_fraction"),
    "api_base_url": ("gateway", "api_base_url"),
    "api_key_env": ("gateway", "api_key_env"),
    "model": ("gateway", "primary_model"),
    "fallback_model": ("gateway", "fallback_model"),
    "timeout": ("gateway", "request_timeout"),
    "retries": ("gateway", "max_retries_before_fallback"),
    "retry_backoff": ("gateway", "retry_backoff"),
    "cache_dir": ("gateway", "cache_dir"),
}


def _add_chunk_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target-size", type=int, help="fragment size in characters (default 5000)")
    p.add_argument("--overlay-fraction", type=float, help="overlay as a fraction of the size (default 0.1)")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["http", "mock"])
    p.add_argument("--mock-fixtures", help="fixture file for the mock backend")
    p.add_argument("--api-base-url")
    p.add_argument("--api-key-env", help="environment variable holding the API key")
    p.add_argument("--model", help="primary model id")
    p.add_argument("--fallback-model")
    p.add_argument("--timeout", type=float, help="per-request timeout in seconds")
    p.add_argument("--retries", type=int, help="attempts per model before falling back")
    p.add_argument("--retry-backoff", type=float)
    p.add_argument("--cache-dir")
    p.add_argument("--parallelism", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="histkg", description="Build knowledge graphs from historical documents.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pipeline", help="full run from corpus to refined graph")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--resolution-mode", choices=["deterministic", "model-assisted"])
    p.add_argument("--state-dir", help="keep per-fragment results here to resume a crashed run")
    p.add_argument("--glob", help="corpus file pattern (default *.txt)")
    p.add_argument("--debug", action="store_true", default=None, help="also dump intermediate stages")
    _add_chunk_flags(p)
    _add_model_flags(p)

    p = sub.add_parser("chunk", help="split a corpus into fragments")
    p.add_argument("--corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--glob")
    _add_chunk_flags(p)

    p = sub.add_parser("extract", help="extract entities and relations from fragments")
    p.add_argument("--fragments", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)

    p = sub.add_parser("resolve", help="merge duplicates in an extracted graph")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution-mode", choices=["deterministic", "model-assisted"])
    _add_model_flags(p)

    p = sub.add_parser("refine", help="post-process a resolved graph")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-cycle-len", type=int, default=5)

    p = sub.add_parser("evaluate", help="compare a graph with a gold standard")
    p.add_argument("--auto", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--mode", choices=["deterministic", "model-assisted"], default="deterministic")
    p.add_argument("--out", help="report file (JSON); a .txt table is written next to it")
    _add_model_flags(p)
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    data = asdict(PipelineConfig())
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        for key, value in overrides.items():
            if key in ("chunk", "gateway") and isinstance(value, dict):
                data[key].update(value)
            else:
                data[key] = value
    for dest, (section, name) in _FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        (data[section] if section else data)[name] = value
    try:
        return PipelineConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root = logging.getLogger("histkg")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def cmd_pipeline(args, cfg: PipelineConfig) -> None:
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    result = run_pipeline(cfg)
    g = result.graph_file.graph
    print(f"wrote {cfg.output_path}: {len(g.entities)} entities, {len(g.relations)} relations")


def cmd_chunk(args, cfg: PipelineConfig) -> None:
    if not Path(cfg.corpus_dir).is_dir():
        raise UsageError(f"corpus_dir {cfg.corpus_dir!r} is not a directory")
    docs = load_corpus(cfg.corpus_dir, cfg.corpus_glob)
    fragments = chunk_corpus(docs, cfg.chunk)
    payload = {
        "corpus_digest": corpus_digest(docs),
        "chunk": asdict(cfg.chunk),
        "fragments": [f.to_dict() for f in fragments],
    }
    write_text(args.out, dumps_json(payload))
    print(f"wrote {args.out}: {len(fragments)} fragments from {len(docs)} documents")


def _needs_backend(cfg: PipelineConfig) -> None:
    if cfg.backend == "mock" and not cfg.mock_fixtures:
        raise UsageError("--backend mock needs --mock-fixtures")


def cmd_extract(args, cfg: PipelineConfig) -> None:
    _needs_backend(cfg)
    data = json.loads(Path(args.fragments).read_text(encoding="utf-8"))
    fragments = [Fragment.from_dict(f) for f in data["fragments"]]
    gateway = make_gateway(cfg)
    extractions = extract_all(fragments, gateway, cfg.parallelism)
    graph = assemble(extractions)
    graph.validate()
    GraphFile(graph, {"corpus_digest": data.get("corpus_digest"), "config_digest": cfg.digest()}).write(args.out)
    write_text(audit_path(args.out), dumps_json({"extraction": extraction_audit(extractions)}))
    print(f"wrote {args.out}: {len(graph.entities)} entities, {len(graph.relations)} relations")


def cmd_resolve(args, cfg: PipelineConfig) -> None:
    source = GraphFile.read(args.input)
    gateway = None
    if cfg.resolution_mode == "model-assisted":
        _needs_backend(cfg)
        gateway = make_gateway(cfg)
    graph, merge_map, rep = resolve_graph(source.graph, cfg.resolution_mode, gateway)
    graph.validate()
    GraphFile(graph, source.provenance).write(args.out)
    write_text(audit_path(args.out), dumps_json({"merge_map": merge_map.to_dict(), "resolution": rep.to_dict()}))
    print(f"wrote {args.out}: {len(graph.entities)} entities, {len(graph.relations)} relations")


def cmd_refine(args, cfg: PipelineConfig) -> None:
    source = GraphFile.read(args.input)
    rep = RefinementReport()
    graph = refine(source.graph, args.max_cycle_len, rep)
    graph.validate()
    GraphFile(graph, source.provenance).write(args.out)
    write_text(audit_path(args.out), dumps_json({"refinement": rep.to_dict()}))
    print(f"wrote {args.out}: {len(graph.entities)} entities, {len(graph.relations)} relations")


def cmd_evaluate(args, cfg: PipelineConfig) -> None:
    gateway = None
    if args.mode == "model-assisted":
        _needs_backend(cfg)
        gateway = make_gateway(cfg)
    rep = run_evaluation(args.auto, args.gold, args.mode, gateway, args.out)
    sys.stdout.write(rep.render())


COMMANDS = {
    "pipeline": cmd_pipeline,
    "chunk": cmd_chunk,
    "extract": cmd_extract,
    "resolve": cmd_resolve,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"histkg: error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, ExtractionError, GatewayError, GraphFileError, OntologyError, OSError, ValueError) as exc:
        log.error(json.dumps({"event": "failed", "command": args.command, "error": str(exc)}))
        print(f"histkg: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
