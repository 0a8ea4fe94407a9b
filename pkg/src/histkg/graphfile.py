"""Versioned JSON graph file shared by pipeline output and gold standards."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .model import KnowledgeGraph
from .ontology import OntologyError

FORMAT_VERSION = "1.0"


class GraphFileError(ValueError):
    pass


class FormatVersionMismatch(GraphFileError):
    pass


@dataclass
class GraphFile:
    graph: KnowledgeGraph
    provenance: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    def to_dict(self) -> dict:
        prov = {"corpus_digest": None, "config_digest": None, "tool_version": __version__}
        prov.update(self.provenance)
        return {"format_version": self.format_version, "provenance": prov, **self.graph.to_dict()}

    def dumps(self) -> str:
        return dumps_json(self.to_dict())

    def write(self, path: str | Path) -> None:
        write_text(path, self.dumps())

    @classmethod
    def from_dict(cls, data: dict, validate: bool = True) -> GraphFile:
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatVersionMismatch(f"graph file format {version!r}, expected {FORMAT_VERSION!r}")
        try:
            graph = KnowledgeGraph.from_dict(data)
            if validate:
                graph.validate()
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, OntologyError):
                raise
            raise GraphFileError(f"malformed graph file: {exc}") from exc
        return cls(graph, dict(data.get("provenance", {})), version)

    @classmethod
    def read(cls, path: str | Path, validate: bool = True) -> GraphFile:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise GraphFileError(f"{path}: not JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise GraphFileError(f"{path}: top level must be an object")
        return cls.from_dict(data, validate)


def dumps_json(data: object) -> str:
    return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n"


def write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)
