"""Split documents into bounded fragments with overlay context.

Cuts land on a line break or a sentence end (``.``, ``?`` or ``!`` followed by
whitespace). Offsets count characters, so the cores of a document tile it
exactly and every fragment can be traced back with ``doc_id#index``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

_CUT = re.compile(r"\n|[.?!]\s")


class EmptyDocument(ValueError):
    pass


@dataclass(frozen=True)
class ChunkConfig:
    target_size: int = 5000
    overlay_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.target_size < 100:
            raise ValueError("target_size must be at least 100 characters")
        if not 0 <= self.overlay_fraction < 0.5:
            raise ValueError("overlay_fraction must be in [0, 0.5)")

    @property
    def overlay_size(self) -> int:
        return int(self.target_size * self.overlay_fraction)


@dataclass(frozen=True)
class Fragment:
    doc_id: str
    index: int
    core_start: int
    core_end: int
    text: str
    prefix_len: int = 0
    suffix_len: int = 0

    @property
    def origin_reference(self) -> str:
        return f"{self.doc_id}#{self.index}"

    @property
    def core(self) -> str:
        return self.text[self.prefix_len:len(self.text) - self.suffix_len]

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "index": self.index,
            "core_start": self.core_start,
            "core_end": self.core_end,
            "prefix_len": self.prefix_len,
            "suffix_len": self.suffix_len,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Fragment:
        return cls(**{k: data[k] for k in ("doc_id", "index", "core_start", "core_end", "text", "prefix_len", "suffix_len")})


def normalize_newlines(text: str) -> str:
    return text.replace("\r\n", "\n").replace("\r", "\n")


def find_cut(text: str, start: int, target_size: int) -> tuple[int, bool]:
    """Return ``(cut, hard)`` for the core beginning at *start*.

    The cut is the last boundary in ``[start + target_size // 2, start + target_size]``;
    ``hard`` is True when no boundary exists there and the core is cut blind.
    """
    hi = start + target_size
    lo = start + target_size // 2
    best = -1
    # a boundary match ends at most 2 chars after it begins
    for m in _CUT.finditer(text, max(start, lo - 2), hi):
        if lo <= m.end() <= hi:
            best = m.end()
    if best == -1:
        return hi, True
    return best, False


def split_document(doc_id: str, text: str, cfg: ChunkConfig = ChunkConfig()) -> list[Fragment]:
    text = normalize_newlines(text)
    if not text.strip():
        raise EmptyDocument(f"document {doc_id!r} is empty")

    cores: list[tuple[int, int]] = []
    start = 0
    while len(text) - start > cfg.target_size:
        cut, _ = find_cut(text, start, cfg.target_size)
        cores.append((start, cut))
        start = cut
    cores.append((start, len(text)))

    ov = cfg.overlay_size
    fragments = []
    for index, (cs, ce) in enumerate(cores):
        ps = max(0, cs - ov)
        se = min(len(text), ce + ov)
        fragments.append(
            Fragment(
                doc_id=doc_id,
                index=index,
                core_start=cs,
                core_end=ce,
                text=text[ps:se],
                prefix_len=cs - ps,
                suffix_len=se - ce,
            )
        )
    return fragments
