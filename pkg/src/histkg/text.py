"""Name normalization and token containment shared by resolution and evaluation."""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from datetime import date

_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"[a-z0-9]+")
_DATE = re.compile(r"^(\d{4})(?:-(\d{2})(?:-(\d{2}))?)?$")


def normalize_text(value: str) -> str:
    """Lowercase, fold accents (NFKD minus combining marks), collapse whitespace."""
    decomposed = unicodedata.normalize("NFKD", value)
    stripped = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    return _WS.sub(" ", stripped.lower()).strip()


def name_tokens(name: str) -> list[str]:
    return _TOKEN.findall(normalize_text(name))


def _token_fits(small: str, big: str, initials: bool) -> bool:
    if small == big:
        return True
    return initials and len(small) == 1 and big.startswith(small)


def tokens_contained(small: list[str], big: list[str], *, initials: bool = False) -> bool:
    """True if every token of *small* can be matched to a distinct token of *big*.

    This is multiset inclusion; with ``initials`` a one-letter token also
    matches any token starting with that letter ("j perez" fits "juan perez").
    """
    if len(small) > len(big):
        return False
    if not initials:
        return not (Counter(small) - Counter(big))
    # bipartite matching by augmenting paths; names are a handful of tokens
    owner: dict[int, int] = {}

    def augment(i: int, seen: set[int]) -> bool:
        for j, token in enumerate(big):
            if j in seen or not _token_fits(small[i], token, True):
                continue
            seen.add(j)
            if j not in owner or augment(owner[j], seen):
                owner[j] = i
                return True
        return False

    return all(augment(i, set()) for i in range(len(small)))


def names_related(a: list[str], b: list[str], *, initials: bool = False) -> bool:
    """Equal names, or one name's tokens contained in the other's."""
    if not a or not b:
        return False
    return a == b or tokens_contained(a, b, initials=initials) or tokens_contained(b, a, initials=initials)


def normalize_date(value: object) -> str | None:
    """Accept ``yyyy``, ``yyyy-mm`` or ``yyyy-mm-dd``; anything else is undefined."""
    if not isinstance(value, str):
        if isinstance(value, int) and 1000 <= value <= 9999:
            return f"{value:04d}"
        return None
    m = _DATE.match(value.strip())
    if not m:
        return None
    year, month, day = m.groups()
    try:
        date(int(year), int(month or 1), int(day or 1))
    except ValueError:
        return None
    return m.group(0)
