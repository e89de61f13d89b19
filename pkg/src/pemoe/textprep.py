"""Caption preprocessing: sentence splitting, directional-language removal,
and a pluggable caption refiner.

Captions describing a scene's absolute orientation ("to the north of ...")
become wrong once the underlying imagery is rotated or flipped, so whole
sentences containing directional phrases are dropped. Matching is
case-insensitive and word-bounded: the keyword "north" never fires inside
"Northgate".
"""

from __future__ import annotations

import re
import shlex
import subprocess
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

from .corpus import Corpus, Platform


class RefinerError(RuntimeError):
    """External refiner command failed or produced no output."""


@dataclass(frozen=True)
class KeywordList:
    phrases: tuple[str, ...]

    def __post_init__(self) -> None:
        seen = set()
        for p in self.phrases:
            if p != p.lower():
                raise ValueError(f"keyword {p!r} must be lowercase")
            if p in seen:
                raise ValueError(f"duplicate keyword {p!r}")
            seen.add(p)


@dataclass(frozen=True)
class SanitizeReport:
    original_sentence_count: int
    removed_sentence_count: int
    removed_sentences: tuple[str, ...]


_TERMINATORS = ".!?"


def _segment(text: str) -> tuple[str, list[tuple[str, str]]]:
    """Split into (leading_whitespace, [(sentence, trailing_whitespace), ...]).

    A sentence ends at a terminator character followed by whitespace or end
    of string; the terminator stays with its sentence. Concatenating the
    leading whitespace and all (sentence, whitespace) pairs reproduces the
    input exactly.
    """
    i = 0
    n = len(text)
    while i < n and text[i].isspace():
        i += 1
    lead = text[:i]
    segments: list[tuple[str, str]] = []
    start = i
    while i < n:
        if text[i] in _TERMINATORS and (i + 1 == n or text[i + 1].isspace()):
            sentence = text[start : i + 1]
            j = i + 1
            while j < n and text[j].isspace():
                j += 1
            segments.append((sentence, text[i + 1 : j]))
            i = j
            start = j
        else:
            i += 1
    if start < n:
        segments.append((text[start:], ""))
    return lead, segments


def split_sentences(text: str) -> list[str]:
    """Split on ``.``, ``!``, ``?`` followed by whitespace or end of string."""
    _, segments = _segment(text)
    return [s for s, _ in segments]


def default_keyword_list() -> KeywordList:
    return KeywordList(
        (
            "north",
            "south",
            "east",
            "west",
            "northeast",
            "northwest",
            "southeast",
            "southwest",
            "left side",
            "right side",
            "to the left",
            "to the right",
            "leftmost",
            "rightmost",
            "upper-left",
            "upper-right",
            "lower-left",
            "lower-right",
        )
    )


@lru_cache(maxsize=32)
def _compiled(phrases: tuple[str, ...]) -> list[re.Pattern[str]]:
    patterns = []
    for phrase in phrases:
        words = phrase.split()
        body = r"\s+".join(re.escape(w) for w in words)
        patterns.append(re.compile(rf"\b{body}\b", re.IGNORECASE))
    return patterns


def sanitize_directional(caption: str, keywords: KeywordList | None = None) -> tuple[str, SanitizeReport]:
    """Drop every sentence containing a directional keyword phrase.

    Kept sentences are rejoined with single spaces. Single-word keywords
    match on word boundaries; multi-word phrases match as contiguous runs
    with flexible whitespace.
    """
    if keywords is None:
        keywords = default_keyword_list()
    if not keywords.phrases:
        raise ValueError("keyword list is empty; sanitization needs at least one phrase")
    patterns = _compiled(keywords.phrases)
    sentences = split_sentences(caption)
    kept: list[str] = []
    removed: list[str] = []
    for s in sentences:
        if any(p.search(s) for p in patterns):
            removed.append(s)
        else:
            kept.append(s)
    report = SanitizeReport(len(sentences), len(removed), tuple(removed))
    return " ".join(kept), report


def load_keywords(path: str | Path) -> KeywordList:
    """Read one phrase per line; ``#`` starts a comment, blanks are skipped."""
    phrases = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        phrases.append(line.lower())
    return KeywordList(tuple(phrases))


# ---------------------------------------------------------------------------
# Caption refinement strategies
# ---------------------------------------------------------------------------

_STUB_PREFIXES = {
    Platform.SATELLITE: "aerial overview:",
    Platform.DRONE: "oblique drone view:",
    Platform.GROUND: "street-level view:",
}

IDENTITY = "identity"
TEMPLATE_STUB = "template-stub"
COMMAND_PREFIX = "command:"


def refine_caption(caption: str, platform: Platform, refiner: str) -> str:
    """Apply a refinement strategy to one caption.

    ``identity`` returns the caption unchanged. ``template-stub`` prepends a
    fixed platform-focus prefix. ``command:<cmdline>`` pipes the caption to an
    external command (``{platform}`` in the command line is substituted with
    the platform tag) and returns its stdout; this is the hook for plugging
    in a real rewriting model without this package depending on one.
    """
    if refiner == IDENTITY:
        return caption
    if refiner == TEMPLATE_STUB:
        return f"{_STUB_PREFIXES[platform]} {caption}"
    if refiner.startswith(COMMAND_PREFIX):
        cmdline = refiner.removeprefix(COMMAND_PREFIX).strip()
        if not cmdline:
            raise ValueError("refiner command line is empty")
        argv = shlex.split(cmdline.replace("{platform}", platform.value))
        proc = subprocess.run(argv, input=caption, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RefinerError(
                f"refiner command {argv[0]!r} exited with {proc.returncode}: {proc.stderr.strip()}"
            )
        out = proc.stdout
        if out.endswith("\n"):
            out = out[:-1]
        if not out:
            raise RefinerError(f"refiner command {argv[0]!r} produced no output: {proc.stderr.strip()}")
        return out
    raise ValueError(f"unknown refiner {refiner!r} (expected identity, template-stub, or command:<cmdline>)")


@dataclass(frozen=True)
class PlatformSanitizeStats:
    captions: int = 0
    captions_changed: int = 0
    sentences_removed: int = 0


def sanitize_corpus(
    corpus: Corpus,
    platforms: tuple[Platform, ...],
    keywords: KeywordList | None = None,
    refiner: str = IDENTITY,
) -> tuple[Corpus, dict[Platform, PlatformSanitizeStats]]:
    """Rewrite gallery captions of the selected platforms; embeddings untouched.

    Each selected caption is sanitized and then run through the refiner
    strategy. Returns the new corpus and per-platform removal statistics.
    """
    stats = {p: [0, 0, 0] for p in platforms}
    gallery = []
    for item in corpus.gallery:
        if item.platform not in stats:
            gallery.append(item)
            continue
        cleaned, report = sanitize_directional(item.caption, keywords)
        cleaned = refine_caption(cleaned, item.platform, refiner)
        tally = stats[item.platform]
        tally[0] += 1
        tally[1] += cleaned != item.caption
        tally[2] += report.removed_sentence_count
        gallery.append(replace(item, caption=cleaned) if cleaned != item.caption else item)
    out = Corpus(corpus.d_t, corpus.d_v, gallery, list(corpus.queries))
    return out, {p: PlatformSanitizeStats(*t) for p, t in stats.items()}
