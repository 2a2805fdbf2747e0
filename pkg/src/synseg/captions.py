"""Caption mining: noun-phrase extraction and generic-phrase filtering.

Turns raw image captions into weak category labels. Stage one keeps, for
every noun chunk, only its NOUN tokens; stage two drops any phrase that
contains an excluded term as a substring.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

logger = logging.getLogger(__name__)

COARSE_TAGS = frozenset(
    {"ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "VERB", "X"}
)

_TOKEN_RE = re.compile(r"\w+|'\w+|[^\w\s]")


def normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text).casefold()


@dataclass
class CaptionRecord:
    image_id: str
    caption: str
    tokens: list[tuple[str, str]] | None = None


@dataclass
class NounPhraseSet:
    image_id: str
    phrases: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.phrases = _dedupe(p for p in self.phrases if p)


@dataclass(frozen=True)
class ExclusionList:
    terms: frozenset[str]

    @classmethod
    def from_terms(cls, terms: Iterable[str]) -> "ExclusionList":
        return cls(frozenset(normalize(t).strip() for t in terms if t.strip()))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExclusionList":
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_terms(_strip_comments(text.splitlines()))

    @classmethod
    def default(cls) -> "ExclusionList":
        text = resources.files("synseg.data").joinpath("exclusions.txt").read_text(encoding="utf-8")
        return cls.from_terms(_strip_comments(text.splitlines()))


def _strip_comments(lines: Iterable[str]) -> list[str]:
    out = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def _dedupe(items: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


class POSProvider(Protocol):
    def tag(self, record: CaptionRecord) -> list[tuple[str, str]]:
        """Return (surface, coarse tag) pairs for the caption."""


class LexiconTagger:
    """Deterministic word→tag lookup; words missing from the table get ``X``.

    Captions that carry their own ``tokens`` (tagged offline by any external
    tool) are passed through unchanged.
    """

    def __init__(self, table: dict[str, str]):
        bad = {t for t in table.values() if t not in COARSE_TAGS}
        if bad:
            raise ValueError(f"unknown POS tags in lexicon: {sorted(bad)}")
        self.table = {normalize(k): v for k, v in table.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "LexiconTagger":
        return cls(_parse_lexicon(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "LexiconTagger":
        text = resources.files("synseg.data").joinpath("lexicon.tsv").read_text(encoding="utf-8")
        return cls(_parse_lexicon(text))

    def tag(self, record: CaptionRecord) -> list[tuple[str, str]]:
        if record.tokens is not None:
            return [(normalize(s), t) for s, t in record.tokens]
        out = []
        for tok in _TOKEN_RE.findall(normalize(record.caption)):
            if not (tok[0].isalnum() or tok[0] == "'"):
                out.append((tok, "PUNCT"))
            else:
                out.append((tok, self.table.get(tok, "X")))
        return out


def _parse_lexicon(text: str) -> dict[str, str]:
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        word, tag = line.split("\t")
        table[word.strip()] = tag.strip()
    return table


def noun_chunks(tagged: Sequence[tuple[str, str]]) -> list[list[tuple[str, str]]]:
    """Maximal runs of NOUN/ADJ tokens, trimmed so each ends in a NOUN."""
    chunks = []
    run: list[tuple[str, str]] = []
    for tok in list(tagged) + [("", "PUNCT")]:
        if tok[1] in ("NOUN", "ADJ"):
            run.append(tok)
            continue
        while run and run[-1][1] != "NOUN":
            run.pop()
        if run:
            chunks.append(run)
        run = []
    return chunks


def extract_noun_phrases(record: CaptionRecord, tagger: POSProvider) -> NounPhraseSet:
    if not record.caption and not record.tokens:
        raise ValueError(f"{record.image_id}: empty caption")
    phrases = []
    for chunk in noun_chunks(tagger.tag(record)):
        nouns = [surface for surface, pos in chunk if pos == "NOUN"]
        if nouns:
            phrases.append(" ".join(nouns))
    return NounPhraseSet(record.image_id, phrases)


def filter_generic(phrases: NounPhraseSet, exclusion: ExclusionList) -> NounPhraseSet:
    kept = [p for p in phrases.phrases if not any(e in normalize(p) for e in exclusion.terms)]
    return NounPhraseSet(phrases.image_id, kept)


def parse_caption_line(line: str, jsonl: bool) -> CaptionRecord:
    if jsonl:
        obj = json.loads(line)
        if not isinstance(obj, dict) or not isinstance(obj.get("image_id"), str) or not isinstance(obj.get("caption"), str):
            raise ValueError("record needs string fields image_id and caption")
        tokens = obj.get("tokens")
        if tokens is not None:
            tokens = [(str(s), str(t)) for s, t in tokens]
            if any(t not in COARSE_TAGS for _, t in tokens):
                raise ValueError("unknown POS tag in tokens")
        return CaptionRecord(obj["image_id"], obj["caption"], tokens)
    parts = line.split("\t")
    if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
        raise ValueError("expected 'image_id<TAB>caption'")
    return CaptionRecord(parts[0].strip(), parts[1].strip())


def iter_caption_lines(path: str | Path) -> Iterator[tuple[int, str, bool]]:
    """Yield (line number, text, is_jsonl); format is fixed by the first byte."""
    with open(path, encoding="utf-8") as fh:
        jsonl = None
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            if jsonl is None:
                jsonl = line.lstrip("﻿")[:1] == "{"
                line = line.lstrip("﻿")
            yield lineno, line, jsonl


def mine_corpus(input_path: str | Path, exclusion_path: str | Path | None, output_path: str | Path,
                tagger: POSProvider | None = None) -> dict[str, int]:
    """Stream captions through extraction and filtering into a JSONL label file.

    Returns counts: ``read``, ``emitted``, ``skipped`` (= ``skipped_empty`` +
    ``malformed`` + ``tagger_failed``).
    """
    input_path, output_path = Path(input_path), Path(output_path)
    if not input_path.is_file():
        raise FileNotFoundError(f"caption file not found: {input_path}")
    if exclusion_path is None:
        exclusion = ExclusionList.default()
    else:
        if not Path(exclusion_path).is_file():
            raise FileNotFoundError(f"exclusion file not found: {exclusion_path}")
        exclusion = ExclusionList.from_file(exclusion_path)
    tagger = tagger or LexiconTagger.default()

    counts = {"read": 0, "emitted": 0, "skipped": 0, "skipped_empty": 0, "malformed": 0, "tagger_failed": 0}
    with open(output_path, "w", encoding="utf-8", newline="\n") as out:
        for lineno, line, jsonl in iter_caption_lines(input_path):
            counts["read"] += 1
            try:
                record = parse_caption_line(line, jsonl)
            except (ValueError, json.JSONDecodeError) as exc:
                logger.warning("%s:%d: malformed record skipped (%s)", input_path, lineno, exc)
                counts["malformed"] += 1
                continue
            try:
                phrases = extract_noun_phrases(record, tagger)
            except Exception as exc:  # a tagger failure must never stop the stream
                logger.warning("%s:%d: tagging failed for %s (%s)", input_path, lineno, record.image_id, exc)
                counts["tagger_failed"] += 1
                continue
            kept = filter_generic(phrases, exclusion)
            if not kept.phrases:
                counts["skipped_empty"] += 1
                continue
            out.write(json.dumps({"image_id": record.image_id, "categories": kept.phrases}, ensure_ascii=False) + "\n")
            counts["emitted"] += 1
    counts["skipped"] = counts["skipped_empty"] + counts["malformed"] + counts["tagger_failed"]
    return counts
