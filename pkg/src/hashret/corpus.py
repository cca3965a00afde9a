"""Proposition-chunked corpus: loading, validation, and document back-mapping.

A corpus file is UTF-8 JSONL with two record kinds::

    {"kind": "doc",  "doc_id": ..., "title": ..., "text": ...}
    {"kind": "prop", "prop_id": ..., "doc_id": ..., "ordinal": ..., "text": ...}

Documents and propositions may be interleaved in any order; referential
checks run once the whole file has been read.  Proposition order in the
file is authoritative: it defines the row order used by the trainer, the
code matrix, and the index, so all of them agree on one indexing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CorpusError

_DOC_KEYS = ("doc_id", "title", "text")
_PROP_KEYS = ("prop_id", "doc_id", "ordinal", "text")


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str


@dataclass(frozen=True)
class Proposition:
    prop_id: str
    doc_id: str
    ordinal: int
    text: str


@dataclass(frozen=True)
class Corpus:
    """Immutable, validated corpus.

    ``propositions`` keeps file order; row ``i`` of every downstream
    matrix refers to ``propositions[i]``.
    """

    documents: tuple[Document, ...]
    propositions: tuple[Proposition, ...]
    prop_to_doc: dict[str, str]
    _doc_by_id: dict[str, Document] = field(repr=False, default_factory=dict)
    _row_by_prop: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "_doc_by_id", {d.doc_id: d for d in self.documents}
        )
        object.__setattr__(
            self,
            "_row_by_prop",
            {p.prop_id: i for i, p in enumerate(self.propositions)},
        )

    @property
    def n_props(self) -> int:
        return len(self.propositions)

    @property
    def prop_ids(self) -> tuple[str, ...]:
        return tuple(p.prop_id for p in self.propositions)

    def document(self, doc_id: str) -> Document:
        try:
            return self._doc_by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown doc_id {doc_id!r}") from None

    def proposition(self, prop_id: str) -> Proposition:
        try:
            return self.propositions[self._row_by_prop[prop_id]]
        except KeyError:
            raise CorpusError(f"unknown prop_id {prop_id!r}") from None

    def row_of(self, prop_id: str) -> int:
        """Row index of a proposition in the canonical ordering."""
        try:
            return self._row_by_prop[prop_id]
        except KeyError:
            raise CorpusError(f"unknown prop_id {prop_id!r}") from None

    def has_prop(self, prop_id: str) -> bool:
        return prop_id in self._row_by_prop


def _require_str(obj: dict, key: str, line_no: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str):
        raise CorpusError(f"line {line_no}: field {key!r} missing or not a string")
    return value


def validate_corpus(
    documents: Sequence[Document], propositions: Sequence[Proposition]
) -> Corpus:
    """Run all corpus invariants and build the validated value."""
    if not propositions or not documents:
        raise CorpusError("empty corpus")

    doc_ids: set[str] = set()
    for d in documents:
        if not d.doc_id:
            raise CorpusError("document with empty doc_id")
        if d.doc_id in doc_ids:
            raise CorpusError(f"duplicate doc_id {d.doc_id!r}")
        if not d.text:
            raise CorpusError(f"document {d.doc_id!r} has empty text")
        doc_ids.add(d.doc_id)

    prop_ids: set[str] = set()
    ordinals_seen: dict[str, set[int]] = {}
    for p in propositions:
        if not p.prop_id:
            raise CorpusError("proposition with empty prop_id")
        if p.prop_id in prop_ids:
            raise CorpusError(f"duplicate prop_id {p.prop_id!r}")
        prop_ids.add(p.prop_id)
        if p.doc_id not in doc_ids:
            raise CorpusError(
                f"proposition {p.prop_id!r} references unknown doc_id {p.doc_id!r}"
            )
        if not p.text:
            raise CorpusError(f"proposition {p.prop_id!r} has empty text")
        if not isinstance(p.ordinal, int) or p.ordinal < 0:
            raise CorpusError(f"proposition {p.prop_id!r} has bad ordinal {p.ordinal!r}")
        seen = ordinals_seen.setdefault(p.doc_id, set())
        if p.ordinal in seen:
            raise CorpusError(
                f"duplicate ordinal {p.ordinal} within document {p.doc_id!r}"
            )
        seen.add(p.ordinal)

    return Corpus(
        documents=tuple(documents),
        propositions=tuple(propositions),
        prop_to_doc={p.prop_id: p.doc_id for p in propositions},
    )


def load_corpus(path: str | Path) -> Corpus:
    """Load and validate a JSONL corpus file.

    Proposition order equals file order.  Raises :class:`CorpusError` with
    a line number for malformed records and for any invariant violation.
    """
    path = Path(path)
    documents: list[Document] = []
    propositions: list[Proposition] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {line_no}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"line {line_no}: record is not an object")
            kind = obj.get("kind")
            if kind == "doc":
                documents.append(
                    Document(
                        doc_id=_require_str(obj, "doc_id", line_no),
                        title=_require_str(obj, "title", line_no),
                        text=_require_str(obj, "text", line_no),
                    )
                )
            elif kind == "prop":
                ordinal = obj.get("ordinal")
                if not isinstance(ordinal, int) or isinstance(ordinal, bool):
                    raise CorpusError(f"line {line_no}: field 'ordinal' missing or not an integer")
                propositions.append(
                    Proposition(
                        prop_id=_require_str(obj, "prop_id", line_no),
                        doc_id=_require_str(obj, "doc_id", line_no),
                        ordinal=ordinal,
                        text=_require_str(obj, "text", line_no),
                    )
                )
            else:
                raise CorpusError(f"line {line_no}: unknown record kind {kind!r}")
    return validate_corpus(documents, propositions)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the canonical JSONL form: documents first, then propositions.

    Loading a file produced here and saving it again is byte-identical.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for d in corpus.documents:
            fh.write(
                json.dumps(
                    {"kind": "doc", "doc_id": d.doc_id, "title": d.title, "text": d.text},
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )
        for p in corpus.propositions:
            fh.write(
                json.dumps(
                    {
                        "kind": "prop",
                        "prop_id": p.prop_id,
                        "doc_id": p.doc_id,
                        "ordinal": p.ordinal,
                        "text": p.text,
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
                + "\n"
            )


def docs_of(corpus: Corpus, prop_ids: Iterable[str]) -> list[str]:
    """Map propositions to parent documents, deduplicated.

    First occurrence wins, so the output order follows the input ranking.
    """
    seen: set[str] = set()
    out: list[str] = []
    for pid in prop_ids:
        if pid not in corpus.prop_to_doc:
            raise CorpusError(f"unknown prop_id {pid!r}")
        doc_id = corpus.prop_to_doc[pid]
        if doc_id not in seen:
            seen.add(doc_id)
            out.append(doc_id)
    return out
