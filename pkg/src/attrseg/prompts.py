"""Attribute-rich class descriptions: query templates, language-model clients
and the on-disk description bank.

The bank file is the single source of truth for the text fed to the text
encoder. Language models answer the same question differently from call to
call, so a description is requested at most once and every later run reads
the cached sentence. Its SHA-256 (``bank_hash``) is stored in checkpoints so
evaluation can refuse a bank that differs from the one used in training.
"""
from __future__ import annotations

import enum
import hashlib
import logging
import os
import re
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol

from .tokenizer import CONTEXT_LENGTH, _TOKEN_RE

log = logging.getLogger(__name__)

DISCOVERY_QUERY = "What common descriptions should a sentence have to improve segmentation results?"


class AttributeKind(str, enum.Enum):
    COLOR = "color"
    SHAPE_SIZE = "shape"
    TEXTURE_MATERIAL = "texture"
    COMPREHENSIVE = "comprehensive"
    NAME_ONLY = "name"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    AttributeKind.NAME_ONLY: "NameOnly",
    AttributeKind.COLOR: "Color",
    AttributeKind.SHAPE_SIZE: "Shape/Size",
    AttributeKind.TEXTURE_MATERIAL: "Texture/Material",
    AttributeKind.COMPREHENSIVE: "Comprehensive",
}

_QUERY_TEMPLATES = {
    AttributeKind.COLOR: "Describe what a {cls} looks like in terms of color?",
    AttributeKind.SHAPE_SIZE: "Describe what a {cls} looks like in terms of shape and size?",
    AttributeKind.TEXTURE_MATERIAL: "Describe what a {cls} looks like in terms of texture and material?",
    AttributeKind.COMPREHENSIVE: (
        "Describe what a {cls} looks like in one sentence covering color, "
        "shape or size, and texture or material."
    ),
}
NAME_TEMPLATE = "a photo of a {cls}"


class Source(str, enum.Enum):
    LLM = "llm"
    FIXTURE = "fixture"
    TEMPLATE = "template"


class DescriptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ClassDescription:
    class_name: str
    attribute: AttributeKind
    text: str
    source: Source
    created_at: datetime | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.text.strip():
            raise DescriptionError(f"empty description for {self.class_name!r}")
        if self.attribute is not AttributeKind.NAME_ONLY and self.class_name.lower() not in self.text.lower():
            raise DescriptionError(f"description for {self.class_name!r} does not mention the class: {self.text!r}")
        for part in (self.class_name, self.text):
            if "\t" in part or "\n" in part:
                raise DescriptionError(f"tab or newline in bank entry for {self.class_name!r}")


class ClassDescriptionSet:
    """Mapping ``(class_name, attribute) -> ClassDescription`` with a content digest."""

    def __init__(self, entries: Iterable[ClassDescription] = ()):
        self.entries: dict[tuple[str, AttributeKind], ClassDescription] = {}
        for e in entries:
            self.add(e)

    def add(self, entry: ClassDescription) -> None:
        key = (entry.class_name, entry.attribute)
        if key in self.entries and self.entries[key] != entry:
            raise DescriptionError(f"conflicting bank entries for {key[0]!r}/{key[1].value}")
        self.entries[key] = entry

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassDescriptionSet) and self.entries == other.entries

    def get(self, class_name: str, attribute: AttributeKind) -> ClassDescription:
        try:
            return self.entries[(class_name, attribute)]
        except KeyError:
            raise DescriptionError(f"no {attribute.value} description for class {class_name!r}") from None

    def texts(self, class_order: list[str], attribute: AttributeKind) -> list[str]:
        return [self.get(c, attribute).text for c in class_order]

    def class_names(self) -> list[str]:
        return sorted({c for c, _ in self.entries})

    def serialize(self) -> bytes:
        lines = []
        for (cls, attr), e in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
            lines.append(f"{cls}\t{attr.value}\t{e.source.value}\t{e.text}\n")
        return "".join(lines).encode("utf-8")

    @property
    def bank_hash(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()

    def save(self, path: str | Path) -> None:
        # write-then-rename so concurrent readers never observe a partial bank
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.serialize())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> "ClassDescriptionSet":
        bank = cls()
        raw = Path(path).read_bytes().decode("utf-8")
        for lineno, line in enumerate(raw.splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 4:
                raise DescriptionError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            name, attr, source, text = parts
            try:
                bank.add(ClassDescription(name, AttributeKind(attr), text, Source(source)))
            except ValueError as exc:
                raise DescriptionError(f"{path}:{lineno}: {exc}") from None
        return bank

    def subset(self, class_names: Iterable[str], attribute: AttributeKind) -> "ClassDescriptionSet":
        return ClassDescriptionSet(self.get(c, attribute) for c in class_names)


def bank_digest(bank: ClassDescriptionSet) -> str:
    if not len(bank):
        raise DescriptionError("cannot digest an empty description bank")
    return bank.bank_hash


class LLMClient(Protocol):
    identity: str

    def query(self, prompt: str) -> str: ...


class FixtureClient:
    """Replays canned replies keyed by the exact query string."""

    identity = "fixture"
    source = Source.FIXTURE

    def __init__(self, replies: dict[str, str] | None = None):
        self.replies = dict(replies) if replies is not None else load_fixture_replies()

    def query(self, prompt: str) -> str:
        try:
            return self.replies[prompt]
        except KeyError:
            raise DescriptionError(f"fixture has no reply for query {prompt!r}") from None


def load_fixture_replies() -> dict[str, str]:
    replies = {DISCOVERY_QUERY: "A useful description covers color, shape/size, and texture/material."}
    text = resources.files("attrseg.resources").joinpath("fixture_descriptions.tsv").read_text("utf-8")
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        name, attr, reply = line.split("\t")
        replies[build_attribute_query(name, AttributeKind(attr))] = reply
    return replies


class HTTPClient:
    """Chat-completions client for an OpenAI-compatible endpoint."""

    source = Source.LLM

    def __init__(self, base_url: str, model: str = "gpt-3.5-turbo", api_key: str | None = None,
                 timeout: float = 30.0, transport=None):
        import httpx

        self.model = model
        self.identity = f"http:{model}"
        headers = {}
        api_key = api_key or os.environ.get("OPENAI_API_KEY")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._http = httpx.Client(base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport)

    def query(self, prompt: str) -> str:
        resp = self._http.post("/chat/completions", json={
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        })
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]


def build_attribute_query(class_name: str, attribute: AttributeKind) -> str:
    if not class_name.strip():
        raise ValueError("class name must be non-empty")
    if attribute is AttributeKind.NAME_ONLY:
        raise ValueError("name-only prompts use the fixed template and are never sent to a language model")
    return _QUERY_TEMPLATES[attribute].format(cls=class_name)


def discover_attributes(client: LLMClient) -> list[str]:
    """First-stage query: ask which visual attributes a description should carry."""
    reply = client.query(DISCOVERY_QUERY)
    found = re.findall(r"colou?r|shape(?:/size)?|size|texture(?:/material)?|material", reply.lower())
    return list(dict.fromkeys(found))


_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


def clean_reply(reply: str, max_tokens: int = CONTEXT_LENGTH) -> str:
    text = " ".join(reply.split())
    text = " ".join(_SENTENCE_END.split(text)[:2])
    budget = max_tokens - 2
    spans = [m.end() for m in _TOKEN_RE.finditer(text.lower())]
    if len(spans) > budget:
        log.warning("description truncated to %d tokens: %r", max_tokens, text)
        text = text[: spans[budget - 1]]
    return text


def generate_descriptions(
    class_names: list[str],
    attribute: AttributeKind,
    client: LLMClient | None,
    cache_path: str | Path,
    retries: int = 2,
    backoff: float = 0.5,
) -> ClassDescriptionSet:
    """Return one description per class, querying `client` only for cache misses.

    New entries are merged into the bank at `cache_path`, which is rewritten
    once at the end. The returned set holds just the requested entries.
    """
    if not class_names:
        raise ValueError("class_names must be non-empty")
    folded = [c.casefold() for c in class_names]
    if len(set(folded)) != len(folded):
        raise ValueError("class names must be unique after case-folding")

    cache_path = Path(cache_path)
    bank = ClassDescriptionSet.load(cache_path) if cache_path.exists() else ClassDescriptionSet()
    dirty = False
    out = ClassDescriptionSet()
    for name in class_names:
        key = (name, attribute)
        if key not in bank:
            bank.add(_describe(name, attribute, client, retries, backoff))
            dirty = True
        out.add(bank.entries[key])
    if dirty or not cache_path.exists():
        bank.save(cache_path)
    return out


def _describe(name, attribute, client, retries, backoff) -> ClassDescription:
    now = datetime.now(timezone.utc)
    if attribute is AttributeKind.NAME_ONLY:
        return ClassDescription(name, attribute, NAME_TEMPLATE.format(cls=name), Source.TEMPLATE, now)
    if client is None:
        raise DescriptionError(f"no client available to describe class {name!r}")
    query = build_attribute_query(name, attribute)
    for attempt in range(retries + 1):
        try:
            reply = client.query(query)
            break
        except Exception as exc:
            if attempt == retries:
                raise DescriptionError(f"language model failed for class {name!r}: {exc}") from exc
            time.sleep(backoff * 2**attempt)
    text = clean_reply(reply or "")
    if not text:
        raise DescriptionError(f"empty reply for class {name!r}")
    return ClassDescription(name, attribute, text, getattr(client, "source", Source.LLM), now)
