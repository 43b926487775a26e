"""Prompt rendering and free-text class extraction."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

from .dataset import ALIAS_TABLE, TAXONOMY, CesClass, normalize_label
from .errors import ConfigError, MissingDefinition
from .metrics import UNRESOLVED

CAPTION_INSTRUCTION = "Describe the image. Keep your response short."

CLASSIFY_LEAD = "Classify the image into one of these categories: {classes}."
DEFINITIONS_LEAD = "The definitions for each category are as follows:"
CLUSTER_MAPPING = (
    "Given the keywords: {keywords}. Which category best describes them: {classes}? "
    "Answer with the category name only."
)

DEFINITIONS: dict[CesClass, str] = {
    CesClass.CulturalReligious: (
        "The image depicts religious symbols, cultural artifacts, traditions, ceremonies, "
        "or anything related to culture and belief systems."
    ),
    CesClass.FaunaFlora: "The image features animals (fauna) or plants (flora) in any environment.",
    CesClass.Gastronomy: "The image is related to food, cooking, culinary experiences, or dining.",
    CesClass.LandscapeNature: (
        "The image contains natural landscapes, such as mountains, rivers, forests, "
        "or other untouched environments."
    ),
    CesClass.Sports: (
        "The image shows physical activities, competitions, or sports equipment related to "
        "athletic endeavors."
    ),
    CesClass.UrbanRural: (
        "The image captures cityscapes, villages, rural settings, buildings, or any human-made "
        "environments."
    ),
}


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    body: str = CLASSIFY_LEAD
    definitions: Mapping[CesClass, str] | None = None


SIMPLE = PromptTemplate("simple")
EXTENDED = PromptTemplate("extended", definitions=DEFINITIONS)
TEMPLATES = {"simple": SIMPLE, "1": SIMPLE, "extended": EXTENDED, "2": EXTENDED}


def get_template(name: str | int) -> PromptTemplate:
    try:
        return TEMPLATES[str(name)]
    except KeyError:
        raise ConfigError(f"unknown prompt template {name!r}; use simple|extended") from None


def join_classes(names: Sequence[str]) -> str:
    """``A``, ``A or B``, ``A, B, or C``."""
    names = list(names)
    if not names:
        raise ValueError("cannot join an empty class list")
    if len(names) == 1:
        return names[0]
    if len(names) == 2:
        return f"{names[0]} or {names[1]}"
    return ", ".join(names[:-1]) + ", or " + names[-1]


def render_prompt(template: PromptTemplate, taxonomy: Sequence[CesClass] = TAXONOMY) -> str:
    if not taxonomy:
        raise ConfigError("taxonomy must be non-empty")
    text = template.body.format(classes=join_classes([c.display_name for c in taxonomy]))
    if template.definitions is not None:
        lines = [text, DEFINITIONS_LEAD]
        for cls in taxonomy:
            if cls not in template.definitions:
                raise MissingDefinition(f"extended template has no definition for {cls.display_name}")
            lines.append(f"{cls.display_name}: {template.definitions[cls]}")
        text = "\n".join(lines)
    return text


def render_cluster_prompt(keywords: Sequence[str], taxonomy: Sequence[CesClass] = TAXONOMY) -> str:
    return CLUSTER_MAPPING.format(
        keywords=", ".join(keywords),
        classes=join_classes([c.display_name for c in taxonomy]),
    )


def golden_prompt(name: str) -> str:
    """Contents of a prompt file shipped in ``cesbench/prompts``."""
    return resources.files("cesbench").joinpath("prompts", name).read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# extraction


@dataclass(frozen=True)
class ClassDecision:
    item_id: str
    predicted: object  # CesClass or UNRESOLVED
    match_kind: str  # exact | alias | substring | first_mention | unresolved
    raw_text: str
    candidates: tuple = field(default=())

    @property
    def resolved(self) -> bool:
        return self.predicted is not UNRESOLVED


def _alias_pattern(alias: str) -> re.Pattern:
    words = alias.split(" ")
    return re.compile(r"(?<![a-z0-9])" + r"\s+".join(map(re.escape, words)) + r"(?![a-z0-9])")


_PATTERNS: dict[CesClass, list[re.Pattern]] = {
    cls: [_alias_pattern(a) for a in cls.aliases] for cls in CesClass
}


def _separators_to_spaces(text: str) -> str:
    # same length as the input so match offsets refer to the raw response
    return re.sub(r"[-_]", " ", text.lower())


def extract_class(raw: str, taxonomy: Sequence[CesClass] = TAXONOMY, item_id: str = "") -> ClassDecision:
    """Map a free-text model response to a class; never raises.

    Order of rules: whole response equals a canonical name (``exact``) or an
    alias (``alias``); exactly one class mentioned (``substring``); several
    classes mentioned, earliest wins (``first_mention``); else ``unresolved``.
    """
    raw = "" if raw is None else str(raw)
    allowed = tuple(taxonomy)
    whole = normalize_label(raw)
    cls = ALIAS_TABLE.get(whole)
    if cls is not None and cls in allowed:
        kind = "exact" if whole == normalize_label(cls.display_name) else "alias"
        return ClassDecision(item_id, cls, kind, raw, (cls,))

    text = _separators_to_spaces(raw)
    first_offset: dict[CesClass, int] = {}
    for cls in allowed:
        hits = [m.start() for p in _PATTERNS[cls] for m in [p.search(text)] if m]
        if hits:
            first_offset[cls] = min(hits)
    if not first_offset:
        return ClassDecision(item_id, UNRESOLVED, "unresolved", raw)
    order = {c: i for i, c in enumerate(allowed)}
    ranked = sorted(first_offset, key=lambda c: (first_offset[c], order[c]))
    kind = "substring" if len(ranked) == 1 else "first_mention"
    return ClassDecision(item_id, ranked[0], kind, raw, tuple(ranked))
