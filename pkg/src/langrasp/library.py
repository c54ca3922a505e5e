"""Object library and keyword vocabulary, shipped as editable JSON data."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

SHAPE_KEYWORD = {"circle": "round", "square": "square", "elongated": "long"}

KEYWORD_TYPES = ("label", "general", "shape_color", "function")


@dataclass(frozen=True)
class ObjectSpec:
    spec_id: str
    label: str
    shape: str                      # circle | square | elongated
    size: tuple[float, ...]         # circle: (r,); square: (side,); elongated: (w, l)
    color: str
    general_labels: tuple[str, ...]
    functions: tuple[str, ...]
    height: float
    split: str                      # train | unseen

    @property
    def shape_keyword(self) -> str:
        return SHAPE_KEYWORD[self.shape]

    def half_extents(self) -> tuple[float, float]:
        if self.shape == "circle":
            return self.size[0], self.size[0]
        if self.shape == "square":
            return self.size[0] / 2, self.size[0] / 2
        return self.size[0] / 2, self.size[1] / 2

    def narrow_extent(self) -> float:
        """Smallest footprint span, the dimension a gripper closes across."""
        if self.shape == "circle":
            return 2 * self.size[0]
        return self.size[0]

    def concepts(self) -> tuple[str, ...]:
        return (self.label, *self.general_labels, self.color,
                self.shape_keyword, *self.functions)

    def attribute_weights(self) -> dict[str, float]:
        """Concept mixture describing this object; the concrete label counts double."""
        raw = {self.label: 2.0}
        for c in (*self.general_labels, self.color, self.shape_keyword, *self.functions):
            raw[c] = raw.get(c, 0.0) + 1.0
        total = sum(raw.values())
        return {c: w / total for c, w in raw.items()}

    def matches(self, keyword: str, keyword_type: str) -> bool:
        if keyword_type == "label":
            return self.label == keyword
        if keyword_type == "general":
            return keyword in self.general_labels
        if keyword_type == "shape_color":
            return keyword == self.color or keyword == self.shape_keyword
        if keyword_type == "function":
            return keyword in self.functions
        raise ValueError(f"unknown keyword type {keyword_type!r}")


@dataclass(frozen=True)
class KeywordTable:
    labels: tuple[str, ...]
    general_labels: tuple[str, ...]
    shape_color: tuple[str, ...]
    functions: tuple[str, ...]
    templates: tuple[str, ...]
    novel_templates: tuple[str, ...]

    def keywords_of(self, keyword_type: str) -> tuple[str, ...]:
        return {
            "label": self.labels,
            "general": self.general_labels,
            "shape_color": self.shape_color,
            "function": self.functions,
        }[keyword_type]

    def all_keywords(self) -> tuple[str, ...]:
        return self.labels + self.general_labels + self.shape_color + self.functions

    def type_of(self, keyword: str) -> str:
        for ktype in KEYWORD_TYPES:
            if keyword in self.keywords_of(ktype):
                return ktype
        raise KeyError(f"keyword {keyword!r} not in vocabulary")


def _data_text(name: str) -> str:
    return resources.files("langrasp.data").joinpath(name).read_text()


def load_library(path: str | None = None) -> list[ObjectSpec]:
    raw = json.loads(open(path).read() if path else _data_text("object_library.json"))
    specs = []
    for o in raw["objects"]:
        specs.append(ObjectSpec(
            spec_id=o["id"], label=o["label"], shape=o["shape"],
            size=tuple(o["size"]), color=o["color"],
            general_labels=tuple(o["general_labels"]),
            functions=tuple(o["functions"]),
            height=o["height"], split=o["split"]))
    return specs


def load_keywords(path: str | None = None) -> KeywordTable:
    raw = json.loads(open(path).read() if path else _data_text("keywords.json"))
    return KeywordTable(
        labels=tuple(raw["labels"]),
        general_labels=tuple(raw["general_labels"]),
        shape_color=tuple(raw["shape_color"]),
        functions=tuple(raw["functions"]),
        templates=tuple(raw["templates"]),
        novel_templates=tuple(raw["novel_templates"]))


def specs_matching(specs, keyword: str, keyword_type: str):
    return [s for s in specs if s.matches(keyword, keyword_type)]


def split_of(specs, split: str):
    return [s for s in specs if s.split == split]
