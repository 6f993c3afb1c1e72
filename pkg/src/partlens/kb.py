"""Holonym-meronym knowledge base: loading, validation and part resolution.

A KB document is plain JSON::

    {"concepts": [{"id": "horse",
                   "hypernyms": [],
                   "parts": [{"name": "head", "visible": true, "within": []}, ...]},
                  ...]}

Concepts without parts inherit the part list of the first ancestor in their
(explicitly stored) hypernym chain that has one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

BUNDLED = {
    "pascal": "pascal_part.kb.json",
    "imagenet": "imagenet_visa.kb.json",
}


class KBError(Exception):
    pass


class KBParseError(KBError):
    """Malformed document. Carries the JSON line or the offending field path."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class KBValidationError(KBError):
    pass


class ResolutionError(KBError):
    def __init__(self, concept: str, chain: Sequence[str], reason: str):
        trail = " -> ".join([concept, *chain])
        super().__init__(f"cannot resolve parts for {concept!r}: {reason} (chain: {trail})")
        self.concept = concept
        self.chain = list(chain)


@dataclass(frozen=True)
class PartEntry:
    name: str
    visible: bool = True
    within: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {"name": self.name, "visible": self.visible, "within": sorted(self.within)}


@dataclass(frozen=True)
class Concept:
    id: str
    hypernyms: tuple[str, ...] = ()
    parts: tuple[PartEntry, ...] = ()


@dataclass(frozen=True)
class HolMeMap:
    concepts: Mapping[str, Concept] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "concepts", MappingProxyType(dict(self.concepts)))

    def __contains__(self, cid: str) -> bool:
        return cid in self.concepts

    def __len__(self) -> int:
        return len(self.concepts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HolMeMap):
            return NotImplemented
        return list(self.concepts.items()) == list(other.concepts.items())

    def to_dict(self) -> dict:
        return {
            "concepts": [
                {
                    "id": c.id,
                    "hypernyms": list(c.hypernyms),
                    "parts": [p.to_dict() for p in c.parts],
                }
                for c in self.concepts.values()
            ]
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False)


def _expect(cond: bool, message: str, path: str):
    if not cond:
        raise KBParseError(message, field=path)


def _parse_part(raw, path: str) -> PartEntry:
    _expect(isinstance(raw, dict), "part must be an object", path)
    name = raw.get("name")
    _expect(isinstance(name, str) and name != "", "part name must be a non-empty string", f"{path}.name")
    visible = raw.get("visible", True)
    _expect(isinstance(visible, bool), "visible must be a boolean", f"{path}.visible")
    within = raw.get("within", [])
    _expect(
        isinstance(within, list) and all(isinstance(w, str) for w in within),
        "within must be a list of strings",
        f"{path}.within",
    )
    return PartEntry(name, visible, frozenset(within))


def _parse_concept(raw, path: str) -> Concept:
    _expect(isinstance(raw, dict), "concept must be an object", path)
    cid = raw.get("id")
    _expect(isinstance(cid, str) and cid.strip() != "", "id must be a non-empty string", f"{path}.id")
    hyp = raw.get("hypernyms", [])
    _expect(
        isinstance(hyp, list) and all(isinstance(h, str) and h for h in hyp),
        "hypernyms must be a list of non-empty strings",
        f"{path}.hypernyms",
    )
    parts = raw.get("parts", [])
    _expect(isinstance(parts, list), "parts must be a list", f"{path}.parts")
    return Concept(
        cid,
        tuple(hyp),
        tuple(_parse_part(p, f"{path}.parts[{i}]") for i, p in enumerate(parts)),
    )


def _check_containment(c: Concept):
    names = [p.name for p in c.parts]
    if len(set(names)) != len(names):
        raise KBValidationError(f"concept {c.id!r} lists a part twice")
    graph = {p.name: p.within for p in c.parts}
    for p in c.parts:
        missing = p.within - graph.keys()
        if missing:
            raise KBValidationError(
                f"concept {c.id!r}: part {p.name!r} is within unknown part(s) {sorted(missing)}"
            )
    _assert_acyclic(graph, f"containment cycle in concept {c.id!r}")


def _assert_acyclic(graph: Mapping[str, frozenset[str] | Sequence[str]], message: str):
    state: dict[str, int] = {}  # 1 = on stack, 2 = done

    for root in graph:
        if state.get(root):
            continue
        stack = [(root, iter(graph[root]))]
        state[root] = 1
        while stack:
            node, children = stack[-1]
            for child in children:
                if child not in graph:
                    continue
                if state.get(child) == 1:
                    raise KBValidationError(f"{message}: {node!r} -> {child!r}")
                if not state.get(child):
                    state[child] = 1
                    stack.append((child, iter(graph[child])))
                    break
            else:
                state[node] = 2
                stack.pop()


def load_kb(document: str) -> HolMeMap:
    """Parse and validate a KB JSON document."""
    try:
        raw = json.loads(document)
    except json.JSONDecodeError as exc:
        raise KBParseError(exc.msg, line=exc.lineno) from exc
    _expect(isinstance(raw, dict), "document must be an object", "$")
    concepts_raw = raw.get("concepts")
    _expect(isinstance(concepts_raw, list), "concepts must be a list", "concepts")

    concepts: dict[str, Concept] = {}
    for i, item in enumerate(concepts_raw):
        c = _parse_concept(item, f"concepts[{i}]")
        if c.id in concepts:
            raise KBValidationError(f"duplicate concept id {c.id!r}")
        _check_containment(c)
        if c.id in c.hypernyms:
            raise KBValidationError(f"concept {c.id!r} lists itself as a hypernym")
        concepts[c.id] = c

    _assert_acyclic({cid: c.hypernyms for cid, c in concepts.items()}, "hypernym cycle")
    return HolMeMap(concepts)


def load_kb_file(path: str | Path) -> HolMeMap:
    """Load a KB from disk. ``pascal`` and ``imagenet`` name the bundled mappings."""
    if str(path) in BUNDLED:
        text = resources.files("partlens.data").joinpath(BUNDLED[str(path)]).read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return load_kb(text)


def filter_hyper_meronyms(parts: Sequence[PartEntry]) -> list[str]:
    """Drop invisible parts, then every part contained in another listed part."""
    visible = [p for p in parts if p.visible]
    names = {p.name for p in visible}
    return [p.name for p in visible if not (p.within & names)]


def resolve_parts(c: str, kb: HolMeMap) -> list[str]:
    if c not in kb.concepts:
        raise ResolutionError(c, [], "unknown concept")
    concept = kb.concepts[c]
    parts = filter_hyper_meronyms(concept.parts)
    if parts:
        return parts
    for ancestor in concept.hypernyms:
        anc = kb.concepts.get(ancestor)
        if anc is None:
            continue
        parts = filter_hyper_meronyms(anc.parts)
        if parts:
            return parts
    raise ResolutionError(c, concept.hypernyms, "no ancestor with visible parts")
