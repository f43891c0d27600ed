"""Class hierarchy handling: parse an OBO-subset file, query the DAG, add subclasses.

The graph is immutable after construction; every mutating operation returns a
new graph, so instances can be shared freely between threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

DEFAULT_SMILES_KEY = "http://purl.obolibrary.org/obo/chebi/smiles"


class OntologyError(Exception):
    """Base class for all ontology parsing/graph errors."""


class OboSyntaxError(OntologyError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DuplicateIdError(OntologyError):
    def __init__(self, class_id: str):
        super().__init__(f"duplicate class id: {class_id}")
        self.class_id = class_id


class UnknownClassError(OntologyError):
    def __init__(self, class_id: str):
        super().__init__(f"unknown class id: {class_id}")
        self.class_id = class_id


class CycleError(OntologyError):
    def __init__(self, cycle: list[str]):
        super().__init__("subsumption cycle: " + " -> ".join(cycle + cycle[:1]))
        self.cycle = cycle


@dataclass(frozen=True)
class OntologyClass:
    """One ontology class: an id, a label, optional SMILES, and its direct parents."""

    id: str
    name: str = ""
    smiles: str | None = None
    parents: frozenset[str] = frozenset()
    obsolete: bool = False
    # Unrecognized stanza lines, kept verbatim for lossless re-serialization.
    extra_lines: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise OntologyError("class id must be non-empty")
        if self.id in self.parents:
            raise OntologyError(f"class {self.id} lists itself as a parent")
        if self.smiles is not None and not self.smiles:
            raise OntologyError(f"class {self.id}: SMILES present but empty")
        if not isinstance(self.parents, frozenset):
            object.__setattr__(self, "parents", frozenset(self.parents))


class OntologyGraph:
    """Acyclic is_a hierarchy over :class:`OntologyClass` instances.

    Construction validates that every referenced parent exists and that the
    subsumption relation is acyclic.
    """

    def __init__(
        self,
        classes: dict[str, OntologyClass],
        header_lines: tuple[str, ...] = (),
        trailing_stanzas: tuple[tuple[str, ...], ...] = (),
    ):
        for cid, cls in classes.items():
            if cid != cls.id:
                raise OntologyError(f"class keyed as {cid} but has id {cls.id}")
            for parent in cls.parents:
                if parent not in classes:
                    raise UnknownClassError(parent)
        self._classes = dict(classes)
        self.header_lines = tuple(header_lines)
        self.trailing_stanzas = tuple(trailing_stanzas)
        self._children: dict[str, set[str]] = {cid: set() for cid in classes}
        for cls in classes.values():
            for parent in cls.parents:
                self._children[parent].add(cls.id)
        cycle = self._find_cycle()
        if cycle is not None:
            raise CycleError(cycle)

    def _find_cycle(self) -> list[str] | None:
        """Depth-first search over parent edges; returns one cycle if any."""
        WHITE, GRAY, BLACK = 0, 1, 2
        color = {cid: WHITE for cid in self._classes}
        for start in self._classes:
            if color[start] != WHITE:
                continue
            path: list[str] = []
            stack: list[tuple[str, bool]] = [(start, False)]
            while stack:
                node, done = stack.pop()
                if done:
                    color[node] = BLACK
                    path.pop()
                    continue
                if color[node] == BLACK:
                    continue
                if color[node] == GRAY:
                    return path[path.index(node):]
                color[node] = GRAY
                path.append(node)
                stack.append((node, True))
                for parent in sorted(self._classes[node].parents):
                    if color[parent] == GRAY:
                        return path[path.index(parent):]
                    if color[parent] == WHITE:
                        stack.append((parent, False))
        return None

    def __contains__(self, class_id: str) -> bool:
        return class_id in self._classes

    def __len__(self) -> int:
        return len(self._classes)

    def __eq__(self, other) -> bool:
        return isinstance(other, OntologyGraph) and self._classes == other._classes

    def __getitem__(self, class_id: str) -> OntologyClass:
        try:
            return self._classes[class_id]
        except KeyError:
            raise UnknownClassError(class_id) from None

    def ids(self) -> list[str]:
        return sorted(self._classes)

    def classes(self) -> list[OntologyClass]:
        return [self._classes[cid] for cid in self.ids()]

    def parents(self, class_id: str) -> frozenset[str]:
        return self[class_id].parents

    def children(self, class_id: str) -> frozenset[str]:
        self[class_id]
        return frozenset(self._children[class_id])

    def is_leaf(self, class_id: str) -> bool:
        return not self._children[self[class_id].id]

    def ancestors(self, class_id: str) -> set[str]:
        """All transitive superclasses of ``class_id``, excluding itself."""
        self[class_id]
        seen: set[str] = set()
        frontier = list(self._classes[class_id].parents)
        while frontier:
            node = frontier.pop()
            if node in seen:
                continue
            seen.add(node)
            frontier.extend(self._classes[node].parents)
        return seen

    def descendants(self, class_id: str) -> set[str]:
        """All transitive subclasses of ``class_id``, excluding itself."""
        self[class_id]
        seen: set[str] = set()
        frontier = list(self._children[class_id])
        while frontier:
            node = frontier.pop()
            if node in seen:
                continue
            seen.add(node)
            frontier.extend(self._children[node])
        return seen

    def leaves(self) -> set[str]:
        """Non-obsolete classes with no children."""
        return {
            cid
            for cid, cls in self._classes.items()
            if not self._children[cid] and not cls.obsolete
        }

    def structured_leaves(self) -> set[str]:
        """Leaves that carry a SMILES annotation."""
        return {cid for cid in self.leaves() if self._classes[cid].smiles is not None}

    def insert_subsumptions(
        self, additions: list[tuple[OntologyClass, list[str]]]
    ) -> "OntologyGraph":
        """Return a new graph with each (class, superclass ids) pair added as a leaf.

        Superclasses may reference classes added earlier in ``additions``.
        The receiver is left unmodified.
        """
        new_classes = dict(self._classes)
        for cls, superclasses in additions:
            if cls.id in new_classes:
                raise DuplicateIdError(cls.id)
            for sup in superclasses:
                if sup not in new_classes:
                    raise UnknownClassError(sup)
            new_classes[cls.id] = replace(cls, parents=frozenset(superclasses))
        return OntologyGraph(
            new_classes,
            header_lines=self.header_lines,
            trailing_stanzas=self.trailing_stanzas,
        )


_PROPERTY_VALUE_RE = re.compile(
    r'^property_value:\s*(?P<key>\S+)\s+"(?P<value>(?:[^"\\]|\\.)*)"\s+xsd:string\s*$'
)


def _strip_comment(value: str) -> str:
    """Drop an OBO trailing comment (everything after an unescaped ``!``)."""
    pos = value.find("!")
    return value if pos < 0 else value[:pos].rstrip()


def _unescape(value: str) -> str:
    return value.replace('\\"', '"').replace("\\\\", "\\")


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"')


def parse_obo(text: str, smiles_key: str = DEFAULT_SMILES_KEY) -> OntologyGraph:
    """Parse the supported OBO subset into an :class:`OntologyGraph`.

    Recognized inside ``[Term]`` stanzas: ``id:``, ``name:``, ``is_a:``
    (trailing ``!`` comment stripped), ``is_obsolete:``, and
    ``property_value: <smiles_key> "..." xsd:string``.  Anything else is kept
    verbatim.  Non-``[Term]`` stanzas are preserved as opaque blocks.
    """
    header_lines: list[str] = []
    classes: dict[str, OntologyClass] = {}
    trailing: list[tuple[str, ...]] = []
    is_a_lines: list[tuple[str, str, int]] = []  # (child, parent, line number)

    lines = text.split("\n")
    i = 0
    n = len(lines)
    in_header = True
    while i < n:
        line = lines[i].rstrip("\r")
        if not line.strip():
            i += 1
            continue
        if not line.startswith("["):
            if in_header:
                header_lines.append(line)
                i += 1
                continue
            raise OboSyntaxError(f"unexpected line outside a stanza: {line!r}", i + 1)
        in_header = False
        if line.strip() != "[Term]":
            # Opaque stanza: keep until the next stanza header or EOF.
            block = [line]
            i += 1
            while i < n and not lines[i].lstrip().startswith("["):
                stripped = lines[i].rstrip("\r")
                if stripped.strip():
                    block.append(stripped)
                i += 1
            trailing.append(tuple(block))
            continue

        stanza_start = i + 1
        i += 1
        term_id: str | None = None
        name = ""
        smiles: str | None = None
        parent_refs: list[tuple[str, int]] = []  # (target, line number)
        obsolete = False
        extra: list[str] = []
        while i < n:
            raw = lines[i].rstrip("\r")
            if raw.lstrip().startswith("["):
                break
            if not raw.strip():
                i += 1
                break
            lineno = i + 1
            if ":" not in raw:
                raise OboSyntaxError(f"expected 'tag: value', got {raw!r}", lineno)
            tag, _, value = raw.partition(":")
            tag = tag.strip()
            value = value.strip()
            if tag == "id":
                if term_id is not None:
                    raise OboSyntaxError("stanza has more than one id", lineno)
                if not value:
                    raise OboSyntaxError("empty id", lineno)
                term_id = _strip_comment(value)
            elif tag == "name":
                name = _strip_comment(value)
            elif tag == "is_a":
                target = _strip_comment(value)
                if not target:
                    raise OboSyntaxError("is_a with empty target", lineno)
                parent_refs.append((target, lineno))
            elif tag == "is_obsolete":
                obsolete = _strip_comment(value).lower() == "true"
            elif tag == "property_value":
                m = _PROPERTY_VALUE_RE.match(raw.strip())
                if m is not None and m.group("key") == smiles_key:
                    smiles = _unescape(m.group("value"))
                    if not smiles:
                        raise OboSyntaxError("empty SMILES value", lineno)
                else:
                    extra.append(raw)
            else:
                extra.append(raw)
            i += 1
        if term_id is None:
            raise OboSyntaxError("[Term] stanza without an id", stanza_start)
        if term_id in classes:
            raise DuplicateIdError(term_id)
        for target, lineno in parent_refs:
            is_a_lines.append((term_id, target, lineno))
        classes[term_id] = OntologyClass(
            id=term_id,
            name=name,
            smiles=smiles,
            parents=frozenset(target for target, _ in parent_refs),
            obsolete=obsolete,
            extra_lines=tuple(extra),
        )

    for child, parent, lineno in is_a_lines:
        if parent not in classes:
            raise OboSyntaxError(
                f"is_a target {parent!r} is not declared in this file", lineno
            )
    return OntologyGraph(
        classes, header_lines=tuple(header_lines), trailing_stanzas=tuple(trailing)
    )


def serialize_obo(
    graph: OntologyGraph,
    smiles_key: str = DEFAULT_SMILES_KEY,
    edge_comments: dict[tuple[str, str], str] | None = None,
) -> str:
    """Serialize a graph to the OBO subset, stanzas sorted by class id.

    ``edge_comments`` may attach an OBO comment to individual is_a lines,
    keyed by (child id, parent id); used to annotate inserted edges with
    prediction confidences.
    """
    edge_comments = edge_comments or {}
    out: list[str] = list(graph.header_lines)
    if out:
        out.append("")
    for cid in graph.ids():
        cls = graph[cid]
        out.append("[Term]")
        out.append(f"id: {cls.id}")
        if cls.name:
            out.append(f"name: {cls.name}")
        for parent in sorted(cls.parents):
            comment = edge_comments.get((cls.id, parent))
            if comment:
                out.append(f"is_a: {parent} ! {comment}")
            else:
                out.append(f"is_a: {parent}")
        if cls.smiles is not None:
            out.append(f'property_value: {smiles_key} "{_escape(cls.smiles)}" xsd:string')
        if cls.obsolete:
            out.append("is_obsolete: true")
        out.extend(cls.extra_lines)
        out.append("")
    for block in graph.trailing_stanzas:
        out.extend(block)
        out.append("")
    return "\n".join(out)


def load_obo(path, smiles_key: str = DEFAULT_SMILES_KEY) -> OntologyGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_obo(fh.read(), smiles_key=smiles_key)


def save_obo(
    graph: OntologyGraph,
    path,
    smiles_key: str = DEFAULT_SMILES_KEY,
    edge_comments: dict[tuple[str, str], str] | None = None,
) -> None:
    from ._io import atomic_write_text

    atomic_write_text(path, serialize_obo(graph, smiles_key=smiles_key, edge_comments=edge_comments))
