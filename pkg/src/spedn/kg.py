"""In-memory typed knowledge graph with a flat-file format and indexed lookups.

A graph is four components: entity types, relation signatures (entity-valued
or literal-valued), typed entities carrying literal attributes, and
entity-to-entity relation instances.  Graphs are immutable after load and safe
to share across threads.

File format (UTF-8, one record per line, tab-separated fields, full-line `#`
comments):

    type <name>
    rel <name> <domain> -> <range-type>
    attr <name> <domain> -> text|integer|decimal|boolean
    ent <id> <type> [<attr>=<value>]...
    fact <rel> <subj> <obj>

Integer values are decimal digits, decimals carry a `.`, booleans are `0|1`,
text values are single-quoted.  Identifiers and text values are case-folded
ASCII; they may contain spaces (fields are tab-delimited).
"""

from __future__ import annotations

from dataclasses import dataclass, field

LITERAL_KINDS = ("text", "integer", "decimal", "boolean")

ID_ATTR = "id"  # reserved: auto-declared per type, holds the entity identifier


class KgError(Exception):
    """Base class for knowledge-graph errors."""


class KgParseError(KgError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class KgSchemaError(KgError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class KgLookupError(KgError):
    """Raised by lookup operations given an unknown or wrongly-kinded name."""


@dataclass(frozen=True)
class RelationSignature:
    """One declared relation: entity-valued (rng is a type) or literal-valued."""

    name: str
    domain: str
    rng: str
    literal: bool

    def __str__(self):
        kind = "attr" if self.literal else "rel"
        return f"{kind} {self.name} {self.domain} -> {self.rng}"


@dataclass
class Entity:
    id: str
    type: str
    attrs: dict = field(default_factory=dict)


def _fold(s: str) -> str:
    return s.casefold()


def format_value(v) -> str:
    """Render a literal value in file/block notation."""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return f"'{v}'"


def parse_value(text: str, kind: str):
    """Parse a literal value of the declared kind; raises ValueError on mismatch."""
    if kind == "text":
        if len(text) < 2 or text[0] != "'" or text[-1] != "'":
            raise ValueError(f"text value must be single-quoted: {text!r}")
        return _fold(text[1:-1])
    if kind == "boolean":
        if text not in ("0", "1"):
            raise ValueError(f"boolean value must be 0 or 1: {text!r}")
        return text == "1"
    if kind == "integer":
        body = text[1:] if text.startswith("-") else text
        if not body.isdigit():
            raise ValueError(f"integer value must be decimal digits: {text!r}")
        return int(text)
    if kind == "decimal":
        if "." not in text:
            raise ValueError(f"decimal value must contain '.': {text!r}")
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"bad decimal value: {text!r}") from None
    raise ValueError(f"unknown literal kind {kind!r}")


class KnowledgeGraph:
    """Validated, indexed knowledge graph.  Use :func:`load_kg` or
    :meth:`KnowledgeGraph.loads` to construct one."""

    def __init__(self, types, relations, entities, instances):
        self.types: frozenset[str] = frozenset(types)
        self.relations: tuple[RelationSignature, ...] = tuple(
            sorted(relations, key=lambda r: (r.name, r.domain, r.rng))
        )
        self.entities: dict[str, Entity] = {e.id: e for e in entities}
        self.instances: tuple[tuple[str, str, str], ...] = tuple(sorted(set(instances)))
        self._by_name: dict[str, list[RelationSignature]] = {}
        for sig in self.relations:
            self._by_name.setdefault(sig.name, []).append(sig)
        self._build_indexes()

    # -- construction -----------------------------------------------------

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "KnowledgeGraph":
        records = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            records.append((lineno, line.split("\t")))

        types: dict[str, int] = {}
        sigs: dict[tuple[str, str, str], RelationSignature] = {}
        sig_kind: dict[str, bool] = {}  # name -> literal?

        def declared(name):
            return name in types

        for lineno, fields in records:
            tag = fields[0]
            if tag == "type":
                if len(fields) != 2:
                    raise KgParseError("type record needs exactly one name", lineno)
                name = _fold(fields[1])
                if name in types:
                    raise KgSchemaError(f"duplicate type {name!r}", lineno)
                types[name] = lineno

        for lineno, fields in records:
            tag = fields[0]
            if tag not in ("rel", "attr"):
                continue
            if len(fields) != 5 or fields[3] != "->":
                raise KgParseError(f"malformed {tag} record", lineno)
            name, domain, rng = _fold(fields[1]), _fold(fields[2]), _fold(fields[4])
            literal = tag == "attr"
            if name == ID_ATTR:
                raise KgSchemaError(f"{ID_ATTR!r} is reserved for entity identifiers", lineno)
            if not declared(domain):
                raise KgSchemaError(f"undeclared domain type {domain!r}", lineno)
            if literal:
                if rng not in LITERAL_KINDS:
                    raise KgSchemaError(f"unknown literal kind {rng!r}", lineno)
            elif not declared(rng):
                raise KgSchemaError(f"undeclared range type {rng!r}", lineno)
            if name in sig_kind and sig_kind[name] != literal:
                raise KgSchemaError(
                    f"relation {name!r} declared both entity-valued and literal-valued", lineno
                )
            if literal:
                kinds = {s.rng for s in sigs.values() if s.name == name}
                if kinds and rng not in kinds:
                    raise KgSchemaError(
                        f"attr {name!r} declared with conflicting kinds", lineno
                    )
            key = (name, domain, rng)
            if key in sigs:
                raise KgSchemaError(f"duplicate signature {name} {domain} -> {rng}", lineno)
            sigs[key] = RelationSignature(name, domain, rng, literal)
            sig_kind[name] = literal

        by_name: dict[str, list[RelationSignature]] = {}
        for sig in sigs.values():
            by_name.setdefault(sig.name, []).append(sig)

        entities: dict[str, Entity] = {}
        for lineno, fields in records:
            if fields[0] != "ent":
                continue
            if len(fields) < 3:
                raise KgParseError("ent record needs id and type", lineno)
            eid, etype = _fold(fields[1]), _fold(fields[2])
            if eid in entities:
                raise KgSchemaError(f"duplicate entity id {eid!r}", lineno)
            if not declared(etype):
                raise KgSchemaError(f"undeclared entity type {etype!r}", lineno)
            attrs = {}
            for item in fields[3:]:
                if "=" not in item:
                    raise KgParseError(f"malformed attr assignment {item!r}", lineno)
                aname, _, avalue = item.partition("=")
                aname = _fold(aname)
                if aname == ID_ATTR:
                    raise KgSchemaError(f"{ID_ATTR!r} attr is implicit; do not declare it", lineno)
                matching = [
                    s for s in by_name.get(aname, []) if s.literal and s.domain == etype
                ]
                if not matching:
                    raise KgSchemaError(
                        f"no literal relation {aname!r} with domain {etype!r}", lineno
                    )
                if aname in attrs:
                    raise KgSchemaError(f"duplicate attr {aname!r}", lineno)
                try:
                    attrs[aname] = parse_value(avalue, matching[0].rng)
                except ValueError as exc:
                    raise KgSchemaError(str(exc), lineno) from None
            attrs[ID_ATTR] = eid
            entities[eid] = Entity(eid, etype, attrs)

        instances = []
        for lineno, fields in records:
            if fields[0] != "fact":
                continue
            if len(fields) != 4:
                raise KgParseError("fact record needs rel, subject, object", lineno)
            rel, subj, obj = _fold(fields[1]), _fold(fields[2]), _fold(fields[3])
            cand = by_name.get(rel)
            if cand is None:
                raise KgSchemaError(f"undeclared relation {rel!r}", lineno)
            if cand[0].literal:
                raise KgSchemaError(
                    f"relation {rel!r} is literal-valued; facts must link entities", lineno
                )
            if subj not in entities:
                raise KgSchemaError(f"unknown subject entity {subj!r}", lineno)
            if obj not in entities:
                raise KgSchemaError(f"unknown object entity {obj!r}", lineno)
            st, ot = entities[subj].type, entities[obj].type
            if not any(s.domain == st and s.rng == ot for s in cand):
                raise KgSchemaError(
                    f"no signature of {rel!r} matches ({st}, {ot})", lineno
                )
            instances.append((rel, subj, obj))

        for lineno, fields in records:
            if fields[0] not in ("type", "rel", "attr", "ent", "fact"):
                raise KgParseError(f"unknown record tag {fields[0]!r}", lineno)

        # id is an implicit text attr on every type
        all_sigs = list(sigs.values()) + [
            RelationSignature(ID_ATTR, t, "text", True) for t in sorted(types)
        ]
        return cls(types.keys(), all_sigs, entities.values(), instances)

    # -- serialization ----------------------------------------------------

    def serialize(self) -> str:
        """Canonical text form; load -> serialize -> load is the identity."""
        out = []
        for t in sorted(self.types):
            out.append(f"type\t{t}")
        for sig in self.relations:
            if sig.name == ID_ATTR:
                continue
            tag = "attr" if sig.literal else "rel"
            out.append(f"{tag}\t{sig.name}\t{sig.domain}\t->\t{sig.rng}")
        for eid in sorted(self.entities):
            ent = self.entities[eid]
            parts = [f"ent\t{ent.id}\t{ent.type}"]
            for aname in sorted(ent.attrs):
                if aname == ID_ATTR:
                    continue
                parts.append(f"{aname}={format_value(ent.attrs[aname])}")
            out.append("\t".join(parts))
        for rel, subj, obj in self.instances:
            out.append(f"fact\t{rel}\t{subj}\t{obj}")
        return "\n".join(out) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())

    def components(self):
        """The four components as comparable sets (round-trip equality)."""
        ents = frozenset(
            (e.id, e.type, tuple(sorted(e.attrs.items()))) for e in self.entities.values()
        )
        return (self.types, frozenset(self.relations), ents, frozenset(self.instances))

    def __eq__(self, other):
        return isinstance(other, KnowledgeGraph) and self.components() == other.components()

    def __hash__(self):  # pragma: no cover
        return hash(self.components()[0])

    # -- schema lookups ---------------------------------------------------

    def signatures(self, name: str) -> tuple[RelationSignature, ...]:
        return tuple(self._by_name.get(_fold(name), ()))

    def relation_kind(self, name: str) -> str | None:
        """'entity' | 'literal' | None for an undeclared name."""
        sigs = self._by_name.get(_fold(name))
        if not sigs:
            return None
        return "literal" if sigs[0].literal else "entity"

    def attr_kind(self, name: str) -> str:
        sigs = self._by_name.get(_fold(name))
        if not sigs:
            raise KgLookupError(f"unknown attr {name!r}")
        if not sigs[0].literal:
            raise KgLookupError(f"relation {name!r} is entity-valued, not an attr")
        return sigs[0].rng

    def entity_relation_names(self):
        return sorted(n for n, s in self._by_name.items() if not s[0].literal)

    def literal_relation_names(self, include_id: bool = False):
        return sorted(
            n
            for n, s in self._by_name.items()
            if s[0].literal and (include_id or n != ID_ATTR)
        )

    # -- lookups ----------------------------------------------------------

    def entities_of_type(self, t: str) -> frozenset[str]:
        t = _fold(t)
        if t not in self.types:
            raise KgLookupError(f"unknown type {t!r}")
        return self._by_type.get(t, frozenset())

    def neighbors(self, rel: str, objects, direction: str = "forward") -> frozenset[str]:
        """Entity-relation traversal.  forward: subjects whose (rel, s, o) has
        o in `objects`; inverse: objects whose (rel, s, o) has s in `objects`."""
        rel = _fold(rel)
        kind = self.relation_kind(rel)
        if kind is None:
            raise KgLookupError(f"unknown relation {rel!r}")
        if kind == "literal":
            raise KgLookupError(f"relation {rel!r} is literal-valued")
        if direction not in ("forward", "inverse"):
            raise ValueError(f"bad direction {direction!r}")
        index = self._fwd[rel] if direction == "forward" else self._inv[rel]
        found = set()
        for key in objects:
            found |= index.get(_fold(key), frozenset())
        return frozenset(found)

    def attr_values(self, attr: str, entity_ids) -> list:
        """Multiset of attr values over the given entities (sorted by entity id;
        entities lacking the attr contribute nothing)."""
        attr = _fold(attr)
        self.attr_kind(attr)  # validates name and kind
        values = []
        for eid in sorted(_fold(e) for e in entity_ids):
            ent = self.entities.get(eid)
            if ent is not None and attr in ent.attrs:
                values.append(ent.attrs[attr])
        return values

    def entities_with_attr_value(self, attr: str, value) -> frozenset[str]:
        if isinstance(value, str):
            value = _fold(value)
        return self._attr_val.get((_fold(attr), value), frozenset())

    # -- indexes ----------------------------------------------------------

    def _build_indexes(self):
        by_type: dict[str, set] = {}
        for ent in self.entities.values():
            by_type.setdefault(ent.type, set()).add(ent.id)
        self._by_type = {t: frozenset(s) for t, s in by_type.items()}

        fwd: dict[str, dict[str, set]] = {}
        inv: dict[str, dict[str, set]] = {}
        for name in self._by_name:
            if not self._by_name[name][0].literal:
                fwd[name] = {}
                inv[name] = {}
        for rel, subj, obj in self.instances:
            fwd[rel].setdefault(obj, set()).add(subj)
            inv[rel].setdefault(subj, set()).add(obj)
        self._fwd = {r: {k: frozenset(v) for k, v in m.items()} for r, m in fwd.items()}
        self._inv = {r: {k: frozenset(v) for k, v in m.items()} for r, m in inv.items()}

        attr_val: dict[tuple, set] = {}
        for ent in self.entities.values():
            for aname, avalue in ent.attrs.items():
                attr_val.setdefault((aname, avalue), set()).add(ent.id)
        self._attr_val = {k: frozenset(v) for k, v in attr_val.items()}


def load_kg(path) -> KnowledgeGraph:
    """Load and fully validate a knowledge-graph file."""
    with open(path, encoding="utf-8") as fh:
        return KnowledgeGraph.loads(fh.read(), source=str(path))
