"""Assembly of block sequences into rooted query graphs, the legality
controller used by constrained decoding, and bottom-up execution.

Assembly is a stack discipline: the first block becomes the root and pushes
its slots (leftmost on top); each later block either fills the top slot, or,
when the stack is empty, is merged into the root as an implicit conjunction
provided it produces the root's entity type.  A sequence is complete when the
stack is empty.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import (
    AggrBlock,
    Block,
    EntityBlock,
    JoinBlock,
    LiteralBlock,
    OrdinalBlock,
    RelationBlock,
    OutputType,
    block_output_type,
    block_slots,
    print_block,
    print_blocks,
    relation_orientation,
    validate_blocks,
)

NUMERIC_KINDS = ("integer", "decimal")


class AssemblyError(ValueError):
    pass


class ExecutionError(RuntimeError):
    pass


# -- ordinal lexicon ------------------------------------------------------

class OrdinalLexicon:
    """Maps (surface superlative, entity type) -> (key attr, 'max'|'min')."""

    def __init__(self, entries=()):
        self.entries = dict(entries)

    def get(self, surface: str, type_: str):
        return self.entries.get((surface, type_))

    def surfaces_for(self, type_: str):
        return sorted(s for (s, t) in self.entries if t == type_)

    def serialize(self) -> str:
        lines = [
            f"ordinal\t{s}\t{t}\t{attr}\t{d}"
            for (s, t), (attr, d) in sorted(self.entries.items())
        ]
        return "\n".join(lines) + "\n" if lines else ""


def load_ordinals(path) -> OrdinalLexicon:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 5 or fields[0] != "ordinal":
                raise ValueError(f"{path}:{lineno}: malformed ordinal record")
            _, surface, t, attr, direction = fields
            if direction not in ("max", "min"):
                raise ValueError(f"{path}:{lineno}: direction must be max or min")
            entries[(surface.casefold(), t.casefold())] = (attr.casefold(), direction)
    return OrdinalLexicon(entries)


# -- assembly state and controller ----------------------------------------

@dataclass(frozen=True)
class AssemblyState:
    """Light state threaded by the decoder: the open-slot stack plus the
    root's output type.  Slots are ('entity', t) or ('value', t)."""

    root: OutputType | None = None
    stack: tuple = ()

    @property
    def complete(self) -> bool:
        return self.root is not None and not self.stack

    def requirement(self):
        """What the next block must produce: ('any'), ('entity', t),
        ('value', t), ('conj', t) with stopping allowed, or ('closed')."""
        if self.root is None:
            return ("any",)
        if self.stack:
            return self.stack[0]
        if self.root.kind == "entity-set":
            return ("conj", self.root.type)
        return ("closed",)

    def advance(self, block: Block, kg) -> "AssemblyState":
        out = block_output_type(block, kg)
        slots = tuple(block_slots(block))
        if self.root is None:
            return AssemblyState(out, slots)
        if self.stack:
            kind, t = self.stack[0]
            if kind == "entity":
                if not (out.kind == "entity-set" and out.type == t):
                    raise AssemblyError(
                        f"slot :{t} cannot take {print_block(block)} "
                        f"(produces {out.kind} {out.type or ''})".rstrip()
                    )
            else:
                if not (out.kind == "value-multiset" and out.type == t):
                    raise AssemblyError(
                        f"value slot over {t} cannot take {print_block(block)}"
                    )
            return AssemblyState(self.root, slots + self.stack[1:])
        if self.root.kind != "entity-set":
            raise AssemblyError(
                f"trailing block {print_block(block)} after a complete "
                f"{self.root.kind} query"
            )
        if not (out.kind == "entity-set" and out.type == self.root.type):
            raise AssemblyError(
                f"conjunction block {print_block(block)} does not produce "
                f"the root type {self.root.type}"
            )
        return AssemblyState(self.root, slots)


def _attrs_of_type(kg, t):
    return sorted(
        (s.name, s.rng) for s in kg.relations if s.literal and s.domain == t
    )


def _numeric_attrs(kg, t):
    return [a for a, k in _attrs_of_type(kg, t) if k in NUMERIC_KINDS]


def _entity_producers(kg, t):
    """All block shapes producing an entity set of type t."""
    shapes = {("entity", t)}
    for attr, kind in _attrs_of_type(kg, t):
        shapes.add(("entity", t, attr))
        if kind == "boolean":
            shapes.add(("literal", attr, t))
    for sig in kg.relations:
        if sig.literal:
            continue
        if sig.domain == t:
            shapes.add(("relation", t, sig.name, sig.rng))
        if sig.rng == t:
            shapes.add(("relation", t, sig.name, sig.domain))
    shapes.add(("ordinal", t))
    for op in ("intersection", "union", "exclude"):
        shapes.add(("join", op, t))
    return shapes


def _value_producers(kg, t):
    """Literal projections usable under aggr(average): numeric attrs only,
    so a random or decoded choice can always execute to numbers."""
    return {("literal", a, t) for a in _numeric_attrs(kg, t)}


def legal_next(state: AssemblyState, kg) -> frozenset:
    """Block shapes legal at this state, as shape tuples; ('eos',) marks that
    stopping is legal.  Ordinal shapes are schema-driven only; whether a
    surface form exists for the type is an execution-time concern."""
    req = state.requirement()
    if req[0] == "any":
        shapes = set()
        for t in kg.types:
            shapes |= _entity_producers(kg, t)
            shapes.add(("aggr", "count", t))
            if _numeric_attrs(kg, t):
                shapes.add(("aggr", "average", t))
            for attr, kind in _attrs_of_type(kg, t):
                if kind != "boolean":
                    shapes.add(("literal", attr, t))
        return frozenset(shapes)
    if req[0] == "entity":
        return frozenset(_entity_producers(kg, req[1]))
    if req[0] == "value":
        return frozenset(_value_producers(kg, req[1]))
    if req[0] == "conj":
        return frozenset(_entity_producers(kg, req[1]) | {("eos",)})
    return frozenset({("eos",)})


def block_shape(b: Block) -> tuple:
    """The shape tuple a block instantiates (values erased)."""
    if isinstance(b, EntityBlock):
        return ("entity", b.type) if b.attr is None else ("entity", b.type, b.attr)
    if isinstance(b, RelationBlock):
        return ("relation", b.out_type, b.rel, b.in_type)
    if isinstance(b, LiteralBlock):
        return ("literal", b.attr, b.type)
    if isinstance(b, OrdinalBlock):
        return ("ordinal", b.type)
    if isinstance(b, AggrBlock):
        return ("aggr", b.op, b.type)
    if isinstance(b, JoinBlock):
        return ("join", b.op, b.type)
    raise TypeError(f"not a block: {b!r}")


# -- query graph ----------------------------------------------------------

@dataclass
class SemanticQueryGraph:
    """Rooted operator graph: nodes are (block, output type); edges bind a
    parent's slot index to a child node; conj lists nodes intersected with
    the root by implicit conjunction."""

    nodes: list  # of (Block, OutputType)
    edges: dict  # (parent id, slot index) -> child id
    root: int
    conj: list  # node ids merged into the root

    def children(self, nid: int):
        n = len(block_slots(self.nodes[nid][0]))
        return [self.edges[(nid, i)] for i in range(n)]

    def describe(self) -> str:
        out = [f"root: {print_block(self.nodes[self.root][0])}"]
        for (parent, slot), child in sorted(self.edges.items()):
            out.append(
                f"  {print_block(self.nodes[parent][0])} "
                f"[slot {slot}] <- {print_block(self.nodes[child][0])}"
            )
        for nid in self.conj:
            out.append(f"  root & {print_block(self.nodes[nid][0])}")
        return "\n".join(out)


def assemble(seq, kg) -> SemanticQueryGraph:
    """Deterministic assembly; raises AssemblyError on type mismatch or
    open slots, ValueError when the sequence fails schema validation."""
    bad = validate_blocks(seq, kg)
    if bad:
        raise AssemblyError("; ".join(bad))
    nodes = []
    edges = {}
    conj = []
    stack = []  # (node id, slot index, kind, type); top is last
    root = None
    state = AssemblyState()
    for b in seq:
        state = state.advance(b, kg)  # raises on any discipline violation
        nid = len(nodes)
        nodes.append((b, block_output_type(b, kg)))
        if root is None:
            root = nid
        elif stack:
            parent, slot, _, _ = stack.pop()
            edges[(parent, slot)] = nid
        else:
            conj.append(nid)
        for i, (kind, t) in reversed(list(enumerate(block_slots(b)))):
            stack.append((nid, i, kind, t))
    if root is None:
        raise AssemblyError("empty sequence has no root")
    if stack:
        opens = ", ".join(f":{t}" for _, _, _, t in reversed(stack))
        raise AssemblyError(f"incomplete sequence; open slots: {opens}")
    return SemanticQueryGraph(nodes, edges, root, conj)


# -- execution ------------------------------------------------------------

@dataclass(frozen=True)
class AnswerSet:
    kind: str  # entity-set | value-multiset | scalar-number
    value: object  # frozenset of ids | tuple of values | number

    def __str__(self):
        if self.kind == "entity-set":
            return "{" + ", ".join(sorted(self.value)) + "}"
        if self.kind == "value-multiset":
            return "[" + ", ".join(str(v) for v in self.value) + "]"
        return str(self.value)


def _coerce_constraint(kg, attr, value):
    kind = kg.attr_kind(attr)
    if kind == "boolean":
        if value in (0, 1):
            return bool(value)
    elif kind == "decimal" and isinstance(value, int):
        return float(value)
    return value


def execute(graph: SemanticQueryGraph, kg, lexicon: OrdinalLexicon,
            trace=None) -> AnswerSet:
    """Bottom-up evaluation of a complete query graph.

    When trace is a list, every node evaluation appends a
    (node id, block, answer) triple in completion order."""

    def ent(nid) -> frozenset:
        a = evaluate(nid)
        if a.kind != "entity-set":  # pragma: no cover - assembly forbids it
            raise ExecutionError(f"expected an entity set, got {a.kind}")
        return a.value

    def evaluate(nid) -> AnswerSet:
        a = _answer(nid)
        if trace is not None:
            trace.append((nid, graph.nodes[nid][0], a))
        return a

    def _answer(nid) -> AnswerSet:
        b, _ = graph.nodes[nid]
        kids = graph.children(nid)
        if isinstance(b, EntityBlock):
            s = kg.entities_of_type(b.type)
            if b.attr is not None:
                v = _coerce_constraint(kg, b.attr, b.value)
                s = s & kg.entities_with_attr_value(b.attr, v)
            return AnswerSet("entity-set", s)
        if isinstance(b, RelationBlock):
            orient = relation_orientation(kg, b.out_type, b.rel, b.in_type)
            found = kg.neighbors(b.rel, ent(kids[0]), direction=orient)
            return AnswerSet("entity-set", found & kg.entities_of_type(b.out_type))
        if isinstance(b, LiteralBlock):
            if kg.attr_kind(b.attr) == "boolean":
                s = ent(kids[0])
                keep = frozenset(
                    e for e in s if kg.entities[e].attrs.get(b.attr) is True
                )
                return AnswerSet("entity-set", keep)
            return AnswerSet(
                "value-multiset", tuple(kg.attr_values(b.attr, ent(kids[0])))
            )
        if isinstance(b, OrdinalBlock):
            entry = lexicon.get(b.op, b.type)
            if entry is None:
                raise ExecutionError(
                    f"no ordinal lexicon entry for ({b.op}, {b.type})"
                )
            attr, direction = entry
            keyed = {
                e: kg.entities[e].attrs[attr]
                for e in ent(kids[0])
                if attr in kg.entities[e].attrs
            }
            if not keyed:
                return AnswerSet("entity-set", frozenset())
            extreme = max(keyed.values()) if direction == "max" else min(keyed.values())
            pick = min(e for e, v in keyed.items() if v == extreme)
            return AnswerSet("entity-set", frozenset({pick}))
        if isinstance(b, AggrBlock):
            child = evaluate(kids[0])
            if b.op == "count":
                if child.kind != "entity-set":
                    raise ExecutionError("count needs an entity set")
                return AnswerSet("scalar-number", len(child.value))
            if child.kind != "value-multiset":
                raise ExecutionError("average needs a value projection")
            values = child.value
            if not values:
                raise ExecutionError("average over an empty value multiset")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
                raise ExecutionError("average needs numeric values")
            return AnswerSet("scalar-number", sum(values) / len(values))
        if isinstance(b, JoinBlock):
            left, right = ent(kids[0]), ent(kids[1])
            if b.op == "intersection":
                return AnswerSet("entity-set", left & right)
            if b.op == "union":
                return AnswerSet("entity-set", left | right)
            return AnswerSet("entity-set", left - right)
        raise TypeError(f"not a block: {b!r}")  # pragma: no cover

    answer = evaluate(graph.root)
    if graph.conj:
        s = answer.value
        for nid in graph.conj:
            s = s & ent(nid)
        answer = AnswerSet("entity-set", s)
    return answer


def run_blocks(seq, kg, lexicon: OrdinalLexicon, trace=None) -> AnswerSet:
    """Convenience: assemble then execute."""
    return execute(assemble(seq, kg), kg, lexicon, trace=trace)
