"""The six-pattern semantic-block IR, its text notation, and schema validation.

Notation: `pattern(arg, arg, ...)`, blocks separated by whitespace.  Args are
identifiers, `:type` slots, single-quoted text values, or bare numbers.
Canonical print uses `, ` between args and a single space between blocks, e.g.

    literal(major, :city) relation(city, loc, :state)
"""

from __future__ import annotations

from dataclasses import dataclass

PATTERNS = ("entity", "relation", "literal", "ordinal", "aggr", "join")
AGGR_OPS = ("count", "average")
JOIN_OPS = ("intersection", "union", "exclude")


class BlockSyntaxError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"offset {offset}: {msg}")


@dataclass(frozen=True)
class EntityBlock:
    """A typed entity collection, optionally filtered by one attribute value."""

    type: str
    attr: str | None = None
    value: object | None = None


@dataclass(frozen=True)
class RelationBlock:
    """Entities of out_type related through rel to a slot of in_type."""

    out_type: str
    rel: str
    in_type: str


@dataclass(frozen=True)
class LiteralBlock:
    """Attribute read over a slot: boolean attrs filter, others project values."""

    attr: str
    type: str


@dataclass(frozen=True)
class OrdinalBlock:
    """Pick the extreme entity of a slot under a surface superlative."""

    op: str
    type: str


@dataclass(frozen=True)
class AggrBlock:
    """Reduce a slot to one number: count an entity set or average values."""

    op: str
    type: str


@dataclass(frozen=True)
class JoinBlock:
    """Binary set operation over two slots of one entity type."""

    op: str
    type: str


Block = EntityBlock | RelationBlock | LiteralBlock | OrdinalBlock | AggrBlock | JoinBlock


@dataclass(frozen=True)
class OutputType:
    kind: str  # entity-set | value-multiset | scalar-number
    type: str | None = None
    literal_kind: str | None = None


# -- tokenizer ------------------------------------------------------------

_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CHARS = _IDENT_START | set("0123456789")
_DIGITS = set("0123456789")


def _tokenize(text: str):
    toks = []  # (kind, value, offset)
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "(),:":
            toks.append((c, c, i))
            i += 1
        elif c == "'":
            j = text.find("'", i + 1)
            if j < 0:
                raise BlockSyntaxError("unterminated quoted value", i)
            toks.append(("value", text[i + 1 : j], i))
            i = j + 1
        elif c in _DIGITS or (c == "-" and i + 1 < n and text[i + 1] in _DIGITS):
            j = i + 1
            while j < n and (text[j] in _DIGITS or text[j] == "."):
                j += 1
            body = text[i:j]
            try:
                num = float(body) if "." in body else int(body)
            except ValueError:
                raise BlockSyntaxError(f"malformed number {body!r}", i) from None
            toks.append(("number", num, i))
            i = j
        elif c in _IDENT_START:
            j = i + 1
            while j < n and text[j] in _IDENT_CHARS:
                j += 1
            toks.append(("ident", text[i:j].lower(), i))
            i = j
        else:
            raise BlockSyntaxError(f"unexpected character {c!r}", i)
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0
        self.end = len(text)

    def _peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def _next(self, kind=None, what=None):
        tok = self._peek()
        if tok is None:
            raise BlockSyntaxError(f"unexpected end of input, wanted {what or kind}", self.end)
        if kind is not None and tok[0] != kind:
            raise BlockSyntaxError(f"expected {what or kind}, got {tok[1]!r}", tok[2])
        self.pos += 1
        return tok

    def parse_sequence(self):
        blocks = []
        while self._peek() is not None:
            blocks.append(self.parse_block())
        return blocks

    def parse_block(self):
        kind, name, off = self._next("ident", "pattern name")
        if name not in PATTERNS:
            raise BlockSyntaxError(f"unknown pattern {name!r}", off)
        self._next("(", "'('")
        args = []
        if self._peek() and self._peek()[0] != ")":
            args.append(self._arg())
            while self._peek() and self._peek()[0] == ",":
                self._next(",")
                args.append(self._arg())
        self._next(")", "')'")
        return self._shape(name, args, off)

    def _arg(self):
        tok = self._peek()
        if tok is None:
            raise BlockSyntaxError("unexpected end of input in argument", self.end)
        if tok[0] == ":":
            self._next(":")
            _, t, _ = self._next("ident", "slot type")
            return ("slot", t)
        if tok[0] == "ident":
            self._next()
            return ("ident", tok[1])
        if tok[0] == "value":
            self._next()
            return ("value", tok[1].lower())
        if tok[0] == "number":
            self._next()
            return ("number", tok[1])
        raise BlockSyntaxError(f"bad argument start {tok[1]!r}", tok[2])

    def _shape(self, name, args, off):
        def ident(i, what):
            k, v = args[i]
            if k != "ident":
                raise BlockSyntaxError(f"{name}: argument {i + 1} must be {what}", off)
            return v

        def slot(i):
            k, v = args[i]
            if k != "slot":
                raise BlockSyntaxError(f"{name}: argument {i + 1} must be a :type slot", off)
            return v

        if name == "entity":
            if len(args) == 1:
                return EntityBlock(ident(0, "a type name"))
            if len(args) == 3:
                k, v = args[2]
                if k not in ("value", "number"):
                    raise BlockSyntaxError("entity: constraint value must be quoted or numeric", off)
                return EntityBlock(ident(0, "a type name"), ident(1, "an attr name"), v)
            raise BlockSyntaxError("entity takes 1 or 3 arguments", off)
        if name == "relation":
            if len(args) != 3:
                raise BlockSyntaxError("relation takes 3 arguments", off)
            return RelationBlock(ident(0, "a type name"), ident(1, "a relation name"), slot(2))
        if name == "literal":
            if len(args) != 2:
                raise BlockSyntaxError("literal takes 2 arguments", off)
            return LiteralBlock(ident(0, "an attr name"), slot(1))
        if name == "ordinal":
            if len(args) != 2:
                raise BlockSyntaxError("ordinal takes 2 arguments", off)
            return OrdinalBlock(ident(0, "a superlative name"), slot(1))
        if name == "aggr":
            if len(args) != 2:
                raise BlockSyntaxError("aggr takes 2 arguments", off)
            op = ident(0, "an aggregate op")
            if op not in AGGR_OPS:
                raise BlockSyntaxError(f"aggr op must be one of {AGGR_OPS}", off)
            return AggrBlock(op, slot(1))
        if name == "join":
            if len(args) != 3:
                raise BlockSyntaxError("join takes 3 arguments (op and two slots)", off)
            op = ident(0, "a set op")
            if op not in JOIN_OPS:
                raise BlockSyntaxError(f"join op must be one of {JOIN_OPS}", off)
            t1, t2 = slot(1), slot(2)
            if t1 != t2:
                raise BlockSyntaxError("join slots must share one type", off)
            return JoinBlock(op, t1)
        raise BlockSyntaxError(f"unknown pattern {name!r}", off)  # pragma: no cover


def parse_blocks(text: str) -> list:
    """Parse block notation into a block sequence; raises BlockSyntaxError."""
    seq = _Parser(text).parse_sequence()
    if not seq:
        raise BlockSyntaxError("empty block sequence", 0)
    return seq


def _fmt_value(v) -> str:
    if isinstance(v, str):
        return f"'{v}'"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def print_block(b: Block) -> str:
    if isinstance(b, EntityBlock):
        if b.attr is None:
            return f"entity({b.type})"
        return f"entity({b.type}, {b.attr}, {_fmt_value(b.value)})"
    if isinstance(b, RelationBlock):
        return f"relation({b.out_type}, {b.rel}, :{b.in_type})"
    if isinstance(b, LiteralBlock):
        return f"literal({b.attr}, :{b.type})"
    if isinstance(b, OrdinalBlock):
        return f"ordinal({b.op}, :{b.type})"
    if isinstance(b, AggrBlock):
        return f"aggr({b.op}, :{b.type})"
    if isinstance(b, JoinBlock):
        return f"join({b.op}, :{b.type}, :{b.type})"
    raise TypeError(f"not a block: {b!r}")


def print_blocks(seq) -> str:
    """Canonical notation: `, ` between args, one space between blocks."""
    return " ".join(print_block(b) for b in seq)


# -- schema validation ----------------------------------------------------

def relation_orientation(kg, out_type: str, rel: str, in_type: str) -> str | None:
    """'forward' if a signature reads (out_type -> in_type), 'inverse' if
    only the flipped signature exists, None if neither."""
    sigs = kg.signatures(rel)
    if any(s.domain == out_type and s.rng == in_type and not s.literal for s in sigs):
        return "forward"
    if any(s.domain == in_type and s.rng == out_type and not s.literal for s in sigs):
        return "inverse"
    return None


def validate_block(b: Block, kg) -> list:
    bad = []
    text = print_block(b)

    def check_type(t):
        if t not in kg.types:
            bad.append(f"{text}: unknown type {t!r}")
            return False
        return True

    if isinstance(b, EntityBlock):
        ok = check_type(b.type)
        if b.attr is not None and ok:
            sigs = [s for s in kg.signatures(b.attr) if s.literal and s.domain == b.type]
            if not sigs:
                bad.append(f"{text}: {b.attr!r} is not a literal relation of {b.type!r}")
            else:
                kind = sigs[0].rng
                v = b.value
                if kind == "text" and not isinstance(v, str):
                    bad.append(f"{text}: {b.attr!r} wants a quoted text value")
                elif kind == "boolean" and v not in (0, 1):
                    bad.append(f"{text}: {b.attr!r} wants 0 or 1")
                elif kind == "integer" and not isinstance(v, int):
                    bad.append(f"{text}: {b.attr!r} wants an integer value")
                elif kind == "decimal" and not isinstance(v, (int, float)):
                    bad.append(f"{text}: {b.attr!r} wants a numeric value")
    elif isinstance(b, RelationBlock):
        if check_type(b.out_type) and check_type(b.in_type):
            if kg.relation_kind(b.rel) != "entity":
                bad.append(f"{text}: {b.rel!r} is not an entity relation")
            elif relation_orientation(kg, b.out_type, b.rel, b.in_type) is None:
                bad.append(
                    f"{text}: no signature of {b.rel!r} joins {b.out_type!r} and {b.in_type!r}"
                )
    elif isinstance(b, LiteralBlock):
        if check_type(b.type):
            sigs = [s for s in kg.signatures(b.attr) if s.literal and s.domain == b.type]
            if not sigs:
                bad.append(f"{text}: {b.attr!r} is not a literal relation of {b.type!r}")
    elif isinstance(b, (OrdinalBlock, AggrBlock, JoinBlock)):
        check_type(b.type)
    return bad


def validate_blocks(seq, kg) -> list:
    """Schema violations for every block; empty list means all valid."""
    out = []
    for b in seq:
        out.extend(validate_block(b, kg))
    return out


def block_output_type(b: Block, kg) -> OutputType:
    """What a block produces.  Needs the graph: a literal block's reading
    (filter vs projection) depends on the attr's declared kind."""
    if isinstance(b, EntityBlock):
        return OutputType("entity-set", b.type)
    if isinstance(b, RelationBlock):
        return OutputType("entity-set", b.out_type)
    if isinstance(b, (OrdinalBlock, JoinBlock)):
        return OutputType("entity-set", b.type)
    if isinstance(b, AggrBlock):
        return OutputType("scalar-number")
    if isinstance(b, LiteralBlock):
        kind = kg.attr_kind(b.attr)
        if kind == "boolean":
            return OutputType("entity-set", b.type)
        return OutputType("value-multiset", b.type, kind)
    raise TypeError(f"not a block: {b!r}")


def block_slots(b: Block) -> list:
    """Typed slots a block opens, in left-to-right order.  Each is
    ('entity', t) for an entity-set slot or ('value', t) for the
    literal-projection slot under aggr(average)."""
    if isinstance(b, EntityBlock):
        return []
    if isinstance(b, RelationBlock):
        return [("entity", b.in_type)]
    if isinstance(b, (LiteralBlock, OrdinalBlock)):
        return [("entity", b.type)]
    if isinstance(b, AggrBlock):
        return [("value", b.type)] if b.op == "average" else [("entity", b.type)]
    if isinstance(b, JoinBlock):
        return [("entity", b.type), ("entity", b.type)]
    raise TypeError(f"not a block: {b!r}")
