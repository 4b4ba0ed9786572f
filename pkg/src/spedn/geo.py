"""Prolog-style logical forms for the geography domain.

`parse_geo` reads the textual form into a small AST.  `geo_to_blocks` walks
the variable-dependency structure rooted at the answer variable and
linearizes it into a semantic block sequence.  Functor classification is
data-driven: a predicate table maps each functor to one of seven roles
(type, adjective, relation, attr, superlative, aggregate, const) so a new
domain only needs a new table, not new code.
"""

from dataclasses import dataclass

from . import data_path
from .blocks import (
    AggrBlock,
    EntityBlock,
    JoinBlock,
    LiteralBlock,
    OrdinalBlock,
    RelationBlock,
)


class GeoSyntaxError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class GeoConvertError(ValueError):
    pass


# -- AST ------------------------------------------------------------------

@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Atom:
    value: object


@dataclass(frozen=True)
class GeoTerm:
    functor: str
    args: tuple


@dataclass(frozen=True)
class Conj:
    terms: tuple


# -- parsing --------------------------------------------------------------

_LOWER = set("abcdefghijklmnopqrstuvwxyz_")
_UPPER = set("ABCDEFGHIJKLMNOPQRSTUVWXYZ")
_IDENT = _LOWER | set("0123456789")
_DIGITS = set("0123456789")


def _tokenize(text):
    toks = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "(),":
            toks.append((c, c, i))
            i += 1
        elif c == "'":
            j = text.find("'", i + 1)
            if j < 0:
                raise GeoSyntaxError("unterminated quoted atom", i)
            toks.append(("atom", text[i + 1 : j].lower(), i))
            i = j + 1
        elif c in _UPPER:
            if i + 1 < n and (text[i + 1] in _IDENT or text[i + 1] in _UPPER):
                raise GeoSyntaxError("variables are single uppercase letters", i)
            toks.append(("var", c, i))
            i += 1
        elif c in _DIGITS:
            j = i + 1
            while j < n and (text[j] in _DIGITS or text[j] == "."):
                j += 1
            body = text[i:j]
            try:
                num = float(body) if "." in body else int(body)
            except ValueError:
                raise GeoSyntaxError(f"malformed number {body!r}", i) from None
            toks.append(("atom", num, i))
            i = j
        elif c in _LOWER:
            j = i + 1
            while j < n and text[j] in _IDENT:
                j += 1
            toks.append(("ident", text[i:j], i))
            i = j
        else:
            raise GeoSyntaxError(f"unexpected character {c!r}", i)
    return toks


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.pos = 0
        self.end = len(text)

    def _peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def _take(self, kind, what=None):
        tok = self._peek()
        if tok is None:
            raise GeoSyntaxError(f"expected {what or kind}, found end of input", self.end)
        if tok[0] != kind:
            raise GeoSyntaxError(f"expected {what or kind}, found {tok[1]!r}", tok[2])
        self.pos += 1
        return tok

    def value(self):
        tok = self._peek()
        if tok is None:
            raise GeoSyntaxError("expected a term", self.end)
        kind, val, off = tok
        if kind == "var":
            self.pos += 1
            return Var(val)
        if kind == "atom":
            self.pos += 1
            return Atom(val)
        if kind == "ident":
            self.pos += 1
            nxt = self._peek()
            if nxt is not None and nxt[0] == "(":
                return self._term_args(val)
            return Atom(val)
        if kind == "(":
            self.pos += 1
            terms = [self.value()]
            while self._peek() is not None and self._peek()[0] == ",":
                self.pos += 1
                terms.append(self.value())
            self._take(")")
            if len(terms) == 1:
                return terms[0]
            for t in terms:
                if not isinstance(t, GeoTerm):
                    raise GeoSyntaxError("conjunction elements must be predicates", off)
            return Conj(tuple(terms))
        raise GeoSyntaxError(f"unexpected {val!r}", off)

    def _term_args(self, functor):
        self._take("(")
        args = [self.value()]
        while self._peek() is not None and self._peek()[0] == ",":
            self.pos += 1
            args.append(self.value())
        self._take(")")
        return GeoTerm(functor, tuple(args))


def parse_geo(text):
    parser = _Parser(text)
    term = parser.value()
    trailing = parser._peek()
    if trailing is not None:
        raise GeoSyntaxError(f"trailing input {trailing[1]!r}", trailing[2])
    if not isinstance(term, GeoTerm) or term.functor != "answer" or len(term.args) != 2:
        raise GeoSyntaxError("root functor must be answer/2", 0)
    if not isinstance(term.args[0], Var):
        raise GeoSyntaxError("first argument of answer must be a variable", 0)
    return term


# -- predicate table ------------------------------------------------------

PRED_KINDS = frozenset(
    ["type", "adjective", "relation", "attr", "superlative", "aggregate", "const"]
)


class GeoPredTable:
    """Functor -> (role, mapped name).  For const rows the mapping is the
    entity type named by the wrapper functor (stateid -> state)."""

    def __init__(self, entries):
        self.entries = dict(entries)

    @classmethod
    def load(cls, path):
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 4 or fields[0] != "geo-pred":
                    raise ValueError(f"{path}:{lineno}: malformed geo-pred record")
                _, functor, kind, mapping = fields
                if kind not in PRED_KINDS:
                    raise ValueError(f"{path}:{lineno}: unknown role {kind!r}")
                if functor in entries:
                    raise ValueError(f"{path}:{lineno}: duplicate functor {functor!r}")
                entries[functor] = (kind, mapping)
        return cls(entries)

    def kind(self, functor):
        entry = self.entries.get(functor)
        return entry[0] if entry else None

    def mapping(self, functor):
        return self.entries[functor][1]


_bundled_table = None


def default_pred_table():
    global _bundled_table
    if _bundled_table is None:
        _bundled_table = GeoPredTable.load(data_path("geo", "geo_preds.txt"))
    return _bundled_table


# -- conversion -----------------------------------------------------------

def _conjuncts(term):
    if isinstance(term, Conj):
        return list(term.terms)
    if isinstance(term, GeoTerm):
        return [term]
    raise GeoConvertError(f"expected predicates, found {term!r}")


class _Scope:
    def __init__(self, conjuncts):
        self.conjuncts = conjuncts
        self.used = set()

    def assert_done(self):
        for i, c in enumerate(self.conjuncts):
            if i not in self.used:
                raise GeoConvertError(
                    f"predicate {c.functor!r} is not reachable from the answer variable"
                )


class _Converter:
    def __init__(self, kg, preds):
        self.kg = kg
        self.preds = preds
        self.var_types = {}

    # .. type collection ..................................................

    def collect_types(self, conjuncts):
        for c in conjuncts:
            if not isinstance(c, GeoTerm):
                raise GeoConvertError(f"expected a predicate, found {c!r}")
            if c.functor == "const":
                self._collect_const(c)
                continue
            kind = self.preds.kind(c.functor)
            if kind is None:
                raise GeoConvertError(f"unmapped predicate {c.functor!r}")
            if kind == "type":
                self._need_args(c, 1)
                t = self.preds.mapping(c.functor)
                if t not in self.kg.types:
                    raise GeoConvertError(
                        f"predicate {c.functor!r} maps to unknown type {t!r}"
                    )
                self._assign_type(c.args[0], t)
            elif kind == "superlative":
                self._need_args(c, 2)
                self.collect_types(_conjuncts(c.args[1]))
            elif kind == "aggregate":
                self._need_args(c, 3)
                self.collect_types(_conjuncts(c.args[1]))

    def _collect_const(self, c):
        self._need_args(c, 2)
        inner = c.args[1]
        if (
            not isinstance(inner, GeoTerm)
            or len(inner.args) != 1
            or not isinstance(inner.args[0], Atom)
        ):
            raise GeoConvertError("const needs a wrapped identifier, e.g. stateid(texas)")
        if self.preds.kind(inner.functor) != "const":
            raise GeoConvertError(f"unmapped predicate {inner.functor!r}")
        self._assign_type(c.args[0], self.preds.mapping(inner.functor))

    def _assign_type(self, arg, t):
        if not isinstance(arg, Var):
            raise GeoConvertError("type predicates apply to variables")
        old = self.var_types.get(arg.name)
        if old is not None and old != t:
            raise GeoConvertError(
                f"variable {arg.name} is typed both {old!r} and {t!r}"
            )
        self.var_types[arg.name] = t

    @staticmethod
    def _need_args(c, n):
        if len(c.args) != n:
            raise GeoConvertError(f"predicate {c.functor!r} needs {n} arguments")

    def type_of(self, var):
        t = self.var_types.get(var)
        if t is None:
            raise GeoConvertError(f"cannot determine the type of variable {var}")
        return t

    # .. item claiming ....................................................

    def claim(self, var, scope):
        """Pull this variable's outstanding constraints from the scope, in
        conjunct order.  Type predicates are absorbed silently."""
        items = []
        for i, c in enumerate(scope.conjuncts):
            if i in scope.used:
                continue
            if c.functor == "const":
                if c.args[0] == Var(var):
                    scope.used.add(i)
                    items.append(("const", c.args[1].args[0].value))
                continue
            kind = self.preds.kind(c.functor)
            if kind == "type":
                if c.args[0] == Var(var):
                    scope.used.add(i)
            elif kind == "adjective":
                self._need_args(c, 1)
                if c.args[0] == Var(var):
                    scope.used.add(i)
                    items.append(("adj", self.preds.mapping(c.functor)))
            elif kind == "relation":
                self._need_args(c, 2)
                if Var(var) in c.args:
                    left, right = c.args
                    if not (isinstance(left, Var) and isinstance(right, Var)):
                        raise GeoConvertError(
                            f"relation predicate {c.functor!r} needs two variables"
                        )
                    other = right.name if left.name == var else left.name
                    scope.used.add(i)
                    items.append(("rel", self.preds.mapping(c.functor), other))
            elif kind == "superlative":
                if c.args[0] == Var(var):
                    scope.used.add(i)
                    items.append(("sup", c.functor, c.args[1]))
            elif kind == "attr":
                self._need_args(c, 2)
                if Var(var) in c.args:
                    raise GeoConvertError(
                        f"attribute predicate {c.functor!r} is only supported in "
                        "value positions"
                    )
            elif kind == "aggregate":
                if Var(var) in c.args:
                    raise GeoConvertError(
                        f"nested aggregate {c.functor!r} is not supported"
                    )
        return items

    # .. rendering ........................................................

    def render_var(self, var, scope):
        return self.render_items(var, self.claim(var, scope), scope)

    def render_items(self, var, items, scope):
        t = self.type_of(var)
        if not items:
            return [EntityBlock(t)]
        if len(items) == 1:
            return self.render_item(var, items[0], scope)
        head = self.render_item(var, items[0], scope)
        rest = self.render_items(var, items[1:], scope)
        return [JoinBlock("intersection", t)] + head + rest

    def render_item(self, var, item, scope):
        t = self.type_of(var)
        tag = item[0]
        if tag == "const":
            return [EntityBlock(t, "id", str(item[1]))]
        if tag == "adj":
            return [EntityBlock(t, item[1], 1)]
        if tag == "rel":
            _, rel, other = item
            blocks = [RelationBlock(t, rel, self.type_of(other))]
            return blocks + self.render_var(other, scope)
        if tag == "sup":
            _, surface, goal = item
            inner = _Scope(_conjuncts(goal))
            blocks = [OrdinalBlock(surface, t)] + self.render_var(var, inner)
            inner.assert_done()
            return blocks
        raise GeoConvertError(f"unsupported constraint {tag!r}")

    # .. roots ............................................................

    def convert(self, term):
        ans = term.args[0].name
        body = _conjuncts(term.args[1])
        self.collect_types(body)
        scope = _Scope(body)

        for i, c in enumerate(body):
            if self.preds.kind(c.functor) == "attr" and len(c.args) == 2:
                if c.args[1] == Var(ans) and isinstance(c.args[0], Var):
                    scope.used.add(i)
                    ent = c.args[0].name
                    attr = self.preds.mapping(c.functor)
                    blocks = [LiteralBlock(attr, self.type_of(ent))]
                    blocks += self.render_var(ent, scope)
                    scope.assert_done()
                    return blocks

        for i, c in enumerate(body):
            if self.preds.kind(c.functor) == "aggregate" and len(c.args) == 3:
                if c.args[2] == Var(ans):
                    scope.used.add(i)
                    blocks = self._render_aggregate(c)
                    scope.assert_done()
                    return blocks

        items = self.claim(ans, scope)
        if items and items[0][0] == "adj":
            # the filter reads as the answer set itself, so it heads the
            # sequence as a boolean literal rather than an entity constraint
            t = self.type_of(ans)
            blocks = [LiteralBlock(items[0][1], t)]
            blocks += self.render_items(ans, items[1:], scope)
        else:
            blocks = self.render_items(ans, items, scope)
        scope.assert_done()
        return blocks

    def _render_aggregate(self, c):
        op = self.preds.mapping(c.functor)
        if not isinstance(c.args[0], Var):
            raise GeoConvertError(f"{c.functor} needs a variable as first argument")
        bound = c.args[0].name
        goal = _Scope(_conjuncts(c.args[1]))
        self.collect_types(goal.conjuncts)
        if op == "count":
            blocks = [AggrBlock("count", self.type_of(bound))]
            blocks += self.render_var(bound, goal)
        elif op == "average":
            ent, attr = self._find_value_source(bound, goal)
            t = self.type_of(ent)
            blocks = [AggrBlock("average", t), LiteralBlock(attr, t)]
            blocks += self.render_var(ent, goal)
        else:
            raise GeoConvertError(f"unsupported aggregate {c.functor!r}")
        goal.assert_done()
        return blocks

    def _find_value_source(self, value_var, goal):
        for i, c in enumerate(goal.conjuncts):
            if self.preds.kind(c.functor) == "attr" and len(c.args) == 2:
                if c.args[1] == Var(value_var) and isinstance(c.args[0], Var):
                    goal.used.add(i)
                    return c.args[0].name, self.preds.mapping(c.functor)
        raise GeoConvertError(
            f"average needs an attribute predicate producing variable {value_var}"
        )


def geo_to_blocks(term, kg, preds=None):
    if preds is None:
        preds = default_pred_table()
    return _Converter(kg, preds).convert(term)
