"""Lambda-style logical forms for the flight domain.

The notation is the underscore-prefixed variant: `(_lambda $ 0e (_and
(_flight $ 0) (_from $ 0 dallas: _ci) ...))`.  A constant is written as an
atom with a trailing colon followed by a sort tag.  `atis_to_blocks` maps
the head type predicate to an entity block and every remaining conjunct to
either a relation/entity pair or an attribute-constrained entity block,
deciding by the knowledge graph schema.
"""

from dataclasses import dataclass


class AtisSyntaxError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class AtisConvertError(ValueError):
    pass


# -- AST ------------------------------------------------------------------

@dataclass(frozen=True)
class LambdaVar:
    index: int
    sort: str


@dataclass(frozen=True)
class VarRef:
    index: int


@dataclass(frozen=True)
class Constant:
    value: str
    sort: str


@dataclass(frozen=True)
class Predicate:
    name: str
    args: tuple


@dataclass(frozen=True)
class AndTerm:
    terms: tuple


@dataclass(frozen=True)
class LambdaTerm:
    var: LambdaVar
    body: object


# -- tokenizer ------------------------------------------------------------

_DIGITS = set("0123456789")
_WORD = set("abcdefghijklmnopqrstuvwxyz0123456789_")


def _tokenize(text):
    toks = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            toks.append((c, c, i))
            i += 1
        elif c == "$":
            toks.append(("dollar", "$", i))
            i += 1
        elif c == "'":
            j = text.find("'", i + 1)
            if j < 0:
                raise AtisSyntaxError("unterminated quoted constant", i)
            if j + 1 >= n or text[j + 1] != ":":
                raise AtisSyntaxError("quoted constant needs a ':' suffix", j)
            toks.append(("const", text[i + 1 : j].lower(), i))
            i = j + 2
        elif c.lower() in _WORD:
            j = i
            while j < n and text[j].lower() in _WORD:
                j += 1
            word = text[i:j].lower()
            if j < n and text[j] == ":":
                toks.append(("const", word, i))
                i = j + 1
            elif word[0] == "_":
                toks.append(("kw", word, i))
                i = j
            elif all(ch in _DIGITS for ch in word):
                toks.append(("num", int(word), i))
                i = j
            elif word[0] in _DIGITS:
                # a binder like `0e`: variable index plus sort letter(s)
                k = 0
                while k < len(word) and word[k] in _DIGITS:
                    k += 1
                toks.append(("binder", (int(word[:k]), word[k:]), i))
                i = j
            else:
                raise AtisSyntaxError(f"unexpected atom {word!r}", i)
        else:
            raise AtisSyntaxError(f"unexpected character {c!r}", i)
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
            raise AtisSyntaxError(f"expected {what or kind}, found end of input", self.end)
        if tok[0] != kind:
            raise AtisSyntaxError(f"expected {what or kind}, found {tok[1]!r}", tok[2])
        self.pos += 1
        return tok

    def expr(self):
        self._take("(")
        kw = self._take("kw", "a predicate")
        if kw[1] == "_and":
            terms = []
            while self._peek() is not None and self._peek()[0] == "(":
                terms.append(self.expr())
            self._take(")")
            if not terms:
                raise AtisSyntaxError("empty conjunction", kw[2])
            return AndTerm(tuple(terms))
        if kw[1] == "_lambda":
            raise AtisSyntaxError("nested lambda is not supported", kw[2])
        args = []
        while True:
            tok = self._peek()
            if tok is None:
                raise AtisSyntaxError("unbalanced parentheses", self.end)
            if tok[0] == ")":
                self.pos += 1
                break
            if tok[0] == "dollar":
                self.pos += 1
                num = self._take("num", "a variable index")
                args.append(VarRef(num[1]))
            elif tok[0] == "const":
                self.pos += 1
                sort = self._take("kw", "a sort tag")
                args.append(Constant(tok[1], sort[1]))
            else:
                raise AtisSyntaxError(f"unexpected argument {tok[1]!r}", tok[2])
        return Predicate(kw[1].lstrip("_"), tuple(args))


def parse_atis(text):
    parser = _Parser(text)
    parser._take("(")
    kw = parser._take("kw", "_lambda")
    if kw[1] != "_lambda":
        raise AtisSyntaxError("root must be a lambda", kw[2])
    parser._take("dollar", "$")
    binder = parser._take("binder", "a typed variable like 0e")
    index, sort = binder[1]
    body = parser.expr()
    parser._take(")")
    trailing = parser._peek()
    if trailing is not None:
        raise AtisSyntaxError(f"trailing input {trailing[1]!r}", trailing[2])
    return LambdaTerm(LambdaVar(index, sort), body)


# -- conversion -----------------------------------------------------------

def _parse_attr_value(kg, attr, raw):
    kind = kg.attr_kind(attr)
    if kind == "integer":
        try:
            return int(raw)
        except ValueError:
            raise AtisConvertError(f"attribute {attr!r} needs an integer, got {raw!r}") from None
    if kind == "decimal":
        try:
            return float(raw)
        except ValueError:
            raise AtisConvertError(f"attribute {attr!r} needs a number, got {raw!r}") from None
    if kind == "boolean":
        if raw in ("0", "1"):
            return int(raw)
        raise AtisConvertError(f"attribute {attr!r} needs 0 or 1, got {raw!r}")
    if attr == "day_number":
        # calendar days print zero-padded to two digits
        return raw.zfill(2)
    return raw


def atis_to_blocks(term, kg):
    from .blocks import EntityBlock, RelationBlock

    conjuncts = term.body.terms if isinstance(term.body, AndTerm) else (term.body,)
    lam = VarRef(term.var.index)

    head_type = None
    head_pos = None
    for i, c in enumerate(conjuncts):
        if not isinstance(c, Predicate):
            raise AtisConvertError("nested conjunctions are not supported")
        if len(c.args) == 1 and c.args[0] == lam and c.name in kg.types:
            if head_type is not None:
                raise AtisConvertError(
                    f"multiple head type predicates ({head_type!r} and {c.name!r})"
                )
            head_type, head_pos = c.name, i
    if head_type is None:
        raise AtisConvertError("no head type predicate on the lambda variable")

    blocks = [EntityBlock(head_type)]
    for i, c in enumerate(conjuncts):
        if i == head_pos:
            continue
        if not c.args or c.args[0] != lam:
            raise AtisConvertError(
                f"predicate {c.name!r} is not applied to the lambda variable"
            )
        if len(c.args) == 1:
            raise AtisConvertError(f"unmapped predicate {c.name!r}")
        if len(c.args) != 2:
            raise AtisConvertError(f"predicate {c.name!r} has unsupported arity")
        arg = c.args[1]
        if isinstance(arg, VarRef):
            raise AtisConvertError(
                f"variable-linked predicate {c.name!r} is not supported"
            )
        kind = kg.relation_kind(c.name)
        if kind == "entity":
            rng = None
            for sig in kg.signatures(c.name):
                if sig.domain == head_type:
                    rng = sig.rng
                    break
            if rng is None:
                raise AtisConvertError(
                    f"no {c.name!r} relation out of type {head_type!r}"
                )
            blocks.append(RelationBlock(head_type, c.name, rng))
            blocks.append(EntityBlock(rng, "id", arg.value))
        elif kind == "literal":
            value = _parse_attr_value(kg, c.name, arg.value)
            blocks.append(EntityBlock(head_type, c.name, value))
        else:
            raise AtisConvertError(f"unmapped predicate {c.name!r}")
    return blocks
