"""Question preprocessing.

Turns a raw question into (1) stemmed tokens, (2) entity-link candidates
found through an alias lexicon, (3) the set of candidate types and
schema-compatible relations between them, and (4) an input graph whose
nodes are word, type, and relation symbols.  Stemming is classic Porter
suffix stripping, so surface variants such as city/cities collapse to one
symbol (citi) that can also match a type name.
"""

from dataclasses import dataclass

_VOWELS = set("aeiou")
_PUNCT = "?!.,;:\"'()"


# -- stemming -------------------------------------------------------------

def _cons(w, i):
    c = w[i]
    if c in _VOWELS:
        return False
    if c == "y":
        return i == 0 or not _cons(w, i - 1)
    return True


def _measure(w):
    m = 0
    prev_vowel = False
    for i in range(len(w)):
        vowel = not _cons(w, i)
        if prev_vowel and not vowel:
            m += 1
        prev_vowel = vowel
    return m


def _has_vowel(w):
    return any(not _cons(w, i) for i in range(len(w)))


def _double_cons(w):
    return len(w) >= 2 and w[-1] == w[-2] and _cons(w, len(w) - 1)


def _cvc(w):
    if len(w) < 3:
        return False
    return (
        _cons(w, len(w) - 3)
        and not _cons(w, len(w) - 2)
        and _cons(w, len(w) - 1)
        and w[-1] not in "wxy"
    )


def _replace(w, suffix, repl, min_measure):
    stemmed = w[: len(w) - len(suffix)]
    if _measure(stemmed) > min_measure:
        return stemmed + repl
    return w


_STEP2 = [
    ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
    ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
    ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
    ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
    ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
]

_STEP3 = [
    ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
    ("ical", "ic"), ("ful", ""), ("ness", ""),
]

_STEP4 = [
    "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
    "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
]


def stem(word):
    w = word.lower()
    if len(w) <= 2:
        return w

    # step 1a
    if w.endswith("sses"):
        w = w[:-2]
    elif w.endswith("ies"):
        w = w[:-2]
    elif not w.endswith("ss") and w.endswith("s"):
        w = w[:-1]

    # step 1b
    if w.endswith("eed"):
        if _measure(w[:-3]) > 0:
            w = w[:-1]
    else:
        hit = None
        if w.endswith("ed") and _has_vowel(w[:-2]):
            hit = w = w[:-2]
        elif w.endswith("ing") and _has_vowel(w[:-3]):
            hit = w = w[:-3]
        if hit is not None:
            if w.endswith(("at", "bl", "iz")):
                w = w + "e"
            elif _double_cons(w) and w[-1] not in "lsz":
                w = w[:-1]
            elif _measure(w) == 1 and _cvc(w):
                w = w + "e"

    # step 1c
    if w.endswith("y") and _has_vowel(w[:-1]):
        w = w[:-1] + "i"

    # step 2
    for suffix, repl in _STEP2:
        if w.endswith(suffix):
            w = _replace(w, suffix, repl, 0)
            break

    # step 3
    for suffix, repl in _STEP3:
        if w.endswith(suffix):
            w = _replace(w, suffix, repl, 0)
            break

    # step 4
    for suffix in _STEP4:
        if w.endswith(suffix):
            stemmed = w[: len(w) - len(suffix)]
            if _measure(stemmed) > 1:
                if suffix == "ion" and not stemmed.endswith(("s", "t")):
                    break
                w = stemmed
            break

    # step 5a
    if w.endswith("e"):
        stemmed = w[:-1]
        m = _measure(stemmed)
        if m > 1 or (m == 1 and not _cvc(stemmed)):
            w = stemmed

    # step 5b
    if _measure(w) > 1 and _double_cons(w) and w.endswith("l"):
        w = w[:-1]

    return w


def tokenize(question):
    """Lowercased whitespace tokens with edge punctuation stripped."""
    out = []
    for piece in question.lower().split():
        piece = piece.strip(_PUNCT)
        if piece:
            out.append(piece)
    return out


# -- alias lexicon --------------------------------------------------------

class AliasLexicon:
    """Surface form -> entity id, matched on stemmed token tuples."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        self._by_stems = {}
        self.max_len = 0
        for surface, eid in self.pairs:
            key = tuple(stem(t) for t in tokenize(surface))
            if not key:
                raise ValueError(f"alias surface {surface!r} has no tokens")
            # first spelling of a stem tuple wins; ids must agree
            prev = self._by_stems.get(key)
            if prev is not None and prev != eid:
                raise ValueError(
                    f"alias {surface!r} maps to both {prev!r} and {eid!r}"
                )
            self._by_stems[key] = eid
            self.max_len = max(self.max_len, len(key))

    @classmethod
    def load(cls, path):
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.rstrip("\n")
                if not line.strip() or line.lstrip().startswith("#"):
                    continue
                fields = line.split("\t")
                if len(fields) != 3 or fields[0] != "alias":
                    raise ValueError(f"{path}:{lineno}: malformed alias record")
                pairs.append((fields[1].casefold(), fields[2].casefold()))
        return cls(pairs)

    def lookup(self, stems):
        return self._by_stems.get(tuple(stems))


def load_aliases(path):
    return AliasLexicon.load(path)


# -- context --------------------------------------------------------------

@dataclass(frozen=True)
class QuestionContext:
    question: str
    raw_tokens: tuple
    tokens: tuple  # stemmed
    types: dict  # type name -> frozenset of provenance tags
    relations: frozenset  # (rel, domain, range) triples
    entity_candidates: tuple  # ((start, end), entity id, type)
    surface_mentions: tuple  # (token index, type)

    def type_names(self):
        return frozenset(self.types)


def link_entities(tokens, kg, lexicon):
    """Longest-match, non-overlapping linking over stemmed tokens."""
    found = []
    i, n = 0, len(tokens)
    while i < n:
        hit = None
        top = min(lexicon.max_len, n - i)
        for width in range(top, 0, -1):
            eid = lexicon.lookup(tokens[i : i + width])
            if eid is not None:
                if eid not in kg.entities:
                    raise ValueError(f"alias target {eid!r} is not in the graph")
                hit = ((i, i + width), eid, kg.entities[eid].type)
                break
        if hit is None:
            i += 1
        else:
            found.append(hit)
            i = hit[0][1]
    return found


def build_context(question, kg, lexicon):
    raw = tuple(tokenize(question))
    stems = tuple(stem(t) for t in raw)

    candidates = tuple(link_entities(stems, kg, lexicon))

    type_stems = {stem(t): t for t in kg.types}
    mentions = tuple(
        (i, type_stems[s]) for i, s in enumerate(stems) if s in type_stems
    )

    types = {}
    for _, _, t in candidates:
        types.setdefault(t, set()).add("linked-entity")
    for _, t in mentions:
        types.setdefault(t, set()).add("surface-type")
    types = {t: frozenset(tags) for t, tags in types.items()}

    relations = frozenset(
        (sig.name, sig.domain, sig.rng)
        for sig in kg.relations
        if not sig.literal and sig.domain in types and sig.rng in types
    )

    return QuestionContext(
        question=question,
        raw_tokens=raw,
        tokens=stems,
        types=types,
        relations=relations,
        entity_candidates=candidates,
        surface_mentions=mentions,
    )


# -- question graph -------------------------------------------------------

def type_symbol(t):
    return f"type:{t}"


def relation_symbol(rel, domain, rng):
    return f"rel:{rel}:{domain}:{rng}"


@dataclass(frozen=True)
class QuestionGraph:
    nodes: tuple  # symbol per node; tokens first, then types, then relations
    edges: frozenset  # undirected (i, j) with i < j
    token_count: int

    def adjacency(self):
        adj = [[] for _ in self.nodes]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        return tuple(tuple(sorted(a)) for a in adj)


def _edge(i, j):
    return (i, j) if i < j else (j, i)


def to_question_graph(ctx, mode="chain"):
    if mode not in ("chain", "full"):
        raise ValueError(f"unknown graph mode {mode!r}")
    n = len(ctx.tokens)
    nodes = list(ctx.tokens)

    type_index = {}
    for t in sorted(ctx.types):
        type_index[t] = len(nodes)
        nodes.append(type_symbol(t))

    rel_index = {}
    for triple in sorted(ctx.relations):
        rel_index[triple] = len(nodes)
        nodes.append(relation_symbol(*triple))

    edges = set()
    if mode == "chain":
        for i in range(n - 1):
            edges.add((i, i + 1))
    else:
        for i in range(n):
            for j in range(i + 1, n):
                edges.add((i, j))

    for (start, _end), _eid, t in ctx.entity_candidates:
        edges.add(_edge(start, type_index[t]))
    for i, t in ctx.surface_mentions:
        edges.add(_edge(i, type_index[t]))
    for (rel, dom, rng), idx in rel_index.items():
        edges.add(_edge(idx, type_index[dom]))
        edges.add(_edge(idx, type_index[rng]))

    return QuestionGraph(nodes=tuple(nodes), edges=frozenset(edges), token_count=n)
