"""Templated mini-corpus generators over the bundled fixture graphs.

Each template pairs a question surface with a logical form; the blocks are
produced by the logic converters and the answer by executing them, so the
three representations in every generated record agree by construction.
Questions always name the entities their query constrains, which keeps the
entity linker and the decoder's pointer symbols exercised.
"""

import random

from . import data_path
from .atis import atis_to_blocks, parse_atis
from .blocks import print_blocks
from .corpus import Record, format_answer, write_dataset
from .geo import geo_to_blocks, parse_geo
from .kg import load_kg
from .prep import build_context, load_aliases
from .qgraph import ExecutionError, load_ordinals, run_blocks

GEO_TRAIN, GEO_TEST = 120, 30
ATIS_TRAIN, ATIS_TEST = 200, 50


def _quote(entity_id):
    return f"'{entity_id}'" if " " in entity_id else entity_id


def _record(question, lf, kg, lexicon, parse, convert):
    blocks = convert(parse(lf), kg)
    try:
        answer = run_blocks(blocks, kg, lexicon)
    except ExecutionError:
        # e.g. an average over a region holding none of the asked entities;
        # the instantiation has no answer, so it is not corpus material
        return None
    return Record(question, lf, print_blocks(blocks), format_answer(answer)), answer


def _is_empty(answer):
    if answer.kind in ("entity-set", "value-multiset"):
        return len(answer.value) == 0
    return False


def _split(pool, n_train, n_test, seed, max_empty_share):
    """Dedupe by question, cap the share of empty-answer records, shuffle
    with the given seed, and cut a train/test split."""
    rng = random.Random(seed)
    rng.shuffle(pool)
    seen = set()
    kept, empties = [], 0
    budget = int(max_empty_share * (n_train + n_test))
    for rec, answer in pool:
        if rec.question in seen:
            continue
        if _is_empty(answer):
            if empties >= budget:
                continue
            empties += 1
        seen.add(rec.question)
        kept.append(rec)
    need = n_train + n_test
    if len(kept) < need:
        raise ValueError(f"template pool too small: {len(kept)} < {need}")
    kept = kept[:need]
    return kept[:n_train], kept[n_train:]


# -- GEO -------------------------------------------------------------------

def _geo_pool(kg, lexicon):
    states = sorted(e for e, ent in kg.entities.items() if ent.type == "state")
    cities = sorted(e for e, ent in kg.entities.items() if ent.type == "city")
    rivers = sorted(e for e, ent in kg.entities.items() if ent.type == "river")
    mountains = sorted(e for e, ent in kg.entities.items() if ent.type == "mountain")

    pool = []

    def add(question, lf):
        made = _record(question, lf, kg, lexicon, parse_geo, geo_to_blocks)
        if made is not None:
            pool.append(made)

    for s in states:
        q = _quote(s)
        add(f"what states border {s}",
            f"answer(A, (state(A), next_to(A, B), const(B, stateid({q}))))")
        add(f"how many states border {s}",
            f"answer(A, count(B, (state(B), next_to(B, C), const(C, stateid({q}))), A))")
        add(f"what is the population of {s}",
            f"answer(A, (population(B, A), state(B), const(B, stateid({q}))))")
        add(f"what is the area of {s}",
            f"answer(A, (area(B, A), state(B), const(B, stateid({q}))))")
        add(f"what are the major cities in {s}",
            f"answer(A, (major(A), city(A), loc(A, B), const(B, stateid({q}))))")
        add(f"what cities are in {s}",
            f"answer(A, (city(A), loc(A, B), const(B, stateid({q}))))")
        add(f"how many cities are in {s}",
            f"answer(A, count(B, (city(B), loc(B, C), const(C, stateid({q}))), A))")
        add(f"how many major cities are in {s}",
            f"answer(A, count(B, (major(B), city(B), loc(B, C), const(C, stateid({q}))), A))")
        add(f"what is the biggest city in {s}",
            f"answer(A, biggest(A, (city(A), loc(A, B), const(B, stateid({q})))))")
        add(f"what rivers run through {s}",
            f"answer(A, (river(A), traverse(A, B), const(B, stateid({q}))))")
        add(f"how many rivers run through {s}",
            f"answer(A, count(B, (river(B), traverse(B, C), const(C, stateid({q}))), A))")
        add(f"what is the longest river in {s}",
            f"answer(A, longest(A, (river(A), traverse(A, B), const(B, stateid({q})))))")
        add(f"what mountains are in {s}",
            f"answer(A, (mountain(A), loc(A, B), const(B, stateid({q}))))")
        add(f"what is the capital of {s}",
            f"answer(A, (capital(A), loc(A, B), const(B, stateid({q}))))")
        add(f"what is the average population of the cities in {s}",
            f"answer(A, average(V, (population(B, V), city(B), loc(B, C), "
            f"const(C, stateid({q}))), A))")

    for r in rivers:
        q = _quote(r)
        add(f"how long is the {r}",
            f"answer(A, (len(B, A), river(B), const(B, riverid({q}))))")
        add(f"which states does the {r} cross",
            f"answer(A, (state(A), traverse(B, A), const(B, riverid({q}))))")
        add(f"how many states does the {r} cross",
            f"answer(A, count(B, (state(B), traverse(C, B), const(C, riverid({q}))), A))")
        add(f"what states are next to states the {r} runs through",
            f"answer(A, (state(A), next_to(A, B), state(B), traverse(C, B), "
            f"const(C, riverid({q}))))")

    for c in cities:
        q = _quote(c)
        add(f"what is the population of {c}",
            f"answer(A, (population(B, A), city(B), const(B, cityid({q}))))")

    for m in mountains:
        q = _quote(m)
        add(f"how high is {m}",
            f"answer(A, (height(B, A), mountain(B), const(B, mountainid({q}))))")

    add("what is the smallest state in the us",
        "answer(A, smallest(A, (state(A), loc(A, B), const(B, countryid(usa)))))")
    add("what is the largest state in the us",
        "answer(A, largest(A, (state(A), loc(A, B), const(B, countryid(usa)))))")
    add("what are the major cities in the smallest state in the us",
        "answer(A, (major(A), city(A), loc(A, B), smallest(B, (state(B), "
        "loc(B, C), const(C, countryid(usa))))))")
    add("what states border the smallest state in the us",
        "answer(A, (state(A), next_to(A, B), smallest(B, (state(B), loc(B, C), "
        "const(C, countryid(usa))))))")
    add("what are the major rivers in the us",
        "answer(A, (major(A), river(A)))")
    add("what is the longest river in the us",
        "answer(A, longest(A, river(A)))")
    add("what is the average area of the states in the us",
        "answer(A, average(V, (area(B, V), state(B), loc(B, C), "
        "const(C, countryid(usa))), A))")
    add("how many states are in the us",
        "answer(A, count(B, (state(B), loc(B, C), const(C, countryid(usa))), A))")

    return pool


def geo_corpus(n_train=GEO_TRAIN, n_test=GEO_TEST, seed=0):
    kg = load_kg(data_path("geo", "kg.txt"))
    lexicon = load_ordinals(data_path("geo", "ordinals.txt"))
    pool = _geo_pool(kg, lexicon)
    return _split(pool, n_train, n_test, seed, max_empty_share=0.1)


# -- ATIS ------------------------------------------------------------------

_DAY_WORDS = {
    "02": "two", "03": "three", "08": "eight", "09": "nine", "12": "twelve",
    "15": "fifteen", "21": "twenty one", "22": "twenty two", "27": "twenty seven",
}
_STOP_WORDS = {1: "one stop", 2: "two stops"}


def _atis_pool(kg, lexicon):
    cities = sorted(e for e, ent in kg.entities.items() if ent.type == "city")
    airlines = sorted(e for e, ent in kg.entities.items() if ent.type == "airline")
    months = ("june", "july", "august")
    days = ("08", "15", "21")

    pool = []

    def add(question, constraints):
        body = "(_flight $ 0) " + " ".join(constraints)
        lf = f"(_lambda $ 0e (_and{body}))"
        made = _record(question, lf, kg, lexicon, parse_atis, atis_to_blocks)
        if made is not None:
            pool.append(made)

    def _from(c):
        return f"(_from $ 0 {c}: _ci)"

    def _to(c):
        return f"(_to $ 0 {c}: _ci)"

    def _carrier(a):
        return f"(_carrier $ 0 {a}: _al)"

    def _month(m):
        return f"(_month $ 0 {m}: _mn)"

    def _day(d):
        return f"(_day_number $ 0 {int(d)}: _dn)"

    def _stops(n):
        return f"(_stops $ 0 {n}: _do)"

    for c1 in cities:
        add(f"what flights are there from {c1}", [_from(c1)])
        add(f"what flights go to {c1}", [_to(c1)])
        add(f"what nonstop flights leave {c1}", [_from(c1), _stops(0)])
        for c2 in cities:
            if c1 == c2:
                continue
            add(f"what flights go from {c1} to {c2}", [_from(c1), _to(c2)])
            add(f"show me the flights between {c1} and {c2}", [_from(c1), _to(c2)])
            add(f"list flights from {c1} to {c2}", [_from(c1), _to(c2)])
            add(f"i need a flight from {c1} to {c2}", [_from(c1), _to(c2)])
            add(f"which flights travel from {c1} to {c2}", [_from(c1), _to(c2)])
            add(f"what nonstop flights go from {c1} to {c2}",
                [_from(c1), _to(c2), _stops(0)])
            for m in months:
                for d in days:
                    add(f"what are the flights from {c1} to {c2} on {m} {_DAY_WORDS[d]}",
                        [_from(c1), _to(c2), _day(d), _month(m)])
        for m in months:
            add(f"what flights leave {c1} in {m}", [_from(c1), _month(m)])
            add(f"what flights go to {c1} in {m}", [_to(c1), _month(m)])
            for d in days:
                add(f"what flights leave {c1} on {m} {_DAY_WORDS[d]}",
                    [_from(c1), _day(d), _month(m)])
        for n, word in _STOP_WORDS.items():
            add(f"what flights from {c1} make {word}", [_from(c1), _stops(n)])

    for m in months:
        add(f"what flights are there in {m}", [_month(m)])
        for d in days:
            add(f"what flights fly on {m} {_DAY_WORDS[d]}", [_day(d), _month(m)])
    for n, word in _STOP_WORDS.items():
        add(f"what flights make {word}", [_stops(n)])

    for a in airlines:
        add(f"what flights does {a} fly", [_carrier(a)])
        for m in months:
            add(f"what {a} flights are there in {m}", [_carrier(a), _month(m)])
        for n, word in _STOP_WORDS.items():
            add(f"what {a} flights make {word}", [_carrier(a), _stops(n)])
        for c in cities:
            add(f"what {a} flights go to {c}", [_carrier(a), _to(c)])
            add(f"list the {a} flights from {c}", [_carrier(a), _from(c)])
            add(f"show me the nonstop {a} flights to {c}",
                [_carrier(a), _to(c), _stops(0)])
        for c1 in cities:
            for c2 in cities:
                if c1 != c2:
                    add(f"what flights does {a} fly from {c1} to {c2}",
                        [_carrier(a), _from(c1), _to(c2)])
                    add(f"what flights on {a} go from {c1} to {c2}",
                        [_carrier(a), _from(c1), _to(c2)])

    return pool


def atis_corpus(n_train=ATIS_TRAIN, n_test=ATIS_TEST, seed=0):
    kg = load_kg(data_path("atis", "kg.txt"))
    lexicon = load_ordinals(data_path("atis", "ordinals.txt"))
    pool = _atis_pool(kg, lexicon)
    return _split(pool, n_train, n_test, seed, max_empty_share=0.3)


# -- mention-tagger training lines -----------------------------------------

def tagged_lines(records, kg, aliases):
    """`question<TAB>BIO-labels` lines, entity spans from the linker."""
    lines = []
    for r in records:
        ctx = build_context(r.question, kg, aliases)
        labels = ["O"] * len(ctx.raw_tokens)
        for (start, end), _eid, _t in ctx.entity_candidates:
            labels[start] = "B-ENT"
            for i in range(start + 1, end):
                labels[i] = "I-ENT"
        lines.append(r.question + "\t" + " ".join(labels))
    return lines


def write_splits(outdir, prefix, train, test, kg=None, aliases=None):
    """Write `<prefix>_train.tsv`, `<prefix>_test.tsv`, and, when a graph
    and alias lexicon are given, `<prefix>_tags.txt` for the tagger."""
    outdir.mkdir(parents=True, exist_ok=True)
    write_dataset(outdir / f"{prefix}_train.tsv", train)
    write_dataset(outdir / f"{prefix}_test.tsv", test)
    if kg is not None and aliases is not None:
        lines = tagged_lines(train, kg, aliases)
        (outdir / f"{prefix}_tags.txt").write_text(
            "\n".join(lines) + "\n", encoding="utf-8")
