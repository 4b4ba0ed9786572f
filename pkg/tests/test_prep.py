import pytest

from spedn.prep import (
    AliasLexicon,
    QuestionGraph,
    build_context,
    link_entities,
    stem,
    to_question_graph,
    tokenize,
)


def test_stem_exemplars():
    assert stem("cities") == "citi"
    assert stem("city") == "citi"
    assert stem("usa") == "usa"
    assert stem("states") == "state"
    assert stem("state") == "state"
    assert stem("capitals") == "capit"
    assert stem("capital") == "capit"
    assert stem("population") == "popul"
    assert stem("rivers") == "river"
    assert stem("countries") == stem("country") == "countri"
    assert stem("mountains") == "mountain"
    assert stem("flights") == "flight"
    assert stem("airlines") == stem("airline") == "airlin"


def test_stem_short_words_untouched():
    assert stem("do") == "do"
    assert stem("in") == "in"
    assert stem("a") == "a"


def test_stem_idempotent():
    words = (
        "what which states cities borders border rivers longest "
        "smallest biggest largest capital capitals population area major "
        "mountains country flights airlines stops departure morning have "
        "does run through cross located average many how the of in are is"
    ).split()
    for w in words:
        s = stem(w)
        assert stem(s) == s, (w, s)


def test_tokenize():
    assert tokenize("What is the Capital of Texas?") == [
        "what", "is", "the", "capital", "of", "texas",
    ]
    assert tokenize("  hello,  world!  ") == ["hello", "world"]
    assert tokenize("") == []


def test_alias_lexicon_fixture(geo_alias):
    # keys are stemmed surface tokens
    assert geo_alias.lookup((stem("texas"),)) == "texas"
    assert geo_alias.lookup(("texas",)) is None
    assert geo_alias.lookup((stem("rhode"), stem("island"))) == "rhode island"
    assert geo_alias.lookup((stem("united"), stem("states"))) == "usa"


def test_alias_conflict_rejected():
    with pytest.raises(ValueError, match="maps to both"):
        AliasLexicon([("big apple", "nyc"), ("big apples", "la")])


def test_alias_malformed_file(tmp_path):
    p = tmp_path / "aliases.txt"
    p.write_text("alias\tonly-two-fields\n")
    with pytest.raises(ValueError, match="malformed"):
        AliasLexicon.load(p)


def test_link_entities_basic(geo_kg, geo_alias):
    tokens = [stem(t) for t in tokenize("what is the capital of rhode island")]
    links = link_entities(tokens, geo_kg, geo_alias)
    assert links == [((5, 7), "rhode island", "state")]


def test_link_entities_longest_match(geo_kg, geo_alias):
    tokens = [stem(t) for t in tokenize("people in oklahoma city today")]
    links = link_entities(tokens, geo_kg, geo_alias)
    # the two-word capital wins over the one-word state
    assert links == [((2, 4), "oklahoma city", "capital")]


def test_link_entities_no_hits(geo_kg, geo_alias):
    assert link_entities(["nothing", "here"], geo_kg, geo_alias) == []


def test_link_entities_multiple(geo_kg, geo_alias):
    tokens = [stem(t) for t in tokenize("does texas border new mexico")]
    links = link_entities(tokens, geo_kg, geo_alias)
    assert [l[1] for l in links] == ["texas", "new mexico"]


def test_build_context_implicit_relation(geo_kg, geo_alias):
    ctx = build_context("how many rivers does alaska have?", geo_kg, geo_alias)
    assert ctx.tokens == ("how", "mani", "river", "doe", "alaska", "have")
    assert set(ctx.types) >= {"river", "state"}
    assert ctx.types["river"] == frozenset({"surface-type"})
    assert ctx.types["state"] == frozenset({"linked-entity"})
    assert ("loc", "river", "state") in ctx.relations
    assert ("traverse", "river", "state") in ctx.relations
    assert ("next_to", "state", "state") in ctx.relations
    assert ctx.entity_candidates == (((4, 5), "alaska", "state"),)


def test_build_context_surface_type(geo_kg, geo_alias):
    ctx = build_context("what are the major cities in texas", geo_kg, geo_alias)
    assert "city" in ctx.types and "surface-type" in ctx.types["city"]
    assert ("loc", "city", "state") in ctx.relations
    # no river mention, so no river relations
    assert all(t != "river" for _, d, r in ctx.relations for t in (d, r))


def test_build_context_empty(geo_kg, geo_alias):
    ctx = build_context("hello there", geo_kg, geo_alias)
    assert ctx.types == {} and ctx.relations == frozenset()
    ctx = build_context("", geo_kg, geo_alias)
    assert ctx.tokens == ()


def test_build_context_deterministic(geo_kg, geo_alias):
    q = "how many rivers does alaska have?"
    assert build_context(q, geo_kg, geo_alias) == build_context(q, geo_kg, geo_alias)


def _word_edges(g):
    return {e for e in g.edges if e[0] < g.token_count and e[1] < g.token_count}


def test_graph_chain_edges(geo_kg, geo_alias):
    ctx = build_context("where is san francisco", geo_kg, geo_alias)
    g = to_question_graph(ctx, "chain")
    assert g.token_count == 4
    assert _word_edges(g) == {(0, 1), (1, 2), (2, 3)}


def test_graph_full_edges(geo_kg, geo_alias):
    ctx = build_context("where is san francisco", geo_kg, geo_alias)
    g = to_question_graph(ctx, "full")
    assert len(_word_edges(g)) == 6


def test_graph_node_inventory(geo_kg, geo_alias):
    ctx = build_context("how many rivers does alaska have?", geo_kg, geo_alias)
    g = to_question_graph(ctx, "chain")
    assert len(g.nodes) == len(ctx.tokens) + len(ctx.types) + len(ctx.relations)
    assert g.nodes[: g.token_count] == ctx.tokens
    assert "type:river" in g.nodes and "type:state" in g.nodes
    assert "rel:loc:river:state" in g.nodes


def test_graph_isa_and_relation_edges(geo_kg, geo_alias):
    ctx = build_context("how many rivers does alaska have?", geo_kg, geo_alias)
    g = to_question_graph(ctx, "chain")
    nodes = list(g.nodes)
    state_node = nodes.index("type:state")
    river_node = nodes.index("type:river")
    loc_node = nodes.index("rel:loc:river:state")
    assert (4, state_node) in g.edges  # alaska isA state
    assert (2, river_node) in g.edges  # "river" mention isA river
    assert tuple(sorted((loc_node, river_node))) in g.edges
    assert tuple(sorted((loc_node, state_node))) in g.edges


def test_graph_connected(geo_kg, geo_alias):
    for q in [
        "how many rivers does alaska have?",
        "what are the major cities in texas",
        "where is san francisco",
    ]:
        g = to_question_graph(build_context(q, geo_kg, geo_alias), "chain")
        seen = {0}
        frontier = [0]
        adj = g.adjacency()
        while frontier:
            cur = frontier.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        assert seen == set(range(len(g.nodes)))


def test_graph_bad_mode(geo_kg, geo_alias):
    ctx = build_context("hi", geo_kg, geo_alias)
    with pytest.raises(ValueError, match="mode"):
        to_question_graph(ctx, "star")


def test_graph_is_hashable(geo_kg, geo_alias):
    ctx = build_context("where is austin", geo_kg, geo_alias)
    g = to_question_graph(ctx, "chain")
    assert isinstance(g, QuestionGraph)
    assert hash(g) == hash(to_question_graph(ctx, "chain"))
