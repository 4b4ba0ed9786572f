import random

import pytest

from spedn.blocks import (
    AggrBlock,
    EntityBlock,
    JoinBlock,
    LiteralBlock,
    OrdinalBlock,
    RelationBlock,
    parse_blocks,
    print_blocks,
)
from spedn.qgraph import (
    AssemblyError,
    AssemblyState,
    ExecutionError,
    OrdinalLexicon,
    assemble,
    block_shape,
    execute,
    legal_next,
    load_ordinals,
    run_blocks,
)

from canon import ALL_FIVE, ATIS_BLOCKS, BIGCITY_BLOCKS, BORDER_BLOCKS, GEO_BLOCKS
from oracle import answers_agree, brute_force, random_queries


def kg_for(seq_text, geo_kg, atis_kg):
    return atis_kg if "flight" in seq_text else geo_kg


def test_all_five_assemble(geo_kg, atis_kg):
    for s in ALL_FIVE:
        graph = assemble(parse_blocks(s), kg_for(s, geo_kg, atis_kg))
        assert graph.root == 0


def test_geo_exemplar_is_chain(geo_kg):
    graph = assemble(parse_blocks(GEO_BLOCKS), geo_kg)
    assert graph.conj == []
    for i in range(4):
        assert graph.edges[(i, 0)] == i + 1


def test_bigcity_tree_shape(geo_kg):
    graph = assemble(parse_blocks(BIGCITY_BLOCKS), geo_kg)
    # aggr -> join -> {entity leaf, relation -> entity}
    assert isinstance(graph.nodes[0][0], AggrBlock)
    assert graph.edges[(0, 0)] == 1
    assert isinstance(graph.nodes[1][0], JoinBlock)
    assert graph.edges[(1, 0)] == 2 and graph.edges[(1, 1)] == 3
    assert graph.nodes[2][0] == EntityBlock("city", "major", 1)
    assert graph.edges[(3, 0)] == 4


def test_atis_exemplar_shape(atis_kg):
    graph = assemble(parse_blocks(ATIS_BLOCKS), atis_kg)
    assert graph.nodes[graph.root][0] == EntityBlock("flight")
    assert sorted(graph.conj) == [1, 3, 5, 6]
    assert graph.edges[(1, 0)] == 2 and graph.edges[(3, 0)] == 4


def test_incomplete_rejected(geo_kg):
    with pytest.raises(AssemblyError, match="open slots"):
        assemble(parse_blocks("relation(city, loc, :state)"), geo_kg)


def test_empty_sequence_rejected(geo_kg):
    with pytest.raises(AssemblyError, match="empty"):
        assemble([], geo_kg)


def test_type_mismatch_rejected(geo_kg):
    with pytest.raises(AssemblyError):
        assemble(parse_blocks("literal(major, :city) entity(state)"), geo_kg)


def test_trailing_after_scalar_rejected(geo_kg):
    text = "aggr(count, :state) entity(state) entity(state)"
    with pytest.raises(AssemblyError, match="trailing"):
        assemble(parse_blocks(text), geo_kg)


def test_conjunction_type_mismatch(geo_kg):
    with pytest.raises(AssemblyError, match="conjunction"):
        assemble(parse_blocks("entity(state) entity(city)"), geo_kg)


def test_schema_violations_block_assembly(geo_kg):
    with pytest.raises(AssemblyError):
        assemble(parse_blocks("entity(galaxy)"), geo_kg)


# -- controller -----------------------------------------------------------

def test_legal_next_empty_state(geo_kg):
    shapes = legal_next(AssemblyState(), geo_kg)
    assert ("entity", "state") in shapes
    assert ("aggr", "count", "country") in shapes
    assert ("eos",) not in shapes
    # country has no numeric attrs, so averaging over it is a dead end
    assert ("aggr", "average", "country") not in shapes
    assert ("aggr", "average", "state") in shapes


def test_legal_next_entity_slot(geo_kg):
    st = AssemblyState().advance(LiteralBlock("major", "city"), geo_kg)
    shapes = legal_next(st, geo_kg)
    assert all(s[0] != "eos" for s in shapes)
    assert ("entity", "city") in shapes
    assert ("relation", "city", "loc", "state") in shapes
    assert ("literal", "major", "city") in shapes  # boolean filter produces cities
    assert ("entity", "state") not in shapes
    assert ("literal", "population", "city") not in shapes  # projection != city set


def test_legal_next_value_slot(geo_kg):
    st = AssemblyState().advance(AggrBlock("average", "river"), geo_kg)
    shapes = legal_next(st, geo_kg)
    assert shapes == {("literal", "len", "river")}


def test_legal_next_conjunction(geo_kg):
    st = AssemblyState().advance(EntityBlock("state"), geo_kg)
    shapes = legal_next(st, geo_kg)
    assert ("eos",) in shapes
    assert ("relation", "state", "next_to", "state") in shapes
    assert ("entity", "city") not in shapes


def test_legal_next_closed(geo_kg):
    st = AssemblyState()
    for b in parse_blocks("aggr(count, :state) entity(state)"):
        st = st.advance(b, geo_kg)
    assert st.complete
    assert legal_next(st, geo_kg) == {("eos",)}


def test_gold_sequences_reachable(geo_kg, atis_kg):
    # every prefix of every exemplar sequence stays inside legal_next
    for s in ALL_FIVE:
        kg = kg_for(s, geo_kg, atis_kg)
        st = AssemblyState()
        for b in parse_blocks(s):
            shapes = legal_next(st, kg)
            assert block_shape(b) in shapes, (s, print_blocks([b]))
            st = st.advance(b, kg)
        assert ("eos",) in legal_next(st, kg)


def test_controller_walks_assemble(geo_kg, geo_lex, atis_kg, atis_lex):
    rng = random.Random(7)
    for kg, lex in [(geo_kg, geo_lex), (atis_kg, atis_lex)]:
        for seq in random_queries(kg, lex, rng, 300):
            graph = assemble(seq, kg)  # must never raise
            assert graph.nodes


# -- execution ------------------------------------------------------------

def test_execute_examples(geo_kg, geo_lex):
    ri = "aggr(count, :capital) relation(capital, loc, :state) entity(state, id, 'rhode island')"
    assert run_blocks(parse_blocks(ri), geo_kg, geo_lex).value == 1
    assert run_blocks(parse_blocks("entity(state, id, 'texas')"), geo_kg, geo_lex).value == {
        "texas"
    }
    border = run_blocks(parse_blocks(BORDER_BLOCKS), geo_kg, geo_lex)
    expected = sorted(
        geo_kg.entities[s].attrs["population"]
        for s in geo_kg.neighbors("next_to", {"texas"})
    )
    assert sorted(border.value) == expected


def test_execute_atis_exemplar(atis_kg, atis_lex):
    ans = run_blocks(parse_blocks(ATIS_BLOCKS), atis_kg, atis_lex)
    assert ans.value == {"aa101", "dl303"}


def test_ordinal_smallest_state(geo_kg, geo_lex):
    seq = parse_blocks("ordinal(smallest, :state) entity(state)")
    assert run_blocks(seq, geo_kg, geo_lex).value == {"rhode island"}


def test_ordinal_empty_set(geo_kg, geo_lex):
    seq = parse_blocks(
        "ordinal(largest, :state) relation(state, next_to, :state) entity(state, id, 'alaska')"
    )
    assert run_blocks(seq, geo_kg, geo_lex).value == frozenset()


def test_ordinal_tie_break():
    from spedn.kg import KnowledgeGraph

    kg = KnowledgeGraph.loads(
        "type\tstate\nattr\tarea\tstate\t->\tdecimal\n"
        "ent\tbb\tstate\tarea=5.0\nent\taa\tstate\tarea=5.0\nent\tcc\tstate\tarea=1.0\n"
    )
    lex = OrdinalLexicon({("largest", "state"): ("area", "max")})
    seq = parse_blocks("ordinal(largest, :state) entity(state)")
    assert run_blocks(seq, kg, lex).value == {"aa"}


def test_ordinal_missing_lexicon_entry(geo_kg, geo_lex):
    seq = parse_blocks("ordinal(highest, :mountain) entity(mountain)")
    with pytest.raises(ExecutionError, match="lexicon"):
        run_blocks(seq, geo_kg, geo_lex)


def test_average_empty_is_error(geo_kg, geo_lex):
    seq = parse_blocks(
        "aggr(average, :river) literal(len, :river) relation(river, loc, :state) "
        "entity(state, id, 'rhode island')"
    )
    with pytest.raises(ExecutionError, match="average"):
        run_blocks(seq, geo_kg, geo_lex)


def test_join_ops(geo_kg, geo_lex):
    tex = "relation(city, loc, :state) entity(state, id, 'texas')"
    major = "entity(city, major, 1)"
    inter = run_blocks(parse_blocks(f"join(intersection, :city, :city) {major} {tex}"), geo_kg, geo_lex)
    assert inter.value == {"houston", "dallas", "san antonio"}
    excl = run_blocks(parse_blocks(f"join(exclude, :city, :city) {tex} {major}"), geo_kg, geo_lex)
    assert excl.value == {"el paso"}
    uni = run_blocks(parse_blocks(f"join(union, :city, :city) {tex} {major}"), geo_kg, geo_lex)
    assert "los angeles" in uni.value and "el paso" in uni.value


def test_literal_filter_vs_projection(geo_kg, geo_lex):
    filt = run_blocks(parse_blocks("literal(major, :river) entity(river)"), geo_kg, geo_lex)
    assert filt.kind == "entity-set"
    proj = run_blocks(parse_blocks("literal(len, :river) entity(river)"), geo_kg, geo_lex)
    assert proj.kind == "value-multiset"
    assert len(proj.value) == len(geo_kg.entities_of_type("river"))


def test_inverse_relation(geo_kg, geo_lex):
    seq = parse_blocks(
        "relation(state, traverse, :river) entity(river, id, 'mississippi')"
    )
    assert run_blocks(seq, geo_kg, geo_lex).value == {"arkansas", "louisiana"}


def test_determinism(geo_kg, geo_lex):
    seq = parse_blocks(GEO_BLOCKS)
    a = execute(assemble(seq, geo_kg), geo_kg, geo_lex)
    b = execute(assemble(seq, geo_kg), geo_kg, geo_lex)
    assert a == b


def test_ordinals_file_round_trip(geo_lex, tmp_path):
    p = tmp_path / "ord.txt"
    p.write_text(geo_lex.serialize())
    again = load_ordinals(p)
    assert again.entries == geo_lex.entries
    assert len(geo_lex.entries) == 6


def test_execute_matches_oracle(geo_kg, geo_lex, atis_kg, atis_lex):
    rng = random.Random(99)
    checked = 0
    for kg, lex in [(geo_kg, geo_lex), (atis_kg, atis_lex)]:
        for seq in random_queries(kg, lex, rng, 150):
            graph = assemble(seq, kg)
            try:
                engine = execute(graph, kg, lex)
            except ExecutionError:
                with pytest.raises(ExecutionError):
                    brute_force(graph, kg, lex)
                continue
            expected = brute_force(graph, kg, lex)
            assert answers_agree(engine, expected), print_blocks(seq)
            checked += 1
    assert checked >= 200
