import math

import numpy as np
import pytest

from spedn import tensor as T
from spedn.encoder import (
    BIO_LABELS,
    Crf,
    Encoder,
    EncoderConfig,
    MentionTagger,
    UNK,
    Vocab,
    layer_norm,
    mention_spans,
    offset_codes,
    position_matrix,
    read_tagged,
    sinusoidal_pe,
)
from spedn.prep import tokenize
from spedn.tensor import ShapeError, Tensor, grad_check

SMALL = EncoderConfig(dim=8, heads=2, head_dim=4, ffn_dim=12)


def _grad_ok(build, inputs, tol=1e-4, seed=0):
    probe = build(inputs)
    w = np.random.default_rng(seed).normal(size=probe.shape)

    def fn(ins):
        out = build(ins)
        if out.shape == ():
            return out
        return T.tsum(T.mul(out, Tensor(w)))

    rep = grad_check(fn, inputs, tolerance=tol)
    assert rep.passed, f"max rel err {rep.max_rel_err:.2e}"


def _params(store, prefix):
    return [store[n] for n in store.names() if n.startswith(prefix)]


# -- config ----------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError, match="heads"):
        EncoderConfig(dim=10, heads=4, head_dim=6)
    with pytest.raises(ValueError, match=">= 1"):
        EncoderConfig(dim=0, heads=0, head_dim=0)
    with pytest.raises(ValueError, match="position mode"):
        EncoderConfig(position_mode="sideways")
    with pytest.raises(ValueError, match="label"):
        EncoderConfig(labels=())
    assert EncoderConfig().dim == 24


# -- position codes --------------------------------------------------------

def test_pe_at_origin():
    pe = sinusoidal_pe(0, 10)
    assert np.array_equal(pe, [0, 1] * 5)


def test_pe_dot_products_shift_invariant():
    d = 24
    for t in (0, 3, 11):
        for k in (1, 2, 5):
            lhs = sinusoidal_pe(t, d) @ sinusoidal_pe(t + k, d)
            rhs = sinusoidal_pe(0, d) @ sinusoidal_pe(k, d)
            assert abs(lhs - rhs) < 1e-9


def test_pe_component_period():
    d, k = 24, 4
    period = 2 * math.pi * 10000 ** (2 * (k // 2) / d)
    for t in (0.0, 1.37, 9.5):
        assert abs(sinusoidal_pe(t, d)[k] - sinusoidal_pe(t + period, d)[k]) < 1e-9


def test_position_matrix_rows():
    m = position_matrix(5, 8)
    assert m.shape == (5, 8)
    assert np.array_equal(m[3], sinusoidal_pe(3, 8))
    assert position_matrix(0, 8).shape == (0, 8)


def test_offset_codes_depend_on_offset_only():
    a = offset_codes(4, 6, index_offset=0)
    b = offset_codes(4, 6, index_offset=92)
    assert np.array_equal(a, b)
    assert np.array_equal(a[2, 0], sinusoidal_pe(2, 6))
    assert np.array_equal(a[0, 2], sinusoidal_pe(-2, 6))


# -- vocab and embeddings --------------------------------------------------

def test_vocab_build_and_lookup():
    v = Vocab.build([["a", "b"], ["b", "c"]])
    assert v.symbols()[0] == UNK
    assert len(v) == 4
    assert v.index("b") == 2
    assert v.index("zzz") == 0
    with pytest.raises(ValueError, match="start with"):
        Vocab(["a", "b"])


def test_embed_needs_vocab():
    enc = Encoder(SMALL)
    with pytest.raises(ValueError, match="vocabulary"):
        enc.embed_tokens(["a"])


def test_embed_shapes_and_determinism():
    enc = Encoder(SMALL, seed=3)
    enc.fit_vocab([["how", "many", "rivers"]])
    m1 = enc.embed_tokens(["how", "many"])
    m2 = enc.embed_tokens(["how", "many"])
    assert m1.shape == (2, SMALL.dim)
    assert np.array_equal(m1.data, m2.data)
    assert enc.embed_tokens(["how"]).shape == (1, SMALL.dim)
    assert enc.embed_tokens([]).shape == (0, SMALL.dim)


def test_embed_unknowns_share_reserved_row():
    enc = Encoder(SMALL, seed=3)
    enc.fit_vocab([["a", "b"]])
    assert np.array_equal(enc.embed_tokens(["zzz"]).data, enc.embed_tokens(["qqq"]).data)


def test_embed_swap_locality():
    enc = Encoder(seed=5)
    tokens = ["a", "b", "c", "d", "e"]
    enc.fit_vocab([tokens])
    half = enc.config.dim // 2
    m1 = enc.embed_tokens(tokens).data
    m2 = enc.embed_tokens(["a", "d", "c", "b", "e"]).data
    # swapped rows change their unigram halves, the rest keep them
    for row in (0, 2, 4):
        assert np.array_equal(m1[row, :half], m2[row, :half])
    for row in (1, 3):
        assert not np.array_equal(m1[row, :half], m2[row, :half])
    # every bigram touching a swapped token changes; the final one survives
    for row in (0, 1, 2, 3):
        assert not np.array_equal(m1[row, half:], m2[row, half:])
    assert np.array_equal(m1[4], m2[4])


# -- attention branches ----------------------------------------------------

def test_absolute_attention_single_position():
    enc = Encoder(SMALL, seed=1)
    H = Tensor(np.random.default_rng(0).normal(size=(1, SMALL.dim)))
    out, weights = enc.absolute_attention(H, return_weights=True)
    assert out.shape == (1, SMALL.dim)
    for w in weights:
        assert np.array_equal(w.data, [[1.0]])


def test_absolute_attention_uniform_on_identical_rows():
    enc = Encoder(SMALL, seed=1)
    row = np.random.default_rng(1).normal(size=SMALL.dim)
    _, weights = enc.absolute_attention(Tensor(np.tile(row, (4, 1))), return_weights=True)
    for w in weights:
        assert np.allclose(w.data, 0.25, atol=1e-15)


def test_attention_rows_sum_to_one():
    enc = Encoder(seed=2)
    H = Tensor(np.random.default_rng(2).normal(size=(6, enc.config.dim)))
    _, abs_w = enc.absolute_attention(H, return_weights=True)
    _, _, rel_w = enc.relative_attention(H, return_parts=True)
    for w in abs_w + rel_w:
        assert np.max(np.abs(w.data.sum(axis=-1) - 1.0)) <= 1e-12


def test_absolute_attention_rejects_bad_width():
    enc = Encoder(SMALL)
    with pytest.raises(ShapeError):
        enc.absolute_attention(Tensor(np.zeros((3, SMALL.dim + 1))))


def test_absolute_attention_grads():
    enc = Encoder(SMALL, seed=7)
    H = Tensor(np.random.default_rng(7).normal(size=(3, SMALL.dim)), requires_grad=True)
    _grad_ok(lambda ins: enc.absolute_attention(ins[0]), [H] + _params(enc.store, "abs."))


def test_relative_attention_translation_invariant():
    enc = Encoder(SMALL, seed=4)
    H = Tensor(np.random.default_rng(4).normal(size=(5, SMALL.dim)))
    a = enc.relative_attention(H, index_offset=0)
    b = enc.relative_attention(H, index_offset=9)
    assert np.array_equal(a.data, b.data)


def test_relative_attention_single_position_returns_value_row():
    enc = Encoder(SMALL, seed=4)
    H = Tensor(np.random.default_rng(5).normal(size=(1, SMALL.dim)))
    out = enc.relative_attention(H)
    expected = np.concatenate(
        [H.data @ enc.store[f"rel.wv{a}"].data for a in range(SMALL.heads)], axis=1
    )
    assert np.allclose(out.data, expected, atol=1e-12)


def test_relative_scores_reduce_to_plain_dot_products():
    # zero the biases and drop the offset codes: scores must be bare Q K^T
    enc = Encoder(SMALL, seed=6)
    enc.store["rel.u"].data[:] = 0.0
    enc.store["rel.v"].data[:] = 0.0
    H = Tensor(np.random.default_rng(6).normal(size=(4, SMALL.dim)))
    _, scores, _ = enc.relative_attention(H, use_positions=False, return_parts=True)
    dk = SMALL.head_dim
    for a, s in enumerate(scores):
        q = H.data @ enc.store[f"rel.wq{a}"].data
        k = H.data[:, a * dk : (a + 1) * dk]
        assert np.allclose(s.data, q @ k.T, atol=1e-12)


def test_relative_attention_grads_include_biases():
    enc = Encoder(SMALL, seed=8)
    enc.store["rel.u"].data[:] = np.random.default_rng(80).normal(size=(SMALL.heads, SMALL.head_dim)) * 0.3
    enc.store["rel.v"].data[:] = np.random.default_rng(81).normal(size=(SMALL.heads, SMALL.head_dim)) * 0.3
    H = Tensor(np.random.default_rng(8).normal(size=(3, SMALL.dim)), requires_grad=True)
    _grad_ok(lambda ins: enc.relative_attention(ins[0]), [H] + _params(enc.store, "rel."))


# -- recurrent branch ------------------------------------------------------

def test_bilstm_zero_weights_zero_output():
    enc = Encoder(SMALL, seed=9)
    for name in enc.store.names():
        if name.startswith("lstm."):
            enc.store[name].data[:] = 0.0
    X = Tensor(np.random.default_rng(9).normal(size=(4, SMALL.dim)))
    assert np.array_equal(enc.bilstm(X).data, np.zeros((4, SMALL.dim)))


def test_bilstm_mirror_with_shared_directions():
    # make both directions share weights so reversing the input exactly
    # swaps the two output halves, position mirrored
    enc = Encoder(SMALL, seed=10)
    for part in ("wx", "wh", "b"):
        enc.store[f"lstm.bwd.{part}"].data[:] = enc.store[f"lstm.fwd.{part}"].data
    X = np.random.default_rng(10).normal(size=(5, SMALL.dim))
    half = SMALL.dim // 2
    Y = enc.bilstm(Tensor(X)).data
    Yr = enc.bilstm(Tensor(X[::-1].copy())).data
    n = X.shape[0]
    for t in range(n):
        assert np.array_equal(Yr[n - 1 - t, :half], Y[t, half:])
        assert np.array_equal(Yr[n - 1 - t, half:], Y[t, :half])


def test_bilstm_grads():
    enc = Encoder(SMALL, seed=11)
    X = Tensor(np.random.default_rng(11).normal(size=(3, SMALL.dim)), requires_grad=True)
    _grad_ok(lambda ins: enc.bilstm(ins[0]), [X] + _params(enc.store, "lstm."))


# -- layer norm and fusion -------------------------------------------------

def test_layer_norm_standardizes_rows():
    x = Tensor(np.random.default_rng(12).normal(size=(4, 8)) * 3 + 2)
    gamma = Tensor(np.ones(8))
    beta = Tensor(np.zeros(8))
    out = layer_norm(x, gamma, beta).data
    assert np.allclose(out.mean(axis=1), 0.0, atol=1e-9)
    assert np.allclose(out.var(axis=1), 1.0, atol=1e-4)
    shifted = layer_norm(x, Tensor(np.full(8, 2.0)), Tensor(np.full(8, 3.0))).data
    assert np.allclose(shifted, out * 2.0 + 3.0, atol=1e-12)


def test_layer_norm_grads():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    g = Tensor(rng.normal(size=5), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    _grad_ok(lambda ins: layer_norm(ins[0], ins[1], ins[2]), [x, g, b])


def test_fuse_identity_when_branches_agree():
    enc = Encoder(SMALL, seed=14)
    x = np.random.default_rng(14).normal(size=(3, SMALL.dim))
    out = enc.fuse(Tensor(x), Tensor(x.copy()))
    assert np.allclose(out.data, x, atol=1e-12)


def test_fuse_gate_strictly_inside_unit_interval():
    enc = Encoder(SMALL, seed=15)
    rng = np.random.default_rng(15)
    out, gate = enc.fuse(
        Tensor(rng.normal(size=(4, SMALL.dim))),
        Tensor(rng.normal(size=(4, SMALL.dim))),
        return_gate=True,
    )
    assert out.shape == (4, SMALL.dim)
    assert np.all(gate.data > 0.0) and np.all(gate.data < 1.0)


def test_fuse_vector_inputs_and_mismatch():
    enc = Encoder(SMALL, seed=16)
    rng = np.random.default_rng(16)
    a, b = rng.normal(size=SMALL.dim), rng.normal(size=SMALL.dim)
    assert enc.fuse(Tensor(a), Tensor(b)).shape == (SMALL.dim,)
    with pytest.raises(ShapeError):
        enc.fuse(Tensor(np.zeros((2, SMALL.dim))), Tensor(np.zeros((3, SMALL.dim))))


def test_fuse_grads():
    enc = Encoder(SMALL, seed=17)
    rng = np.random.default_rng(17)
    a = Tensor(rng.normal(size=(3, SMALL.dim)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, SMALL.dim)), requires_grad=True)
    _grad_ok(lambda ins: enc.fuse(ins[0], ins[1]), [a, b] + _params(enc.store, "fuse."))


# -- CRF -------------------------------------------------------------------

def test_crf_uniform_scores():
    crf = Crf(("a", "b", "c"))
    emissions = Tensor(np.zeros((5, 3)))
    ll = crf.log_likelihood(emissions, ["a", "c", "b", "a", "a"])
    assert abs(float(ll.data) + 5 * math.log(3)) < 1e-12


def test_crf_matches_enumeration():
    rng = np.random.default_rng(18)
    for L in range(1, 5):
        labels = tuple(f"l{i}" for i in range(L))
        for steps in range(1, 7):
            crf = Crf(labels, transitions=Tensor(rng.normal(size=(L + 2, L + 2))))
            emissions = Tensor(rng.normal(size=(steps, L)))
            gold = [labels[i] for i in rng.integers(0, L, size=steps)]
            ll = float(crf.log_likelihood(emissions, gold).data)
            ref_ll, ref_best = crf.brute_force(emissions, gold)
            assert abs(ll - ref_ll) < 1e-6
            assert crf.decode(emissions) == ref_best


def test_crf_grads():
    rng = np.random.default_rng(19)
    trans = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
    crf = Crf(("x", "y", "z"), transitions=trans)
    emissions = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    gold = ["x", "z", "z", "y"]
    _grad_ok(lambda ins: crf.log_likelihood(ins[0], gold), [emissions, trans])


def test_crf_input_validation():
    crf = Crf(("a", "b"))
    with pytest.raises(ValueError, match="unknown label"):
        crf.log_likelihood(Tensor(np.zeros((1, 2))), ["q"])
    with pytest.raises(ShapeError, match="labels for"):
        crf.log_likelihood(Tensor(np.zeros((2, 2))), ["a"])
    with pytest.raises(ShapeError, match="at least one"):
        crf.log_likelihood(Tensor(np.zeros((0, 2))), [])
    with pytest.raises(ShapeError, match="emissions"):
        crf.log_likelihood(Tensor(np.zeros((1, 3))), ["a"])
    assert crf.decode(Tensor(np.zeros((0, 2)))) == []


def test_crf_decode_fully_dominant_label():
    crf = Crf(BIO_LABELS)
    emissions = np.zeros((6, 3))
    emissions[:, BIO_LABELS.index("O")] = 50.0
    assert crf.decode(Tensor(emissions)) == ["O"] * 6


# -- spans and tagged data -------------------------------------------------

def test_mention_spans():
    assert mention_spans([]) == []
    assert mention_spans(["O", "B-ENT", "I-ENT", "O", "B-ENT"]) == [(1, 3), (4, 5)]
    assert mention_spans(["B-ENT", "B-ENT", "I-ENT"]) == [(0, 1), (1, 3)]
    assert mention_spans(["I-ENT", "O"]) == [(0, 1)]
    assert mention_spans(["O", "O"]) == []


def test_read_tagged(tmp_path):
    p = tmp_path / "tags.txt"
    p.write_text(
        "how many rivers does alaska have?\tO O O O B-ENT O\n"
        "\n"
        "cities in new mexico\tO O B-ENT I-ENT\n",
        encoding="utf-8",
    )
    data = read_tagged(p)
    assert len(data) == 2
    assert data[0][0] == ["how", "many", "rivers", "does", "alaska", "have"]
    assert data[0][1] == ["O", "O", "O", "O", "B-ENT", "O"]

    bad = tmp_path / "bad.txt"
    bad.write_text("rivers in texas\tO O\n", encoding="utf-8")
    with pytest.raises(ValueError, match="2 labels for 3 tokens"):
        read_tagged(bad)
    bad.write_text("rivers in texas\tO O B-RIVER\n", encoding="utf-8")
    with pytest.raises(ValueError, match="unknown labels"):
        read_tagged(bad)
    bad.write_text("no tab here\n", encoding="utf-8")
    with pytest.raises(ValueError, match="TAB"):
        read_tagged(bad)


# -- end-to-end tagger -----------------------------------------------------

TAGGER_DATA = [
    ("how many rivers does alaska have", "O O O O B-ENT O"),
    ("what is the capital of texas", "O O O O O B-ENT"),
    ("people in new mexico", "O O B-ENT I-ENT"),
    ("cities in new mexico", "O O B-ENT I-ENT"),
    ("where is alaska", "O O B-ENT"),
    ("rivers in texas", "O O B-ENT"),
    ("how many states are there", "O O O O O"),
]


@pytest.fixture(scope="module")
def trained_tagger():
    cfg = EncoderConfig(dim=8, heads=2, head_dim=4, ffn_dim=16)
    tagger = MentionTagger(cfg, seed=0)
    examples = [(q.split(), labels.split()) for q, labels in TAGGER_DATA]
    tagger.fit(examples, epochs=60, lr=0.01, seed=0)
    return tagger


def test_tagger_marks_the_entity_span(trained_tagger):
    labels = trained_tagger.tag("how many rivers does alaska have".split())
    assert labels == ["O", "O", "O", "O", "B-ENT", "O"]
    assert mention_spans(labels) == [(4, 5)]


def test_tagger_marks_multiword_span(trained_tagger):
    labels = trained_tagger.tag("cities in new mexico".split())
    assert labels == ["O", "O", "B-ENT", "I-ENT"]


def test_tagger_empty_input(trained_tagger):
    assert trained_tagger.tag([]) == []


def test_tagger_requires_training():
    fresh = MentionTagger(EncoderConfig(dim=8, heads=2, head_dim=4, ffn_dim=16))
    with pytest.raises(ValueError, match="checkpoint"):
        fresh.tag(["anything"])


def test_tagger_save_load_round_trip(trained_tagger, tmp_path):
    path = tmp_path / "tagger.ckpt"
    trained_tagger.save(path)
    assert (tmp_path / "tagger.ckpt.meta.json").exists()
    again = MentionTagger.load(path)
    for question, _ in TAGGER_DATA:
        assert again.tag(question.split()) == trained_tagger.tag(question.split())


def test_tagger_load_missing_meta(tmp_path):
    with pytest.raises(FileNotFoundError):
        MentionTagger.load(tmp_path / "nope.ckpt")


def test_tagger_question_helper(trained_tagger):
    labels = trained_tagger.tag_question("how many rivers does alaska have?")
    assert labels[4] == "B-ENT"
