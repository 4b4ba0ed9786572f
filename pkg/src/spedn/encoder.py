"""Question-token context encoder with a mention-tagging head.

Two branches read the same token embeddings: a transformer-style
self-attention layer (either with sinusoidal position codes added up front,
or a variant that scores token pairs by their signed offset) and a
bidirectional LSTM.  A learned gate fuses the branches per position, and a
linear-chain CRF scores label sequences over the fused features.  The
bundled tagger marks entity-mention spans with BIO labels; those spans can
feed the entity linker extra candidates.
"""

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .prep import tokenize
from .tensor import ParameterStore, ShapeError, Tensor, load_checkpoint, no_grad, save_checkpoint

BIO_LABELS = ("B-ENT", "I-ENT", "O")
UNK = "<unk>"
EDGE = "<end>"  # pads the bigram of the final token


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 24
    heads: int = 4
    head_dim: int = 6
    ffn_dim: int = 48
    labels: tuple = BIO_LABELS
    fuse: bool = True
    position_mode: str = "relative"

    def __post_init__(self):
        if min(self.dim, self.heads, self.head_dim, self.ffn_dim) < 1:
            raise ValueError("encoder dims must all be >= 1")
        if self.dim != self.heads * self.head_dim:
            raise ValueError(
                f"dim {self.dim} must equal heads {self.heads} x head_dim {self.head_dim}"
            )
        if self.dim % 2:
            raise ValueError("dim must be even (unigram and bigram halves)")
        if not self.labels:
            raise ValueError("label set is empty")
        if self.position_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown position mode {self.position_mode!r}")


# -- position codes -------------------------------------------------------

def sinusoidal_pe(t, d):
    """Interleaved sine/cosine code for position t: component 2i is
    sin(t / 10000^(2i/d)) and component 2i+1 the matching cosine."""
    out = np.empty(d)
    for k in range(d):
        angle = t / 10000.0 ** (2 * (k // 2) / d)
        out[k] = math.sin(angle) if k % 2 == 0 else math.cos(angle)
    return out


def position_matrix(n, d):
    if n == 0:
        return np.zeros((0, d))
    return np.stack([sinusoidal_pe(t, d) for t in range(n)])


def offset_codes(n, d_k, index_offset=0):
    """codes[t, j] = sinusoidal code of the signed offset t - j."""
    pos = np.arange(n) + index_offset
    out = np.empty((n, n, d_k))
    for t in range(n):
        for j in range(n):
            out[t, j] = sinusoidal_pe(int(pos[t] - pos[j]), d_k)
    return out


# -- small helpers --------------------------------------------------------

def _rows(vec, m):
    # stack m copies of a 1-D tensor as rows, differentiably
    n = vec.shape[0]
    return T.matmul(Tensor(np.ones((m, 1))), T.reshape(vec, (1, n)))


def layer_norm(x, gamma, beta, eps=1e-6):
    """Per-row normalization with learnable per-feature scale and shift."""
    n, d = x.shape
    mu = T.tmean(x, axis=1)
    centered = T.transpose(T.add(T.transpose(x), T.mul_scalar(mu, -1.0)))
    var = T.tmean(T.mul(centered, centered), axis=1)
    inv = T.power(T.add_scalar(var, eps), -0.5)
    norm = T.transpose(T.mul(T.transpose(centered), _rows(inv, d)))
    return T.add(T.mul(norm, _rows(gamma, n)), beta)


class Vocab:
    """Symbol table with the unknown marker reserved at index 0."""

    def __init__(self, symbols):
        syms = tuple(symbols)
        if not syms or syms[0] != UNK:
            raise ValueError(f"vocabulary must start with {UNK!r}")
        self._symbols = syms
        self._index = {s: i for i, s in enumerate(syms)}
        if len(self._index) != len(syms):
            raise ValueError("duplicate symbol in vocabulary")

    @classmethod
    def build(cls, sequences):
        seen = {}
        for seq in sequences:
            for sym in seq:
                seen.setdefault(sym, None)
        return cls((UNK, *seen))

    def index(self, symbol):
        return self._index.get(symbol, 0)

    def symbols(self):
        return self._symbols

    def __len__(self):
        return len(self._symbols)


def _bigrams(tokens):
    padded = list(tokens) + [EDGE]
    return [f"{a} {b}" for a, b in zip(padded, padded[1:])]


# -- the encoder stack ----------------------------------------------------

class Encoder:
    """Owns every layer parameter in one named store.

    Vocabularies are attached separately (`set_vocab`) because their sizes
    are data dependent; all other shapes follow from the config.
    """

    def __init__(self, config=None, seed=0):
        self.config = config or EncoderConfig()
        self.store = ParameterStore(seed=seed)
        self.uni_vocab = None
        self.bi_vocab = None
        c = self.config
        d, dk = c.dim, c.head_dim
        for a in range(c.heads):
            self.store.weight(f"abs.q{a}", (d, dk))
            self.store.weight(f"abs.k{a}", (d, dk))
            self.store.weight(f"abs.v{a}", (d, dk))
            self.store.weight(f"rel.wq{a}", (d, dk))
            self.store.weight(f"rel.wv{a}", (d, dk))
        self.store.weight("abs.out", (d, d))
        self.store.tensor("abs.ln1.g", np.ones(d))
        self.store.bias("abs.ln1.b", (d,))
        self.store.tensor("abs.ln2.g", np.ones(d))
        self.store.bias("abs.ln2.b", (d,))
        self.store.weight("abs.ffn.w1", (d, c.ffn_dim))
        self.store.bias("abs.ffn.b1", (c.ffn_dim,))
        self.store.weight("abs.ffn.w2", (c.ffn_dim, d))
        self.store.bias("abs.ffn.b2", (d,))
        self.store.bias("rel.u", (c.heads, dk))
        self.store.bias("rel.v", (c.heads, dk))
        half = d // 2
        for direction in ("fwd", "bwd"):
            self.store.weight(f"lstm.{direction}.wx", (d, 4 * half))
            self.store.weight(f"lstm.{direction}.wh", (half, 4 * half))
            self.store.bias(f"lstm.{direction}.b", (4 * half,))
        self.store.weight("fuse.w1", (d, d))
        self.store.weight("fuse.w2", (d, d))
        self.store.weight("fuse.w3", (d, d))

    # -- embeddings --

    def set_vocab(self, uni_vocab, bi_vocab):
        self.uni_vocab = uni_vocab
        self.bi_vocab = bi_vocab
        half = self.config.dim // 2
        if "emb.uni" not in self.store:
            self.store.embedding("emb.uni", (len(uni_vocab), half))
            self.store.embedding("emb.bi", (len(bi_vocab), half))

    def fit_vocab(self, token_sequences):
        seqs = [list(s) for s in token_sequences]
        self.set_vocab(
            Vocab.build(seqs), Vocab.build(_bigrams(s) for s in seqs)
        )

    def embed_tokens(self, tokens):
        """Concatenated unigram and bigram rows, one per token; unknown
        symbols fall back to the reserved slot."""
        if self.uni_vocab is None:
            raise ValueError("vocabulary not built; call set_vocab or fit_vocab first")
        if not tokens:
            return Tensor(np.zeros((0, self.config.dim)))
        uidx = [self.uni_vocab.index(t) for t in tokens]
        bidx = [self.bi_vocab.index(b) for b in _bigrams(tokens)]
        return T.concat(
            [
                T.embedding_lookup(self.store["emb.uni"], uidx),
                T.embedding_lookup(self.store["emb.bi"], bidx),
            ],
            axis=1,
        )

    # -- attention branches --

    def absolute_attention(self, H, return_weights=False):
        """Multi-head scaled dot-product attention over position-augmented
        rows, output projection, then the usual residual + norm + FFN +
        residual + norm sandwich."""
        c = self.config
        if len(H.shape) != 2 or H.shape[1] != c.dim:
            raise ShapeError(f"expected (n, {c.dim}) input, got {H.shape}")
        scale = 1.0 / math.sqrt(c.head_dim)
        heads, weights = [], []
        for a in range(c.heads):
            q = T.matmul(H, self.store[f"abs.q{a}"])
            k = T.matmul(H, self.store[f"abs.k{a}"])
            v = T.matmul(H, self.store[f"abs.v{a}"])
            att = T.softmax(T.mul_scalar(T.matmul(q, T.transpose(k)), scale), axis=-1)
            weights.append(att)
            heads.append(T.matmul(att, v))
        mixed = T.matmul(T.concat(heads, axis=1), self.store["abs.out"])
        x = layer_norm(T.add(H, mixed), self.store["abs.ln1.g"], self.store["abs.ln1.b"])
        inner = T.relu(T.add(T.matmul(x, self.store["abs.ffn.w1"]), self.store["abs.ffn.b1"]))
        ffn = T.add(T.matmul(inner, self.store["abs.ffn.w2"]), self.store["abs.ffn.b2"])
        out = layer_norm(T.add(x, ffn), self.store["abs.ln2.g"], self.store["abs.ln2.b"])
        if return_weights:
            return out, weights
        return out

    def relative_attention(self, H, index_offset=0, use_positions=True, return_parts=False):
        """Offset-aware attention: queries and values are projected, keys
        are the per-head slices of the input itself, and each pair score
        adds query-offset, key-bias, and offset-bias terms.  Scores are not
        scaled before the softmax; head outputs are concatenated as is."""
        c = self.config
        if len(H.shape) != 2 or H.shape[1] != c.dim:
            raise ShapeError(f"expected (n, {c.dim}) input, got {H.shape}")
        n, dk = H.shape[0], c.head_dim
        codes = offset_codes(n, dk, index_offset) if use_positions else np.zeros((n, n, dk))
        rel = Tensor(codes)
        outs, scores, weights = [], [], []
        for a in range(c.heads):
            q = T.matmul(H, self.store[f"rel.wq{a}"])
            k = T.slice_axis(H, a * dk, (a + 1) * dk, axis=1)
            v = T.matmul(H, self.store[f"rel.wv{a}"])
            u = T.reshape(T.slice_axis(self.store["rel.u"], a, a + 1, 0), (dk,))
            ub = T.reshape(T.slice_axis(self.store["rel.v"], a, a + 1, 0), (dk,))
            content = T.matmul(q, T.transpose(k))
            pos = T.pair_dot(q, rel)
            offset_bias = T.pair_dot(_rows(ub, n), rel)
            key_bias = T.reshape(T.matmul(k, T.reshape(u, (dk, 1))), (n,))
            score = T.add(T.add(T.add(content, pos), offset_bias), key_bias)
            att = T.softmax(score, axis=-1)
            scores.append(score)
            weights.append(att)
            outs.append(T.matmul(att, v))
        out = T.concat(outs, axis=1)
        if return_parts:
            return out, scores, weights
        return out

    # -- recurrent branch --

    def _lstm_pass(self, X, prefix, order):
        half = self.config.dim // 2
        wx = self.store[f"{prefix}.wx"]
        wh = self.store[f"{prefix}.wh"]
        b = self.store[f"{prefix}.b"]
        h = Tensor(np.zeros((1, half)))
        cell = Tensor(np.zeros((1, half)))
        out = []
        for t in order:
            x = T.slice_axis(X, t, t + 1, axis=0)
            z = T.add(T.add(T.matmul(x, wx), T.matmul(h, wh)), b)
            gi, gf, gg, go = T.split(z, [half, half, half, half], axis=1)
            cell = T.add(T.mul(T.sigmoid(gf), cell), T.mul(T.sigmoid(gi), T.tanh(gg)))
            h = T.mul(T.sigmoid(go), T.tanh(cell))
            out.append(h)
        return out

    def bilstm(self, X):
        """One LSTM pass per direction; per-position outputs concatenated."""
        c = self.config
        if len(X.shape) != 2 or X.shape[1] != c.dim:
            raise ShapeError(f"expected (n, {c.dim}) input, got {X.shape}")
        n = X.shape[0]
        if n == 0:
            return Tensor(np.zeros((0, c.dim)))
        fwd = self._lstm_pass(X, "lstm.fwd", range(n))
        bwd = self._lstm_pass(X, "lstm.bwd", range(n - 1, -1, -1))
        bwd.reverse()
        return T.concat([T.concat([f, b], axis=1) for f, b in zip(fwd, bwd)], axis=0)

    # -- fusion --

    def fuse(self, x_t, x_b, return_gate=False):
        """Gated convex combination of the two branch outputs, computed
        per position: gate = sigmoid(W3 tanh(W1 a + W2 b))."""
        if x_t.shape != x_b.shape:
            raise ShapeError(f"fuse shapes {x_t.shape} and {x_b.shape}")
        vec = len(x_t.shape) == 1
        if vec:
            d = x_t.shape[0]
            x_t = T.reshape(x_t, (1, d))
            x_b = T.reshape(x_b, (1, d))
        pre = T.tanh(T.add(T.matmul(x_t, self.store["fuse.w1"]), T.matmul(x_b, self.store["fuse.w2"])))
        gate = T.sigmoid(T.matmul(pre, self.store["fuse.w3"]))
        inv = T.add_scalar(T.mul_scalar(gate, -1.0), 1.0)
        out = T.add(T.mul(gate, x_t), T.mul(inv, x_b))
        if vec:
            out = T.reshape(out, (out.shape[1],))
            gate = T.reshape(gate, (gate.shape[1],))
        if return_gate:
            return out, gate
        return out


# -- CRF ------------------------------------------------------------------

class Crf:
    """Linear-chain scorer over an augmented label set; virtual start and
    stop states live at indices L and L+1 of the transition table."""

    def __init__(self, labels, transitions=None):
        self.labels = tuple(labels)
        if not self.labels:
            raise ValueError("label set is empty")
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        n = len(self.labels) + 2
        if transitions is None:
            transitions = Tensor(np.zeros((n, n)), requires_grad=True)
        if transitions.shape != (n, n):
            raise ShapeError(f"transition table must be {(n, n)}, got {transitions.shape}")
        self.transitions = transitions

    def _label_indices(self, gold):
        try:
            return [self._index[g] for g in gold]
        except KeyError as exc:
            raise ValueError(f"unknown label {exc.args[0]!r}") from None

    def log_likelihood(self, emissions, gold):
        """Log probability of the gold path: its score minus the log
        partition from the forward recursion, all in log space."""
        L = len(self.labels)
        steps = emissions.shape[0]
        if len(emissions.shape) != 2 or emissions.shape[1] != L:
            raise ShapeError(f"emissions must be (steps, {L}), got {emissions.shape}")
        if steps < 1:
            raise ShapeError("need at least one step")
        idx = self._label_indices(gold)
        if len(idx) != steps:
            raise ShapeError(f"{len(idx)} labels for {steps} steps")

        onehot = np.zeros((steps, L))
        onehot[np.arange(steps), idx] = 1.0
        counts = np.zeros((L + 2, L + 2))
        counts[L, idx[0]] = 1.0
        for a, b in zip(idx, idx[1:]):
            counts[a, b] += 1.0
        counts[idx[-1], L + 1] += 1.0
        gold_score = T.add(
            T.tsum(T.mul(emissions, Tensor(onehot))),
            T.tsum(T.mul(self.transitions, Tensor(counts))),
        )

        inner = T.slice_axis(T.slice_axis(self.transitions, 0, L, 0), 0, L, 1)
        start = T.reshape(T.slice_axis(T.slice_axis(self.transitions, L, L + 1, 0), 0, L, 1), (L,))
        stop = T.reshape(T.slice_axis(T.slice_axis(self.transitions, 0, L, 0), L + 1, L + 2, 1), (L,))
        alpha = T.add(start, T.reshape(T.slice_axis(emissions, 0, 1, 0), (L,)))
        for t in range(1, steps):
            paths = T.add(T.transpose(inner), alpha)  # paths[b, j] = trans[j, b] + alpha[j]
            emit = T.reshape(T.slice_axis(emissions, t, t + 1, 0), (L,))
            alpha = T.add(T.logsumexp(paths, axis=1), emit)
        log_z = T.logsumexp(T.add(alpha, stop), axis=None)
        return T.add(gold_score, T.mul_scalar(log_z, -1.0))

    def decode(self, emissions):
        """Best-scoring label sequence by Viterbi; ties break toward the
        lower label index."""
        e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=float)
        steps = e.shape[0]
        if steps == 0:
            return []
        L = len(self.labels)
        trans = self.transitions.data
        score = trans[L, :L] + e[0]
        back = []
        for t in range(1, steps):
            cand = score[:, None] + trans[:L, :L]
            best = cand.argmax(axis=0)
            back.append(best)
            score = cand[best, np.arange(L)] + e[t]
        score = score + trans[:L, L + 1]
        path = [int(score.argmax())]
        for pointers in reversed(back):
            path.append(int(pointers[path[-1]]))
        path.reverse()
        return [self.labels[i] for i in path]

    def brute_force(self, emissions, gold=None):
        """Enumeration reference: (log-likelihood of gold, best sequence).
        Exponential; for tests on short inputs only."""
        e = emissions.data if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=float)
        L = len(self.labels)
        trans = self.transitions.data
        steps = e.shape[0]

        def total(seq):
            s = trans[L, seq[0]] + e[0, seq[0]]
            for t, (a, b) in enumerate(zip(seq, seq[1:]), start=1):
                s += trans[a, b] + e[t, b]
            return s + trans[seq[-1], L + 1]

        seqs = list(itertools.product(range(L), repeat=steps))
        scores = np.array([total(s) for s in seqs])
        m = scores.max()
        log_z = m + math.log(np.exp(scores - m).sum())
        best = [self.labels[i] for i in seqs[int(scores.argmax())]]
        ll = None
        if gold is not None:
            ll = total(self._label_indices(gold)) - log_z
        return ll, best


# -- the tagger -----------------------------------------------------------

def mention_spans(labels):
    """Half-open token spans covered by B/I runs; a stray I opens a span."""
    spans = []
    start = None
    for i, lab in enumerate(labels):
        if lab.startswith("B"):
            if start is not None:
                spans.append((start, i))
            start = i
        elif lab.startswith("I"):
            if start is None:
                start = i
        else:
            if start is not None:
                spans.append((start, i))
                start = None
    if start is not None:
        spans.append((start, len(labels)))
    return spans


def read_tagged(path):
    """Training lines `question<TAB>space-separated BIO labels`; labels must
    align one to one with the tokenized question."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            question, sep, tags = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{ln}: expected question<TAB>labels")
            tokens = tokenize(question)
            labels = tags.split()
            if len(labels) != len(tokens):
                raise ValueError(
                    f"{path}:{ln}: {len(labels)} labels for {len(tokens)} tokens"
                )
            bad = sorted(set(labels) - set(BIO_LABELS))
            if bad:
                raise ValueError(f"{path}:{ln}: unknown labels {bad}")
            examples.append((tokens, labels))
    return examples


class MentionTagger:
    """End-to-end span tagger: embeddings, attention branch alongside the
    BiLSTM, gated fusion, emission projection, CRF."""

    def __init__(self, config=None, seed=0):
        self.config = config or EncoderConfig()
        self.encoder = Encoder(self.config, seed=seed)
        store = self.encoder.store
        L = len(self.config.labels)
        self.crf = Crf(
            self.config.labels,
            transitions=store.tensor("crf.trans", np.zeros((L + 2, L + 2))),
        )
        store.weight("emit.w", (self.config.dim, L))
        store.bias("emit.b", (L,))
        self.trained = False

    def _emissions(self, tokens, train=False, rng=None, dropout=0.0):
        enc = self.encoder
        X = enc.embed_tokens(tokens)
        if self.config.position_mode == "absolute":
            with_pos = T.add(X, Tensor(position_matrix(len(tokens), self.config.dim)))
            branch = enc.absolute_attention(with_pos)
        else:
            branch = enc.relative_attention(X)
        recurrent = enc.bilstm(X)
        if self.config.fuse:
            fused = enc.fuse(branch, recurrent)
        else:
            fused = T.mul_scalar(T.add(branch, recurrent), 0.5)
        if train and dropout > 0.0:
            fused = T.dropout(fused, dropout, True, rng)
        store = self.encoder.store
        return T.add(T.matmul(fused, store["emit.w"]), store["emit.b"])

    def fit(self, examples, epochs=30, lr=0.01, dropout=0.0, seed=0):
        """Adam over per-example negative log-likelihood; returns the mean
        loss of the final epoch."""
        usable = [(tok, lab) for tok, lab in examples if tok]
        if not usable:
            raise ValueError("no non-empty training examples")
        self.encoder.fit_vocab([tok for tok, _ in usable])
        store = self.encoder.store
        rng = np.random.default_rng(seed)
        step = 0
        last = 0.0
        for _ in range(epochs):
            order = rng.permutation(len(usable))
            total = 0.0
            for k in order:
                tokens, labels = usable[k]
                store.zero_grads()
                emissions = self._emissions(tokens, train=True, rng=rng, dropout=dropout)
                loss = T.mul_scalar(self.crf.log_likelihood(emissions, labels), -1.0)
                loss.backward()
                step += 1
                T.adam_step(store, lr=lr, t=step)
                total += float(loss.data)
            last = total / len(usable)
        self.trained = True
        return last

    def tag(self, tokens):
        if not self.trained:
            raise ValueError("tagger has no trained checkpoint")
        if not tokens:
            return []
        with no_grad():
            emissions = self._emissions(list(tokens))
        return self.crf.decode(emissions)

    def tag_question(self, question):
        return self.tag(tokenize(question))

    # -- persistence --

    def save(self, path):
        if self.encoder.uni_vocab is None:
            raise ValueError("nothing to save; tagger was never fitted")
        save_checkpoint(self.encoder.store, path)
        meta = {
            "config": {
                "dim": self.config.dim,
                "heads": self.config.heads,
                "head_dim": self.config.head_dim,
                "ffn_dim": self.config.ffn_dim,
                "labels": list(self.config.labels),
                "fuse": self.config.fuse,
                "position_mode": self.config.position_mode,
            },
            "uni": list(self.encoder.uni_vocab.symbols()),
            "bi": list(self.encoder.bi_vocab.symbols()),
        }
        Path(f"{path}.meta.json").write_text(json.dumps(meta), encoding="utf-8")

    @classmethod
    def load(cls, path):
        meta_path = Path(f"{path}.meta.json")
        if not meta_path.exists():
            raise FileNotFoundError(f"missing tagger metadata {meta_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        cfg = dict(meta["config"])
        cfg["labels"] = tuple(cfg["labels"])
        tagger = cls(EncoderConfig(**cfg))
        tagger.encoder.set_vocab(Vocab(meta["uni"]), Vocab(meta["bi"]))
        load_checkpoint(path, tagger.encoder.store)
        tagger.trained = True
        return tagger
