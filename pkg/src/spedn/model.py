"""Graph-to-sequence parser: question graph in, semantic-block sequence out.

The encoder embeds question-graph nodes and refines them with k rounds of
neighbor-mean aggregation; an elementwise pool over the final node states
seeds the decoder.  The decoder is a single-layer GRU with additive
attention over the node states that emits output-vocabulary symbols.

Two vocabulary granularities are supported.  Atomic mode has one symbol
per block, with the value slot of an entity block bound either to a
pointer into the question's linked-entity candidates or to a literal
seen in training.  Decomposed mode emits one symbol per block component
and closes each block with a boundary marker, which lets blocks share
component embeddings.

An optional legality controller masks, at every decode step, all symbols
that cannot extend the current prefix into an assemblable sequence.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import (
    AggrBlock,
    EntityBlock,
    JoinBlock,
    LiteralBlock,
    OrdinalBlock,
    RelationBlock,
    _fmt_value,
)
from .encoder import Vocab
from .qgraph import AssemblyError, AssemblyState, block_shape, legal_next
from .tensor import ParameterStore, Tensor, load_checkpoint, no_grad, save_checkpoint

BOS = "<s>"
EOS = "</s>"
BOUNDARY = "</b>"
MAX_POINTERS = 4

DEFAULT_STEP_LIMIT = 64


class DecodeIncomplete(RuntimeError):
    """No finished hypothesis within the step budget."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = list(partial)


@dataclass(frozen=True)
class GraphEncoderConfig:
    hops: int = 3
    node_dim: int = 100
    aggregator: str = "mean"
    pooling: str = "max"

    def __post_init__(self):
        if self.hops < 1 or self.node_dim < 1:
            raise ValueError("hops and node_dim must be >= 1")
        if self.aggregator != "mean":
            raise ValueError(f"unsupported aggregator {self.aggregator!r}")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"unsupported pooling {self.pooling!r}")


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 256
    beam: int = 5
    mode: str = "atomic"  # or "decomposed"
    controller: bool = False
    embed_dim: int = 64
    attn_dim: int = 64
    dropout: float = 0.2

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if min(self.hidden, self.embed_dim, self.attn_dim) < 1:
            raise ValueError("decoder dims must be >= 1")
        if self.mode not in ("atomic", "decomposed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


# -- output vocabulary -----------------------------------------------------

def _schema_shapes(kg):
    """Every block shape the schema admits, in one set."""
    return set(legal_next(AssemblyState(), kg))


def _corpus_values(gold_sequences):
    """(type, attr) -> {rendered value: value} harvested from gold blocks."""
    vals = {}
    for seq in gold_sequences:
        for b in seq:
            if isinstance(b, EntityBlock) and b.attr is not None:
                vals.setdefault((b.type, b.attr), {})[_fmt_value(b.value)] = b.value
    return vals


class OutputVocabulary:
    """Symbol table for the decoder plus the block <-> symbol mappings.

    Pointer symbols `ptr:k` resolve to the k-th linked-entity candidate of
    the question being decoded; they are only offered for `id` filters.
    Literal values seen in training are carried as `val:<rendered>` symbols.
    """

    def __init__(self, mode, kg, vals, ords, max_pointers=MAX_POINTERS):
        if mode not in ("atomic", "decomposed"):
            raise ValueError(f"unknown vocabulary mode {mode!r}")
        self.mode = mode
        self.max_pointers = max_pointers
        self._vals = {k: dict(v) for k, v in vals.items()}
        self._ords = {t: tuple(sorted(set(o))) for t, o in ords.items()}
        self._rendered = {}
        for mapping in self._vals.values():
            self._rendered.update(mapping)

        self._shapes = sorted(_schema_shapes(kg))
        self._atomic_meta = {}
        symbols = [BOS, EOS]
        if mode == "atomic":
            for shape in self._shapes:
                for sym, meta in self._atomic_renderings(shape):
                    if sym not in self._atomic_meta:
                        self._atomic_meta[sym] = meta
                        symbols.append(sym)
        else:
            symbols.append(BOUNDARY)
            parts = set()
            for shape in self._shapes:
                for expansion in self.shape_expansions(shape):
                    parts.update(expansion)
            parts.discard(BOUNDARY)
            symbols.extend(sorted(parts))
        self.symbols = tuple(symbols)
        self._index = {s: i for i, s in enumerate(self.symbols)}
        self.eos_index = self._index[EOS]
        self.bos_index = self._index[BOS]
        self._pointer_rank = {}
        for i, s in enumerate(self.symbols):
            k = self._rank_of(s)
            if k is not None:
                self._pointer_rank[i] = k

    @classmethod
    def from_corpus(cls, mode, kg, gold_sequences, ordinals=None, max_pointers=MAX_POINTERS):
        seqs = [list(s) for s in gold_sequences]
        vals = _corpus_values(seqs)
        ords = {}
        for seq in seqs:
            for b in seq:
                if isinstance(b, OrdinalBlock):
                    ords.setdefault(b.type, set()).add(b.op)
        if ordinals is not None:
            for t in kg.types:
                for surface in ordinals.surfaces_for(t):
                    ords.setdefault(t, set()).add(surface)
        vocab = cls(mode, kg, vals, ords, max_pointers)
        for seq in seqs:
            vocab.symbolize(seq, ())  # raises if anything is inexpressible
        return vocab

    # -- symbol inventory helpers --

    def _rank_of(self, symbol):
        if self.mode == "decomposed":
            if symbol.startswith("ptr:"):
                return int(symbol[4:])
            return None
        meta = self._atomic_meta.get(symbol)
        if meta and meta[1] is not None and meta[1][0] == "ptr":
            return meta[1][1]
        return None

    def _bindings(self, t, attr):
        out = []
        if attr == "id":
            out.extend(("ptr", k) for k in range(self.max_pointers))
        for rendered in sorted(self._vals.get((t, attr), ())):
            out.append(("val", rendered))
        return out

    def _atomic_renderings(self, shape):
        kind = shape[0]
        if kind == "entity" and len(shape) == 2:
            yield f"entity({shape[1]})", (shape, None)
        elif kind == "entity":
            t, attr = shape[1], shape[2]
            for binding in self._bindings(t, attr):
                text = f"ptr:{binding[1]}" if binding[0] == "ptr" else binding[1]
                yield f"entity({t}, {attr}, {text})", (shape, binding)
        elif kind == "relation":
            yield f"relation({shape[1]}, {shape[2]}, :{shape[3]})", (shape, None)
        elif kind == "literal":
            yield f"literal({shape[1]}, :{shape[2]})", (shape, None)
        elif kind == "ordinal":
            for op in self._ords.get(shape[1], ()):
                yield f"ordinal({op}, :{shape[1]})", (shape, ("ord", op))
        elif kind == "aggr":
            yield f"aggr({shape[1]}, :{shape[2]})", (shape, None)
        elif kind == "join":
            yield f"join({shape[1]}, :{shape[2]}, :{shape[2]})", (shape, None)
        else:
            raise ValueError(f"unknown shape {shape!r}")

    def shape_expansions(self, shape):
        """Component-symbol sequences that realize the shape, boundary
        included; bindings multiply entity shapes out."""
        kind = shape[0]
        if kind == "entity" and len(shape) == 2:
            return [["pat:entity", f"type:{shape[1]}", BOUNDARY]]
        if kind == "entity":
            t, attr = shape[1], shape[2]
            out = []
            for binding in self._bindings(t, attr):
                sym = f"ptr:{binding[1]}" if binding[0] == "ptr" else f"val:{binding[1]}"
                out.append(["pat:entity", f"type:{t}", f"attr:{attr}", sym, BOUNDARY])
            return out
        if kind == "relation":
            return [["pat:relation", f"type:{shape[1]}", f"rel:{shape[2]}", f"type:{shape[3]}", BOUNDARY]]
        if kind == "literal":
            return [["pat:literal", f"attr:{shape[1]}", f"type:{shape[2]}", BOUNDARY]]
        if kind == "ordinal":
            return [
                ["pat:ordinal", f"ord:{op}", f"type:{shape[1]}", BOUNDARY]
                for op in self._ords.get(shape[1], ())
            ]
        if kind == "aggr":
            return [["pat:aggr", f"agg:{shape[1]}", f"type:{shape[2]}", BOUNDARY]]
        if kind == "join":
            return [["pat:join", f"set:{shape[1]}", f"type:{shape[2]}", BOUNDARY]]
        raise ValueError(f"unknown shape {shape!r}")

    def __len__(self):
        return len(self.symbols)

    def index(self, symbol):
        try:
            return self._index[symbol]
        except KeyError:
            raise ValueError(f"symbol {symbol!r} not in vocabulary") from None

    def pointer_rank(self, idx):
        """Candidate index a symbol points at, or None."""
        return self._pointer_rank.get(idx)

    # -- block -> symbols --

    def _value_binding(self, block, candidates):
        if block.attr == "id":
            for k, (_span, eid, _t) in enumerate(candidates[: self.max_pointers]):
                if eid == block.value:
                    return ("ptr", k)
        return ("val", _fmt_value(block.value))

    def symbolize_block(self, block, candidates):
        """Symbols that spell one block; atomic gives a single symbol,
        decomposed gives components plus the boundary."""
        if self.mode == "atomic":
            if isinstance(block, EntityBlock) and block.attr is not None:
                binding = self._value_binding(block, candidates)
                text = f"ptr:{binding[1]}" if binding[0] == "ptr" else binding[1]
                sym = f"entity({block.type}, {block.attr}, {text})"
            elif isinstance(block, EntityBlock):
                sym = f"entity({block.type})"
            elif isinstance(block, RelationBlock):
                sym = f"relation({block.out_type}, {block.rel}, :{block.in_type})"
            elif isinstance(block, LiteralBlock):
                sym = f"literal({block.attr}, :{block.type})"
            elif isinstance(block, OrdinalBlock):
                sym = f"ordinal({block.op}, :{block.type})"
            elif isinstance(block, AggrBlock):
                sym = f"aggr({block.op}, :{block.type})"
            elif isinstance(block, JoinBlock):
                sym = f"join({block.op}, :{block.type}, :{block.type})"
            else:
                raise ValueError(f"not a block: {block!r}")
            self.index(sym)  # fail loudly on inexpressible blocks
            return [sym]
        return self.block_components(block, candidates) + [BOUNDARY]

    def block_components(self, block, candidates):
        """Component symbols of a block, boundary excluded."""
        if isinstance(block, EntityBlock) and block.attr is not None:
            binding = self._value_binding(block, candidates)
            sym = f"ptr:{binding[1]}" if binding[0] == "ptr" else f"val:{binding[1]}"
            return ["pat:entity", f"type:{block.type}", f"attr:{block.attr}", sym]
        if isinstance(block, EntityBlock):
            return ["pat:entity", f"type:{block.type}"]
        if isinstance(block, RelationBlock):
            return ["pat:relation", f"type:{block.out_type}", f"rel:{block.rel}", f"type:{block.in_type}"]
        if isinstance(block, LiteralBlock):
            return ["pat:literal", f"attr:{block.attr}", f"type:{block.type}"]
        if isinstance(block, OrdinalBlock):
            return ["pat:ordinal", f"ord:{block.op}", f"type:{block.type}"]
        if isinstance(block, AggrBlock):
            return ["pat:aggr", f"agg:{block.op}", f"type:{block.type}"]
        if isinstance(block, JoinBlock):
            return ["pat:join", f"set:{block.op}", f"type:{block.type}"]
        raise ValueError(f"not a block: {block!r}")

    def symbolize(self, blocks, candidates):
        """Full target sequence for a gold block list, EOS appended."""
        out = []
        for b in blocks:
            out.extend(self.symbolize_block(b, candidates))
        out.append(EOS)
        for s in out:
            self.index(s)
        return out

    # -- symbols -> block --

    def _resolve_binding(self, binding, candidates):
        kind, payload = binding
        if kind == "ptr":
            if payload >= len(candidates):
                raise ValueError(f"pointer ptr:{payload} beyond {len(candidates)} candidates")
            return candidates[payload][1]
        if payload not in self._rendered:
            raise ValueError(f"unknown value symbol {payload!r}")
        return self._rendered[payload]

    def realize_atomic(self, symbol, candidates):
        meta = self._atomic_meta.get(symbol)
        if meta is None:
            raise ValueError(f"symbol {symbol!r} does not spell a block")
        shape, extra = meta
        kind = shape[0]
        if kind == "entity" and len(shape) == 2:
            return EntityBlock(shape[1])
        if kind == "entity":
            return EntityBlock(shape[1], shape[2], self._resolve_binding(extra, candidates))
        if kind == "relation":
            return RelationBlock(shape[1], shape[2], shape[3])
        if kind == "literal":
            return LiteralBlock(shape[1], shape[2])
        if kind == "ordinal":
            return OrdinalBlock(extra[1], shape[1])
        if kind == "aggr":
            return AggrBlock(shape[1], shape[2])
        return JoinBlock(shape[1], shape[2])

    def realize_components(self, components, candidates):
        comps = list(components)

        def take(prefix, what):
            if not comps or not comps[0].startswith(prefix):
                raise ValueError(f"expected {what}, got {comps[0] if comps else 'end of block'}")
            return comps.pop(0)[len(prefix):]

        pattern = take("pat:", "a pattern symbol")
        if pattern == "entity":
            t = take("type:", "a type")
            if not comps:
                block = EntityBlock(t)
            else:
                attr = take("attr:", "an attribute")
                if not comps:
                    raise ValueError("entity filter is missing its value")
                raw = comps.pop(0)
                if raw.startswith("ptr:"):
                    binding = ("ptr", int(raw[4:]))
                elif raw.startswith("val:"):
                    binding = ("val", raw[4:])
                else:
                    raise ValueError(f"expected a value binding, got {raw}")
                block = EntityBlock(t, attr, self._resolve_binding(binding, candidates))
        elif pattern == "relation":
            out_t = take("type:", "the output type")
            rel = take("rel:", "a relation")
            in_t = take("type:", "the slot type")
            block = RelationBlock(out_t, rel, in_t)
        elif pattern == "literal":
            block = LiteralBlock(take("attr:", "an attribute"), take("type:", "a type"))
        elif pattern == "ordinal":
            block = OrdinalBlock(take("ord:", "a superlative"), take("type:", "a type"))
        elif pattern == "aggr":
            block = AggrBlock(take("agg:", "an aggregate op"), take("type:", "a type"))
        elif pattern == "join":
            block = JoinBlock(take("set:", "a set op"), take("type:", "a type"))
        else:
            raise ValueError(f"unknown pattern {pattern!r}")
        if comps:
            raise ValueError(f"trailing components {comps}")
        return block

    def atomic_shape(self, symbol):
        meta = self._atomic_meta.get(symbol)
        return None if meta is None else meta[0]

    # -- persistence --

    def to_json(self):
        return {
            "mode": self.mode,
            "max_pointers": self.max_pointers,
            "vals": [[t, a, r, v] for (t, a), m in sorted(self._vals.items()) for r, v in sorted(m.items())],
            "ords": {t: list(o) for t, o in sorted(self._ords.items())},
            "symbols": list(self.symbols),
        }

    @classmethod
    def from_json(cls, payload, kg):
        vals = {}
        for t, a, rendered, value in payload["vals"]:
            vals.setdefault((t, a), {})[rendered] = value
        vocab = cls(payload["mode"], kg, vals, payload["ords"], payload["max_pointers"])
        if list(vocab.symbols) != list(payload["symbols"]):
            raise ValueError("saved vocabulary does not match the graph schema")
        return vocab


# -- beam bookkeeping ------------------------------------------------------

@dataclass
class Hypothesis:
    symbols: tuple
    log_prob: float
    state: AssemblyState | None
    hidden: Tensor
    feed: Tensor
    blocks: tuple
    partial: tuple

    @property
    def normalized(self):
        return self.log_prob / max(1, len(self.symbols))


class Graph2Seq:
    """The full parser; all parameters live in one named store."""

    def __init__(self, kg, vocab, node_vocab, graph_config=None, decoder_config=None, seed=0):
        self.kg = kg
        self.vocab = vocab
        self.node_vocab = node_vocab
        self.gcfg = graph_config or GraphEncoderConfig()
        self.dcfg = decoder_config or DecoderConfig()
        if self.dcfg.mode != vocab.mode:
            raise ValueError(
                f"decoder mode {self.dcfg.mode!r} != vocabulary mode {vocab.mode!r}"
            )
        self.avg_gold_symbols = None
        self.store = ParameterStore(seed=seed)
        nd, hid = self.gcfg.node_dim, self.dcfg.hidden
        emb, att = self.dcfg.embed_dim, self.dcfg.attn_dim
        V = len(vocab)
        s = self.store
        s.embedding("gnn.emb", (len(node_vocab), nd))
        for hop in range(self.gcfg.hops):
            s.weight(f"gnn.w{hop}", (2 * nd, nd))
            s.bias(f"gnn.b{hop}", (nd,))
        s.weight("init.w", (nd, hid))
        s.bias("init.b", (hid,))
        s.embedding("sym.emb", (V, emb))
        for gate in ("z", "r", "n"):
            s.weight(f"gru.w{gate}", (emb + nd, hid))
            s.weight(f"gru.u{gate}", (hid, hid))
            s.bias(f"gru.b{gate}", (hid,))
        s.weight("att.wh", (hid, att))
        s.weight("att.wn", (nd, att))
        s.bias("att.b", (att,))
        s.weight("att.v", (att, 1))
        s.weight("out.w", (hid + nd, V))
        s.bias("out.b", (V,))
        self._legal_cache = {}
        self._trie_cache = {}
        self._pruned_cache = {}
        self._structural_cache = {}

    # -- encoding --

    def encode_graph(self, qg):
        """Node embeddings refined by hop rounds of neighbor-mean mixing,
        plus the pooled-and-projected decoder start state."""
        if not qg.nodes:
            raise ValueError("empty question graph")
        idx = [self.node_vocab.index(s) for s in qg.nodes]
        h = T.embedding_lookup(self.store["gnn.emb"], idx)
        n = len(qg.nodes)
        mix = np.zeros((n, n))
        for i, nbrs in enumerate(qg.adjacency()):
            if nbrs:
                mix[i, list(nbrs)] = 1.0 / len(nbrs)
        mix = Tensor(mix)
        for hop in range(self.gcfg.hops):
            neighbor = T.matmul(mix, h)
            h = T.relu(
                T.add(
                    T.matmul(T.concat([h, neighbor], axis=1), self.store[f"gnn.w{hop}"]),
                    self.store[f"gnn.b{hop}"],
                )
            )
        pooled = T.max_pool(h, axis=0) if self.gcfg.pooling == "max" else T.tmean(h, axis=0)
        start = T.tanh(
            T.add(
                T.matmul(T.reshape(pooled, (1, self.gcfg.node_dim)), self.store["init.w"]),
                self.store["init.b"],
            )
        )
        return h, start

    # -- one decoder step --

    def decode_step(self, hidden, feed, nodes, train=False, rng=None):
        """GRU update on [fed embedding ; attention context]; returns the
        new hidden state, output logits, and the attention weights."""
        s = self.store
        n = nodes.shape[0]
        node_proj = T.add(T.matmul(nodes, s["att.wn"]), s["att.b"])
        hidden_proj = T.reshape(T.matmul(hidden, s["att.wh"]), (self.dcfg.attn_dim,))
        energy = T.matmul(T.tanh(T.add(node_proj, hidden_proj)), s["att.v"])
        alpha = T.softmax(T.reshape(energy, (1, n)), axis=-1)
        context = T.matmul(alpha, nodes)
        x = T.concat([feed, context], axis=1)
        z = T.sigmoid(T.add(T.add(T.matmul(x, s["gru.wz"]), T.matmul(hidden, s["gru.uz"])), s["gru.bz"]))
        r = T.sigmoid(T.add(T.add(T.matmul(x, s["gru.wr"]), T.matmul(hidden, s["gru.ur"])), s["gru.br"]))
        fresh = T.tanh(
            T.add(T.add(T.matmul(x, s["gru.wn"]), T.matmul(T.mul(r, hidden), s["gru.un"])), s["gru.bn"])
        )
        keep = T.add_scalar(T.mul_scalar(z, -1.0), 1.0)
        new_hidden = T.add(T.mul(z, hidden), T.mul(keep, fresh))
        pre = T.concat([new_hidden, context], axis=1)
        if train and self.dcfg.dropout > 0.0:
            pre = T.dropout(pre, self.dcfg.dropout, True, rng)
        logits = T.add(T.matmul(pre, s["out.w"]), s["out.b"])
        return new_hidden, logits, alpha

    # -- embeddings fed back into the decoder --

    def _symbol_feed(self, idx):
        return T.embedding_lookup(self.store["sym.emb"], [idx])

    def embed_block_decomposed(self, block, candidates=()):
        """Mean of the block's component-symbol embeddings."""
        comps = self.vocab.block_components(block, candidates)
        rows = T.embedding_lookup(self.store["sym.emb"], [self.vocab.index(c) for c in comps])
        return T.reshape(T.tmean(rows, axis=0), (1, self.dcfg.embed_dim))

    def _component_mean_feed(self, component_indices):
        rows = T.embedding_lookup(self.store["sym.emb"], list(component_indices))
        return T.reshape(T.tmean(rows, axis=0), (1, self.dcfg.embed_dim))

    # -- teacher forcing --

    def sequence_log_prob(self, qg, gold_blocks, candidates=(), train=False, rng=None):
        """Sum of per-step log-probabilities of the gold symbol sequence."""
        nodes, hidden = self.encode_graph(qg)
        targets = [self.vocab.index(s) for s in self.vocab.symbolize(gold_blocks, candidates)]
        feed = self._symbol_feed(self.vocab.bos_index)
        total = None
        run = []
        for ti in targets:
            hidden, logits, _ = self.decode_step(hidden, feed, nodes, train=train, rng=rng)
            step = T.mul_scalar(T.reshape(T.cross_entropy(logits, [ti]), ()), -1.0)
            total = step if total is None else T.add(total, step)
            feed, run = self._advance_feed(ti, run)
        return total

    def _advance_feed(self, emitted_idx, running_components):
        """Input feeding: normally the emitted symbol's embedding; in
        decomposed mode a boundary feeds the closed block's component mean."""
        sym = self.vocab.symbols[emitted_idx]
        if self.vocab.mode == "decomposed":
            if sym == BOUNDARY:
                if running_components:
                    return self._component_mean_feed(running_components), []
                return self._symbol_feed(emitted_idx), []
            if sym not in (EOS, BOS):
                return self._symbol_feed(emitted_idx), running_components + [emitted_idx]
        return self._symbol_feed(emitted_idx), running_components

    # -- masking --

    def _legal_shapes(self, requirement, state):
        if requirement not in self._legal_cache:
            self._legal_cache[requirement] = legal_next(state, self.kg)
        return self._legal_cache[requirement]

    def _structural_allowed(self, n_candidates):
        """Symbols that are well formed for this question regardless of
        assembly state: everything except BOS and out-of-range pointers."""
        key = min(n_candidates, self.vocab.max_pointers)
        if key not in self._structural_cache:
            allowed = set()
            for i in range(len(self.vocab)):
                if i == self.vocab.bos_index:
                    continue
                rank = self.vocab.pointer_rank(i)
                if rank is not None and rank >= key:
                    continue
                allowed.add(i)
            self._structural_cache[key] = frozenset(allowed)
        return self._structural_cache[key]

    def _controller_trie(self, requirement, state):
        if requirement not in self._trie_cache:
            root = {}
            for shape in self._legal_shapes(requirement, state):
                if shape == ("eos",):
                    continue
                for expansion in self.vocab.shape_expansions(shape):
                    node = root
                    for sym in expansion:
                        node = node.setdefault(self.vocab.index(sym), {})
            self._trie_cache[requirement] = root
        return self._trie_cache[requirement]

    def _pruned_trie(self, requirement, state, n_key):
        """Trie with every branch that cannot reach a boundary under the
        structural mask cut off, so a prefix is only ever offered when some
        completion of it is also offerable."""
        cache_key = (requirement, n_key)
        if cache_key not in self._pruned_cache:
            allowed = self._structural_allowed(n_key)

            def prune(node):
                kept = {}
                for idx, child in node.items():
                    if idx not in allowed:
                        continue
                    if not child:
                        kept[idx] = {}
                        continue
                    sub = prune(child)
                    if sub:
                        kept[idx] = sub
                return kept

            self._pruned_cache[cache_key] = prune(self._controller_trie(requirement, state))
        return self._pruned_cache[cache_key]

    def masked_indices(self, state, partial, n_candidates):
        """Decode-time symbol mask.  Structural legality always applies;
        with the controller on, assembly legality is intersected in."""
        allowed = self._structural_allowed(n_candidates)
        if not self.dcfg.controller:
            return allowed
        if state is None:
            raise ValueError("controller cannot mask a broken assembly state")
        requirement = state.requirement()
        legal = self._legal_shapes(requirement, state)
        if self.vocab.mode == "atomic":
            picked = set()
            for i in allowed:
                sym = self.vocab.symbols[i]
                if sym == EOS:
                    if ("eos",) in legal:
                        picked.add(i)
                    continue
                shape = self.vocab.atomic_shape(sym)
                if shape is not None and shape in legal:
                    picked.add(i)
            return frozenset(picked)
        node = self._pruned_trie(requirement, state, min(n_candidates, self.vocab.max_pointers))
        for idx in partial:
            node = node.get(idx)
            if node is None:
                return frozenset()
        picked = set(node)
        if not partial and ("eos",) in legal:
            picked.add(self.vocab.eos_index)
        return frozenset(picked)

    # -- decoding --

    def _step_limit(self, max_steps):
        if max_steps is not None:
            return max_steps
        if self.avg_gold_symbols:
            return max(1, math.ceil(8 * self.avg_gold_symbols))
        return DEFAULT_STEP_LIMIT

    def _emit(self, hyp, idx, score, new_hidden, candidates):
        """Extend a hypothesis by one non-EOS symbol; None if it dies."""
        sym = self.vocab.symbols[idx]
        blocks, partial, state = hyp.blocks, hyp.partial, hyp.state
        if self.vocab.mode == "atomic":
            try:
                block = self.vocab.realize_atomic(sym, candidates)
            except ValueError:
                return None
            blocks = blocks + (block,)
            if state is not None:
                try:
                    state = state.advance(block, self.kg)
                except AssemblyError:
                    state = None
            feed = self._symbol_feed(idx)
        elif sym == BOUNDARY:
            try:
                block = self.vocab.realize_components(
                    [self.vocab.symbols[i] for i in partial], candidates
                )
            except ValueError:
                return None
            blocks = blocks + (block,)
            feed = self._component_mean_feed(partial) if partial else self._symbol_feed(idx)
            partial = ()
            if state is not None:
                try:
                    state = state.advance(block, self.kg)
                except AssemblyError:
                    state = None
        else:
            partial = partial + (idx,)
            feed = self._symbol_feed(idx)
        return Hypothesis(hyp.symbols + (sym,), score, state, new_hidden, feed, blocks, partial)

    def beam_decode(self, qg, candidates=(), beam=None, max_steps=None, return_hypothesis=False):
        """Length-normalized beam search.  Raises DecodeIncomplete with the
        best partial block list when nothing finishes in time."""
        beam = beam or self.dcfg.beam
        limit = self._step_limit(max_steps)
        candidates = tuple(candidates)
        with no_grad():
            nodes, start = self.encode_graph(qg)
            live = [
                Hypothesis(
                    (), 0.0, AssemblyState(), start, self._symbol_feed(self.vocab.bos_index), (), ()
                )
            ]
            finished = []
            best_partial = live[0]
            for _ in range(limit):
                if not live:
                    break
                moves = []
                for pos, hyp in enumerate(live):
                    new_hidden, logits, _ = self.decode_step(hyp.hidden, hyp.feed, nodes)
                    allowed = self.masked_indices(hyp.state, hyp.partial, len(candidates))
                    if not allowed:
                        continue
                    row = logits.data[0]
                    masked = np.full_like(row, -np.inf)
                    picks = sorted(allowed)
                    masked[picks] = row[picks]
                    shift = masked.max()
                    log_probs = masked - (shift + math.log(np.exp(masked - shift).sum()))
                    for i in picks:
                        moves.append((hyp.log_prob + log_probs[i], pos, i, hyp, new_hidden))
                if not moves:
                    break
                moves.sort(key=lambda m: (-m[0], m[1], m[2]))
                live = []
                for score, _pos, idx, hyp, new_hidden in moves[: beam]:
                    if idx == self.vocab.eos_index:
                        done = Hypothesis(
                            hyp.symbols + (EOS,), score, hyp.state, new_hidden, hyp.feed, hyp.blocks, ()
                        )
                        finished.append(done)
                    else:
                        grown = self._emit(hyp, idx, score, new_hidden, candidates)
                        if grown is not None:
                            live.append(grown)
                for hyp in live:
                    if hyp.normalized > best_partial.normalized or not best_partial.symbols:
                        best_partial = hyp
            if not finished:
                raise DecodeIncomplete(
                    f"no complete hypothesis within {limit} steps", best_partial.blocks
                )
            best = max(finished, key=lambda h: (h.normalized, -len(h.symbols)))
            if return_hypothesis:
                return best
            return list(best.blocks)

    def greedy_decode(self, qg, candidates=(), max_steps=None, return_hypothesis=False):
        """Independent argmax-per-step reference decoder."""
        limit = self._step_limit(max_steps)
        candidates = tuple(candidates)
        with no_grad():
            nodes, hidden = self.encode_graph(qg)
            hyp = Hypothesis(
                (), 0.0, AssemblyState(), hidden, self._symbol_feed(self.vocab.bos_index), (), ()
            )
            for _ in range(limit):
                new_hidden, logits, _ = self.decode_step(hyp.hidden, hyp.feed, nodes)
                allowed = self.masked_indices(hyp.state, hyp.partial, len(candidates))
                if not allowed:
                    break
                row = logits.data[0]
                masked = np.full_like(row, -np.inf)
                picks = sorted(allowed)
                masked[picks] = row[picks]
                shift = masked.max()
                log_probs = masked - (shift + math.log(np.exp(masked - shift).sum()))
                idx = int(np.argmax(masked))
                score = hyp.log_prob + log_probs[idx]
                if idx == self.vocab.eos_index:
                    done = Hypothesis(
                        hyp.symbols + (EOS,), score, hyp.state, new_hidden, hyp.feed, hyp.blocks, ()
                    )
                    if return_hypothesis:
                        return done
                    return list(done.blocks)
                hyp = self._emit(hyp, idx, score, new_hidden, candidates)
                if hyp is None:
                    break
            raise DecodeIncomplete(
                f"no complete hypothesis within {limit} steps",
                hyp.blocks if hyp is not None else (),
            )

    # -- persistence --

    def save(self, path):
        save_checkpoint(self.store, path)
        meta = {
            "graph_config": {
                "hops": self.gcfg.hops,
                "node_dim": self.gcfg.node_dim,
                "aggregator": self.gcfg.aggregator,
                "pooling": self.gcfg.pooling,
            },
            "decoder_config": {
                "hidden": self.dcfg.hidden,
                "beam": self.dcfg.beam,
                "mode": self.dcfg.mode,
                "controller": self.dcfg.controller,
                "embed_dim": self.dcfg.embed_dim,
                "attn_dim": self.dcfg.attn_dim,
                "dropout": self.dcfg.dropout,
            },
            "node_vocab": list(self.node_vocab.symbols()),
            "vocab": self.vocab.to_json(),
            "avg_gold_symbols": self.avg_gold_symbols,
        }
        Path(f"{path}.meta.json").write_text(json.dumps(meta), encoding="utf-8")

    @classmethod
    def load(cls, path, kg):
        meta_path = Path(f"{path}.meta.json")
        if not meta_path.exists():
            raise FileNotFoundError(f"missing model metadata {meta_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        vocab = OutputVocabulary.from_json(meta["vocab"], kg)
        model = cls(
            kg,
            vocab,
            Vocab(meta["node_vocab"]),
            GraphEncoderConfig(**meta["graph_config"]),
            DecoderConfig(**meta["decoder_config"]),
        )
        model.avg_gold_symbols = meta["avg_gold_symbols"]
        load_checkpoint(path, model.store)
        return model
