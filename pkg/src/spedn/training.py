"""Training loop, evaluation metrics, and corpus statistics.

Training minimizes the negative log-probability of the gold symbol
sequences with Adam over seeded shuffled batches, clips gradients at a
global norm, evaluates the held-out split after every epoch, and keeps
the parameters of the best exact-match epoch.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import parse_blocks, print_blocks
from .corpus import lf_token_count
from .encoder import Vocab
from .model import (
    DecodeIncomplete,
    DecoderConfig,
    Graph2Seq,
    GraphEncoderConfig,
    OutputVocabulary,
)
from .prep import build_context, to_question_graph
from .qgraph import AssemblyError, ExecutionError, assemble, execute, run_blocks
from .tensor import adam_step

BLOCK_PATTERNS = ("entity", "relation", "literal", "ordinal", "aggr", "join")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    batch: int = 30
    epochs: int = 80
    dropout: float = 0.2
    beam: int = 5
    seed: int = 0
    mp: bool = False
    controller: bool = False
    graph_mode: str = "chain"
    clip: float = 5.0
    stop_on_perfect: bool = False
    hops: int = 3
    node_dim: int = 100
    hidden: int = 256
    embed_dim: int = 64
    attn_dim: int = 64

    def __post_init__(self):
        positive = {
            "lr": self.lr, "batch": self.batch, "epochs": self.epochs,
            "beam": self.beam, "clip": self.clip, "hops": self.hops,
            "node_dim": self.node_dim, "hidden": self.hidden,
            "embed_dim": self.embed_dim, "attn_dim": self.attn_dim,
        }
        for name, value in positive.items():
            if value is None or value <= 0:
                if name == "lr" and value == 0.0:
                    continue  # lr 0 is a legal no-op schedule
                raise ValueError(f"{name} must be positive, got {value!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.graph_mode not in ("chain", "full"):
            raise ValueError(f"unknown graph mode {self.graph_mode!r}")


@dataclass
class EvalReport:
    size: int = 0
    exact_match: float = 0.0
    execution: float = 0.0
    assemblability: float = 0.0
    pattern_counts: dict = field(default_factory=dict)
    length_histogram: dict = field(default_factory=dict)
    mean_question_tokens: float = 0.0
    mean_lf_tokens: float = 0.0
    mean_blocks: float = 0.0


@dataclass
class Example:
    """One preprocessed corpus record, ready for the model."""
    question: str
    graph: object
    candidates: tuple
    gold_blocks: list
    gold_text: str
    gold_answer: object


class GoldValidationError(ValueError):
    def __init__(self, failures):
        lines = [f"  {q}: {err}" for q, err in failures]
        super().__init__(
            "gold sequences failed validation:\n" + "\n".join(lines))
        self.failures = failures


def prepare(records, kg, aliases, ordinals, graph_mode="chain"):
    """Parse, assemble, and execute every gold sequence up front; broken
    examples are reported together instead of failing mid-training."""
    out, failures = [], []
    for r in records:
        try:
            blocks = parse_blocks(r.blocks)
            assemble(blocks, kg)
            answer = run_blocks(blocks, kg, ordinals)
        except (ValueError, AssemblyError, ExecutionError) as e:
            failures.append((r.question, str(e)))
            continue
        ctx = build_context(r.question, kg, aliases)
        out.append(Example(
            question=r.question,
            graph=to_question_graph(ctx, mode=graph_mode),
            candidates=ctx.entity_candidates,
            gold_blocks=blocks,
            gold_text=print_blocks(blocks),
            gold_answer=answer,
        ))
    if failures:
        raise GoldValidationError(failures)
    return out


def build_model(examples, kg, ordinals, config):
    """Vocabularies from the training split, then a fresh model."""
    vocab = OutputVocabulary.from_corpus(
        "decomposed" if config.mp else "atomic",
        kg, [ex.gold_blocks for ex in examples], ordinals)
    node_vocab = Vocab.build([ex.graph.nodes for ex in examples])
    model = Graph2Seq(
        kg, vocab, node_vocab,
        GraphEncoderConfig(hops=config.hops, node_dim=config.node_dim),
        DecoderConfig(hidden=config.hidden, beam=config.beam,
                      mode=vocab.mode, controller=config.controller,
                      embed_dim=config.embed_dim, attn_dim=config.attn_dim,
                      dropout=config.dropout),
        seed=config.seed,
    )
    lengths = [len(vocab.symbolize(ex.gold_blocks, ex.candidates))
               for ex in examples]
    model.avg_gold_symbols = sum(lengths) / len(lengths)
    return model


def clip_gradients(store, max_norm):
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for name in store.names():
        g = store[name].grad
        if g is not None:
            total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in store.names():
            g = store[name].grad
            if g is not None:
                g *= scale
    return norm


def answers_equal(a, b, tol=1e-9):
    if a is None or b is None or a.kind != b.kind:
        return False
    if a.kind == "entity-set":
        return frozenset(a.value) == frozenset(b.value)
    if a.kind == "scalar-number":
        return _num_eq(a.value, b.value, tol)
    if a.kind == "value-multiset":
        left, right = sorted(a.value, key=_sort_key), sorted(b.value, key=_sort_key)
        if len(left) != len(right):
            return False
        return all(_num_eq(x, y, tol) for x, y in zip(left, right))
    return False


def _num_eq(x, y, tol):
    if isinstance(x, (int, float)) and isinstance(y, (int, float)):
        return abs(float(x) - float(y)) <= tol
    return x == y


def _sort_key(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return (0, float(v), "")
    return (1, 0.0, str(v))


def evaluate(examples, kg, ordinals, model=None, beam=None, decode_fn=None):
    """Exact match, execution accuracy, and assemblability of decoded
    sequences.  decode_fn(example) -> block list overrides the model."""
    if decode_fn is None:
        if model is None:
            raise ValueError("evaluate needs a model or a decode_fn")

        def decode_fn(ex):
            return model.beam_decode(ex.graph, ex.candidates, beam=beam)

    report = corpus_stats_from_examples(examples)
    if not examples:
        return report
    em = ex_acc = asm = 0
    for ex in examples:
        try:
            decoded = decode_fn(ex)
        except DecodeIncomplete:
            continue
        try:
            assemble(decoded, kg)
        except AssemblyError:
            continue
        asm += 1
        if print_blocks(decoded) == ex.gold_text:
            em += 1
        try:
            answer = run_blocks(decoded, kg, ordinals)
        except ExecutionError:
            continue
        if answers_equal(answer, ex.gold_answer):
            ex_acc += 1
    n = len(examples)
    report.exact_match = em / n
    report.execution = ex_acc / n
    report.assemblability = asm / n
    return report


# -- statistics ------------------------------------------------------------

def corpus_stats(records):
    """Length and pattern distributions of a raw record list."""
    report = EvalReport(size=len(records))
    if not records:
        return report
    q_tokens = lf_tokens = n_blocks = 0
    for r in records:
        blocks = parse_blocks(r.blocks) if r.blocks else []
        q_tokens += len(r.question.split())
        lf_tokens += lf_token_count(r.logical_form)
        n_blocks += len(blocks)
        report.length_histogram[len(blocks)] = (
            report.length_histogram.get(len(blocks), 0) + 1)
        for b in blocks:
            name = type(b).__name__[: -len("Block")].lower()
            report.pattern_counts[name] = report.pattern_counts.get(name, 0) + 1
    n = len(records)
    report.mean_question_tokens = q_tokens / n
    report.mean_lf_tokens = lf_tokens / n
    report.mean_blocks = n_blocks / n
    return report


def corpus_stats_from_examples(examples):
    report = EvalReport(size=len(examples))
    if not examples:
        return report
    q_tokens = n_blocks = 0
    for ex in examples:
        q_tokens += len(ex.question.split())
        n_blocks += len(ex.gold_blocks)
        k = len(ex.gold_blocks)
        report.length_histogram[k] = report.length_histogram.get(k, 0) + 1
        for b in ex.gold_blocks:
            name = type(b).__name__[: -len("Block")].lower()
            report.pattern_counts[name] = report.pattern_counts.get(name, 0) + 1
    report.mean_question_tokens = q_tokens / len(examples)
    report.mean_blocks = n_blocks / len(examples)
    return report


# -- training --------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    loss: float
    exact_match: float
    execution: float


@dataclass
class TrainResult:
    model: Graph2Seq
    history: list
    best_epoch: int
    best_exact_match: float
    best_report: EvalReport


def train(train_records, test_records, kg, aliases, ordinals, config,
          ckpt_path=None, log=None):
    """Full supervised run; returns the model restored to its best epoch."""
    train_ex = prepare(train_records, kg, aliases, ordinals, config.graph_mode)
    test_ex = prepare(test_records, kg, aliases, ordinals, config.graph_mode)
    model = build_model(train_ex, kg, ordinals, config)
    store = model.store

    shuffle_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1)

    history = []
    best = None  # (em, epoch, report, params)
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_ex))
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(order), config.batch):
            batch = [train_ex[i] for i in order[lo: lo + config.batch]]
            store.zero_grads()
            total = None
            for ex in batch:
                lp = model.sequence_log_prob(
                    ex.graph, ex.gold_blocks, ex.candidates,
                    train=config.dropout > 0.0, rng=dropout_rng)
                nll = T.mul_scalar(lp, -1.0)
                total = nll if total is None else T.add(total, nll)
            loss = T.mul_scalar(total, 1.0 / len(batch))
            if not math.isfinite(loss.data.item()):
                raise ArithmeticError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            clip_gradients(store, config.clip)
            if config.lr > 0:
                step += 1
                adam_step(store, lr=config.lr, t=step)
            epoch_loss += loss.data.item()
            n_batches += 1
        report = evaluate(test_ex, kg, ordinals, model=model, beam=config.beam)
        stats = EpochStats(epoch, epoch_loss / max(1, n_batches),
                           report.exact_match, report.execution)
        history.append(stats)
        if log is not None:
            log(f"epoch={epoch} loss={stats.loss:.4f} "
                f"em={stats.exact_match:.4f} exec={stats.execution:.4f}")
        if best is None or report.exact_match > best[0]:
            params = {n: store[n].data.copy() for n in store.names()}
            best = (report.exact_match, epoch, report, params)
        if config.stop_on_perfect and report.exact_match >= 1.0:
            break
    for name, data in best[3].items():
        store[name].data[:] = data
    if ckpt_path is not None:
        model.save(ckpt_path)
    return TrainResult(model, history, best[1], best[0], best[2])
