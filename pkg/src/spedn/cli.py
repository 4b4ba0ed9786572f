"""Command-line front end for the block parsing and execution pipeline.

Every command is a thin shell over library calls.  Output is line
oriented: results on stdout, one `error kind=... detail=...` record on
stderr when something fails.  Exit codes: 0 success, 2 usage or syntax
errors, 1 everything else.  Resource flags fall back to `SPEDN_*`
environment variables and then to the bundled GEO fixture files.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from . import data_path
from .atis import atis_to_blocks, parse_atis
from .blocks import BlockSyntaxError, parse_blocks, print_block, print_blocks
from .corpus import format_answer, ratio_percent, read_dataset
from .datagen import atis_corpus, geo_corpus, write_splits
from .geo import geo_to_blocks, parse_geo
from .kg import KgError, load_kg
from .model import DecodeIncomplete, Graph2Seq
from .prep import build_context, load_aliases, to_question_graph
from .qgraph import assemble, execute, load_ordinals
from .training import (
    TrainConfig,
    corpus_stats,
    evaluate,
    prepare,
    train,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse normally prints usage and exits; surface a catchable
    # error instead so main() owns all exit codes
    def error(self, message):
        raise UsageError(message)


def _fail(code, exc):
    detail = json.dumps(str(exc))
    print(f"error kind={type(exc).__name__} detail={detail}", file=sys.stderr)
    return code


# -- resource resolution ---------------------------------------------------

def _env(name):
    return os.environ.get("SPEDN_" + name)


def _env_flag(name):
    value = _env(name)
    return value is not None and value.casefold() in ("1", "true", "yes", "on")


def _env_int(name):
    value = _env(name)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"SPEDN_{name} must be an integer, got {value!r}")


def _resource(args, attr, env_name, dialect, filename):
    given = getattr(args, attr, None)
    if given is not None:
        return given
    env = _env(env_name)
    if env is not None:
        return env
    return data_path(dialect, filename)


def _dialect(args):
    return getattr(args, "dialect", None) or "geo"


def _load_world(args):
    """(kg, alias lexicon, ordinal lexicon) for the resolved resources."""
    d = _dialect(args)
    kg = load_kg(_resource(args, "kg", "KG", d, "kg.txt"))
    aliases = load_aliases(_resource(args, "lexicon", "LEXICON", d, "aliases.txt"))
    ordinals = load_ordinals(_resource(args, "ordinals", "ORDINALS", d, "ordinals.txt"))
    return kg, aliases, ordinals


def _flags(args):
    mp = args.mp or _env_flag("MP")
    controller = args.controller or _env_flag("CONTROLLER")
    beam = args.beam if args.beam is not None else _env_int("BEAM")
    seed = args.seed if args.seed is not None else (_env_int("SEED") or 0)
    graph = args.graph or _env("GRAPH") or "chain"
    if graph not in ("chain", "full"):
        raise UsageError(f"--graph must be chain or full, got {graph!r}")
    ckpt = args.ckpt or _env("CKPT")
    return mp, controller, beam, seed, graph, ckpt


def _load_model(args, kg):
    ckpt = (args.ckpt or _env("CKPT"))
    if ckpt is None:
        raise UsageError("this command needs --ckpt (or SPEDN_CKPT)")
    return Graph2Seq.load(ckpt, kg)


# -- commands --------------------------------------------------------------

def cmd_kg(args):
    kg = load_kg(_resource(args, "kg", "KG", _dialect(args), "kg.txt"))
    if args.action == "validate":
        print(f"ok types={len(kg.types)} relations={len(kg.relations)} "
              f"entities={len(kg.entities)}")
        return 0
    print(f"types={len(kg.types)}")
    print(f"relations={len(kg.relations)}")
    print(f"entities={len(kg.entities)}")
    by_type = {}
    for ent in kg.entities.values():
        by_type[ent.type] = by_type.get(ent.type, 0) + 1
    for t in sorted(kg.types):
        print(f"type.{t}={by_type.get(t, 0)}")
    entity_rels = sum(not sig.literal for sig in kg.relations)
    print(f"entity-relations={entity_rels}")
    print(f"literal-relations={len(kg.relations) - entity_rels}")
    return 0


def cmd_parse(args):
    print(print_blocks(parse_blocks(args.text)))
    return 0


def cmd_convert(args):
    parse, convert = {
        "geo": (parse_geo, geo_to_blocks),
        "atis": (parse_atis, atis_to_blocks),
    }[args.dialect]
    kg = load_kg(_resource(args, "kg", "KG", args.dialect, "kg.txt"))
    with open(args.file, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                print(print_blocks(convert(parse(line), kg)))
            except ValueError as e:
                raise ValueError(f"{args.file}:{lineno}: {e}") from e
    return 0


def cmd_assemble(args):
    kg, _, _ = _load_world(args)
    print(assemble(parse_blocks(args.text), kg).describe())
    return 0


def cmd_execute(args):
    kg, _, ordinals = _load_world(args)
    graph = assemble(parse_blocks(args.text), kg)
    print(format_answer(execute(graph, kg, ordinals)))
    return 0


def _print_report(report):
    print(f"size={report.size}")
    print(f"em={report.exact_match:.4f}")
    print(f"exec={report.execution:.4f}")
    print(f"asm={report.assemblability:.4f}")


def _decode(model, kg, aliases, ordinals, question, graph_mode, beam):
    ctx = build_context(question, kg, aliases)
    qg = to_question_graph(ctx, mode=graph_mode)
    blocks = model.beam_decode(qg, ctx.entity_candidates, beam=beam)
    trace = []
    answer = execute(assemble(blocks, kg), kg, ordinals, trace=trace)
    return ctx, blocks, answer, trace


def cmd_ask(args):
    kg, aliases, ordinals = _load_world(args)
    _, _, beam, _, graph_mode, _ = _flags(args)
    model = _load_model(args, kg)
    if args.gold:
        examples = prepare(read_dataset(args.gold), kg, aliases, ordinals,
                           graph_mode)
        _print_report(evaluate(examples, kg, ordinals, model=model, beam=beam))
        return 0
    if args.question is None:
        raise UsageError("ask needs a question or --gold FILE")
    _, blocks, answer, _ = _decode(
        model, kg, aliases, ordinals, args.question, graph_mode, beam)
    print(f"blocks={print_blocks(blocks)}")
    print(f"answer={format_answer(answer)}")
    return 0


def cmd_train(args):
    kg, aliases, ordinals = _load_world(args)
    mp, controller, beam, seed, graph_mode, ckpt = _flags(args)
    config = TrainConfig(
        lr=args.lr, batch=args.batch, epochs=args.epochs,
        dropout=args.dropout, beam=beam if beam is not None else 5,
        seed=seed, mp=mp, controller=controller, graph_mode=graph_mode,
        stop_on_perfect=args.stop_on_perfect, hops=args.hops,
        node_dim=args.node_dim, hidden=args.hidden,
        embed_dim=args.embed_dim, attn_dim=args.attn_dim,
    )
    result = train(read_dataset(args.train), read_dataset(args.test),
                   kg, aliases, ordinals, config, ckpt_path=ckpt, log=print)
    print(f"best epoch={result.best_epoch} em={result.best_exact_match:.4f}")
    _print_report(result.best_report)
    return 0


def cmd_eval(args):
    kg, aliases, ordinals = _load_world(args)
    _, _, beam, _, graph_mode, _ = _flags(args)
    model = _load_model(args, kg)
    examples = prepare(read_dataset(args.data), kg, aliases, ordinals,
                       graph_mode)
    _print_report(evaluate(examples, kg, ordinals, model=model, beam=beam))
    return 0


def cmd_stats(args):
    report = corpus_stats(read_dataset(args.corpus))
    print(f"size={report.size}")
    print(f"mean-question-tokens={report.mean_question_tokens:.4f}")
    print(f"mean-lf-tokens={report.mean_lf_tokens:.4f}")
    print(f"mean-blocks={report.mean_blocks:.4f}")
    if report.mean_lf_tokens > 0:
        ratio = ratio_percent(report.mean_blocks, report.mean_lf_tokens)
        print(f"block-ratio={ratio}")
    for name in sorted(report.pattern_counts):
        print(f"pattern.{name}={report.pattern_counts[name]}")
    for k in sorted(report.length_histogram):
        print(f"length.{k}={report.length_histogram[k]}")
    return 0


def cmd_gen_corpus(args):
    make = geo_corpus if args.dialect == "geo" else atis_corpus
    train_recs, test_recs = make(seed=args.seed if args.seed is not None else 0)
    kg = load_kg(_resource(args, "kg", "KG", args.dialect, "kg.txt"))
    aliases = load_aliases(
        _resource(args, "lexicon", "LEXICON", args.dialect, "aliases.txt"))
    write_splits(Path(args.outdir), args.dialect, train_recs, test_recs,
                 kg=kg, aliases=aliases)
    print(f"wrote {len(train_recs)} train / {len(test_recs)} test "
          f"records to {args.outdir}")
    return 0


def cmd_repl(args):
    kg, aliases, ordinals = _load_world(args)
    _, _, beam, _, graph_mode, ckpt = _flags(args)
    model = Graph2Seq.load(ckpt, kg) if ckpt else None
    prompt = "spedn> " if sys.stdin.isatty() else ""
    last = None
    while True:
        if prompt:
            print(prompt, end="", flush=True)
        line = sys.stdin.readline()
        if not line:
            break
        line = line.strip()
        if not line:
            continue
        try:
            if line in (":quit", ":q"):
                break
            if line == ":blocks":
                if last is None:
                    raise UsageError("no question answered yet")
                print(print_blocks(last["blocks"]))
            elif line == ":graph":
                if last is None:
                    raise UsageError("no question answered yet")
                print(last["graph"].describe())
            elif line == ":trace":
                if last is None:
                    raise UsageError("no question answered yet")
                for _, block, answer in last["trace"]:
                    print(f"{print_block(block)} -> {format_answer(answer)}")
            elif line.startswith(":"):
                raise UsageError(f"unknown command {line!r}")
            else:
                if model is None:
                    raise UsageError("questions need --ckpt (or SPEDN_CKPT)")
                ctx = build_context(line, kg, aliases)
                qg = to_question_graph(ctx, mode=graph_mode)
                blocks = model.beam_decode(qg, ctx.entity_candidates,
                                           beam=beam)
                graph = assemble(blocks, kg)
                trace = []
                answer = execute(graph, kg, ordinals, trace=trace)
                last = {"blocks": blocks, "graph": graph, "trace": trace}
                print(print_blocks(blocks))
                print(format_answer(answer))
        except UsageError as e:
            _fail(2, e)
        except (BlockSyntaxError,) as e:
            _fail(2, e)
        except (KgError, ValueError, RuntimeError, OSError) as e:
            _fail(1, e)
    return 0


# -- parser ----------------------------------------------------------------

def _build_parser():
    parser = _Parser(prog="spedn", description=__doc__)
    parser.add_argument("--kg", help="knowledge graph file")
    parser.add_argument("--lexicon", help="entity alias file")
    parser.add_argument("--ordinals", help="ordinal lexicon file")
    parser.add_argument("--ckpt", help="model checkpoint path")
    parser.add_argument("--mp", action="store_true",
                        help="decomposed output symbols")
    parser.add_argument("--controller", action="store_true",
                        help="mask illegal blocks while decoding")
    parser.add_argument("--beam", type=int, default=None)
    parser.add_argument("--graph", choices=("chain", "full"), default=None)
    parser.add_argument("--seed", type=int, default=None)

    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("kg", help="inspect a knowledge graph file")
    p.add_argument("action", choices=("validate", "stats"))
    p.set_defaults(func=cmd_kg)

    p = sub.add_parser("parse", help="parse and reprint a block sequence")
    p.add_argument("text")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("convert", help="logical forms to block lines")
    p.add_argument("dialect", choices=("geo", "atis"))
    p.add_argument("file")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("assemble", help="blocks to a query graph description")
    p.add_argument("text")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("execute", help="blocks to an answer")
    p.add_argument("text")
    p.set_defaults(func=cmd_execute)

    p = sub.add_parser("ask", help="question to blocks and answer")
    p.add_argument("question", nargs="?")
    p.add_argument("--gold", help="score a corpus file instead")
    p.set_defaults(func=cmd_ask)

    p = sub.add_parser("train", help="train a parser on corpus files")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch", type=int, default=TrainConfig.batch)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--dropout", type=float, default=TrainConfig.dropout)
    p.add_argument("--stop-on-perfect", action="store_true")
    p.add_argument("--hops", type=int, default=TrainConfig.hops)
    p.add_argument("--node-dim", type=int, default=TrainConfig.node_dim)
    p.add_argument("--hidden", type=int, default=TrainConfig.hidden)
    p.add_argument("--embed-dim", type=int, default=TrainConfig.embed_dim)
    p.add_argument("--attn-dim", type=int, default=TrainConfig.attn_dim)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus file")
    p.add_argument("data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="corpus length and pattern statistics")
    p.add_argument("corpus")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gen-corpus", help="write the templated mini corpora")
    p.add_argument("dialect", choices=("geo", "atis"))
    p.add_argument("outdir")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("repl", help="interactive question loop")
    p.set_defaults(func=cmd_repl)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a command is required (try --help)")
        return args.func(args)
    except UsageError as e:
        return _fail(2, e)
    except BlockSyntaxError as e:
        return _fail(2, e)
    except DecodeIncomplete as e:
        return _fail(1, e)
    except (KgError, ValueError, RuntimeError, OSError, ArithmeticError) as e:
        return _fail(1, e)


if __name__ == "__main__":
    sys.exit(main())
