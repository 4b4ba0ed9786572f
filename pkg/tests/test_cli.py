"""Command-line interface: exit codes, output formats, pipeline parity."""

import io
import re
import sys

import pytest

from spedn import cli, data_path
from spedn.blocks import parse_blocks
from spedn.corpus import read_dataset, write_dataset
from spedn.datagen import geo_corpus

from canon import ATIS_BLOCKS, ATIS_LF, GEO_BLOCKS, GEO_LF

ERROR_LINE = re.compile(r'^error kind=\w+ detail=".*"$')


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    train, test = geo_corpus()
    write_dataset(d / "train.tsv", train[:20])
    write_dataset(d / "test.tsv", test[:5])
    return d


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory, corpus_dir):
    """A small checkpoint trained through the CLI itself."""
    path = tmp_path_factory.mktemp("model") / "model.npz"
    code = cli.main([
        "--ckpt", str(path), "--controller", "--seed", "0",
        "train", "--train", str(corpus_dir / "train.tsv"),
        "--test", str(corpus_dir / "test.tsv"),
        "--epochs", "8", "--batch", "5", "--hops", "1", "--node-dim", "16",
        "--hidden", "24", "--embed-dim", "12", "--attn-dim", "12",
    ])
    assert code == 0
    assert path.exists()
    return path


# -- parse / execute / assemble --------------------------------------------

def test_parse_empty_is_usage_error(capsys):
    code, out, err = run(capsys, "parse", "")
    assert code == 2
    assert out == ""
    assert ERROR_LINE.match(err.strip())
    assert "BlockSyntaxError" in err


def test_parse_canonicalizes(capsys):
    code, out, _ = run(capsys, "parse",
                       "aggr( count ,  :river )   entity(river)")
    assert code == 0
    assert out.strip() == "aggr(count, :river) entity(river)"


def test_parse_malformed(capsys):
    code, _, err = run(capsys, "parse", "entity(state")
    assert code == 2
    assert "BlockSyntaxError" in err


def test_execute_fixture_river_count(capsys):
    code, out, _ = run(
        capsys, "execute",
        "aggr(count, :river) relation(river, loc, :state) "
        "entity(state, id, 'california')")
    assert code == 0
    assert out.strip() == "num:1"


def test_execute_incomplete_blocks(capsys):
    code, _, err = run(capsys, "execute", "relation(city, loc, :state)")
    assert code == 1
    assert "AssemblyError" in err
    assert ERROR_LINE.match(err.strip())


def test_assemble_describes_graph(capsys):
    code, out, _ = run(
        capsys, "assemble",
        "aggr(count, :river) relation(river, loc, :state) "
        "entity(state, id, 'california')")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "root: aggr(count, :river)"
    assert len(lines) == 3


# -- kg ---------------------------------------------------------------------

def test_kg_validate_default(capsys):
    code, out, _ = run(capsys, "kg", "validate")
    assert code == 0
    assert out.startswith("ok types=6 ")


def test_kg_env_override(capsys, monkeypatch):
    monkeypatch.setenv("SPEDN_KG", str(data_path("atis", "kg.txt")))
    code, out, _ = run(capsys, "kg", "validate")
    assert code == 0
    assert out.startswith("ok types=3 ")


def test_kg_stats(capsys):
    code, out, _ = run(capsys, "kg", "stats")
    assert code == 0
    values = dict(line.split("=", 1) for line in out.strip().splitlines())
    assert values["types"] == "6"
    assert values["type.state"] == "10"
    assert int(values["entity-relations"]) + int(values["literal-relations"]) \
        == int(values["relations"])


def test_kg_missing_file(capsys):
    code, _, err = run(capsys, "--kg", "/nonexistent/kg.txt", "kg", "validate")
    assert code == 1
    assert ERROR_LINE.match(err.strip())


# -- convert ----------------------------------------------------------------

def test_convert_geo_exemplar(tmp_path, capsys):
    f = tmp_path / "lfs.txt"
    f.write_text(GEO_LF + "\n", encoding="utf-8")
    code, out, _ = run(capsys, "convert", "geo", str(f))
    assert code == 0
    assert out.strip() == GEO_BLOCKS


def test_convert_atis_exemplar(tmp_path, capsys):
    f = tmp_path / "lfs.txt"
    f.write_text(ATIS_LF + "\n", encoding="utf-8")
    code, out, _ = run(capsys, "convert", "atis", str(f))
    assert code == 0
    assert out.strip() == ATIS_BLOCKS


def test_convert_names_failing_line(tmp_path, capsys):
    f = tmp_path / "lfs.txt"
    f.write_text(GEO_LF + "\nanswer(A, nonsense(A))\n", encoding="utf-8")
    code, _, err = run(capsys, "convert", "geo", str(f))
    assert code == 1
    assert ":2:" in err


# -- stats / gen-corpus -----------------------------------------------------

def test_stats_command(corpus_dir, capsys):
    code, out, _ = run(capsys, "stats", str(corpus_dir / "train.tsv"))
    assert code == 0
    values = dict(line.split("=", 1) for line in out.strip().splitlines())
    assert values["size"] == "20"
    assert "block-ratio" in values
    pattern_total = sum(int(v) for k, v in values.items()
                        if k.startswith("pattern."))
    length_total = sum(int(k.split(".")[1]) * int(v)
                       for k, v in values.items() if k.startswith("length."))
    assert pattern_total == length_total


def test_gen_corpus(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-corpus", "geo", str(tmp_path))
    assert code == 0
    assert "120 train / 30 test" in out
    assert len(read_dataset(tmp_path / "geo_train.tsv")) == 120
    assert len(read_dataset(tmp_path / "geo_test.tsv")) == 30
    assert (tmp_path / "geo_tags.txt").exists()


# -- trained-model commands -------------------------------------------------

def test_train_logs_epochs(corpus_dir, tmp_path, capsys):
    code, out, _ = run(
        capsys, "train",
        "--train", str(corpus_dir / "train.tsv"),
        "--test", str(corpus_dir / "test.tsv"),
        "--epochs", "2", "--batch", "10", "--hops", "1", "--node-dim", "10",
        "--hidden", "12", "--embed-dim", "8", "--attn-dim", "8")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("epoch=1 loss=")
    assert lines[1].startswith("epoch=2 loss=")
    assert any(line.startswith("best epoch=") for line in lines)
    assert lines[-1].startswith("asm=")


def test_eval_matches_ask_gold(ckpt, corpus_dir, capsys):
    code_a, eval_out, _ = run(capsys, "--ckpt", str(ckpt),
                              "eval", str(corpus_dir / "test.tsv"))
    code_b, gold_out, _ = run(capsys, "--ckpt", str(ckpt),
                              "ask", "--gold", str(corpus_dir / "test.tsv"))
    assert code_a == code_b == 0
    assert eval_out == gold_out
    assert eval_out.startswith("size=5\n")


def test_ask_question(ckpt, capsys):
    code, out, _ = run(capsys, "--ckpt", str(ckpt),
                       "ask", "what is the population of utah")
    assert code == 0
    values = dict(line.split("=", 1) for line in out.strip().splitlines())
    assert parse_blocks(values["blocks"])
    assert values["answer"]


def test_ask_needs_checkpoint(capsys):
    code, _, err = run(capsys, "ask", "what states border texas")
    assert code == 2
    assert "UsageError" in err


def test_ask_needs_question_or_gold(ckpt, capsys):
    code, _, err = run(capsys, "--ckpt", str(ckpt), "ask")
    assert code == 2
    assert "UsageError" in err


def test_eval_missing_checkpoint(corpus_dir, capsys):
    code, _, err = run(capsys, "--ckpt", "/nonexistent/m.npz",
                       "eval", str(corpus_dir / "test.tsv"))
    assert code == 1
    assert ERROR_LINE.match(err.strip())


def test_bad_env_integer(ckpt, corpus_dir, capsys, monkeypatch):
    monkeypatch.setenv("SPEDN_BEAM", "wide")
    code, _, err = run(capsys, "--ckpt", str(ckpt),
                       "eval", str(corpus_dir / "test.tsv"))
    assert code == 2
    assert "UsageError" in err


# -- repl -------------------------------------------------------------------

def test_repl_session(ckpt, capsys, monkeypatch):
    script = (
        "what is the population of utah\n"
        ":blocks\n"
        ":graph\n"
        ":trace\n"
        ":bogus\n"
        ":quit\n"
    )
    monkeypatch.setattr(sys, "stdin", io.StringIO(script))
    code = cli.main(["--ckpt", str(ckpt), "repl"])
    captured = capsys.readouterr()
    assert code == 0
    assert "root:" in captured.out
    assert "->" in captured.out  # trace lines
    assert "unknown command" in captured.err


def test_repl_survives_errors(capsys, monkeypatch):
    # no checkpoint: a question is an error, but the loop keeps going
    script = "what states border texas\n:quit\n"
    monkeypatch.setattr(sys, "stdin", io.StringIO(script))
    code = cli.main(["repl"])
    captured = capsys.readouterr()
    assert code == 0
    assert "UsageError" in captured.err


# -- top-level parsing ------------------------------------------------------

def test_no_command(capsys):
    code, _, err = run(capsys)
    assert code == 2
    assert "UsageError" in err


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "--bogus", "parse", "entity(state)")
    assert code == 2
    assert ERROR_LINE.match(err.strip())
