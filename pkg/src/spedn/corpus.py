"""Dataset files, sequence-length accounting, and answer serialization.

A dataset is one record per line with four tab-separated fields: question,
logical form, block sequence, and answer.  Trailing fields may be empty.
Answers serialize with a kind prefix so a file round-trips without loss:
`set:` joins sorted entity ids, `values:` joins a projection, and `num:`
holds a single aggregate number.
"""

from dataclasses import dataclass

from .qgraph import AnswerSet


@dataclass
class Record:
    question: str
    logical_form: str = ""
    blocks: str = ""
    answer: str = ""


def read_dataset(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) > 4:
                raise ValueError(f"{path}:{lineno}: too many fields")
            fields += [""] * (4 - len(fields))
            records.append(Record(*fields))
    return records


def write_dataset(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write("\t".join([r.question, r.logical_form, r.blocks, r.answer]) + "\n")


# -- length accounting ----------------------------------------------------

@dataclass(frozen=True)
class LengthReport:
    question_tokens: int
    logical_form_tokens: int
    block_count: int


def lf_token_count(text):
    """Count logical-form tokens: each parenthesis, comma, quoted constant,
    and maximal run of other non-space characters is one token."""
    count = 0
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "(),":
            count += 1
            i += 1
        elif c == "'":
            j = text.find("'", i + 1)
            count += 1
            i = n if j < 0 else j + 1
        else:
            j = i + 1
            while j < n and not (text[j].isspace() or text[j] in "(),'"):
                j += 1
            count += 1
            i = j
    return count


def length_report(question, logical_form, blocks):
    return LengthReport(
        question_tokens=len(question.split()),
        logical_form_tokens=lf_token_count(logical_form),
        block_count=len(blocks),
    )


def ratio_percent(block_len, lf_len):
    """Block-to-logical-form length ratio as a percentage, one decimal."""
    return round(100.0 * block_len / lf_len, 1)


# -- answer serialization -------------------------------------------------

def _format_value(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _value_sort_key(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return (0, float(v), "")
    return (1, 0.0, str(v))


def format_answer(ans):
    if ans.kind == "entity-set":
        return "set:" + ",".join(sorted(ans.value))
    if ans.kind == "value-multiset":
        ordered = sorted(ans.value, key=_value_sort_key)
        return "values:" + ",".join(_format_value(v) for v in ordered)
    if ans.kind == "scalar-number":
        return "num:" + _format_value(ans.value)
    raise ValueError(f"unknown answer kind {ans.kind!r}")


def _parse_value(text):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def parse_answer(text):
    head, sep, rest = text.partition(":")
    if not sep:
        raise ValueError(f"answer text needs a kind prefix: {text!r}")
    if head == "set":
        ids = [p for p in rest.split(",") if p]
        return AnswerSet("entity-set", frozenset(ids))
    if head == "values":
        parts = [p for p in rest.split(",") if p]
        return AnswerSet("value-multiset", tuple(_parse_value(p) for p in parts))
    if head == "num":
        return AnswerSet("scalar-number", _parse_value(rest))
    raise ValueError(f"unknown answer kind {head!r}")
