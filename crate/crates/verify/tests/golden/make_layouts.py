"""Writes reference augmented-sequence layouts for the acceptance tests.

Standalone on purpose: it shares no code with the Rust crates, only the
token-id conventions.
"""
import json
import re
from pathlib import Path

MAX_BLOCKS = 32768
BASE = 256
BOS = BASE + 2 * MAX_BLOCKS


def bpst(m):
    return BASE + 2 * m


def pst(m):
    return BASE + 2 * m + 1


def sentence_cuts(data):
    cuts = [m.end() for m in re.finditer(rb"[.!?](?=\s|$)", data)]
    cuts = [c for c in cuts if c < len(data)]
    return [0] + cuts + [len(data)]


def layout(text, k, instruction):
    data = text.strip().encode("utf-8")
    cuts = sentence_cuts(data)
    sentences = len(cuts) - 1
    bounds = cuts[::k]
    if bounds[-1] != len(data):
        bounds.append(len(data))
    m = len(bounds) - 1
    prefix = [BOS] + list(instruction.encode("utf-8"))
    ids = prefix + [bpst(b) for b in range(m)]
    psts, ends, text_pos = [], [], []
    for b in range(m):
        psts.append(len(ids))
        ids.append(pst(b))
        for byte in data[bounds[b]:bounds[b + 1]]:
            text_pos.append(len(ids))
            ids.append(byte)
        ends.append(len(ids) - 1)
    return {
        "text": text,
        "instruction": instruction,
        "K": k,
        "sentences": sentences,
        "M": m,
        "prefix_len": len(prefix),
        "text_tokens": len(data),
        "length": len(ids),
        "boundaries": bounds,
        "bpst_positions": list(range(len(prefix), len(prefix) + m)),
        "pst_positions": psts,
        "block_end_positions": ends,
        "text_positions": text_pos,
        "ids": ids,
    }


ARGUANA = (
    "Ending poverty through entrepreneurialism Introducing finance provides communities "
    "with access to startup capital. Access to financial capital is vital in several "
    "respects for initiating capitalism. Firstly, access to capital enables "
    "entrepreneurialism. The poor have business ideas that would benefit both themselves "
    "and their community they just require access to capital to invest in such ideas. "
    "The Initiative ‘Lend with Care’ is providing access to capital to empower "
    "entrepreneurs. [1] . Secondly, the cumulative effect of small-scale savings and "
    "borrowing, enabled through microfinance enables individuals, families and "
    "communities, to enter markets - of land and property. Being able to buy property "
    "and land can enable personal security, dignity, and increasing returns. [1] See "
    "further readings: Lend with Care, 2013."
)

DOCS = {
    "arguana": (ARGUANA, "Given a claim, retrieve documents that support or refute the claim Text: "),
    "three": ("The sky is blue. Grass is green! Is snow white?", ""),
    "single": ("Just one sentence without a terminator", ""),
    "twelve": (" ".join(f"Sentence number {i} is here." for i in range(12)), "Query: "),
}

if __name__ == "__main__":
    out = Path(__file__).parent
    for name, (text, instruction) in DOCS.items():
        cases = [layout(text, k, instruction) for k in (1, 2, 4, 8)]
        (out / f"{name}.json").write_text(json.dumps(cases, indent=1, ensure_ascii=False) + "\n")
