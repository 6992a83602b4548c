"""Closed word-level vocabulary shared by the generator, text encoder and toy LM."""
from __future__ import annotations

import re

PAD, BOS, EOS, MASK, UNK, ANS = "<pad>", "<bos>", "<eos>", "<mask>", "<unk>", "<ans>"
SPECIALS = (PAD, BOS, EOS, MASK, UNK, ANS)

INSTRUMENTS = ("grasper", "bipolar", "hook", "scissors", "clipper", "irrigator")
ACTIONS = ("grasp", "retract", "dissect", "coagulate", "clip", "cut", "aspirate")
TARGETS = ("gallbladder", "liver", "omentum", "fat", "duct", "artery", "peritoneum")
PHASES = ("p1", "p2", "p3", "p4", "p5")
ROWS = ("upper", "middle", "lower")
COLS = ("left", "center", "right")
LOCATIONS = tuple(f"{r}-{c}" for r in ROWS for c in COLS)
MOVEMENTS = ("left", "right", "up", "down", "static")
RELATIONS = ("left", "right", "above", "below")
MAX_NUMBER = 128

FUNCTION_WORDS = (
    "the", "a", "is", "are", "of", "to", "in", "and", "it", "this", "with", "by", "at",
    "what", "which", "where", "how", "when", "does", "used", "phase", "surgical", "surgery",
    "shown", "video", "clip", "spanning", "from", "seconds", "instrument", "action", "target",
    "observed", "triplet", "performed", "located", "region", "view", "positioned", "relative",
    "relation", "between", "direction", "move", "moves", "long", "duration", "time", "visible",
    "not", "describe", "scene", "s", "second",
    ".", ",", "?", "[", "]",
)


def _build_words() -> list[str]:
    words = list(SPECIALS)
    seen = set(words)
    groups = (FUNCTION_WORDS, INSTRUMENTS, ACTIONS, TARGETS, PHASES, LOCATIONS, MOVEMENTS,
              RELATIONS, tuple(str(n) for n in range(MAX_NUMBER + 1)))
    for group in groups:
        for w in group:
            if w not in seen:
                seen.add(w)
                words.append(w)
    return words


WORDS: tuple[str, ...] = tuple(_build_words())
INDEX = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = len(WORDS)
PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID, ANS_ID = (INDEX[s] for s in SPECIALS)

_TOKEN_RE = re.compile(r"<[a-z]+>|[a-z0-9_\-]+|[^\sa-z0-9]")


def split(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def encode(text: str) -> list[int]:
    return [INDEX.get(tok, UNK_ID) for tok in split(text)]


def decode(ids, stop_at_eos: bool = True) -> str:
    out = []
    for i in ids:
        i = int(i)
        if stop_at_eos and i == EOS_ID:
            break
        if i in (PAD_ID, BOS_ID, ANS_ID):
            continue
        out.append(WORDS[i])
    return detokenize(out)


def detokenize(tokens: list[str]) -> str:
    text = " ".join(tokens)
    text = re.sub(r"\s+([.,?\]])", r"\1", text)
    return re.sub(r"\[\s+", "[", text)
