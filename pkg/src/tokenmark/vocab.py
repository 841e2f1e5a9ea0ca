"""Closed token vocabulary for the synthetic region QA tasks."""
from __future__ import annotations

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange")
SHAPES = ("square", "circle", "triangle")
MOTIONS = ("static", "left", "right", "up", "down")

PAD, BOS, EOS, REGION = "<pad>", "<bos>", "<eos>", "<region>"

_WORDS = (
    PAD, BOS, EOS, REGION,
    "what", "is", "which", "way", "does", "move", "of", "at", "the", "last", "frame", "?",
    *COLORS, *SHAPES, *MOTIONS, "yes", "no",
)

TOKENS: tuple[str, ...] = tuple(dict.fromkeys(_WORDS))  # "left" appears once
TOKEN_ID = {tok: i for i, tok in enumerate(TOKENS)}

PAD_ID = TOKEN_ID[PAD]
BOS_ID = TOKEN_ID[BOS]
EOS_ID = TOKEN_ID[EOS]
REGION_ID = TOKEN_ID[REGION]


def encode(words: list[str] | str) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_ID[w] for w in words]


def decode(ids) -> list[str]:
    return [TOKENS[int(i)] for i in ids]
