"""Closed word-level vocabulary shared by the model and the synthetic tasks."""
from __future__ import annotations

import numpy as np

SPECIALS = ["<pad>", "<unk>", "<bos>", "<eos>", "<img>", "</img>", "<aud>", "</aud>", "<sep>"]
COLORS = {
    "red": (220, 30, 30),
    "green": (30, 180, 40),
    "blue": (30, 60, 220),
    "yellow": (235, 220, 40),
    "cyan": (40, 210, 220),
    "magenta": (210, 40, 200),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
}
DIGITS = [str(d) for d in range(10)]
WORDS = ["what", "color", "is", "row", "col", "of", "by", "grid", "digits", "in", "the",
         "audio", "image", "and", "then", "?", "answer", ":"]

TOKENS: list[str] = SPECIALS + list(COLORS) + DIGITS + WORDS
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}

PAD, UNK, BOS, EOS = 0, 1, 2, 3
IMG_BEGIN, IMG_END, AUD_BEGIN, AUD_END = 4, 5, 6, 7
SEP = 8
SENTINELS = {"image": (IMG_BEGIN, IMG_END), "audio": (AUD_BEGIN, AUD_END)}


def encode(text: str) -> np.ndarray:
    return np.array([TOKEN_ID.get(w, UNK) for w in text.split()], dtype=np.int64)


def decode(ids) -> str:
    return " ".join(TOKENS[i] if 0 <= i < len(TOKENS) else "<unk>" for i in ids)
