"""Seeded toy multi-modal tasks with answers checkable without the model.

* ``color_grid``   - an image of a g x g grid of colored cells; ask for one cell's color.
* ``tone_digits``  - 3-6 pure tones, one frequency per digit; ask for the digit string.
* ``interleaved``  - one of each, joined into a single prompt; answer both.

Each generator is a pure function of ``seed``. Train/eval splits are seed ranges.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import vocab

IMAGE_PX = 336
SAMPLE_RATE = 16000
TONE_S, GAP_S = 0.4, 0.1
TONE_HZ = [300.0 + 150.0 * d for d in range(10)]
AMPLITUDE = 0.5

TASKS = ("color_grid", "tone_digits", "interleaved")
TRAIN_SEEDS = range(0, 50_000)
EVAL_SEEDS = range(50_000, 55_000)


@dataclass
class Sample:
    task: str
    seed: int
    segments: list[tuple[str, np.ndarray]]
    target: np.ndarray  # answer token ids, without <eos>

    @property
    def image(self) -> np.ndarray | None:
        return next((p for k, p in self.segments if k == "image"), None)

    @property
    def audio(self) -> np.ndarray | None:
        return next((p for k, p in self.segments if k == "audio"), None)

    @property
    def prompt_text(self) -> np.ndarray:
        parts = [p for k, p in self.segments if k == "text"]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def signature(self) -> tuple:
        """Layout key: samples with equal signatures can share a batch."""
        return tuple((k, np.shape(p)) for k, p in self.segments) + (len(self.target),)


def _rng(task: str, seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([TASKS.index(task), seed])))


def _ids(words: Sequence[str]) -> np.ndarray:
    return np.array([vocab.TOKEN_ID[w] for w in words], dtype=np.int64)


def _color_parts(rng: np.random.Generator):
    names = list(vocab.COLORS)
    g = int(rng.integers(2, 5))
    cells = rng.integers(0, len(names), size=(g, g))
    r, c = (int(v) for v in rng.integers(0, g, size=2))
    palette = np.array([vocab.COLORS[n] for n in names], dtype=np.uint8)
    cell = IMAGE_PX // g
    image = np.repeat(np.repeat(palette[cells], cell, axis=0), cell, axis=1)
    question = _ids(["what", "color", "is", "row", str(r), "col", str(c), "of", str(g), "by", str(g), "grid", "?"])
    return image, question, _ids([names[cells[r, c]]])


def _tone_parts(rng: np.random.Generator):
    n = int(rng.integers(3, 7))
    digits = rng.integers(0, 10, size=n)
    tone_n, gap_n = int(TONE_S * SAMPLE_RATE), int(GAP_S * SAMPLE_RATE)
    t = np.arange(tone_n) / SAMPLE_RATE
    chunks = []
    for i, d in enumerate(digits):
        if i:
            chunks.append(np.zeros(gap_n))
        chunks.append(AMPLITUDE * np.sin(2 * np.pi * TONE_HZ[d] * t))
    pcm = np.round(np.concatenate(chunks) * 32767).astype(np.int16)
    wave = (pcm / 32768.0).astype(np.float32)
    question = _ids(["what", "digits", "in", "the", "audio", "?"])
    return wave, question, _ids([str(d) for d in digits])


def gen_color_grid(seed: int) -> Sample:
    image, question, answer = _color_parts(_rng("color_grid", seed))
    segs = [("text", _ids(["<bos>"])), ("image", image), ("text", question)]
    return Sample("color_grid", seed, segs, answer)


def gen_tone_digits(seed: int) -> Sample:
    wave, question, answer = _tone_parts(_rng("tone_digits", seed))
    segs = [("text", _ids(["<bos>"])), ("audio", wave), ("text", question)]
    return Sample("tone_digits", seed, segs, answer)


def gen_interleaved(seed: int) -> Sample:
    rng = _rng("interleaved", seed)
    image, q_img, a_img = _color_parts(rng)
    wave, q_aud, a_aud = _tone_parts(rng)
    segs = [("text", _ids(["<bos>"])), ("image", image), ("text", q_img),
            ("text", _ids(["and", "then"])), ("audio", wave), ("text", q_aud)]
    return Sample("interleaved", seed, segs, np.concatenate([a_img, _ids(["<sep>"]), a_aud]))


GENERATORS = {"color_grid": gen_color_grid, "tone_digits": gen_tone_digits, "interleaved": gen_interleaved}


def generate(task: str, seeds: Iterable[int]) -> list[Sample]:
    fn = GENERATORS[task]
    return [fn(int(s)) for s in seeds]


# ------------------------------------------------------------------ oracles

def cell_majority_color(image: np.ndarray, g: int, r: int, c: int) -> str:
    """Most frequent palette color among the pixels of cell (r, c)."""
    cell = image.shape[0] // g
    block = image[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell].reshape(-1, 3)
    palette = np.array(list(vocab.COLORS.values()), dtype=np.int32)
    nearest = np.argmin(((block[:, None, :].astype(np.int32) - palette[None]) ** 2).sum(-1), axis=1)
    return list(vocab.COLORS)[np.bincount(nearest, minlength=len(palette)).argmax()]


def decode_tones(wave: np.ndarray) -> list[int]:
    """Recover digits from tone audio by the FFT peak of each tone window."""
    tone_n, step = int(TONE_S * SAMPLE_RATE), int((TONE_S + GAP_S) * SAMPLE_RATE)
    n = (len(wave) + int(GAP_S * SAMPLE_RATE)) // step
    out = []
    for i in range(n):
        seg = wave[i * step:i * step + tone_n]
        spec = np.abs(np.fft.rfft(seg))
        peak = np.argmax(spec) * SAMPLE_RATE / len(seg)
        out.append(int(np.argmin([abs(peak - f) for f in TONE_HZ])))
    return out


# ------------------------------------------------------------------ dataset files
#
# little-endian; header: b"EGDS", u32 version (1), u32 record count
# record: u32 byte length of the rest, u8 task index, u64 seed, u8 segment count,
#         segments, then the target as one more token segment.
# segment: u8 kind, u32 payload length, payload
#   kind 0 text ids   - u16 per token
#   kind 1 raw RGB    - u32 height, u32 width, height*width*3 bytes
#   kind 2 PCM        - int16 mono samples at 16 kHz
#   kind 3 target ids - u16 per token

DATASET_MAGIC = b"EGDS"
DATASET_VERSION = 1
_KIND_CODE = {"text": 0, "image": 1, "audio": 2}


def _encode_segment(kind: str, payload: np.ndarray) -> bytes:
    if kind in ("text", "target"):
        body = np.asarray(payload, dtype="<u2").tobytes()
        code = 0 if kind == "text" else 3
    elif kind == "image":
        h, w = payload.shape[:2]
        body = struct.pack("<II", h, w) + np.ascontiguousarray(payload, dtype=np.uint8).tobytes()
        code = 1
    elif kind == "audio":
        body = np.round(np.asarray(payload, dtype=np.float64) * 32768.0).clip(-32768, 32767).astype("<i2").tobytes()
        code = 2
    else:
        raise ValueError(f"unknown segment kind {kind!r}")
    return struct.pack("<BI", code, len(body)) + body


def _decode_segment(code: int, body: bytes) -> tuple[str, np.ndarray]:
    if code in (0, 3):
        return ("text" if code == 0 else "target"), np.frombuffer(body, dtype="<u2").astype(np.int64)
    if code == 1:
        h, w = struct.unpack_from("<II", body)
        return "image", np.frombuffer(body, dtype=np.uint8, offset=8).reshape(h, w, 3).copy()
    if code == 2:
        return "audio", (np.frombuffer(body, dtype="<i2") / 32768.0).astype(np.float32)
    raise ValueError(f"unknown segment code {code}")


def write_dataset(path: str | os.PathLike, samples: Sequence[Sample]) -> None:
    from .checkpoint import atomic_write

    buf = io.BytesIO()
    buf.write(DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(samples)))
    for s in samples:
        body = struct.pack("<BQB", TASKS.index(s.task), s.seed, len(s.segments))
        body += b"".join(_encode_segment(k, p) for k, p in s.segments)
        body += _encode_segment("target", s.target)
        buf.write(struct.pack("<I", len(body)) + body)
    atomic_write(path, buf.getvalue())


def read_dataset(path_or_file: str | os.PathLike | BinaryIO) -> list[Sample]:
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as f:
            data = f.read()
    if data[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset file (bad magic at offset 0)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version} at offset 4")
    off = 12
    out = []
    for _ in range(count):
        if off + 4 > len(data):
            raise ValueError(f"truncated dataset at offset {off}")
        (length,) = struct.unpack_from("<I", data, off)
        end = off + 4 + length
        if end > len(data):
            raise ValueError(f"truncated record at offset {off}")
        task_idx, seed, n_seg = struct.unpack_from("<BQB", data, off + 4)
        p = off + 4 + 10
        segs = []
        for _ in range(n_seg + 1):
            code, blen = struct.unpack_from("<BI", data, p)
            segs.append(_decode_segment(code, data[p + 5:p + 5 + blen]))
            p += 5 + blen
        kind, target = segs.pop()
        if kind != "target":
            raise ValueError(f"record at offset {off} lacks a target segment")
        out.append(Sample(TASKS[task_idx], int(seed), segs, target))
        off = end
    return out
