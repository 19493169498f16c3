"""Token budgets and interleaved sequence assembly for text, image and audio.

Images are cut into a grid of 336 px blocks, each worth a fixed 128 decoder
tokens. Audio costs a fixed number of tokens per second set by the audio
frontend's hop, conv stride and pooling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

BLOCK_PX = 336
TOKENS_PER_BLOCK = 128

SAMPLE_RATE = 16000
HOP = 160
CONV_STRIDE = 2
POOL_FACTOR = 16
SAMPLES_PER_AUDIO_TOKEN = HOP * CONV_STRIDE * POOL_FACTOR  # 5120
AUDIO_TOKEN_RATE = SAMPLE_RATE / SAMPLES_PER_AUDIO_TOKEN  # 3.125 tokens/s

KINDS = ("text", "image", "audio")


def image_token_count(height: int, width: int) -> int:
    if height < 1 or width < 1:
        raise ValueError(f"image dims must be >= 1, got {height}x{width}")
    return -(-height // BLOCK_PX) * -(-width // BLOCK_PX) * TOKENS_PER_BLOCK


def audio_tokens_for_samples(n_samples: int, samples_per_token: int = SAMPLES_PER_AUDIO_TOKEN) -> int:
    if n_samples < 1:
        raise ValueError("audio must contain at least one sample")
    return max(1, -(-n_samples // samples_per_token))


def audio_token_count(duration: float, sample_rate: int = SAMPLE_RATE,
                      samples_per_token: int = SAMPLES_PER_AUDIO_TOKEN) -> int:
    """ceil(duration * rate), evaluated on the whole-sample count so that it
    agrees exactly with the audio tower's output length."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n = max(1, round(duration * sample_rate))
    return audio_tokens_for_samples(n, samples_per_token)


@dataclass(frozen=True)
class Crop:
    row: int
    col: int
    top: int
    left: int
    height: int  # valid pixels inside the block
    width: int

    @property
    def pad_bottom(self) -> int:
        return BLOCK_PX - self.height

    @property
    def pad_right(self) -> int:
        return BLOCK_PX - self.width


@dataclass(frozen=True)
class CropGrid:
    height: int
    width: int
    rows: int
    cols: int
    crops: tuple[Crop, ...]
    block_px: int = BLOCK_PX

    @property
    def n_blocks(self) -> int:
        return self.rows * self.cols


def plan_crops(height: int, width: int) -> CropGrid:
    """Row-major grid of 336x336 blocks covering the image; partial blocks on
    the bottom/right edges are later filled by edge replication."""
    if height < 1 or width < 1:
        raise ValueError(f"image dims must be >= 1, got {height}x{width}")
    rows, cols = -(-height // BLOCK_PX), -(-width // BLOCK_PX)
    crops = []
    for r in range(rows):
        for c in range(cols):
            top, left = r * BLOCK_PX, c * BLOCK_PX
            crops.append(Crop(r, c, top, left, min(BLOCK_PX, height - top), min(BLOCK_PX, width - left)))
    return CropGrid(height, width, rows, cols, tuple(crops))


def extract_blocks(image: np.ndarray, grid: CropGrid | None = None) -> np.ndarray:
    """[n_blocks, 336, 336, C] blocks, partial blocks padded by replicating edge pixels."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    grid = grid or plan_crops(h, w)
    out = np.empty((grid.n_blocks, BLOCK_PX, BLOCK_PX) + image.shape[2:], dtype=image.dtype)
    for i, c in enumerate(grid.crops):
        tile = image[c.top:c.top + c.height, c.left:c.left + c.width]
        if c.pad_bottom or c.pad_right:
            widths = [(0, c.pad_bottom), (0, c.pad_right)] + [(0, 0)] * (image.ndim - 2)
            tile = np.pad(tile, widths, mode="edge")
        out[i] = tile
    return out


@dataclass(frozen=True)
class ModalitySpan:
    kind: str
    start: int
    length: int
    source_id: int


@dataclass
class PackedSequence:
    embeddings: object  # [total_len, d_model] array (or autograd Var inside the model)
    spans: list[ModalitySpan]
    sentinel_positions: list[int] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.length)

    def segment(self, span: ModalitySpan):
        return self.embeddings[..., span.start:span.start + span.length, :]


def layout(kinds: Sequence[str], lengths: Sequence[int]) -> tuple[list[ModalitySpan], list[int], int]:
    """Span table for segments placed in source order.

    Non-text segments are wrapped in begin/end sentinels. Returns
    (spans, sentinel positions, total length).
    """
    if not kinds:
        raise ValueError("cannot interleave an empty segment list")
    spans, sentinels = [], []
    pos = 0
    for i, (kind, n) in enumerate(zip(kinds, lengths)):
        if kind not in KINDS:
            raise ValueError(f"unknown modality {kind!r}")
        if n < 1:
            raise ValueError(f"segment {i} ({kind}) is empty")
        if kind != "text":
            sentinels.append(pos)
            pos += 1
        spans.append(ModalitySpan(kind, pos, int(n), i))
        pos += n
        if kind != "text":
            sentinels.append(pos)
            pos += 1
    return spans, sentinels, pos


def interleave(segments: Sequence[tuple[str, np.ndarray]],
               sentinels: dict[str, tuple[np.ndarray, np.ndarray]]) -> PackedSequence:
    """Concatenate (kind, [n, d_model]) segments in order, wrapping image and
    audio segments with the begin/end rows from ``sentinels[kind]``."""
    if not segments:
        raise ValueError("cannot interleave an empty segment list")
    widths = {np.shape(e)[-1] for _, e in segments}
    widths |= {np.shape(r)[-1] for pair in sentinels.values() for r in pair}
    if len(widths) != 1:
        raise ValueError(f"segment widths disagree: {sorted(widths)}")
    kinds = [k for k, _ in segments]
    spans, sent_pos, _ = layout(kinds, [np.shape(e)[0] for _, e in segments])
    rows = []
    for kind, emb in segments:
        if kind == "text":
            rows.append(np.asarray(emb))
        else:
            begin, end = sentinels[kind]
            rows.extend([np.reshape(begin, (1, -1)), np.asarray(emb), np.reshape(end, (1, -1))])
    return PackedSequence(np.concatenate(rows, axis=0), spans, sent_pos)


def sequence_length(text_tokens: int, image_blocks: int, audio_tokens: int,
                    n_image_segments: int, n_audio_segments: int) -> int:
    """Length accounting: text + 128 per block + audio + two sentinels per
    non-text segment."""
    return (text_tokens + TOKENS_PER_BLOCK * image_blocks + audio_tokens
            + 2 * (n_image_segments + n_audio_segments))


__all__ = [
    "AUDIO_TOKEN_RATE", "BLOCK_PX", "TOKENS_PER_BLOCK", "Crop", "CropGrid", "ModalitySpan",
    "PackedSequence", "audio_token_count", "audio_tokens_for_samples", "extract_blocks",
    "image_token_count", "interleave", "layout", "plan_crops", "sequence_length",
]
