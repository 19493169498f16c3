"""Autoregressive generation with a KV cache, plus latency/throughput measurement.

Sampling randomness comes from numpy's Philox-4x64 counter-based generator
seeded with ``GenerationConfig.seed``, so seeded runs repeat exactly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import vocab
from .model import ContextOverflowError, EagleModel, KVCache

MIN_DECODE_STEPS = 8


class GenerationOverflowError(ContextOverflowError):
    """Context filled up mid-generation; ``tokens`` holds what was produced."""

    def __init__(self, message: str, tokens: list[int]):
        super().__init__(message)
        self.tokens = tokens


@dataclass
class GenerationConfig:
    max_new_tokens: int = 16
    temperature: float = 0.0
    top_k: int = 50
    seed: int = 0
    stop_tokens: tuple[int, ...] = (vocab.EOS,)

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class Metrics:
    ttft_ms: float = 0.0
    tokens_per_sec: float | None = None  # None when fewer than 8 decode steps ran
    prefill_tokens: int = 0
    decode_tokens: int = 0
    decode_ms: float = 0.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def sample_token(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    """Greedy at temperature 0 (lowest id wins ties); otherwise top-k sampling."""
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.temperature == 0:
        return int(np.argmax(logits))
    k = min(cfg.top_k, logits.size)
    order = np.argsort(-logits, kind="stable")[:k]
    z = logits[order] / cfg.temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(order[min(np.searchsorted(cdf, u, side="right"), k - 1)])


def generate(model: EagleModel, segments: Sequence[tuple[str, np.ndarray]], cfg: GenerationConfig,
             on_token: Callable[[int], None] | None = None) -> tuple[list[int], Metrics]:
    """Prefill once, then decode one token per step against the KV cache.

    TTFT runs from the moment the raw inputs arrive (tower passes included)
    until the first token is emitted. Throughput counts decode steps only.
    """
    t0 = time.perf_counter()
    rng = make_rng(cfg.seed)
    cache = KVCache(model.cfg.n_layers)
    tokens: list[int] = []
    metrics = Metrics()
    with ag.no_grad():
        seq = model.embed_inputs([segments])
        metrics.prefill_tokens = seq.length
        logits = model.decoder_forward(seq.embeddings, cache).data[0, -1]
        tok = sample_token(logits, cfg, rng)
        t_first = time.perf_counter()
        metrics.ttft_ms = (t_first - t0) * 1e3
        tokens.append(tok)
        if on_token is not None:
            on_token(tok)
        t_last = t_first
        while tok not in cfg.stop_tokens and len(tokens) < cfg.max_new_tokens:
            if cache.length + 1 > model.cfg.max_seq_len:
                raise GenerationOverflowError(
                    f"context full at {cache.length} tokens after {len(tokens)} generated", tokens)
            logits = model.decoder_forward(model.embed_tokens([[tok]]), cache).data[0, -1]
            tok = sample_token(logits, cfg, rng)
            tokens.append(tok)
            if on_token is not None:
                on_token(tok)
            t_last = time.perf_counter()
    steps = len(tokens) - 1
    metrics.decode_tokens = steps
    metrics.decode_ms = (t_last - t_first) * 1e3
    if steps >= MIN_DECODE_STEPS and t_last > t_first:
        metrics.tokens_per_sec = steps / (t_last - t_first)
    return tokens, metrics


def generate_no_cache(model: EagleModel, segments: Sequence[tuple[str, np.ndarray]],
                      cfg: GenerationConfig) -> list[int]:
    """Reference loop: recompute the whole sequence at every step."""
    rng = make_rng(cfg.seed)
    tokens: list[int] = []
    with ag.no_grad():
        prompt = model.embed_inputs([segments]).embeddings.data
        x = prompt
        while True:
            if x.shape[1] > model.cfg.max_seq_len:
                raise GenerationOverflowError("context full", tokens)
            logits = model.decoder_forward(ag.Var(x)).data[0, -1]
            tok = sample_token(logits, cfg, rng)
            tokens.append(tok)
            if tok in cfg.stop_tokens or len(tokens) >= cfg.max_new_tokens:
                return tokens
            x = np.concatenate([x, model.embed_tokens([[tok]]).data], axis=1)


# ------------------------------------------------------------------ benchmarking

@dataclass
class Workload:
    prompt_tokens: int = 32
    decode_tokens: int = 32
    image_px: tuple[int, int] | None = None
    audio_seconds: float | None = None
    seed: int = 0

    def segments(self) -> list[tuple[str, np.ndarray]]:
        rng = make_rng(self.seed)
        words = rng.integers(len(vocab.SPECIALS), len(vocab.TOKENS), size=max(1, self.prompt_tokens - 1))
        segs: list[tuple[str, np.ndarray]] = [("text", np.concatenate([[vocab.BOS], words]).astype(np.int64))]
        if self.image_px is not None:
            h, w = self.image_px
            segs.append(("image", rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)))
        if self.audio_seconds is not None:
            n = int(round(self.audio_seconds * 16000))
            segs.append(("audio", (0.1 * rng.standard_normal(n)).astype(np.float32)))
        return segs


@dataclass
class BenchReport:
    model: str
    avg_bits: float
    prefill_tokens: int
    decode_tokens: int
    repetitions: int
    ttft_ms: dict[str, float] = field(default_factory=dict)
    tokens_per_sec: dict[str, float] = field(default_factory=dict)


def _summary(values: Sequence[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"median": float(np.median(arr)), "p90": float(np.percentile(arr, 90))}


def bench(model: EagleModel, workload: Workload, repetitions: int = 5, name: str = "model") -> BenchReport:
    """One warm-up run, then ``repetitions`` timed runs; median and p90 reported."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if workload.decode_tokens < MIN_DECODE_STEPS + 1:
        raise ValueError(f"decode_tokens must be >= {MIN_DECODE_STEPS + 1} to measure throughput")
    segs = workload.segments()
    cfg = GenerationConfig(max_new_tokens=workload.decode_tokens, temperature=0.0, stop_tokens=())
    generate(model, segs, cfg)
    ttft, tps = [], []
    prefill = 0
    for _ in range(repetitions):
        _, m = generate(model, segs, cfg)
        ttft.append(m.ttft_ms)
        tps.append(m.tokens_per_sec)
        prefill = m.prefill_tokens
    return BenchReport(name, model.avg_bits(), prefill, workload.decode_tokens, repetitions,
                       _summary(ttft), _summary(tps))


def throughput_ratio(quantized: BenchReport, baseline: BenchReport) -> float:
    return quantized.tokens_per_sec["median"] / baseline.tokens_per_sec["median"]
