"""Toy multi-modal model: vision tower, audio tower, projectors and a causal decoder.

Every forward pass is written once against :mod:`eaglet.autograd`, so the same
code trains (with gradients), evaluates under fake quantization, and serves
generation with a KV cache.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from . import packing
from . import quantization as qz
from . import vocab
from .audio import log_mel


class UnsupportedInputError(ValueError):
    """Raised for inputs the model cannot handle, e.g. image-only prompts."""


class ContextOverflowError(ValueError):
    pass


@dataclass
class VisionConfig:
    patch_px: int = 48
    width: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 256
    queries_per_block: int = 128


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    hop: int = 160
    conv_stride: int = 2
    conv_kernel: int = 3
    pool_factor: int = 16
    width: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 256

    @property
    def samples_per_token(self) -> int:
        return self.hop * self.conv_stride * self.pool_factor

    @property
    def token_rate(self) -> float:
        return self.sample_rate / self.samples_per_token


@dataclass
class EagleConfig:
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 512
    max_seq_len: int = 1024
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    projector_hidden: int = 0  # 0 means d_model
    vision: VisionConfig = field(default_factory=VisionConfig)
    audio: AudioConfig = field(default_factory=AudioConfig)

    def __post_init__(self):
        if isinstance(self.vision, dict):
            self.vision = VisionConfig(**self.vision)
        if isinstance(self.audio, dict):
            self.audio = AudioConfig(**self.audio)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dim must be even for rotary encoding")
        if self.vision.queries_per_block != packing.TOKENS_PER_BLOCK:
            raise ValueError("queries_per_block is fixed at 128")
        if packing.BLOCK_PX % self.vision.patch_px:
            raise ValueError("patch_px must divide 336")
        if self.vision.width % self.vision.heads or self.audio.width % self.audio.heads:
            raise ValueError("tower widths must be divisible by their head counts")
        if self.vocab_size < len(vocab.TOKENS):
            raise ValueError(f"vocab_size must be >= {len(vocab.TOKENS)}")

    @property
    def hidden(self) -> int:
        return self.projector_hidden or self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EagleConfig":
        return cls(**d)


def param_shapes(cfg: EagleConfig) -> dict[str, tuple[int, ...]]:
    d, v, a = cfg.d_model, cfg.vision, cfg.audio
    n_patch = (packing.BLOCK_PX // v.patch_px) ** 2
    shapes: dict[str, tuple[int, ...]] = {}

    def enc_layer(prefix, w, ff):
        shapes.update({
            f"{prefix}.attn_norm": (w,), f"{prefix}.wq": (w, w), f"{prefix}.wk": (w, w),
            f"{prefix}.wv": (w, w), f"{prefix}.wo": (w, w), f"{prefix}.mlp_norm": (w,),
            f"{prefix}.fc1": (ff, w), f"{prefix}.fc2": (w, ff),
        })

    shapes["vis.patch_w"] = (v.width, v.patch_px * v.patch_px * 3)
    shapes["vis.patch_b"] = (v.width,)
    shapes["vis.pos"] = (n_patch, v.width)
    for i in range(v.layers):
        enc_layer(f"vis.{i}", v.width, v.ff)
    shapes["vis.enc_norm"] = (v.width,)
    shapes["vis.queries"] = (v.queries_per_block, v.width)
    enc_layer("vis.rs", v.width, v.ff)
    shapes["vis.out_norm"] = (v.width,)

    shapes["aud.conv_w"] = (a.width, a.conv_kernel * a.n_mels)
    shapes["aud.conv_b"] = (a.width,)
    for i in range(a.layers):
        enc_layer(f"aud.{i}", a.width, a.ff)
    shapes["aud.out_norm"] = (a.width,)

    for tower, w in (("vis", v.width), ("aud", a.width)):
        shapes[f"proj_{tower}.w1"] = (cfg.hidden, w)
        shapes[f"proj_{tower}.b1"] = (cfg.hidden,)
        shapes[f"proj_{tower}.w2"] = (d, cfg.hidden)
        shapes[f"proj_{tower}.b2"] = (d,)

    shapes["tok_emb"] = (cfg.vocab_size, d)
    for i in range(cfg.n_layers):
        p = f"dec.{i}"
        shapes.update({
            f"{p}.attn_norm": (d,), f"{p}.wq": (d, d), f"{p}.wk": (d, d), f"{p}.wv": (d, d),
            f"{p}.wo": (d, d), f"{p}.ffn_norm": (d,), f"{p}.w_gate": (cfg.d_ff, d),
            f"{p}.w_up": (cfg.d_ff, d), f"{p}.w_down": (d, cfg.d_ff),
        })
    shapes["final_norm"] = (d,)
    return shapes


def tower_names(names: Iterable[str]) -> list[str]:
    return [n for n in names if n.startswith(("vis.", "aud."))]


def projector_names(names: Iterable[str]) -> list[str]:
    return [n for n in names if n.startswith("proj_")]


def decoder_names(names: Iterable[str]) -> list[str]:
    return [n for n in names if n == "tok_emb" or n == "final_norm" or n.startswith("dec.")]


ALWAYS_INT8 = ("tok_emb", "final_norm")


def init_params(cfg: EagleConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(seed))
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            arr = np.ones(shape)
        elif leaf in ("patch_b", "conv_b", "b1", "b2"):
            arr = np.zeros(shape)
        elif leaf in ("pos", "queries"):
            arr = rng.normal(0.0, 0.5, shape)
        elif name == "tok_emb":
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
            if leaf in ("wo", "fc2", "w_down"):
                arr *= 0.5
        out[name] = arr.astype(np.float32)
    return out


@functools.lru_cache(maxsize=None)
def resampler_bias(grid: int, queries: int, sigma: float = 0.1) -> np.ndarray:
    """Fixed locality prior for the resampler's cross-attention, [queries, grid*grid].

    Query i is anchored at the centre of cell i of a rows x cols layout of the
    block (rows * cols == queries, as square as possible); the bias is
    -d^2 / (2 sigma^2) with d the distance to each patch centre in block units.
    The queries stay free parameters; the prior only tells each one where to
    start looking.
    """
    rows = int(math.isqrt(queries))
    while queries % rows:
        rows -= 1
    cols = queries // rows
    qy, qx = np.meshgrid((np.arange(rows) + 0.5) / rows, (np.arange(cols) + 0.5) / cols, indexing="ij")
    py, px = np.meshgrid((np.arange(grid) + 0.5) / grid, (np.arange(grid) + 0.5) / grid, indexing="ij")
    d2 = (qy.reshape(-1, 1) - py.reshape(1, -1)) ** 2 + (qx.reshape(-1, 1) - px.reshape(1, -1)) ** 2
    bias = -d2 / (2 * sigma * sigma)
    bias.flags.writeable = False
    return bias


def _sinusoid(n: int, width: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(width // 2)[None, :]
    ang = pos / (10000.0 ** (2 * i / width))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class KVCache:
    """Per-session key/value store; one per generation session, never shared."""

    def __init__(self, n_layers: int):
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers
        self.length = 0


class EagleModel:
    def __init__(self, cfg: EagleConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        arrays = init_params(cfg, seed) if params is None else params
        self.params: dict[str, ag.Var] = {k: ag.Var(np.asarray(v)) for k, v in arrays.items()}
        self.packed: dict[str, qz.QuantizedTensor] = {}
        self.qat: dict[str, qz.QuantSpec] = {}
        self.lora: dict[str, tuple[ag.Var, ag.Var]] = {}
        self.lora_scale = 0.0
        self.quant_meta: dict = {}

    # ------------------------------------------------------------ weights
    @property
    def names(self) -> list[str]:
        return list(param_shapes(self.cfg))

    @property
    def dtype(self):
        for v in self.params.values():
            return v.data.dtype
        return np.float32

    def param_counts(self) -> dict[str, int]:
        return {k: math.prod(s) for k, s in param_shapes(self.cfg).items()}

    def avg_bits(self) -> float:
        """Parameter-weighted storage bits; float tensors count as 32."""
        counts = self.param_counts()
        total = sum(counts.values())
        return sum(n * (self.packed[k].spec.bits if k in self.packed else 32)
                   for k, n in counts.items()) / total

    def weight(self, name: str) -> ag.Var:
        if name in self.packed:
            w = ag.Var(qz.dequantize(self.packed[name]))
        elif name in self.qat:
            w = qz.fake_quant_var(self.params[name], self.qat[name])
        else:
            w = self.params[name]
        if name in self.lora:
            a, b = self.lora[name]
            w = ag.add(w, ag.scale(ag.matmul(a, b), self.lora_scale))
        return w

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def copy(self) -> "EagleModel":
        m = EagleModel(self.cfg, {k: v.data.copy() for k, v in self.params.items()})
        m.packed = dict(self.packed)
        m.qat = dict(self.qat)
        m.lora = {k: (ag.Var(a.data.copy()), ag.Var(b.data.copy())) for k, (a, b) in self.lora.items()}
        m.lora_scale = self.lora_scale
        m.quant_meta = dict(self.quant_meta)
        return m

    def astype(self, dtype) -> "EagleModel":
        m = self.copy()
        for v in m.params.values():
            v.data = v.data.astype(dtype)
        return m

    # ------------------------------------------------------------ blocks
    def _attention(self, q: ag.Var, k: ag.Var, v: ag.Var, mask: np.ndarray | None,
                   bias: np.ndarray | None = None) -> ag.Var:
        hd = q.shape[-1]
        scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        if bias is not None:
            scores = ag.add(scores, ag.Var(bias.astype(scores.data.dtype)))
        return ag.matmul(ag.softmax(scores, mask), v)

    def _split_heads(self, x: ag.Var, heads: int) -> ag.Var:
        b, t, w = x.shape
        return ag.transpose(ag.reshape(x, (b, t, heads, w // heads)), (0, 2, 1, 3))

    def _merge_heads(self, x: ag.Var) -> ag.Var:
        b, h, t, hd = x.shape
        return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, h * hd))

    def _encoder_layer(self, x: ag.Var, p: str, heads: int, kv: ag.Var | None = None,
                       bias: np.ndarray | None = None) -> ag.Var:
        eps = self.cfg.norm_eps
        h = ag.rmsnorm(x, self.weight(f"{p}.attn_norm"), eps)
        src = h if kv is None else kv
        q = self._split_heads(ag.linear(h, self.weight(f"{p}.wq")), heads)
        k = self._split_heads(ag.linear(src, self.weight(f"{p}.wk")), heads)
        v = self._split_heads(ag.linear(src, self.weight(f"{p}.wv")), heads)
        att = self._merge_heads(self._attention(q, k, v, None, bias))
        x = ag.add(x, ag.linear(att, self.weight(f"{p}.wo")))
        h = ag.rmsnorm(x, self.weight(f"{p}.mlp_norm"), eps)
        h = ag.linear(ag.gelu(ag.linear(h, self.weight(f"{p}.fc1"))), self.weight(f"{p}.fc2"))
        return ag.add(x, h)

    # ------------------------------------------------------------ towers
    def vision_forward(self, blocks: np.ndarray) -> ag.Var:
        """[N, 336, 336, 3] uint8 blocks -> [N, 128, vision width]."""
        blocks = np.asarray(blocks)
        if blocks.ndim == 3:
            blocks = blocks[None]
        if blocks.shape[1:] != (packing.BLOCK_PX, packing.BLOCK_PX, 3):
            raise ValueError(f"vision blocks must be 336x336x3, got {blocks.shape[1:]}")
        vc = self.cfg.vision
        n, g, p = blocks.shape[0], packing.BLOCK_PX // vc.patch_px, vc.patch_px
        x = blocks.astype(self.dtype) / 255.0 - 0.5
        x = x.reshape(n, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(n, g * g, p * p * 3)
        h = ag.linear(ag.Var(np.ascontiguousarray(x, dtype=self.dtype)),
                      self.weight("vis.patch_w"), self.weight("vis.patch_b"))
        h = ag.add(h, self.weight("vis.pos"))
        for i in range(vc.layers):
            h = self._encoder_layer(h, f"vis.{i}", vc.heads)
        h = ag.rmsnorm(h, self.weight("vis.enc_norm"), self.cfg.norm_eps)
        q0 = ag.broadcast_to(self.weight("vis.queries"), (n, vc.queries_per_block, vc.width))
        out = self._encoder_layer(q0, "vis.rs", vc.heads, kv=h, bias=resampler_bias(g, vc.queries_per_block))
        return ag.rmsnorm(out, self.weight("vis.out_norm"), self.cfg.norm_eps)

    def audio_features(self, waves: np.ndarray) -> np.ndarray:
        """Strided-conv input frames [B, T_conv, kernel * n_mels] (no parameters)."""
        ac = self.cfg.audio
        waves = np.atleast_2d(np.asarray(waves))
        if waves.shape[-1] == 0:
            raise ValueError("empty waveform")
        mels = np.stack([log_mel(w, ac.n_mels, ac.hop, ac.sample_rate) for w in waves])
        f = mels.shape[1]
        t_out = -(-f // ac.conv_stride)
        right = max(0, (t_out - 1) * ac.conv_stride + ac.conv_kernel - 1 - f)
        padded = np.pad(mels, ((0, 0), (1, right), (0, 0)))
        taps = [padded[:, j:j + (t_out - 1) * ac.conv_stride + 1:ac.conv_stride]
                for j in range(ac.conv_kernel)]
        return np.concatenate(taps, axis=-1).astype(self.dtype)

    def audio_forward(self, waves: np.ndarray) -> ag.Var:
        """[B, n_samples] waveforms (equal length) -> [B, T, audio width]."""
        ac = self.cfg.audio
        feats = self.audio_features(waves)
        h = ag.gelu(ag.linear(ag.Var(feats), self.weight("aud.conv_w"), self.weight("aud.conv_b")))
        h = ag.add(h, _sinusoid(feats.shape[1], ac.width).astype(self.dtype))
        for i in range(ac.layers):
            h = self._encoder_layer(h, f"aud.{i}", ac.heads)
        h = ag.pool_time(h, ac.pool_factor)
        return ag.rmsnorm(h, self.weight("aud.out_norm"), self.cfg.norm_eps)

    def project(self, x: ag.Var, tower: str) -> ag.Var:
        p = f"proj_{tower}"
        w1 = self.weight(f"{p}.w1")
        if x.shape[-1] != w1.shape[1]:
            raise ValueError(f"projector {p} expects width {w1.shape[1]}, got {x.shape[-1]}")
        h = ag.gelu(ag.linear(x, w1, self.weight(f"{p}.b1")))
        return ag.linear(h, self.weight(f"{p}.w2"), self.weight(f"{p}.b2"))

    # ------------------------------------------------------------ decoder
    def embed_tokens(self, ids: np.ndarray) -> ag.Var:
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        return ag.embedding(self.weight("tok_emb"), ids)

    def decoder_forward(self, x: ag.Var, cache: KVCache | None = None) -> ag.Var:
        """[B, L, d_model] embeddings -> [B, L, vocab] logits.

        With ``cache`` the rows are appended after the cached positions and the
        cache is extended in place.
        """
        cfg = self.cfg
        if not isinstance(x, ag.Var):
            x = ag.Var(np.asarray(x, dtype=self.dtype))
        b, length, _ = x.shape
        start = cache.length if cache is not None else 0
        if start + length > cfg.max_seq_len:
            raise ContextOverflowError(
                f"sequence length {start + length} exceeds max_seq_len {cfg.max_seq_len}")
        pos = np.arange(start, start + length)
        kpos = np.arange(start + length)
        mask = (kpos[None, :] > pos[:, None])[None, None]
        eps = cfg.norm_eps
        for i in range(cfg.n_layers):
            p = f"dec.{i}"
            h = ag.rmsnorm(x, self.weight(f"{p}.attn_norm"), eps)
            q = ag.rope(self._split_heads(ag.linear(h, self.weight(f"{p}.wq")), cfg.n_heads), pos, cfg.rope_base)
            k = ag.rope(self._split_heads(ag.linear(h, self.weight(f"{p}.wk")), cfg.n_heads), pos, cfg.rope_base)
            v = self._split_heads(ag.linear(h, self.weight(f"{p}.wv")), cfg.n_heads)
            if cache is not None:
                if cache.k[i] is not None:
                    k = ag.Var(np.concatenate([cache.k[i], k.data], axis=2))
                    v = ag.Var(np.concatenate([cache.v[i], v.data], axis=2))
                cache.k[i], cache.v[i] = k.data, v.data
            att = self._merge_heads(self._attention(q, k, v, mask))
            x = ag.add(x, ag.linear(att, self.weight(f"{p}.wo")))
            h = ag.rmsnorm(x, self.weight(f"{p}.ffn_norm"), eps)
            gate = ag.silu(ag.linear(h, self.weight(f"{p}.w_gate")))
            up = ag.linear(h, self.weight(f"{p}.w_up"))
            x = ag.add(x, ag.linear(ag.mul(gate, up), self.weight(f"{p}.w_down")))
        if cache is not None:
            cache.length = start + length
        x = ag.rmsnorm(x, self.weight("final_norm"), eps)
        return ag.linear(x, self.weight("tok_emb"))

    # ------------------------------------------------------------ end to end
    def embed_inputs(self, batch: Sequence[Sequence[tuple[str, np.ndarray]]]) -> packing.PackedSequence:
        """Embed and interleave a batch of prompts sharing one segment layout.

        Each prompt is a list of (kind, payload) with payload = token ids,
        an HxWx3 uint8 image, or a float waveform at 16 kHz.
        """
        first = batch[0]
        kinds = [k for k, _ in first]
        if not any(k in ("text", "audio") for k in kinds):
            raise UnsupportedInputError("input needs at least one text or audio segment; image-only input is unsupported")
        pieces, lengths = [], []
        bsz = len(batch)
        for j, kind in enumerate(kinds):
            payloads = [prompt[j][1] for prompt in batch]
            if any(prompt[j][0] != kind for prompt in batch):
                raise ValueError("batched prompts must share one segment layout")
            if kind == "text":
                emb = self.embed_tokens(np.stack([np.asarray(t, dtype=np.int64) for t in payloads]))
            elif kind == "image":
                grids = [packing.plan_crops(*np.shape(im)[:2]) for im in payloads]
                blocks = np.concatenate([packing.extract_blocks(im, g) for im, g in zip(payloads, grids)])
                n_blk = grids[0].n_blocks
                feats = self.project(self.vision_forward(blocks), "vis")
                emb = ag.reshape(feats, (bsz, n_blk * packing.TOKENS_PER_BLOCK, self.cfg.d_model))
            elif kind == "audio":
                emb = self.project(self.audio_forward(np.stack(payloads)), "aud")
            else:
                raise ValueError(f"unknown segment kind {kind!r}")
            if kind != "text":
                begin, end = vocab.SENTINELS[kind]
                sent = self.embed_tokens(np.full((bsz, 2), 0, dtype=np.int64) + np.array([begin, end]))
                pieces.extend([ag.getitem(sent, np.s_[:, 0:1]), emb, ag.getitem(sent, np.s_[:, 1:2])])
            else:
                pieces.append(emb)
            lengths.append(emb.shape[1])
        spans, sent_pos, total = packing.layout(kinds, lengths)
        x = ag.concat(pieces, axis=1) if len(pieces) > 1 else pieces[0]
        assert x.shape[1] == total
        return packing.PackedSequence(x, spans, sent_pos)

    def forward(self, batch, cache: KVCache | None = None) -> ag.Var:
        seq = self.embed_inputs(batch)
        return self.decoder_forward(seq.embeddings, cache)

    def model_forward(self, segments: Sequence[tuple[str, np.ndarray]]) -> np.ndarray:
        """Single raw multimodal prompt -> [L, vocab] logits (no gradients)."""
        with ag.no_grad():
            return self.forward([segments]).data[0]
