"""Losses, the two-stage schedule, quantization-aware fine-tuning and gradient checks."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from . import autograd as ag
from . import quantization as qz
from . import vocab
from .model import ALWAYS_INT8, EagleModel, projector_names
from .synth import Sample


@dataclass
class TrainConfig:
    lr: float = 2e-3
    batch_size: int = 16
    steps: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    warmup: int = 10
    min_lr_frac: float = 0.1

    def lr_at(self, step: int) -> float:
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(1, self.steps - self.warmup)
        frac = min(1.0, (step - self.warmup) / span)
        return self.lr * (self.min_lr_frac + (1 - self.min_lr_frac) * 0.5 * (1 + math.cos(math.pi * frac)))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ loss

def _prompts(samples: Sequence[Sample]) -> list:
    return [s.segments + [("text", np.append(s.target, vocab.EOS))] for s in samples]


def batch_loss(model: EagleModel, samples: Sequence[Sample]) -> tuple[ag.Var, np.ndarray, np.ndarray]:
    """Next-token cross-entropy on the answer (+ <eos>) positions only.

    Returns (loss, predicted ids, target ids) for the scored positions; all
    samples must share one layout.
    """
    seq = model.embed_inputs(_prompts(samples))
    logits = model.decoder_forward(seq.embeddings)
    span = seq.spans[-1]
    lo, hi = span.start - 1, span.start + span.length - 1
    scored = ag.getitem(logits, np.s_[:, lo:hi, :])
    targets = np.stack([np.append(s.target, vocab.EOS) for s in samples])
    loss = ag.cross_entropy(scored, targets, np.ones(targets.shape))
    return loss, scored.data.argmax(axis=-1), targets


def bucket(samples: Sequence[Sample]) -> dict[tuple, list[int]]:
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.signature(), []).append(i)
    return groups


def evaluate(model: EagleModel, samples: Sequence[Sample], batch_size: int = 32) -> dict:
    """Mean token loss and answer accuracy (answer tokens only, <eos> excluded)."""
    total_loss = total_tok = correct = answered = 0.0
    exact = 0
    with ag.no_grad():
        for key in sorted(bucket(samples), key=repr):
            idx = bucket(samples)[key]
            for lo in range(0, len(idx), batch_size):
                chunk = [samples[i] for i in idx[lo:lo + batch_size]]
                loss, pred, tgt = batch_loss(model, chunk)
                n_tok = tgt.size
                total_loss += float(loss.data) * n_tok
                total_tok += n_tok
                hit = pred[:, :-1] == tgt[:, :-1]
                correct += hit.sum()
                answered += hit.size
                exact += int(hit.all(axis=1).sum())
    return {"loss": total_loss / total_tok, "accuracy": 100.0 * correct / answered,
            "exact_match": 100.0 * exact / len(samples), "samples": len(samples)}


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, ag.Var], lr: float) -> None:
        c = self.cfg
        self.t += 1
        b1t = 1 - c.beta1 ** self.t
        b2t = 1 - c.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / b1t) / (np.sqrt(v / b2t) + c.eps)
            if c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def clip_grads(params: dict[str, ag.Var], max_norm: float) -> float:
    # fixed summation order (sorted names) keeps the norm reproducible
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * s).astype(p.grad.dtype)
    return norm


def train(model: EagleModel, samples: Sequence[Sample], cfg: TrainConfig,
          trainable: dict[str, ag.Var], log: TextIO | None = None,
          on_step: Callable[[int, float], None] | None = None) -> list[float]:
    """Generic loop: only Vars in ``trainable`` are updated. Returns per-step losses."""
    if not samples:
        raise ValueError("no training samples")
    frozen = [v for v in model.params.values()]
    for v in frozen:
        v.requires_grad = False
    for v in trainable.values():
        v.requires_grad = True
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    groups = bucket(samples)
    keys = sorted(groups, key=repr)
    sizes = np.array([len(groups[k]) for k in keys], dtype=np.float64)
    opt = Adam(cfg)
    losses = []
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            key = keys[rng.choice(len(keys), p=sizes / sizes.sum())]
            idx = groups[key]
            pick = rng.choice(len(idx), size=min(cfg.batch_size, len(idx)), replace=False)
            batch = [samples[idx[i]] for i in sorted(pick)]
            for v in trainable.values():
                v.grad = None
            loss, _, _ = batch_loss(model, batch)
            loss.backward()
            clip_grads(trainable, cfg.clip_norm)
            lr = cfg.lr_at(step)
            opt.step(trainable, lr)
            value = float(loss.data)
            losses.append(value)
            if log is not None:
                log.write(json.dumps({"step": step, "loss": value, "lr": lr,
                                      "wall_time": round(time.perf_counter() - t0, 4)}) + "\n")
            if on_step is not None:
                on_step(step, value)
    finally:
        for v in trainable.values():
            v.requires_grad = False
            v.grad = None
    return losses


# ------------------------------------------------------------------ two-stage schedule

def split_stage_data(samples: Sequence[Sample], stage1_frac: float = 0.1,
                     seed: int = 0) -> tuple[list[Sample], list[Sample]]:
    """Random ``stage1_frac`` subset for projector pre-training; the rest for stage 2."""
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(samples))
    cut = max(1, int(round(stage1_frac * len(samples))))
    return [samples[i] for i in sorted(order[:cut])], [samples[i] for i in sorted(order[cut:])]


def weights_digest(model: EagleModel, names: Iterable[str]) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        h.update(n.encode())
        h.update(np.ascontiguousarray(model.params[n].data).tobytes())
    return h.hexdigest()


def train_stage1(model: EagleModel, samples: Sequence[Sample], cfg: TrainConfig,
                 log: TextIO | None = None) -> EagleModel:
    """Projector pre-training: towers and decoder stay frozen."""
    names = projector_names(model.params)
    train(model, samples, cfg, {n: model.params[n] for n in names}, log)
    return model


def train_stage2(model: EagleModel, samples: Sequence[Sample], cfg: TrainConfig,
                 log: TextIO | None = None) -> EagleModel:
    """Full-parameter training of every module."""
    train(model, samples, cfg, dict(model.params), log)
    return model



# ------------------------------------------------------------------ quantization

def quantize_model(model: EagleModel, plan: qz.QuantPlan) -> EagleModel:
    """Post-training quantization: every planned tensor is stored packed."""
    _check_plan(model, plan)
    out = model.copy()
    out.qat = {}
    out.packed = {n: qz.quantize(model.params[n].data, spec) for n, spec in plan.assignments.items()}
    out.quant_meta = {"target_avg_bits": plan.target_avg_bits, "achieved_avg_bits": plan.achieved_avg_bits}
    return out


def fake_quant_model(model: EagleModel, plan: qz.QuantPlan) -> EagleModel:
    """Plain float model whose weights are replaced by their fake-quantized values."""
    _check_plan(model, plan)
    out = model.copy()
    out.packed, out.qat = {}, {}
    for n, spec in plan.assignments.items():
        out.params[n].data = qz.fake_quant(model.params[n].data, spec)
    return out


def _check_plan(model: EagleModel, plan: qz.QuantPlan) -> None:
    names = set(model.params)
    planned = set(plan.assignments)
    if names != planned:
        raise ValueError(f"plan/model mismatch: missing {sorted(names - planned)}, "
                         f"unknown {sorted(planned - names)}")


def sensitivity_report(model: EagleModel, calib: Sequence[Sample], bits: int = 4,
                       group_size: int = qz.DEFAULT_GROUP_SIZE, batch_size: int = 32) -> qz.SensitivityReport:
    """Calibration-loss increase when each tensor alone is quantized to ``bits``."""
    base = evaluate(model, calib, batch_size)["loss"]
    spec = qz.QuantSpec(bits, group_size)
    deltas = {}
    probe = model.copy()
    for name in sorted(model.params):
        probe.qat = {name: spec}
        deltas[name] = evaluate(probe, calib, batch_size)["loss"] - base
    return qz.SensitivityReport(deltas, base)


def plan_for_model(model: EagleModel, calib: Sequence[Sample], target_avg_bits: float = 5.5,
                   report: qz.SensitivityReport | None = None,
                   group_size: int = qz.DEFAULT_GROUP_SIZE) -> qz.QuantPlan:
    report = report or sensitivity_report(model, calib, group_size=group_size)
    return qz.build_mixed_plan(report, model.param_counts(), target_avg_bits,
                               always_int8=ALWAYS_INT8, group_size=group_size)


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = ("wq", "wv")


def lora_targets(model: EagleModel, lcfg: LoraConfig) -> list[str]:
    return [f"dec.{i}.{t}" for i in range(model.cfg.n_layers) for t in lcfg.targets]


def attach_lora(model: EagleModel, lcfg: LoraConfig, seed: int = 0) -> None:
    rng = np.random.Generator(np.random.Philox(seed))
    model.lora = {}
    for name in lora_targets(model, lcfg):
        out_f, in_f = model.params[name].shape
        a = rng.normal(0.0, 1.0 / math.sqrt(out_f), (out_f, lcfg.rank)).astype(np.float32)
        b = np.zeros((lcfg.rank, in_f), dtype=np.float32)
        model.lora[name] = (ag.Var(a), ag.Var(b))
    model.lora_scale = lcfg.alpha / lcfg.rank
    model.quant_meta["lora"] = {"rank": lcfg.rank, "alpha": lcfg.alpha, "targets": list(lcfg.targets)}


def qat_finetune(model: EagleModel, plan: qz.QuantPlan, mode: str, samples: Sequence[Sample],
                 cfg: TrainConfig, lora: LoraConfig | None = None,
                 log: TextIO | None = None) -> EagleModel:
    """Quantization-aware fine-tuning; returns the exported quantized model.

    ``full``: every weight runs through fake quantization (scales recomputed
    each step) and the latent float weights learn through the clipped STE; the
    export packs the final latent weights.
    ``lora``: the quantized base is frozen and only low-rank adapters on the
    decoder attention query/value matrices learn; the export is the packed base
    plus float adapters.
    """
    _check_plan(model, plan)
    work = model.copy()
    work.packed, work.lora = {}, {}
    if mode == "full":
        work.qat = dict(plan.assignments)
        train(work, samples, cfg, dict(work.params), log)
        return quantize_model(work, plan)
    if mode == "lora":
        base = quantize_model(work, plan)
        attach_lora(base, lora or LoraConfig(), cfg.seed)
        params = {f"{n}.lora_{ab}": v for n, pair in base.lora.items() for ab, v in zip("ab", pair)}
        train(base, samples, cfg, params, log)
        return base
    raise ValueError(f"mode must be 'full' or 'lora', got {mode!r}")


def qat_select_lr(model: EagleModel, plan: qz.QuantPlan, mode: str, samples: Sequence[Sample],
                  val: Sequence[Sample], cfg: TrainConfig, lrs: Sequence[float] = (3e-4, 1e-3, 3e-3),
                  lora: LoraConfig | None = None) -> tuple[EagleModel, float, float]:
    """Run ``qat_finetune`` once per learning rate and keep the best on ``val``.

    Returns (exported model, chosen lr, validation accuracy). Ties go to the
    earlier entry of ``lrs``.
    """
    best: tuple[EagleModel, float, float] | None = None
    for lr in lrs:
        q = qat_finetune(model, plan, mode, samples, replace(cfg, lr=lr), lora)
        acc = evaluate(q, val)["accuracy"]
        if best is None or acc > best[2]:
            best = (q, lr, acc)
    return best


# ------------------------------------------------------------------ gradient checking

def numeric_grad(f: Callable[[], float], arr: np.ndarray, index: tuple, h: float = 1e-4) -> float:
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def gradcheck(fn: Callable[[dict[str, ag.Var]], ag.Var], inputs: dict[str, np.ndarray],
              h: float = 1e-4, max_entries: int | None = None, seed: int = 0) -> float:
    """Worst per-tensor relative error between reverse-mode and central-difference
    gradients, measured as ||analytic - numeric|| / max(||analytic||, ||numeric||).

    Inputs are promoted to float64. ``max_entries`` samples that many entries per
    tensor instead of checking all of them.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    vars_ = {k: ag.Var(a, requires_grad=True) for k, a in arrays.items()}
    out = fn(vars_)
    out.backward()
    rng = np.random.Generator(np.random.Philox(seed))

    def value() -> float:
        with ag.no_grad():
            return float(fn({k: ag.Var(a) for k, a in arrays.items()}).data)

    worst = 0.0
    for name, arr in arrays.items():
        analytic = vars_[name].grad if vars_[name].grad is not None else np.zeros_like(arr)
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        idxs = [np.unravel_index(i, arr.shape) for i in flat]
        num = np.array([numeric_grad(value, arr, ix, h) for ix in idxs])
        ana = np.array([analytic[ix] for ix in idxs])
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def model_gradcheck(model: EagleModel, samples: Sequence[Sample], h: float = 1e-4,
                    max_entries: int = 6, seed: int = 0) -> dict[str, float]:
    """Per-tensor finite-difference check of the full model loss in float64."""
    m64 = model.astype(np.float64)
    names = sorted(m64.params)
    for n in names:
        m64.params[n].requires_grad = True
        m64.params[n].grad = None
    loss, _, _ = batch_loss(m64, samples)
    loss.backward()
    rng = np.random.Generator(np.random.Philox(seed))
    errors = {}

    def value() -> float:
        with ag.no_grad():
            return float(batch_loss(m64, samples)[0].data)

    for n in names:
        p = m64.params[n]
        arr = p.data
        analytic = p.grad
        picks = rng.choice(arr.size, size=min(max_entries, arr.size), replace=False)
        idxs = [np.unravel_index(i, arr.shape) for i in np.sort(picks)]
        num = np.array([numeric_grad(value, arr, ix, h) for ix in idxs])
        ana = np.array([analytic[ix] for ix in idxs])
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        errors[n] = float(np.linalg.norm(ana - num) / denom)
    for n in names:
        m64.params[n].requires_grad = False
    return errors
