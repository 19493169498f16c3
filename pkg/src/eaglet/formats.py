"""Line-oriented text formats for configs, quantization plans and bench reports.

Every file is a list of ``dotted.key = value`` lines where value is a JSON
scalar; blank lines and ``#`` comments are ignored. Nesting is expressed by the
dotted key, so parse(serialize(x)) == x for the flat dicts used here.
"""
from __future__ import annotations

import json
from typing import Any

from . import quantization as qz
from .model import EagleConfig
from .training import TrainConfig


def dumps(d: dict[str, Any], header: str | None = None) -> str:
    lines = [f"# {header}"] if header else []
    for key, value in d.items():
        if "=" in key or key != key.strip() or not key:
            raise ValueError(f"invalid key {key!r}")
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError as e:
            raise ValueError(f"line {n}: bad value {value!r}: {e}") from None
    return out


def flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = list(v) if isinstance(v, tuple) else v
    return out


def unflatten(d: dict[str, Any]) -> dict:
    out: dict = {}
    for key, v in d.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


# ------------------------------------------------------------------ quant plan

def plan_to_text(plan: qz.QuantPlan) -> str:
    group_sizes = {s.group_size for s in plan.assignments.values()}
    if len(group_sizes) != 1:
        raise ValueError("plan files carry a single group size")
    d: dict[str, Any] = {
        "target_avg_bits": plan.target_avg_bits,
        "achieved_avg_bits": plan.achieved_avg_bits,
        "group_size": group_sizes.pop(),
    }
    for name in sorted(plan.assignments):
        d[f"bits.{name}"] = plan.assignments[name].bits
    for name in sorted(plan.param_counts):
        d[f"params.{name}"] = plan.param_counts[name]
    return dumps(d, "quantization plan: tensor -> bits")


def plan_from_text(text: str) -> qz.QuantPlan:
    d = loads(text)
    gs = int(d["group_size"])
    bits = {k[5:]: int(v) for k, v in d.items() if k.startswith("bits.")}
    counts = {k[7:]: int(v) for k, v in d.items() if k.startswith("params.")}
    assignments = {k: qz.QuantSpec(b, gs) for k, b in bits.items()}
    return qz.QuantPlan(assignments, float(d["target_avg_bits"]), float(d["achieved_avg_bits"]), counts)


# ------------------------------------------------------------------ model / training config

def config_to_text(model_cfg: EagleConfig, train_cfg: TrainConfig | None = None,
                   extra: dict[str, Any] | None = None) -> str:
    d = flatten(model_cfg.to_dict(), "model.")
    if train_cfg is not None:
        d.update(flatten(train_cfg.to_dict(), "train."))
    if extra:
        d.update(extra)
    return dumps(d, "model and training configuration")


def config_from_text(text: str) -> tuple[EagleConfig, TrainConfig, dict[str, Any]]:
    tree = unflatten(loads(text))
    model_cfg = EagleConfig.from_dict(tree.pop("model", {}))
    train_cfg = TrainConfig(**tree.pop("train", {}))
    return model_cfg, train_cfg, flatten(tree)


# ------------------------------------------------------------------ bench report

def bench_to_text(report) -> str:
    d = {
        "model": report.model,
        "avg_bits": report.avg_bits,
        "prefill_tokens": report.prefill_tokens,
        "decode_tokens": report.decode_tokens,
        "repetitions": report.repetitions,
        "ttft_ms.median": report.ttft_ms["median"],
        "ttft_ms.p90": report.ttft_ms["p90"],
        "tokens_per_sec.median": report.tokens_per_sec["median"],
        "tokens_per_sec.p90": report.tokens_per_sec["p90"],
    }
    return dumps(d, "bench report")


def bench_from_text(text: str) -> dict:
    return unflatten(loads(text))
