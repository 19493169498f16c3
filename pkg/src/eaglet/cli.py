"""``eaglet`` command line: synth | train | plan | quantize | qat | generate | bench | inspect.

Failures exit non-zero with one JSON line on stderr:
``{"error": "<ExceptionType>", "message": "..."}``. Output files are written to a
temporary name and renamed into place, so a failed command never leaves a
partial file behind.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import wave

import numpy as np

from . import checkpoint, formats, synth, training, vocab
from . import quantization as qz
from .model import EagleModel
from .runtime import GenerationConfig, Workload, bench, generate


def _write_text(path: str, text: str) -> None:
    checkpoint.atomic_write(path, text.encode("utf-8"))


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8") as f:
        return f.read()


def load_image(spec: str) -> np.ndarray:
    """``file.png`` or ``file.rgb:HEIGHTxWIDTH`` (raw interleaved RGB bytes)."""
    if spec.lower().endswith(".png"):
        from PIL import Image

        with Image.open(spec) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    path, sep, dims = spec.rpartition(":")
    if not sep or "x" not in dims:
        raise ValueError(f"raw image {spec!r} needs explicit dims: FILE:HEIGHTxWIDTH")
    h, w = (int(v) for v in dims.lower().split("x"))
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != h * w * 3:
        raise ValueError(f"raw image {path!r} has {raw.size} bytes, expected {h * w * 3}")
    return raw.reshape(h, w, 3)


def load_audio(path: str) -> np.ndarray:
    """16-bit PCM mono 16 kHz, either a .wav file or headerless little-endian samples."""
    if path.lower().endswith(".wav"):
        with wave.open(path, "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2 or w.getframerate() != 16000:
                raise ValueError(f"{path}: expected 16-bit mono 16 kHz audio")
            data = w.readframes(w.getnframes())
    else:
        with open(path, "rb") as f:
            data = f.read()
    return (np.frombuffer(data, dtype="<i2") / 32768.0).astype(np.float32)


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> None:
    samples = synth.generate(args.task, range(args.seed, args.seed + args.count))
    synth.write_dataset(args.out, samples)
    print(json.dumps({"samples": len(samples), "task": args.task, "out": args.out}))


def cmd_train(args) -> None:
    model_cfg, train_cfg, extra = formats.config_from_text(_read_text(args.config))
    data = synth.read_dataset(args.data)
    stage1, rest = training.split_stage_data(data, float(extra.get("stage1_frac", 0.1)), train_cfg.seed)
    log = open(args.log, "w") if args.log else None
    try:
        if args.stage == 1:
            model = checkpoint.load(args.init) if args.init else EagleModel(model_cfg, seed=train_cfg.seed)
            before = training.weights_digest(model, [n for n in model.params if not n.startswith("proj_")])
            training.train_stage1(model, stage1, train_cfg, log)
            after = training.weights_digest(model, [n for n in model.params if not n.startswith("proj_")])
            if before != after:
                raise RuntimeError("stage 1 modified frozen weights")
        else:
            if not args.init:
                raise ValueError("stage 2 needs --init with the stage-1 checkpoint")
            model = checkpoint.load(args.init)
            training.train_stage2(model, rest, train_cfg, log)
    finally:
        if log:
            log.close()
    size = checkpoint.save(model, args.out)
    print(json.dumps({"stage": args.stage, "out": args.out, "bytes": size}))


def cmd_plan(args) -> None:
    model = checkpoint.load(args.ckpt)
    calib = synth.read_dataset(args.calib)[:args.calib_samples]
    plan = training.plan_for_model(model, calib, args.target_bits, group_size=args.group_size)
    _write_text(args.out, formats.plan_to_text(plan))
    print(json.dumps({"target_avg_bits": plan.target_avg_bits, "achieved_avg_bits": plan.achieved_avg_bits,
                      "fraction_int8": plan.fraction_at(8), "out": args.out}))


def cmd_quantize(args) -> None:
    model = checkpoint.load(args.ckpt)
    plan = formats.plan_from_text(_read_text(args.plan))
    q = training.quantize_model(model, plan)
    size = checkpoint.save(q, args.out)
    est = qz.estimate_size_bytes(sum(model.param_counts().values()), plan.achieved_avg_bits,
                                 next(iter(plan.assignments.values())).group_size)
    print(json.dumps({"achieved_avg_bits": plan.achieved_avg_bits, "file_bytes": size,
                      "estimated_bytes": est, "ratio": size / est, "out": args.out}))


def cmd_qat(args) -> None:
    model = checkpoint.load(args.ckpt)
    plan = formats.plan_from_text(_read_text(args.plan))
    data = synth.read_dataset(args.data)
    cfg = training.TrainConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=args.seed)
    if args.config:
        cfg = formats.config_from_text(_read_text(args.config))[1]
    log = open(args.log, "w") if args.log else None
    try:
        q = training.qat_finetune(model, plan, args.mode, data, cfg, log=log)
    finally:
        if log:
            log.close()
    size = checkpoint.save(q, args.out)
    print(json.dumps({"mode": args.mode, "avg_bits": q.avg_bits(), "bytes": size, "out": args.out}))


def cmd_generate(args) -> None:
    model = checkpoint.load(args.ckpt)
    segments: list[tuple[str, np.ndarray]] = []
    text = vocab.encode(args.prompt) if args.prompt else np.zeros(0, dtype=np.int64)
    if text.size or args.audio:
        segments.append(("text", np.array([vocab.BOS], dtype=np.int64)))
    segments += [("image", load_image(p)) for p in args.image]
    segments += [("audio", load_audio(p)) for p in args.audio]
    if text.size:
        segments.append(("text", text))
    cfg = GenerationConfig(max_new_tokens=args.max_tokens, temperature=args.temperature,
                           top_k=args.top_k, seed=args.seed)
    out = sys.stdout

    def emit(tok: int) -> None:
        out.write(vocab.decode([tok]) + " ")
        out.flush()

    _, m = generate(model, segments, cfg, on_token=emit)
    out.write("\n")
    print(json.dumps({"ttft_ms": m.ttft_ms, "tokens_per_sec": m.tokens_per_sec,
                      "prefill_tokens": m.prefill_tokens, "decode_tokens": m.decode_tokens}))


def cmd_bench(args) -> None:
    model = checkpoint.load(args.ckpt)
    w = Workload(prompt_tokens=args.prompt_tokens, decode_tokens=args.decode_tokens, seed=args.seed)
    report = bench(model, w, args.reps, name=os.path.basename(args.ckpt))
    text = formats.bench_to_text(report)
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)


def cmd_inspect(args) -> None:
    info = checkpoint.inspect(args.ckpt)
    print(f"{'name':<28} {'dtype':<5} {'shape':<16} {'bits':>4} {'bytes':>10}")
    for row in info["tensors"]:
        shape = "x".join(str(s) for s in row["shape"])
        print(f"{row['name']:<28} {row['dtype']:<5} {shape:<16} {row['bits']:>4} {row['bytes']:>10}")
    print(json.dumps({k: info[k] for k in ("total_params", "avg_bits", "predicted_bytes", "actual_bytes")}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eaglet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset file")
    s.add_argument("--task", choices=synth.TASKS, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="stage 1 (projectors only) or stage 2 (all modules)")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    s.add_argument("--log", help="write per-step JSON lines here")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("plan", help="build a mixed-precision plan from calibration data")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--target-bits", type=float, default=5.5)
    s.add_argument("--calib-samples", type=int, default=256)
    s.add_argument("--group-size", type=int, default=qz.DEFAULT_GROUP_SIZE)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_plan)

    s = sub.add_parser("quantize", help="post-training quantization with a plan")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("qat", help="quantization-aware fine-tuning")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--mode", choices=("full", "lora"), required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="take training settings from this config file")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.set_defaults(fn=cmd_qat)

    s = sub.add_parser("generate", help="stream generated tokens")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", default="")
    s.add_argument("--image", action="append", default=[], help="FILE.png or FILE:HEIGHTxWIDTH (raw RGB)")
    s.add_argument("--audio", action="append", default=[], help=".wav or raw s16le, mono 16 kHz")
    s.add_argument("--max-tokens", type=int, default=16)
    s.add_argument("--temperature", type=float, default=0.0)
    s.add_argument("--top-k", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("bench", help="measure TTFT and decode throughput")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt-tokens", type=int, default=32)
    s.add_argument("--decode-tokens", type=int, default=32)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("inspect", help="print the tensor table of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one parseable line
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
