"""Train a toy audio model, then compare float, PTQ and QAT accuracy.

The model learns to transcribe short sequences of pure tones (one pitch per
digit). It goes through projector pre-training and full training, is then
quantized to int8, int4 and a sensitivity-driven 5.5-bit mix, and finally
fine-tuned with quantization in the loop, either on all weights or through
low-rank adapters. Each fine-tuning mode picks its learning rate on a
validation split, never on the evaluation set.

    python demos/02_quantization_study.py --seed 0 --out /tmp/study

Takes two to three minutes per seed on one core.
"""
import argparse
import json
import time
from pathlib import Path

from eaglet import checkpoint, formats, synth
from eaglet import quantization as qz
from eaglet.model import AudioConfig, EagleConfig, EagleModel, VisionConfig
from eaglet.training import (TrainConfig, evaluate, plan_for_model, qat_select_lr, quantize_model,
                             split_stage_data, train_stage1, train_stage2)

CONFIG = EagleConfig(
    d_model=16, n_layers=2, n_heads=2, d_ff=32, vocab_size=48, max_seq_len=256,
    vision=VisionConfig(patch_px=14, width=2, layers=0, heads=1, ff=4),
    audio=AudioConfig(width=8, layers=1, heads=2, ff=16))


def run(seed: int, out: Path | None) -> dict:
    t0 = time.perf_counter()
    data = synth.generate("tone_digits", range(4000))
    calib = synth.generate("tone_digits", range(4000, 4064))
    val = synth.generate("tone_digits", range(4100, 4600))
    test = synth.generate("tone_digits", synth.EVAL_SEEDS[:1000])
    s1, s2 = split_stage_data(data, 0.1, seed=seed)

    model = EagleModel(CONFIG, seed=seed)
    train_stage1(model, s1, TrainConfig(lr=3e-3, steps=100, warmup=10, seed=seed))
    train_stage2(model, s2, TrainConfig(lr=3e-3, steps=1500, warmup=10, seed=seed))
    print(f"trained in {time.perf_counter() - t0:.0f} s")

    counts = model.param_counts()
    plans = {"int8": qz.QuantPlan.uniform(counts, 8), "int4": qz.QuantPlan.uniform(counts, 4),
             "mixed": plan_for_model(model, calib, 5.5)}
    rows = {"float32": (evaluate(model, test)["accuracy"], 32.0, "")}
    for name, plan in plans.items():
        q = quantize_model(model, plan)
        rows[f"PTQ {name}"] = (evaluate(q, test)["accuracy"], plan.achieved_avg_bits, "")
        if out:
            checkpoint.save(q, out / f"ptq_{name}.eglt")
    qat_cfg = TrainConfig(steps=150, warmup=10, seed=seed)
    for name in ("int4", "mixed"):
        for mode in ("full", "lora"):
            q, lr, _ = qat_select_lr(model, plans[name], mode, s2, val, qat_cfg)
            rows[f"QAT-{mode} {name}"] = (evaluate(q, test)["accuracy"], plans[name].achieved_avg_bits, f"lr {lr:g}")
            if out:
                checkpoint.save(q, out / f"qat_{mode}_{name}.eglt")
    if out:
        checkpoint.save(model, out / "f32.eglt")
        (out / "plan_mixed.txt").write_text(formats.plan_to_text(plans["mixed"]))

    print(f"\n{'variant':<18}{'bits':>6}{'accuracy':>10}")
    for name, (acc, bits, note) in rows.items():
        print(f"{name:<18}{bits:>6.2f}{acc:>9.2f}%  {note}")
    int8 = [k for k, v in plans["mixed"].assignments.items() if v.bits == 8]
    print(f"\nmixed plan keeps {len(int8)} tensors at int8: {', '.join(sorted(int8))}")
    print(f"total {time.perf_counter() - t0:.0f} s")
    return {k: v[0] for k, v in rows.items()}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, help="directory for checkpoints and the plan")
    ap.add_argument("--json", action="store_true", help="print the accuracy table as JSON too")
    args = ap.parse_args()
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
    result = run(args.seed, args.out)
    if args.json:
        print(json.dumps(result))


if __name__ == "__main__":
    main()
