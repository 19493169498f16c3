"""How many decoder positions does a prompt cost?

Images are cut into 336 px blocks worth 128 tokens each, audio costs a fixed
3.125 tokens per second, and every non-text span is wrapped in two sentinels.
This script prints those budgets and then checks them against a real
interleaved prompt run through an untrained toy model.

    python demos/01_token_budgets.py
"""
from eaglet import packing, synth, vocab
from eaglet import autograd as ag
from eaglet.model import AudioConfig, EagleConfig, EagleModel, VisionConfig


def main() -> None:
    print("image size -> crop grid -> tokens")
    for h, w in [(336, 336), (400, 700), (1080, 1920), (50, 3000)]:
        grid = packing.plan_crops(h, w)
        print(f"  {h:>5} x {w:<5} {grid.rows} x {grid.cols} blocks  {packing.image_token_count(h, w):>5} tokens")

    print("\naudio seconds -> tokens (rate)")
    for d in [0.5, 2.0, 2.25, 3.0, 10.0, 60.0]:
        n = packing.audio_token_count(d)
        print(f"  {d:>6.2f} s  {n:>4} tokens  {n / d:.3f}/s")

    cfg = EagleConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64, vocab_size=64, max_seq_len=2048,
                      vision=VisionConfig(patch_px=28, width=16, layers=1, heads=2, ff=32),
                      audio=AudioConfig(width=16, layers=1, heads=2, ff=32))
    model = EagleModel(cfg, seed=0)
    sample = synth.gen_interleaved(3)
    with ag.no_grad():
        seq = model.embed_inputs([sample.segments])
    print(f"\ninterleaved sample {sample.seed}: {seq.length} positions")
    for span in seq.spans:
        print(f"  {span.kind:<5} start {span.start:>4} length {span.length}")
    text = sum(len(p) for k, p in sample.segments if k == "text")
    expected = packing.sequence_length(text, 1, packing.audio_tokens_for_samples(sample.audio.size), 1, 1)
    print(f"  budget formula says {expected}; answer would be '{vocab.decode(sample.target)}'")
    assert expected == seq.length


if __name__ == "__main__":
    main()
