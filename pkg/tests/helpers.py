"""Small shared configs for the test-suite (kept tiny so model tests run in seconds)."""
from eaglet.model import AudioConfig, EagleConfig, EagleModel, VisionConfig


def tiny_config(**overrides) -> EagleConfig:
    kw = dict(d_model=32, n_layers=2, n_heads=2, d_ff=64, vocab_size=48, max_seq_len=400,
              vision=VisionConfig(patch_px=56, width=16, layers=1, heads=2, ff=32),
              audio=AudioConfig(width=16, layers=1, heads=2, ff=32))
    kw.update(overrides)
    return EagleConfig(**kw)


def tiny_model(seed: int = 0, **overrides) -> EagleModel:
    return EagleModel(tiny_config(**overrides), seed=seed)
