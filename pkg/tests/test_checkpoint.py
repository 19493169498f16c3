import struct

import numpy as np
import pytest

from eaglet import checkpoint, quantization as qz, synth
from eaglet.checkpoint import CheckpointFormatError
from eaglet.training import LoraConfig, attach_lora, quantize_model

from helpers import tiny_model


def mixed_plan(model):
    counts = model.param_counts()
    assignments = {k: qz.QuantSpec(8 if i % 3 == 0 else 4) for i, k in enumerate(sorted(counts))}
    return qz.QuantPlan(assignments, 5.5, qz.average_bits(assignments, counts), counts)


def test_float_roundtrip_is_bit_exact(tmp_path):
    m = tiny_model(seed=2)
    path = tmp_path / "m.eglt"
    size = checkpoint.save(m, path)
    assert size == path.stat().st_size
    back = checkpoint.load(path)
    assert back.cfg == m.cfg
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    assert checkpoint.to_bytes(back) == path.read_bytes()


def test_quantized_roundtrip_preserves_logits(tmp_path):
    q = quantize_model(tiny_model(), mixed_plan(tiny_model()))
    path = tmp_path / "q.eglt"
    checkpoint.save(q, path)
    back = checkpoint.load(path)
    seg = synth.gen_tone_digits(1).segments
    assert np.array_equal(back.model_forward(seg), q.model_forward(seg))
    for k, t in q.packed.items():
        assert np.array_equal(back.packed[k].packed, t.packed)
        assert np.array_equal(back.packed[k].scales, t.scales)


def test_lora_adapters_survive_roundtrip(tmp_path):
    m = tiny_model()
    base = quantize_model(m, qz.QuantPlan.uniform(m.param_counts(), 4))
    attach_lora(base, LoraConfig(rank=2))
    for a, b in base.lora.values():
        b.data = np.random.default_rng(0).standard_normal(b.shape).astype(np.float32)
    path = tmp_path / "l.eglt"
    checkpoint.save(base, path)
    back = checkpoint.load(path)
    assert back.lora_scale == base.lora_scale and set(back.lora) == set(base.lora)
    seg = synth.gen_tone_digits(2).segments
    assert np.array_equal(back.model_forward(seg), base.model_forward(seg))


def test_layout_alignment(tmp_path):
    data = checkpoint.to_bytes(quantize_model(tiny_model(), mixed_plan(tiny_model())))
    _, entries = checkpoint.read_header(data)
    assert all(e.data_offset % 64 == 0 for e in entries)
    assert data[:4] == b"EGLT" and struct.unpack_from("<I", data, 4)[0] == 1


def test_bad_magic_and_version():
    data = bytearray(checkpoint.to_bytes(tiny_model()))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointFormatError) as e:
        checkpoint.from_bytes(bad)
    assert e.value.offset == 0
    data[4] = 9
    with pytest.raises(CheckpointFormatError) as e:
        checkpoint.from_bytes(bytes(data))
    assert e.value.offset == 4


@pytest.mark.parametrize("cut", [3, 20, 200, -1])
def test_truncation_reports_offset(cut):
    data = checkpoint.to_bytes(tiny_model())
    with pytest.raises(CheckpointFormatError, match="offset"):
        checkpoint.from_bytes(data[:cut])


def test_data_len_mismatch_detected():
    data = bytearray(checkpoint.to_bytes(tiny_model()))
    _, entries = checkpoint.read_header(bytes(data))
    # corrupt the first entry's data_len field (last 8 bytes of its table record)
    cfg_len = struct.unpack_from("<Q", data, 8)[0]
    off = 16 + cfg_len + 4
    nlen = struct.unpack_from("<H", data, off)[0]
    ndim = data[off + 2 + nlen + 1]
    len_field = off + 2 + nlen + 2 + 8 * ndim + 4 + 8
    struct.pack_into("<Q", data, len_field, entries[0].data_len + 4)
    with pytest.raises(CheckpointFormatError, match="data_len"):
        checkpoint.from_bytes(bytes(data))


def test_inspect_reports_bits_and_sizes(tmp_path):
    m = tiny_model()
    checkpoint.save(m, tmp_path / "f.eglt")
    info = checkpoint.inspect(tmp_path / "f.eglt")
    assert info["avg_bits"] == 32.0
    assert info["total_params"] == sum(m.param_counts().values())
    q = quantize_model(m, mixed_plan(m))
    checkpoint.save(q, tmp_path / "q.eglt")
    info = checkpoint.inspect(tmp_path / "q.eglt")
    assert info["avg_bits"] == pytest.approx(q.avg_bits())
    assert {r["dtype"] for r in info["tensors"]} == {"int8", "int4"}


def test_failed_write_leaves_no_file(tmp_path, monkeypatch):
    path = tmp_path / "out.eglt"

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(checkpoint.os, "replace", boom)
    with pytest.raises(OSError):
        checkpoint.save(tiny_model(), path)
    assert list(tmp_path.iterdir()) == []
