"""Checkpoint format: round trips, corruption handling, golden header layout."""

import json
import zlib

import numpy as np
import pytest

from conftest import tiny_config, tiny_model

from kvlatent.checkpoint import MAGIC, CheckpointError, load_model, save_model
from kvlatent.model import forward, init_model
from kvlatent.surgery import attach_lora


def test_round_trip_bit_exact(tmp_path):
    model = tiny_model(seed=0)
    path = str(tmp_path / "m.ckpt")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    for (n1, t1), (n2, t2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2
        assert np.array_equal(t1.data, t2.data), n1


def test_round_trip_with_lora(tmp_path):
    model = tiny_model(seed=1)
    attach_lora(model, rank=4, alpha=8.0)
    model.blocks[0].lora_gate.b.data[:] = 0.25
    path = str(tmp_path / "m.ckpt")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config.lora_rank == 4
    assert loaded.frozen_base
    assert np.array_equal(loaded.blocks[0].lora_gate.b.data,
                          model.blocks[0].lora_gate.b.data)
    tokens = np.array([1, 2, 3])
    assert np.array_equal(forward(model, tokens).data, forward(loaded, tokens).data)


def test_save_rejects_f64(tmp_path):
    model = tiny_model(dtype=np.float64)
    with pytest.raises(CheckpointError, match="float32"):
        save_model(model, str(tmp_path / "m.ckpt"))


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    model = tiny_model()
    save_model(model, str(path))
    blob = path.read_bytes().replace(MAGIC, b"KVLCKPT9", 1)
    path.write_bytes(blob)
    with pytest.raises(CheckpointError, match="magic|version"):
        load_model(str(path))


def test_truncated_payload(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(tiny_model(), str(path))
    blob = path.read_bytes()
    path.write_bytes(blob[:-20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_model(str(path))


def test_checksum_failure(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(tiny_model(), str(path))
    blob = bytearray(path.read_bytes())
    blob[-8] ^= 0xFF  # flip payload bits, header untouched
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_model(str(path))


def test_corrupted_directory_entry_names_tensor(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(tiny_model(), str(path))
    text = path.read_bytes()
    # break the offset of one known tensor so it no longer fits the payload
    head, _, tail = text.partition(b"tensor blocks.1.ffn_up f4 ")
    fields = tail.split(b" ", 3)
    fields[1] = b"999999999"
    path.write_bytes(head + b"tensor blocks.1.ffn_up f4 " + b" ".join(fields))
    with pytest.raises(CheckpointError, match="blocks.1.ffn_up"):
        load_model(str(path))


def test_missing_tensor_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(tiny_model(), str(path))
    lines = path.read_bytes().split(b"\n")
    dropped = [l for l in lines if not l.startswith(b"tensor embed ")]
    path.write_bytes(b"\n".join(dropped))
    with pytest.raises(CheckpointError, match="embed"):
        load_model(str(path))


def test_golden_header_layout(tmp_path):
    """The documented byte layout, checked field by field against a real file."""
    config = tiny_config(d_qk=4, d_vo=4, n_heads=1, n_kv_heads=1, d_model=4,
                         n_layers=1, vocab=5, d_ffn=6, max_seq=8)
    model = init_model(config, seed=0)
    path = tmp_path / "m.ckpt"
    save_model(model, str(path))
    blob = path.read_bytes()

    lines = blob.split(b"\n")
    assert lines[0] == b"KVLCKPT1"
    assert lines[1].startswith(b"config {")
    cfg = json.loads(lines[1][len(b"config "):])
    assert cfg["vocab"] == 5 and cfg["d_qk"] == 4 and cfg["n_layers"] == 1
    assert list(cfg) == sorted(cfg)  # keys sorted for determinism

    # directory: name dtype shape offset nbytes, offsets contiguous
    entries = [l.split() for l in lines[2:] if l.startswith(b"tensor ")]
    assert entries[0][1:] == [b"embed", b"f4", b"5,4", b"0", b"80"]
    offset = 0
    for e in entries:
        assert e[2] == b"f4"
        nbytes = int(e[5])
        assert int(e[4]) == offset
        assert nbytes == 4 * np.prod([int(d) for d in e[3].split(b",")])
        offset += nbytes

    end_line = next(l for l in lines if l.startswith(b"end "))
    total, crc = end_line.split()[1:]
    payload = blob[blob.index(end_line) + len(end_line) + 1:]
    assert len(payload) == int(total) == offset
    assert f"{zlib.crc32(payload):08x}".encode() == crc
    # first tensor bytes are the embedding rows, little-endian f4
    emb = np.frombuffer(payload[:80], dtype="<f4").reshape(5, 4)
    assert np.array_equal(emb, model.embed.data)


def test_save_is_deterministic(tmp_path):
    model = tiny_model(seed=2)
    p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_model(model, p1)
    save_model(model, p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()
