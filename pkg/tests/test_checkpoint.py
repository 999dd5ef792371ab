import hashlib
import struct
from pathlib import Path

import numpy as np
import pytest

from egru_lm.checkpoint import (Checkpoint, CheckpointVersionError, CorruptCheckpointError,
                                decode_checkpoint, encode_checkpoint, load_checkpoint,
                                save_checkpoint)
from egru_lm.lm import lm_forward, lm_loss
from egru_lm.prune import apply_prune_step
from egru_lm.train import OptimState, evaluate
from tests.conftest import small_model

GOLDEN = Path(__file__).parent / "fixtures" / "golden_v1.bin"
IDS = np.arange(80) % 12


def _pruned():
    m = small_model(dropconnect_p=0.2)
    opt = OptimState.zeros_like(m.named_tensors())
    for v in opt.v.values():
        v += 0.25
    opt.step = 3
    apply_prune_step(m, 0.6, opt)
    return m, opt


def test_roundtrip_bytes_and_eval(tmp_path):
    m, opt = _pruned()
    ck = Checkpoint(m, opt, "abc", 3, {"note": "x"})
    save_checkpoint(ck, tmp_path / "a.bin")
    back = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert evaluate(back.model, IDS, 2, 7).nll == evaluate(m, IDS, 2, 7).nll
    for n, mask in m.masks.items():
        np.testing.assert_array_equal(back.model.masks[n], mask)
    for n in opt.m:
        np.testing.assert_array_equal(back.opt.v[n], opt.v[n])
    assert back.opt.step == 3 and back.vocab_hash == "abc" and back.extra == {"note": "x"}
    assert back.model.config == m.config


def test_masked_positions_are_zero_in_payload():
    m, opt = _pruned()
    back = decode_checkpoint(encode_checkpoint(Checkpoint(m, opt)))
    tensors = back.model.named_tensors()
    for n, mask in back.model.masks.items():
        assert np.all(tensors[n][~mask] == 0.0)


def test_refuses_nonzero_pruned_weight():
    m, opt = _pruned()
    n = next(iter(m.masks))
    m.named_tensors()[n][~m.masks[n]] = 1.0
    with pytest.raises(ValueError):
        encode_checkpoint(Checkpoint(m))


def test_truncated_file(tmp_path):
    data = encode_checkpoint(Checkpoint(small_model()))
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(data[:-1])
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(data[:10])


def test_bad_magic_and_version():
    data = bytearray(encode_checkpoint(Checkpoint(small_model())))
    bumped = bytes(data[:8]) + struct.pack("<I", 2) + bytes(data[12:])
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(bumped)
    data[0:8] = b"NOTACKPT"
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.bin")


def test_no_optimizer_state():
    m = small_model(cell="lstm")
    back = decode_checkpoint(encode_checkpoint(Checkpoint(m)))
    assert back.opt is None and back.model.masks is None
    assert back.model.config.cell == "lstm"
    np.testing.assert_array_equal(lm_forward(back.model, IDS).logits, lm_forward(m, IDS).logits)


def test_golden_fixture_decodes_stably():
    raw = GOLDEN.read_bytes()
    assert hashlib.sha256(raw).hexdigest() == \
        "4d47ebb9789f383717b090f97e3f34be55d98da9a302283b21f835abd8ff4cb4"
    ck = decode_checkpoint(raw)
    m = ck.model
    assert (m.config.vocab_size, m.config.embed_dim, m.config.hidden_dims) == (7, 3, (4, 3))
    assert (m.config.dropconnect_p, m.config.dropout_p) == (0.2, 0.1)
    np.testing.assert_array_equal(
        m.embedding[0], np.array([0.003079689107835293, 0.09398487955331802, 0.02537122182548046], np.float32))
    np.testing.assert_array_equal(
        m.layers[1].theta, np.array([0.2776065170764923, 0.5277669429779053, 0.08019360154867172], np.float32))
    np.testing.assert_array_equal(
        m.layers[0].W_z[1], np.array([-0.37288862466812134, 0.25707611441612244, 0.0, 0.0,
                                      -0.4801609516143799, -0.26004287600517273, -0.4403913915157318],
                                     np.float32))
    assert {k: int(v.sum()) for k, v in m.masks.items()} == {
        "layers.0.W_u": 13, "layers.0.W_r": 13, "layers.0.W_z": 16,
        "layers.1.W_u": 11, "layers.1.W_r": 14, "layers.1.W_z": 6}
    assert (ck.opt.step, ck.train_step, ck.extra, ck.vocab_hash) == (11, 11, {"kind": "golden"}, "0" * 64)
    assert float(ck.opt.m["layers.1.W_u"].sum()) == 98.625
    assert float(ck.opt.v["embedding"].sum()) == 5.25
    assert encode_checkpoint(ck) == raw
