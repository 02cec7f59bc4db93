import numpy as np
import pytest

from gedaes.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from gedaes.model import init_params


@pytest.fixture
def saved(tmp_path, small_corpus, small_model):
    vocab = small_corpus[3]
    params = init_params(small_model, seed=3)
    path = save_checkpoint(tmp_path / "ckpt", params, small_model, vocab, seed=3)
    return path, params, small_model, vocab


def test_round_trip_is_bit_exact(saved):
    path, params, config, vocab = saved
    ckpt = load_checkpoint(path)
    assert ckpt.config == config
    assert ckpt.vocab.itos == vocab.itos
    assert ckpt.seed == 3
    for name, value in params.items():
        got = getattr(ckpt.params, name)
        assert got.dtype == np.float64
        assert got.tobytes() == value.tobytes()


def test_same_inputs_give_same_bytes(saved, tmp_path):
    path, params, config, vocab = saved
    other = save_checkpoint(tmp_path / "again", params, config, vocab, seed=3)
    for f in sorted(p.relative_to(path) for p in path.rglob("*") if p.is_file()):
        assert (path / f).read_bytes() == (other / f).read_bytes()


def test_flipped_byte_is_detected(saved):
    path = saved[0]
    blob = path / "params" / "fwd_w.f64"
    data = bytearray(blob.read_bytes())
    data[5] ^= 0x01
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="fwd_w"):
        load_checkpoint(path)


def test_truncated_tensor_is_detected(saved):
    path = saved[0]
    blob = path / "params" / "aes_w.f64"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="aes_w"):
        load_checkpoint(path)


def test_edited_vocabulary_is_detected(saved):
    path = saved[0]
    vocab_file = path / "vocab.txt"
    vocab_file.write_text(vocab_file.read_text() + "extra\n")
    with pytest.raises(CheckpointError, match="vocabulary"):
        load_checkpoint(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_unknown_format(saved):
    path = saved[0]
    manifest = path / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("gedaes-checkpoint-1", "other-9"))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(path)
