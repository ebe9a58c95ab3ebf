import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from looplab import checkpoint as ckpt_io
from looplab.data import BOS, EOS, VOCAB_SIZE, Corpus, build_stdlib_corpus, decode, decode_text, encode
from looplab.model import LoopedModel, ModelConfig
from looplab.trainer import load_model, model_checkpoint


# --- tokenizer ---------------------------------------------------------------------


def test_all_byte_values_round_trip():
    raw = bytes(range(256))
    assert decode(encode(raw)) == raw
    assert encode(raw).max() == 255 and VOCAB_SIZE == 259


@given(st.binary(max_size=300))
def test_bytes_round_trip(raw):
    assert decode(encode(raw, bos=True, eos=True)) == raw


@given(st.text(max_size=100))
def test_text_round_trip_multibyte(text):
    assert decode_text(encode(text)) == text


def test_specials_framing():
    ids = encode("hé", bos=True, eos=True)
    assert ids[0] == BOS and ids[-1] == EOS and ids.size == 5  # é is two bytes
    with pytest.raises(ValueError):
        decode([300])


# --- corpus ---------------------------------------------------------------------------


def test_corpus_split_and_hash(tmp_path):
    (tmp_path / "b.txt").write_bytes(b"second document " * 50)
    (tmp_path / "a.txt").write_bytes(b"first document " * 50)
    c = Corpus.from_path(tmp_path)
    assert c.doc_starts[0] == 0 and c.tokens[0] == BOS
    assert decode(c.tokens[: c.doc_starts[1]]).startswith(b"first")
    assert c.train.size + c.val.size == c.tokens.size
    assert abs(c.val.size / c.tokens.size - 0.1) < 0.01
    assert c.sha256() == Corpus.from_path(tmp_path).sha256()
    (tmp_path / "a.txt").write_bytes(b"changed " * 50)
    assert c.sha256() != Corpus.from_path(tmp_path).sha256()


def test_corpus_missing_path(tmp_path):
    with pytest.raises(FileNotFoundError):
        Corpus.from_path(tmp_path / "nope")


def test_batches():
    c = Corpus.from_documents([bytes(range(200)) * 5])
    x, y = c.sample_batch(4, 16, np.random.default_rng(0))
    assert x.shape == y.shape == (4, 16)
    np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    ev = c.eval_batches(3, 8, max_batches=2)
    assert len(ev) == 2 and ev[0][0].shape == (3, 8)
    again = c.eval_batches(3, 8, max_batches=2)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(ev, again))


def test_stdlib_corpus_reproducible(tmp_path):
    h1 = build_stdlib_corpus(tmp_path / "a.txt", target_bytes=50_000)
    h2 = build_stdlib_corpus(tmp_path / "b.txt", target_bytes=50_000)
    assert h1 == h2 and (tmp_path / "a.txt").stat().st_size == 50_000


# --- checkpoint -----------------------------------------------------------------------


def test_checkpoint_save_load_save_identical(tmp_path):
    m = LoopedModel(ModelConfig(d_model=16, n_heads=2, seq_len=8), seed=3)
    c = model_checkpoint(m, {"step": 7, "rho": 0.5})
    ckpt_io.save(tmp_path / "a.ckpt", c)
    loaded = ckpt_io.load(tmp_path / "a.ckpt")
    ckpt_io.save(tmp_path / "b.ckpt", loaded)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert list(loaded.arrays) == list(m.params)
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(loaded.arrays[k], v)
    model, meta = load_model(tmp_path / "a.ckpt")
    assert model.config == m.config and meta.meta["step"] == 7


@given(st.dictionaries(st.text(min_size=1, max_size=8), st.lists(st.floats(allow_nan=False), max_size=6), max_size=4))
def test_checkpoint_bytes_round_trip(arrays):
    c = ckpt_io.Checkpoint({k: np.array(v) for k, v in arrays.items()}, {"a": 1}, {"b": [1, 2]})
    blob = ckpt_io.to_bytes(c)
    assert ckpt_io.to_bytes(ckpt_io.from_bytes(blob)) == blob


def test_checkpoint_layout():
    c = ckpt_io.Checkpoint({"w": np.arange(3.0)}, {}, {})
    blob = ckpt_io.to_bytes(c)
    assert blob[:8] == b"LOOPCKPT" and blob[8] == 1
    hlen = int.from_bytes(blob[9:17], "little")
    assert blob[17 + hlen :] == np.arange(3.0).astype("<f8").tobytes()


def test_checkpoint_rejects_garbage():
    for blob in (b"", b"hello world, not a checkpoint", b"LOOPCKPT\x07" + bytes(8)):
        with pytest.raises(ckpt_io.CheckpointError):
            ckpt_io.from_bytes(blob)
    good = ckpt_io.to_bytes(ckpt_io.Checkpoint({"w": np.arange(4.0)}))
    with pytest.raises(ckpt_io.CheckpointError):
        ckpt_io.from_bytes(good[:-3])
