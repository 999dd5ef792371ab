import numpy as np
import pytest

from egru_lm.data import EOS, UNK, Vocab, batchify, build_vocab, load_corpus, unigram_perplexity, windows


def test_build_and_encode():
    v = build_vocab("a b a\n")
    assert set(v.itos) == {"a", "b", UNK, EOS}
    np.testing.assert_array_equal(v.encode("a b a\n"), [v.stoi["a"], v.stoi["b"], v.stoi["a"], v.eos_id])


def test_literal_unk_not_duplicated():
    v = build_vocab("x <unk> y\n<unk> x\n")
    assert v.itos.count(UNK) == 1
    assert v.encode("<unk>\n")[0] == v.unk_id


def test_unseen_token_maps_to_unk():
    v = build_vocab("a b\n")
    assert v.encode("zzz\n")[0] == v.unk_id


def test_roundtrip_and_hash(tmp_path):
    v = build_vocab("the cat sat\nthe dog\n")
    assert v.decode(v.encode("the cat sat\n")) == "the cat sat\n"
    assert v.decode(v.encode("the cow\n")) == "the <unk>\n"
    v.save(tmp_path / "vocab.txt")
    w = Vocab.load(tmp_path / "vocab.txt")
    assert w == v and w.content_hash == v.content_hash
    assert build_vocab("other\n").content_hash != v.content_hash


def test_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab("\n\n")


def test_batchify_examples():
    assert batchify(np.arange(10), 2).data.shape == (2, 5)
    s = batchify(np.arange(11), 2)
    np.testing.assert_array_equal(s.data, [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]])
    np.testing.assert_array_equal(batchify(np.arange(7), 1).data[0], np.arange(7))
    with pytest.raises(ValueError):
        batchify(np.arange(3), 4)


def test_windows_example():
    s = batchify(np.array([1, 2, 3, 4]), 1)
    w = [(i[:, 0].tolist(), t[:, 0].tolist()) for i, t in windows(s, 2)]
    assert w == [([1, 2], [2, 3]), ([3], [4])]


def test_windows_reconstruct_stream():
    ids = np.arange(53)
    s = batchify(ids, 3)
    ins = np.concatenate([i for i, _ in windows(s, 7)])
    tgts = np.concatenate([t for _, t in windows(s, 7)])
    np.testing.assert_array_equal(ins.T, s.data[:, :-1])
    np.testing.assert_array_equal(tgts.T, s.data[:, 1:])
    assert list(map(lambda p: p[0].tolist(), windows(s, 7))) == [i.tolist() for i, _ in windows(s, 7)]


def test_bundled_corpus():
    c = load_corpus()
    assert 80_000 < len(c.train) + len(c.valid) + len(c.test) < 150_000
    assert c.vocab.unk_id in set(c.vocab.stoi.values())
    assert unigram_perplexity(c.train, c.valid, len(c.vocab)) < len(c.vocab)


def test_missing_data_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path)
