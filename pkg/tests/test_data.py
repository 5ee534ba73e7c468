import numpy as np
import pytest
import torch
from PIL import Image

from latentface.data import load_corpus, load_image, load_pgm, plan_batches, save_pgm, save_png, to_uint8
from latentface.errors import DataError


def _write_rgb(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8)).save(path)


def test_load_image_exact_v_over_255(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(64, 64, 3))
    _write_rgb(tmp_path / "a.png", arr)
    img = load_image(tmp_path / "a.png")
    assert img.shape == (3, 64, 64) and img.dtype == torch.float32
    expect = torch.from_numpy(arr.transpose(2, 0, 1).astype(np.float32)) / 255.0
    assert torch.equal(img, expect)


def test_load_image_resizes_constant(tmp_path):
    _write_rgb(tmp_path / "big.png", np.full((128, 128, 3), 77))
    img = load_image(tmp_path / "big.png")
    assert img.shape == (3, 64, 64)
    assert torch.allclose(img, torch.full_like(img, 77 / 255.0), atol=1e-6)


def test_load_image_gray_replicated(tmp_path):
    Image.fromarray(np.full((64, 64), 10, dtype=np.uint8), mode="L").save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png")
    assert img.shape == (3, 64, 64)
    assert torch.equal(img[0], img[2])


def test_corrupt_image_raises(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    with pytest.raises(DataError):
        load_image(tmp_path / "bad.png")


def test_to_uint8_rounds_half_even_and_clamps():
    # 0.5/255 and 1.5/255 scale to exactly 0.5 and 1.5
    vals = np.array([-0.3, 0.5 / 255, 1.5 / 255, 1.7])
    assert to_uint8(vals).tolist() == [0, 0, 2, 255]


def test_png_roundtrip(tmp_path):
    q = torch.from_numpy(np.random.default_rng(1).integers(0, 256, (3, 64, 64)).astype(np.float32) / 255)
    save_png(q, tmp_path / "x.png")
    assert torch.equal(load_image(tmp_path / "x.png"), q)


def test_pgm_roundtrip_within_quantisation(tmp_path):
    m = torch.rand(64, 64, dtype=torch.float64)
    save_pgm(m, tmp_path / "d.pgm")
    back = load_pgm(tmp_path / "d.pgm")
    assert np.abs(back - m.numpy()).max() <= 0.5 / 255 + 1e-12


def test_plan_batches_bijection_and_short_batch():
    plan = plan_batches(10, 16, seed=3, epoch=1)
    assert len(plan) == 1 and sorted(plan[0].tolist()) == list(range(10))
    plan = plan_batches(37, 8, seed=3, epoch=2)
    assert [len(b) for b in plan] == [8, 8, 8, 8, 5]
    assert sorted(np.concatenate(plan).tolist()) == list(range(37))


def test_plan_batches_deterministic():
    a = plan_batches(50, 16, 9, 4)
    b = plan_batches(50, 16, 9, 4)
    c = plan_batches(50, 16, 9, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_plan_batches_empty_raises():
    with pytest.raises(ValueError):
        plan_batches(0, 4, 0, 1)


def test_corpus_index_sorted_and_labelled(tmp_path):
    for split, ident, frame in [("train", "0002", "001"), ("eval", "0001", "000"), ("train", "0002", "000")]:
        _write_rgb(tmp_path / split / ident / f"{frame}.png", np.zeros((64, 64, 3)))
    (tmp_path / "labels.csv").write_text("split,identity,frame,class\ntrain,2,1,3\neval,0001,000,1\ntrain,0002,000,0\n")
    corpus = load_corpus(tmp_path)
    rels = [corpus.rel(e) for e in corpus.entries]
    assert rels == sorted(rels)
    assert [e.split for e in corpus.entries] == ["eval", "train", "train"]
    assert corpus.label_for(corpus.entries[2])["class"] == "3"
    assert set(corpus.sequences("train")) == {"0002"}
    assert corpus.load().shape == (3, 3, 64, 64)


def test_corpus_empty_raises(tmp_path):
    with pytest.raises(DataError):
        load_corpus(tmp_path)
