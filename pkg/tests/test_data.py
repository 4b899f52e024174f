import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dva import data
from dva.errors import InputError


def _write_pair(tmp_path, stem, dims=(20, 30)):
    img = tmp_path / f"{stem}.png"
    Image.fromarray(np.zeros((*dims, 3), dtype=np.uint8)).save(img)
    fix = tmp_path / f"{stem}.txt"
    fix.write_text("3 4\n")
    return img, fix


def test_manifest_two_records(tmp_path):
    a = _write_pair(tmp_path, "a")
    b = _write_pair(tmp_path, "b")
    (tmp_path / "m.tsv").write_text(f"# comment\ntrain\t{a[0].name}\t{a[1].name}\n\nval\t{b[0]}\t{b[1]}\n")
    m = data.load_manifest(tmp_path / "m.tsv")
    assert len(m) == 2
    assert [r.image_id for r in m.split("val")] == ["b"]
    assert m.records[0].image_path == tmp_path / "a.png"


@pytest.mark.parametrize("text, match", [
    ("", "empty manifest"),
    ("train\tx.png\n", ":1: expected 3 or 4"),
    ("# c\nbogus\tx.png\ty.txt\n", ":2: unknown split"),
    ("train\tabsent.png\tabsent.txt\n", "absent.png"),
])
def test_manifest_errors(tmp_path, text, match):
    (tmp_path / "m.tsv").write_text(text)
    with pytest.raises(InputError, match=match):
        data.load_manifest(tmp_path / "m.tsv")


def test_manifest_round_trip(synth32):
    m = data.load_manifest(synth32.path)
    out = synth32.path.parent / "copy.tsv"
    data.write_manifest(out, m.records)
    assert data.load_manifest(out).records == m.records


def test_fixations_from_coordinates(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("1,2\n4.6 0  # rounded\n99 99\n")
    fix = data.load_fixations(p, (5, 6))
    assert sorted(zip(*np.nonzero(fix))) == [(0, 5), (2, 1)]
    (tmp_path / "bad.txt").write_text("x y\n")
    with pytest.raises(InputError, match=":1:"):
        data.load_fixations(tmp_path / "bad.txt", (5, 6))
    (tmp_path / "none.txt").write_text("\n")
    with pytest.raises(InputError, match="zero fixations"):
        data.load_fixations(tmp_path / "none.txt", (5, 6))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**16))
def test_rescale_only_merges(h, w, nh, nw, seed):
    fix = (np.random.default_rng(seed).random((h, w)) < 0.2).astype(np.uint8)
    out = data.rescale_fixations(fix, (nh, nw))
    assert out.shape == (nh, nw) and out.sum() <= fix.sum()
    assert (out.sum() > 0) == (fix.sum() > 0)


def test_gaussian_gt_closed_form():
    fix = np.zeros((33, 41), dtype=np.uint8)
    fix[16, 20] = 1
    g = data.gaussian_gt(fix, 8.0)
    yy, xx = np.mgrid[:33, :41]
    np.testing.assert_allclose(g, np.exp(-((yy - 16) ** 2 + (xx - 20) ** 2) / 128.0), atol=1e-9)
    assert g.max() == 1.0 and g[16, 20] == 1.0
    assert np.all(np.diff(g[16, 20:]) < 0)
    many = data.gaussian_gt((np.random.default_rng(0).random((20, 20)) < 0.05).astype(np.uint8), 3.0)
    assert many.min() >= 0 and many.max() == 1.0
    with pytest.raises(InputError):
        data.gaussian_gt(np.zeros((4, 4)), 1.0)


def test_prepared_dims_policy():
    assert data.prepared_dims(512, 512) == (256, 256)
    assert data.prepared_dims(511, 681) == (192, 256)
    assert data.prepared_dims(192, 256) == (192, 256)
    assert data.prepared_dims(10, 300) == (16, 256)


def test_prepare_sample(synth32):
    m = synth32
    s = data.prepare(m.records[0], data.PrepareConfig(max_side=32))
    assert s.image.shape == (1, 3, 32, 32) and s.gt.shape == (32, 32)
    assert s.fixation.dtype == np.uint8 and s.fixation.any()
    assert s.gt.max() == pytest.approx(1.0)
    assert abs(s.image.mean()) < 0.5
    half = data.prepare(m.records[0], data.PrepareConfig(max_side=16))
    assert half.image.shape == (1, 3, 16, 16) and half.original_dims == (32, 32)


def test_quantization():
    q = data.quantize(np.full((3, 3), 0.5))
    assert np.all(np.abs(q.astype(int) - 32768) <= 1)
    with pytest.raises(InputError):
        data.quantize(np.array([[1.5]]))


@pytest.mark.parametrize("suffix", [".png", ".pgm"])
def test_saliency_round_trip(tmp_path, rng, suffix):
    m = rng.random((17, 23))
    m[0, 0], m[0, 1] = 0.0, 1.0
    path = tmp_path / f"s{suffix}"
    data.write_saliency(m, path)
    back = data.read_saliency(path)
    assert back.shape == m.shape
    assert np.max(np.abs(back - m)) <= 0.5 / 65535 + 1e-12


def test_read_rgb_is_rejected(tmp_path):
    p = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(p)
    with pytest.raises(InputError, match="expected grayscale"):
        data.read_saliency(p)


def test_synthetic_dataset(tmp_path):
    a = data.synth_dataset(tmp_path / "a", n=3, dims=(32, 48), seed=2)
    b = data.synth_dataset(tmp_path / "b", n=3, dims=(32, 48), seed=2)
    for ra, rb in zip(a.records, b.records):
        for pa, pb in [(ra.image_path, rb.image_path), (ra.fixation_path, rb.fixation_path), (ra.gt_path, rb.gt_path)]:
            assert pa.read_bytes() == pb.read_bytes()
    centres = list(data.synth_images(3, (32, 48), seed=2))
    for rec, (_, pts) in zip(a.records, centres):
        fix = data.load_fixations(rec.fixation_path, (32, 48))
        assert all(fix[r, c] == 1 for r, c in pts)
        g = data.read_saliency(rec.gt_path)
        assert np.max(np.abs(g - data.gaussian_gt(fix, 48 / 32))) <= 0.5 / 65535 + 1e-12
    with pytest.raises(InputError):
        data.synth_dataset(tmp_path / "c", n=1, dims=(30, 32))
