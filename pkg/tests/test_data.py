import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spiketicket import container
from spiketicket.container import ContainerError
from spiketicket.data import DataError, Dataset, gen_synthetic, load_idx, write_idx


def _idx_fixture(tmp_path, n=4, rows=3, cols=2, n_labels=None):
    pixels = bytes(range(n * rows * cols))
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(struct.pack(">IIII", 0x803, n, rows, cols) + pixels)
    nl = n if n_labels is None else n_labels
    lab.write_bytes(struct.pack(">II", 0x801, nl) + bytes([i % 10 for i in range(nl)]))
    return img, lab


def test_idx_fixture_parses(tmp_path):
    ds = load_idx(*_idx_fixture(tmp_path))
    assert ds.x.shape == (4, 1, 3, 2)
    assert ds.x[0, 0, 0, 1] == 1 / 255
    assert ds.x[3, 0, 2, 1] == 23 / 255
    np.testing.assert_array_equal(ds.y, [0, 1, 2, 3])
    assert 0.0 <= ds.x.min() and ds.x.max() <= 1.0


def test_idx_count_mismatch(tmp_path):
    with pytest.raises(DataError, match="count"):
        load_idx(*_idx_fixture(tmp_path, n_labels=3))


def test_idx_bad_magic_and_truncation(tmp_path):
    img, lab = _idx_fixture(tmp_path)
    raw = img.read_bytes()
    img.write_bytes(struct.pack(">I", 0x801) + raw[4:])
    with pytest.raises(DataError, match="byte 0"):
        load_idx(img, lab)
    img.write_bytes(raw[:-5])
    with pytest.raises(DataError, match="byte 35"):
        load_idx(img, lab)
    img.write_bytes(raw[:10])
    with pytest.raises(DataError, match="truncated header"):
        load_idx(img, lab)


def test_idx_write_round_trip_through_container(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 4, 4), dtype=np.uint8)
    write_idx(imgs, [1, 0, 1, 1, 0], tmp_path / "i", tmp_path / "l")
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.x[:, 0] * 255, imgs)
    ds.save(tmp_path / "ds.sltt")
    back = Dataset.load(tmp_path / "ds.sltt")
    assert back.x.tobytes() == ds.x.tobytes()
    np.testing.assert_array_equal(back.y, ds.y)


def test_synthetic_same_seed_byte_identical(tmp_path):
    gen_synthetic(3, 10, 3, (2, 5, 5)).save(tmp_path / "a")
    gen_synthetic(3, 10, 3, (2, 5, 5)).save(tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    gen_synthetic(4, 10, 3, (2, 5, 5)).save(tmp_path / "c")
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_synthetic_errors():
    with pytest.raises(DataError):
        gen_synthetic(classes=1)
    with pytest.raises(DataError):
        gen_synthetic(shape=(1, 0, 4))


def _linear_probe_accuracy(tr, te, classes):
    # least-squares one-vs-all probe
    a = np.c_[tr.x.reshape(len(tr), -1), np.ones(len(tr))]
    w, *_ = np.linalg.lstsq(a, np.eye(classes)[tr.y], rcond=None)
    b = np.c_[te.x.reshape(len(te), -1), np.ones(len(te))]
    return float(np.mean((b @ w).argmax(1) == te.y))


def test_contrast_one_linearly_separable():
    tr, te = gen_synthetic(0, 100, 2, (1, 16, 16), 1.0).split(0.8, 0)
    assert _linear_probe_accuracy(tr, te, 2) >= 0.95


def test_contrast_zero_is_chance():
    ds = gen_synthetic(0, 400, 2, (1, 4, 4), 0.0)
    tr, te = ds.split(0.8, 0)
    # identical templates: the held-out probe is a coin flip
    assert abs(_linear_probe_accuracy(tr, te, 2) - 0.5) < 0.1
    means = [ds.x[ds.y == c].mean(0) for c in range(2)]
    assert np.abs(means[0] - means[1]).max() < 0.1


def test_split_deterministic_and_disjoint():
    ds = gen_synthetic(0, 25, 2, (1, 4, 4))
    a, b = ds.split(0.8, 1)
    a2, _ = ds.split(0.8, 1)
    assert len(a) == 40 and len(b) == 10
    assert a.x.tobytes() == a2.x.tobytes()


@settings(max_examples=50)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4)))
def test_container_round_trip_exact(a):
    blob = container.dumps({"t": a, "ü": np.zeros(2)})
    back = container.loads(blob)
    assert back["t"].shape == a.shape
    assert back["t"].tobytes() == a.astype("<f8").tobytes()
    assert list(back) == ["t", "ü"]


def test_container_single_record_layout(tmp_path):
    container.save_tensor(tmp_path / "x", np.array([[1.0, 2.0]]))
    raw = (tmp_path / "x").read_bytes()
    assert raw[:4] == b"SLTT"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<QQ", raw[12:28]) == (1, 2)
    assert struct.unpack("<dd", raw[28:]) == (1.0, 2.0)
    np.testing.assert_array_equal(container.load_tensor(tmp_path / "x"), [[1.0, 2.0]])


def test_container_errors_carry_offset():
    blob = container.dumps({"a": np.ones(3), "b": np.ones(2)})
    with pytest.raises(ContainerError, match="byte"):
        container.loads(blob[:-4])
    bad = bytearray(blob)
    second = 4 + 1 + 4 + 8 + 8 + 24 + 4 + 1
    bad[second:second + 4] = b"XXXX"
    with pytest.raises(ContainerError, match=f"byte {second}"):
        container.loads(bytes(bad))
