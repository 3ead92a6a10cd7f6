import numpy as np
import pytest

from igsmri.heads import classifier_from_segmenter, identity_head, init_head
from igsmri.phantom import make_set
from igsmri.sampling import SamplingPattern, center_pattern
from igsmri.store import (
    StoreError,
    encode_pgm,
    encode_tensor,
    format_pattern,
    parse_pattern,
    read_dataset,
    read_head,
    read_pattern,
    read_tensor,
    write_dataset,
    write_head,
    write_pattern,
    write_pgm,
    write_tensor,
)


def test_float_round_trip(tmp_path, rng):
    x = rng.standard_normal((16, 16)).astype(np.float32)
    write_tensor(tmp_path / "x.igsd", x)
    back = read_tensor(tmp_path / "x.igsd")
    assert back.dtype == np.float32 and back.tobytes() == x.tobytes()


def test_header_layout():
    data = encode_tensor(np.zeros((2, 3), np.uint8))
    assert data[:4] == b"IGSD"
    assert data[4:6] == b"\x01\x00" and data[6] == 2 and data[7] == 2
    assert data[8:16] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(data) == 16 + 6


def test_complex_interleaving(tmp_path):
    z = np.array([[1 + 2j, 3 - 4j]], dtype=np.complex64)
    write_tensor(tmp_path / "z.igsd", z)
    raw = (tmp_path / "z.igsd").read_bytes()[8 + 8:]
    assert np.array_equal(np.frombuffer(raw, "<f4"), [1, 2, 3, -4])
    assert np.array_equal(read_tensor(tmp_path / "z.igsd"), z)


def test_truncated_payload(tmp_path):
    write_tensor(tmp_path / "x.igsd", np.zeros((4, 4), np.float32))
    (tmp_path / "x.igsd").write_bytes((tmp_path / "x.igsd").read_bytes()[:-3])
    with pytest.raises(StoreError, match="61 bytes, expected 64"):
        read_tensor(tmp_path / "x.igsd")


def test_bad_magic_and_dtype(tmp_path):
    good = encode_tensor(np.zeros(2, np.float32))
    (tmp_path / "a").write_bytes(b"XXXX" + good[4:])
    with pytest.raises(StoreError, match="magic"):
        read_tensor(tmp_path / "a")
    (tmp_path / "b").write_bytes(good[:6] + b"\x09" + good[7:])
    with pytest.raises(StoreError, match="dtype"):
        read_tensor(tmp_path / "b")


def test_atomic_write_leaves_no_temp(tmp_path):
    write_tensor(tmp_path / "x.igsd", np.ones(3))
    assert [p.name for p in tmp_path.iterdir()] == ["x.igsd"]


def test_center_pattern_file(tmp_path):
    write_pattern(tmp_path / "p.txt", center_pattern(8, 2))
    assert (tmp_path / "p.txt").read_text() == "n_lines=8 budget=2\n3\n4\n"
    assert read_pattern(tmp_path / "p.txt") == center_pattern(8, 2)


def test_transition_survives(tmp_path):
    pat = SamplingPattern.from_indices(16, [8, 3, 12], [8, 12, 3])
    write_pattern(tmp_path / "p.txt", pat)
    back = read_pattern(tmp_path / "p.txt")
    assert back.transition_log == (8, 12, 3)
    assert "# transition: 8,12,3" in format_pattern(pat)


@pytest.mark.parametrize("text", [
    "n_lines=8 budget=2\n3\n3\n",
    "n_lines=8 budget=2\n4\n3\n",
    "n_lines=8 budget=2\n3\n9\n",
    "n_lines=8 budget=3\n3\n4\n",
    "budget=2\n3\n4\n",
    "",
])
def test_bad_pattern_files(text):
    with pytest.raises(StoreError):
        parse_pattern(text)


def test_pgm_examples():
    header = b"P5\n4 4\n255\n"
    assert encode_pgm(np.full((4, 4), 0.5)) == header + bytes([128] * 16)
    assert encode_pgm(np.full((4, 4), 0.3), normalize=True) == header + bytes(16)
    out = encode_pgm(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert out == b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])


def test_pgm_clips_and_normalizes(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[-1.0, 2.0]]))
    assert (tmp_path / "a.pgm").read_bytes().endswith(bytes([0, 255]))
    assert encode_pgm(np.array([[2.0, 4.0]]), normalize=True).endswith(bytes([0, 255]))


@pytest.mark.parametrize("make", [
    lambda: init_head("segmenter", 3),
    lambda: classifier_from_segmenter(init_head("segmenter", 4), 2.5),
    identity_head,
])
def test_head_round_trip(tmp_path, make):
    head = make()
    write_head(tmp_path / "h.igsd", head)
    back = read_head(tmp_path / "h.igsd")
    assert back.kind == head.kind and back.pool_sharpness == head.pool_sharpness
    for name, value in head.params.items():
        assert np.array_equal(back.params[name], value.astype(np.float32))
    manifest = (tmp_path / "h.igsd.txt").read_text()
    assert f"kind={head.kind.value}" in manifest


def test_head_errors(tmp_path):
    write_head(tmp_path / "h.igsd", init_head("segmenter"))
    write_tensor(tmp_path / "h.igsd", np.zeros(5, np.float32))
    with pytest.raises(StoreError):
        read_head(tmp_path / "h.igsd")
    with pytest.raises(StoreError):
        read_head(tmp_path / "missing.igsd")


def test_dataset_round_trip(tmp_path):
    data = make_set(5, 16, 40)
    write_dataset(tmp_path / "d", data, {"seed": 40})
    back = read_dataset(tmp_path / "d")
    assert np.array_equal(back.images, data.images.astype(np.float32))
    assert np.array_equal(back.masks, data.masks)
    assert list(back.labels) == list(data.labels)
    assert list(back.seeds) == list(range(40, 45))
    text = (tmp_path / "d" / "dataset.txt").read_text()
    assert text.startswith("count=5\nsize=16\nseed=40\n")
    with pytest.raises(StoreError):
        read_dataset(tmp_path / "nothing")
