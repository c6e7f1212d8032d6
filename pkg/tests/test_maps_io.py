import numpy as np
import pytest

from mvcount.maps import FLAG_GROUND, MAGIC, Map2D, read_map, write_map, write_pgm


def test_round_trip_values_and_mask(tmp_path):
    rng = np.random.default_rng(0)
    values = rng.standard_normal((3, 11, 13)).astype(np.float32).astype(np.float64)
    valid = rng.random((11, 13)) > 0.4
    m = Map2D(values, valid, tag="ground")
    path = tmp_path / "m.mv2d"
    write_map(path, m)
    back = read_map(path)
    assert back.tag == "ground"
    assert back.channels == 3 and back.height == 11 and back.width == 13
    assert np.array_equal(back.values, values)  # values were f32-representable
    assert np.array_equal(back.valid, valid)


def test_header_layout(tmp_path):
    m = Map2D(np.zeros((2, 5, 7)), None, tag="ground")
    path = tmp_path / "m.mv2d"
    write_map(path, m)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    width, height, channels, flags = np.frombuffer(raw[4:12], dtype="<u2")
    assert (width, height, channels) == (7, 5, 2)
    assert flags & FLAG_GROUND
    assert raw[12:16] == b"\x00" * 4
    # header + f32 values + packed row-major mask
    assert len(raw) == 16 + 4 * 2 * 5 * 7 + (5 * 7 + 7) // 8


def test_camera_maps_have_no_ground_flag(tmp_path):
    m = Map2D(np.zeros((1, 4, 4)), None, tag="cam:3")
    path = tmp_path / "m.mv2d"
    write_map(path, m)
    assert read_map(path, tag="cam:3").tag == "cam:3"
    flags = np.frombuffer(path.read_bytes()[10:12], dtype="<u2")[0]
    assert not flags & FLAG_GROUND


def test_rejects_non_mv2d(tmp_path):
    path = tmp_path / "bad.mv2d"
    path.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError):
        read_map(path)


def test_mask_bit_packing_msb_first(tmp_path):
    valid = np.zeros((1, 9), dtype=bool)
    valid[0, 0] = True  # first cell -> MSB of the first mask byte
    valid[0, 8] = True  # ninth cell -> MSB of the second byte
    m = Map2D(np.zeros((1, 1, 9)), valid)
    path = tmp_path / "m.mv2d"
    write_map(path, m)
    raw = path.read_bytes()
    mask_bytes = raw[16 + 4 * 9 :]
    assert mask_bytes[0] == 0b10000000
    assert mask_bytes[1] == 0b10000000


def test_pgm_export(tmp_path):
    plane = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "m.pgm"
    write_pgm(path, plane)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    pixels = np.frombuffer(raw[len(b"P5\n4 3\n255\n") :], dtype=np.uint8)
    assert pixels[0] == 0 and pixels[-1] == 255


def test_validates_shapes():
    with pytest.raises(ValueError):
        Map2D(np.zeros((2, 3, 4)), np.ones((5, 5), bool))
    with pytest.raises(ValueError):
        Map2D(np.zeros((2, 3, 4, 5)), None)
