"""PNG and SKF1 container round trips."""

import io

import numpy as np
import pytest

from sepkern.errors import DataError
from sepkern.imageio import (
    load_kernel_field_arrays,
    read_png,
    read_skf1,
    save_kernel_field_arrays,
    write_png,
    write_skf1,
)


class TestSkf1:
    def test_roundtrip_bitexact(self, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 4, 5)).astype(np.float32)
        path = tmp_path / "vec.skf1"
        write_skf1(path, arr)
        back = read_skf1(path)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_header_layout(self, tmp_path):
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        path = tmp_path / "vec.skf1"
        write_skf1(path, arr)
        raw = path.read_bytes()
        assert raw[:4] == b"SKF1"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:16], "little") == 3
        assert len(raw) == 16 + 6 * 4

    def test_bad_magic_rejected(self):
        with pytest.raises(DataError):
            read_skf1(io.BytesIO(b"XXXX" + b"\x00" * 16))

    def test_truncation_rejected(self, tmp_path):
        arr = np.ones((4, 4), dtype=np.float32)
        path = tmp_path / "vec.skf1"
        write_skf1(path, arr)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(DataError):
            read_skf1(path)

    def test_kernel_field_container_order(self, tmp_path):
        rng = np.random.default_rng(1)
        fields = [rng.standard_normal((3, 2, 2)).astype(np.float32)
                  for _ in range(4)]
        path = tmp_path / "field.skf1"
        save_kernel_field_arrays(path, *fields)
        back = load_kernel_field_arrays(path)
        for a, b in zip(fields, back):
            assert np.array_equal(a, b)


class TestPng:
    def test_rgb_roundtrip_exact_on_8bit_grid(self, tmp_path):
        rng = np.random.default_rng(2)
        u8 = rng.integers(0, 256, (3, 6, 7), dtype=np.uint8)
        img = u8.astype(np.float32) / 255.0
        path = tmp_path / "img.png"
        write_png(path, img)
        back = read_png(path)
        assert back.shape == (3, 6, 7)
        assert np.array_equal(back, img)

    def test_grayscale_roundtrip(self, tmp_path):
        img = (np.arange(12, dtype=np.float32) / 11).reshape(1, 3, 4)
        path = tmp_path / "img.png"
        write_png(path, img)
        back = read_png(path)
        assert back.shape == (1, 3, 4)
        assert np.abs(back - img).max() <= 0.5 / 255

    def test_values_clamped(self, tmp_path):
        img = np.array([[[-0.5, 1.5]]], dtype=np.float32)
        path = tmp_path / "img.png"
        write_png(path, img)
        back = read_png(path)
        assert np.array_equal(back, np.array([[[0.0, 1.0]]], dtype=np.float32))

    def test_missing_file_raises_data_error(self, tmp_path):
        with pytest.raises(DataError):
            read_png(tmp_path / "absent.png")
