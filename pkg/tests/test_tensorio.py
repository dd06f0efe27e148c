import numpy as np
import pytest

from padflow.invconv import ConvKernel
from padflow.tensorio import (
    TensorFormatError,
    load_kernel,
    load_tensor,
    read_image,
    save_kernel,
    save_tensor,
    tensor_bytes,
    write_image,
)


class TestRawTensorFormat:
    def test_roundtrip_float64(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4, 2))
        path = tmp_path / "x.tensor"
        save_tensor(path, x)
        back = load_tensor(path)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, x)

    def test_roundtrip_float32(self, tmp_path):
        x = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
        path = tmp_path / "x.tensor"
        save_tensor(path, x)
        back = load_tensor(path)
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, x)

    def test_header_layout(self):
        buf = tensor_bytes(np.zeros((2, 3)))
        assert buf[:4] == b"PFTN"
        assert len(buf) == 16 + 4 + 8 + 2 * 3 * 8

    def test_serialization_is_deterministic(self):
        x = np.arange(6, dtype=float).reshape(2, 3)
        assert tensor_bytes(x) == tensor_bytes(x.copy())

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.tensor"
        path.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(TensorFormatError):
            load_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        buf = tensor_bytes(np.ones((4, 4)))
        path = tmp_path / "trunc.tensor"
        path.write_bytes(buf[:-8])
        with pytest.raises(TensorFormatError):
            load_tensor(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "extra.tensor"
        path.write_bytes(tensor_bytes(np.ones(3)) + b"x")
        with pytest.raises(TensorFormatError):
            load_tensor(path)


class TestKernelFixtures:
    def test_roundtrip_with_sidecar(self, tmp_path):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(3, 3, 2, 2))
        w[2, 2, 1, 0] = 0.0
        kernel = ConvKernel(w, "masked")
        path = tmp_path / "kernel.tensor"
        save_kernel(path, kernel)
        back = load_kernel(path)
        assert back.variant == "masked"
        np.testing.assert_array_equal(back.weights, kernel.weights)

    def test_missing_sidecar_rejected(self, tmp_path):
        path = tmp_path / "k.tensor"
        save_tensor(path, np.zeros((3, 3, 1, 1)))
        with pytest.raises(TensorFormatError):
            load_kernel(path)


class TestImages:
    def test_pgm_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(5, 7, 1), dtype=np.uint8)
        path = tmp_path / "img.pgm"
        write_image(path, img)
        np.testing.assert_array_equal(read_image(path), img)

    def test_ppm_binary_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 256, size=(4, 3, 3), dtype=np.uint8)
        path = tmp_path / "img.ppm"
        write_image(path, img)
        np.testing.assert_array_equal(read_image(path), img)

    def test_ascii_pgm_with_comments(self, tmp_path):
        path = tmp_path / "ascii.pgm"
        path.write_text("P2\n# a comment\n3 2\n255\n0 10 20\n30 40 255\n")
        img = read_image(path)
        assert img.shape == (2, 3, 1)
        np.testing.assert_array_equal(img[:, :, 0], [[0, 10, 20], [30, 40, 255]])

    def test_ascii_ppm(self, tmp_path):
        path = tmp_path / "ascii.ppm"
        path.write_text("P3\n1 1\n255\n1 2 3\n")
        np.testing.assert_array_equal(read_image(path)[0, 0], [1, 2, 3])

    def test_wide_maxval_rejected(self, tmp_path):
        path = tmp_path / "wide.pgm"
        path.write_text("P2\n1 1\n65535\n1024\n")
        with pytest.raises(TensorFormatError):
            read_image(path)

    def test_truncated_raster_rejected(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n2 2\n255\nab")
        with pytest.raises(TensorFormatError):
            read_image(path)
