"""
Unit tests for SINO files, PGM export and text previews.
"""

import numpy as np
import pytest

from sinomap.errors import (
    BadMagicError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
    ValidationError,
)
from sinomap.noise_sim import PhotonData
from sinomap.sinogram_io import (
    KIND_COUNTS,
    KIND_SINOGRAM,
    SINO_MAGIC,
    atomic_write,
    decode_sinogram,
    encode_sinogram,
    export_pgm,
    read_kind,
    read_sinogram,
    write_preview,
    write_sinogram,
)


class TestSinoFormat:
    """Tests for the SINO binary layout."""

    def test_header_layout(self):
        blob = encode_sinogram(np.zeros((3, 5)))
        assert blob[:4] == SINO_MAGIC
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == KIND_SINOGRAM
        assert int.from_bytes(blob[12:16], "little") == 3
        assert int.from_bytes(blob[16:20], "little") == 5
        assert len(blob) == 20 + 8 * 15

    def test_sinogram_round_trip(self, smooth_sinogram):
        out = decode_sinogram(encode_sinogram(smooth_sinogram))
        np.testing.assert_array_equal(out, smooth_sinogram)

    def test_counts_come_back_with_warm_start(self):
        """Test kind 1 stores I only and reads back with G = round(max(I, 1))."""
        pd = PhotonData(I=np.array([[0.3, 7.6], [12.0, -2.0]]), G=np.array([[0, 8], [12, 0]]))
        blob = encode_sinogram(pd)
        assert int.from_bytes(blob[8:12], "little") == KIND_COUNTS
        out = decode_sinogram(blob)
        assert isinstance(out, PhotonData)
        np.testing.assert_array_equal(out.I, pd.I)
        np.testing.assert_array_equal(out.G, [[1, 8], [12, 1]])

    def test_bad_magic(self):
        blob = encode_sinogram(np.zeros((2, 2)))
        with pytest.raises(BadMagicError):
            decode_sinogram(b"NOPE" + blob[4:])

    def test_unsupported_version(self):
        blob = bytearray(encode_sinogram(np.zeros((2, 2))))
        blob[4:8] = (2).to_bytes(4, "little")
        with pytest.raises(UnsupportedVersionError):
            decode_sinogram(bytes(blob))

    def test_unknown_kind(self):
        blob = bytearray(encode_sinogram(np.zeros((2, 2))))
        blob[8:12] = (7).to_bytes(4, "little")
        with pytest.raises(ValidationError):
            decode_sinogram(bytes(blob))

    def test_truncated(self):
        blob = encode_sinogram(np.zeros((2, 2)))
        with pytest.raises(TruncatedPayloadError):
            decode_sinogram(blob[:10])
        with pytest.raises(TruncatedPayloadError):
            decode_sinogram(blob[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(ValidationError):
            decode_sinogram(encode_sinogram(np.zeros((2, 2))) + b"\x00")

    def test_refuses_non_finite(self):
        with pytest.raises(NonFiniteError):
            encode_sinogram(np.array([[1.0, np.inf]]))

    def test_refuses_wrong_rank(self):
        with pytest.raises(ShapeMismatchError):
            encode_sinogram(np.zeros(4))


class TestFiles:
    """Tests for the file-level helpers."""

    def test_write_and_read(self, tmp_path, smooth_sinogram):
        path = tmp_path / "nested" / "a.sino"
        write_sinogram(path, smooth_sinogram)
        np.testing.assert_array_equal(read_sinogram(path), smooth_sinogram)
        assert read_kind(path) == KIND_SINOGRAM

    def test_read_kind_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.sino"
        path.write_bytes(b"x" * 32)
        with pytest.raises(BadMagicError):
            read_kind(path)

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        atomic_write(tmp_path / "a.txt", "hello\n")
        atomic_write(tmp_path / "a.txt", b"again\n")
        assert (tmp_path / "a.txt").read_text() == "again\n"
        assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]

    def test_preview(self, tmp_path):
        path = tmp_path / "a.txt"
        write_preview(path, np.array([[1.0, 2.5], [3.0, 4.0]]), precision=3)
        lines = path.read_text().splitlines()
        assert lines == ["# kind = sinogram", "# shape = 2 x 2", "1 2.5", "3 4"]


class TestPgm:
    """Tests for 16-bit PGM export."""

    def test_header_and_levels(self, tmp_path):
        img = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 1.0]])
        path = tmp_path / "img.pgm"
        export_pgm(path, img)
        blob = path.read_bytes()
        header = b"P5\n3 2\n65535\n"
        assert blob.startswith(header)
        levels = np.frombuffer(blob[len(header):], dtype=">u2").reshape(2, 3)
        np.testing.assert_array_equal(levels, [[0, 32768, 65535], [16384, 49151, 65535]])

    def test_sidecar_declares_window(self, tmp_path):
        export_pgm(tmp_path / "img.pgm", np.zeros((4, 4)), low=-1.0, high=3.0)
        sidecar = (tmp_path / "img.txt").read_text()
        assert "window_low = -1.0" in sidecar
        assert "window_high = 3.0" in sidecar
        assert "maxval = 65535" in sidecar

    def test_window_clips(self, tmp_path):
        path = tmp_path / "img.pgm"
        export_pgm(path, np.array([[-5.0, 5.0]]), low=0.0, high=1.0)
        levels = np.frombuffer(path.read_bytes()[len(b"P5\n2 1\n65535\n"):], dtype=">u2")
        np.testing.assert_array_equal(levels, [0, 65535])

    def test_flat_image(self, tmp_path):
        path = tmp_path / "flat.pgm"
        export_pgm(path, np.full((2, 2), 0.4))
        levels = np.frombuffer(path.read_bytes()[len(b"P5\n2 2\n65535\n"):], dtype=">u2")
        assert not levels.any()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
