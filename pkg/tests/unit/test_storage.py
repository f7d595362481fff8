"""Unit tests for dataset and checkpoint files."""

import struct

import numpy as np
import pytest

from ce_vae.channels import DatasetKind
from ce_vae.exceptions import (
    BadMagicError,
    FileFormatError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from ce_vae.models import UraGeometry
from ce_vae.storage import load_checkpoint, load_dataset, save_checkpoint, save_dataset


class TestDatasetFiles:
    """Test the CEDF dataset format."""

    @pytest.fixture
    def noisy_dataset(self, small_geometry, dataset_factory):
        ds = dataset_factory(small_geometry, 6, kind=DatasetKind.NOISY)
        ds.noise_vars = np.linspace(0.01, 1.0, 6)
        return ds

    def test_round_trip_is_bit_identical(self, tmp_path, clean_dataset, noisy_dataset):
        """Test that save then load restores every field exactly."""
        for name, ds in (("clean", clean_dataset), ("noisy", noisy_dataset)):
            path = tmp_path / f"{name}.cedf"

            save_dataset(ds, path)
            loaded = load_dataset(path)

            assert loaded.kind == ds.kind
            assert loaded.normalized == ds.normalized
            assert loaded.geometry == UraGeometry(n_v=2, n_h=8)
            np.testing.assert_array_equal(loaded.samples, ds.samples)
            if ds.noise_vars is None:
                assert loaded.noise_vars is None
            else:
                np.testing.assert_array_equal(loaded.noise_vars, ds.noise_vars)

    def test_header_layout(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"

        save_dataset(clean_dataset, path)

        raw = path.read_bytes()
        magic, version, kind, n_v, n_h, count, normalized = struct.unpack(
            "<4sIBIIQB", raw[:26]
        )
        assert (magic, version, kind, n_v, n_h, count, normalized) == (
            b"CEDF", 1, 0, 2, 8, 40, 1
        )
        assert len(raw) == 26 + 40 * 16 * 16

    def test_bad_magic(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)
        raw = bytearray(path.read_bytes())
        raw[0] = ord("X")
        path.write_bytes(bytes(raw))

        with pytest.raises(BadMagicError) as exc_info:
            load_dataset(path)

        assert "bad magic" in str(exc_info.value)

    def test_truncated_payload(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)
        path.write_bytes(path.read_bytes()[:-100])

        with pytest.raises(TruncatedPayloadError) as exc_info:
            load_dataset(path)

        assert "truncated payload" in str(exc_info.value)

    @pytest.mark.parametrize("count", [2**36, 2**58, 2**64 - 1])
    def test_oversized_count(self, tmp_path, noisy_dataset, count):
        """Test that a corrupted sample count fails before any allocation."""
        path = tmp_path / "ds.cedf"
        save_dataset(noisy_dataset, path)
        raw = bytearray(path.read_bytes())
        raw[17:25] = struct.pack("<Q", count)
        path.write_bytes(bytes(raw))

        with pytest.raises(TruncatedPayloadError) as exc_info:
            load_dataset(path)

        assert "noise variances" in str(exc_info.value)

    def test_unsupported_version(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))

        with pytest.raises(UnsupportedVersionError):
            load_dataset(path)

    def test_trailing_bytes(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)
        path.write_bytes(path.read_bytes() + b"\x00")

        with pytest.raises(FileFormatError):
            load_dataset(path)

    def test_geometry_mismatch(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)

        with pytest.raises(FileFormatError) as exc_info:
            load_dataset(path, geometry=UraGeometry(n_v=4, n_h=4))

        assert "2x8" in str(exc_info.value)

    def test_geometry_spacings_restored(self, tmp_path, clean_dataset):
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)
        geo = UraGeometry(n_v=2, n_h=8, spacing_h=0.25)

        assert load_dataset(path, geometry=geo).geometry == geo


class TestCheckpointFiles:
    """Test the CEVM checkpoint format."""

    def test_round_trip(self, tmp_path, rng):
        path = tmp_path / "model.cevm"
        tensors = [("a.weight", rng.standard_normal((3, 2, 5))), ("a.bias", np.arange(3.0))]
        header = {"config": {"latent_dim": 4}, "history": []}

        save_checkpoint(path, header, tensors)
        loaded_header, loaded = load_checkpoint(path)

        assert loaded_header == header
        assert [name for name, _ in loaded] == ["a.weight", "a.bias"]
        for (_, expected), (_, actual) in zip(tensors, loaded):
            np.testing.assert_array_equal(actual, expected)

    def test_bad_magic(self, tmp_path, clean_dataset):
        """Test that a dataset file is not accepted as a checkpoint."""
        path = tmp_path / "ds.cedf"
        save_dataset(clean_dataset, path)

        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "model.cevm"
        save_checkpoint(path, {}, [("w", rng.standard_normal(10))])
        path.write_bytes(path.read_bytes()[:-8])

        with pytest.raises(TruncatedPayloadError):
            load_checkpoint(path)

    def test_oversized_tensor_shape(self, tmp_path, rng):
        path = tmp_path / "model.cevm"
        save_checkpoint(path, {}, [("w", rng.standard_normal(10))])
        raw = bytearray(path.read_bytes())
        # magic, version, header length, "{}", tensor count, name length, "w", rank
        offset = 4 + 4 + 4 + 2 + 4 + 2 + 1 + 1
        assert struct.unpack("<I", raw[offset : offset + 4]) == (10,)
        raw[offset : offset + 4] = struct.pack("<I", 2**31)
        path.write_bytes(bytes(raw))

        with pytest.raises(TruncatedPayloadError) as exc_info:
            load_checkpoint(path)

        assert "tensor 'w'" in str(exc_info.value)
