from pydantic import ValidationError
from tests.test_data import LoggingSetup, random_volume
from em_superres import (
    PatchSpec,
    Volume3D,
    center_patches,
    extract_patches,
    import_stack,
    patch_origins,
    read_volume,
    recompose_average,
    rescale_unit,
    write_volume,
)
from em_superres.exceptions import (
    CoverageGapError,
    DimensionTooSmallError,
    MalformedHeaderError,
    NonFiniteValueError,
    PayloadLengthError,
)
from em_superres.models import PatchBatch
from em_superres.volume import PatchAccumulator
import numpy as np
import pytest
import json


class TestVolume(LoggingSetup):
    def test_flat_payload_layout(self):
        nx, ny, nz = 4, 3, 2
        volume = Volume3D(dims=(nx, ny, nz), data=np.arange(nx * ny * nz))

        assert volume.data.shape == (nz, ny, nx)
        assert volume.flat()[volume.index(3, 1, 1)] == 3 + nx * 1 + nx * ny * 1
        assert volume.coords(volume.index(2, 2, 1)) == (2, 2, 1)
        assert volume.data[1, 2, 3] == volume.index(3, 2, 1)

    def test_invalid_volume(self):
        with pytest.raises(ValidationError):
            Volume3D(dims=(2, 2, 2), data=np.arange(7))

        data = np.zeros((2, 2, 2))
        data[1, 1, 1] = np.nan
        with pytest.raises(ValidationError):
            Volume3D(data=data)

    def test_lattice_clamps_last_origin(self):
        spec = PatchSpec(h=3, v=5, stride=(3, 3, 5))
        origins = patch_origins((10, 10, 17), spec)

        assert sorted(set(origins[:, 0].tolist())) == [0, 3, 6, 7]
        assert sorted(set(origins[:, 2].tolist())) == [0, 5, 10, 12]
        assert len(origins) == 4 * 4 * 4

        keys = [(z, y, x) for x, y, z in origins.tolist()]
        assert keys == sorted(keys)

    def test_volume_below_patch(self):
        with pytest.raises(DimensionTooSmallError):
            patch_origins((8, 8, 4), PatchSpec(h=3, v=5, stride=(1, 1, 1)))

    def test_stride_larger_than_patch(self):
        with pytest.raises(ValidationError):
            PatchSpec(h=3, v=5, stride=(4, 1, 1))

    def test_patch_columns_match_volume(self):
        volume = random_volume((9, 8, 12), seed=1)
        spec = PatchSpec(h=3, v=4, stride=(2, 3, 4))
        batch = extract_patches(volume, spec)

        assert batch.matrix.shape == (spec.n, batch.count)
        for column in (0, batch.count // 2, batch.count - 1):
            x, y, z = batch.origins[column]
            expected = volume.data[z : z + 4, y : y + 3, x : x + 3].ravel()
            assert np.array_equal(batch.matrix[:, column], expected)

    def test_extract_then_recompose(self):
        volume = random_volume((7, 6, 10), seed=2, integers=True)
        spec = PatchSpec(h=3, v=5, stride=(1, 1, 1))
        batch = extract_patches(volume, spec)
        rebuilt = recompose_average(batch, volume.dims)

        assert np.array_equal(rebuilt.data, volume.data)

        spec = PatchSpec(h=3, v=5, stride=(2, 2, 3))
        rebuilt = recompose_average(extract_patches(random_volume((9, 9, 11), seed=3), spec), (9, 9, 11))
        assert np.allclose(rebuilt.data, random_volume((9, 9, 11), seed=3).data, atol=1e-12)

    def test_recompose_ignores_batch_order(self):
        volume = random_volume((8, 8, 10), seed=4)
        spec = PatchSpec(h=4, v=5, stride=(2, 2, 2))
        batch = extract_patches(volume, spec)
        noisy = batch.matrix + np.random.default_rng(5).standard_normal(batch.matrix.shape)

        order = np.random.default_rng(6).permutation(batch.count)
        forward = PatchBatch(spec=spec, source_dims=volume.dims, origins=batch.origins, matrix=noisy)
        shuffled = PatchBatch(spec=spec, source_dims=volume.dims, origins=batch.origins[order], matrix=noisy[:, order])

        expected = recompose_average(forward, volume.dims).data
        assert np.array_equal(recompose_average(shuffled, volume.dims).data, expected)

    def test_partial_coverage(self):
        spec = PatchSpec(h=2, v=2, stride=(1, 1, 1))
        accumulator = PatchAccumulator((4, 4, 4), spec)
        accumulator.add(np.array([[0, 0, 0]]), np.ones((spec.n, 1)))

        with pytest.raises(CoverageGapError):
            accumulator.average()

        filled = accumulator.average(fill=-1.0)
        assert filled[0, 0, 0] == 1.0
        assert filled[3, 3, 3] == -1.0
        assert accumulator.uncovered().sum() == 64 - 8

    def test_accumulator_order(self):
        spec = PatchSpec(h=2, v=2, stride=(1, 1, 1))
        accumulator = PatchAccumulator((4, 4, 4), spec)
        with pytest.raises(ValueError):
            accumulator.add(np.array([[0, 0, 1], [0, 0, 0]]), np.ones((spec.n, 2)))

    def test_center_and_rescale(self):
        volume = random_volume((6, 6, 6), seed=7)
        centered, means = center_patches(extract_patches(volume, PatchSpec(h=3, v=3, stride=(3, 3, 3))))
        assert np.allclose(centered.matrix.mean(axis=0), 0.0, atol=1e-12)
        assert means.shape == (centered.count,)

        scaled = rescale_unit(Volume3D(data=volume.data * 5.0 + 2.0))
        assert scaled.data.min() == 0.0
        assert scaled.data.max() == 1.0
        assert not np.any(rescale_unit(Volume3D(data=np.full((2, 2, 2), 3.0))).data)

    def test_round_trip(self, tmp_path):
        volume = Volume3D(data=random_volume((5, 4, 3), seed=8, integers=True).data, voxel_size=(5.0, 5.0, 50.0))
        json_path, raw_path = write_volume(volume, tmp_path / "vol")

        assert raw_path.stat().st_size == 5 * 4 * 3 * 4
        header = json.loads(json_path.read_text())
        assert header["format"] == "VV1"
        assert header["dims"] == [5, 4, 3]

        loaded = read_volume(tmp_path / "vol.json")
        assert loaded.dims == volume.dims
        assert loaded.voxel_size == volume.voxel_size
        assert np.array_equal(loaded.data, volume.data)

    def test_malformed_files(self, tmp_path):
        json_path, raw_path = write_volume(random_volume((3, 3, 3)), tmp_path / "vol")
        header = json.loads(json_path.read_text())

        json_path.write_text(json.dumps({**header, "dims": [3, 3]}))
        with pytest.raises(MalformedHeaderError):
            read_volume(json_path)

        json_path.write_text(json.dumps({**header, "format": "XX9"}))
        with pytest.raises(MalformedHeaderError):
            read_volume(json_path)

        json_path.write_text(json.dumps(header))
        raw_path.write_bytes(raw_path.read_bytes()[:-4])
        with pytest.raises(PayloadLengthError):
            read_volume(json_path)

        values = np.zeros(27, dtype="<f4")
        values[4] = np.nan
        raw_path.write_bytes(values.tobytes())
        with pytest.raises(NonFiniteValueError):
            read_volume(json_path)

    def test_import_stack(self, tmp_path):
        rng = np.random.default_rng(9)
        paths = []
        for index in range(3):
            path = tmp_path / f"slice{index}.npy"
            np.save(path, rng.uniform(size=(4, 5)))
            paths.append(path)

        volume = import_stack(paths)
        assert volume.dims == (5, 4, 3)
        assert np.array_equal(volume.data[2], np.load(paths[2]))
