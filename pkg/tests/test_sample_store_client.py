import numpy as np
import pytest
import torch
from PIL import Image

from clients.sample_store_client import SampleStoreClient, parse_sample_name, read_array, to_uint8, write_array
from utils.error_handling import CheckpointError, ShapeMismatchError


def test_save_and_load_keep_sample_order_and_labels(tmp_path):
    samples = torch.randn(12, 4, 4, 1)
    labels = [3, 0, 1, 2] * 3
    store = SampleStoreClient(tmp_path / "samples")
    written = store.save(samples, labels)
    assert [p.name for p in written[:2]] == ["sample_3_0.f32", "sample_0_1.f32"]
    loaded, loaded_labels = store.load()
    assert torch.equal(loaded, samples)
    assert loaded_labels.tolist() == labels


def test_float64_samples_are_stored_as_float32(tmp_path):
    samples = torch.randn(2, 4, 4, 3, dtype=torch.float64)
    store = SampleStoreClient(tmp_path)
    store.save(samples, [0, 1])
    loaded, _ = store.load()
    assert loaded.dtype == torch.float32
    assert torch.equal(loaded, samples.to(torch.float32))


def test_array_file_layout(tmp_path):
    path = write_array(tmp_path / "a.f32", np.arange(6, dtype=np.float64).reshape(2, 3))
    data = path.read_bytes()
    assert data.startswith(b"SPRINTARR 2 3\n")
    assert len(data) == len(b"SPRINTARR 2 3\n") + 6 * 4
    assert np.array_equal(read_array(path), np.arange(6, dtype=np.float32).reshape(2, 3))


def test_malformed_arrays_are_rejected(tmp_path):
    path = tmp_path / "bad.f32"
    path.write_bytes(b"no header at all")
    with pytest.raises(CheckpointError, match="missing shape header"):
        read_array(path)
    path.write_bytes(b"OTHER 2\n" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="not a sample array"):
        read_array(path)
    path.write_bytes(b"SPRINTARR 2 2\n" + b"\0" * 12)
    with pytest.raises(CheckpointError, match="payload"):
        read_array(path)


def test_sample_names():
    assert parse_sample_name("sample_2_15") == (2, 15)
    with pytest.raises(CheckpointError):
        parse_sample_name("sample_x_1")


def test_label_count_must_match(tmp_path):
    with pytest.raises(ShapeMismatchError):
        SampleStoreClient(tmp_path).save(torch.zeros(2, 4, 4, 1), [0])


def test_empty_directory_has_no_samples(tmp_path):
    with pytest.raises(CheckpointError, match="no sample arrays"):
        SampleStoreClient(tmp_path).load()


def test_png_export(tmp_path):
    samples = torch.linspace(-1, 1, 32).reshape(2, 4, 4, 1)
    SampleStoreClient(tmp_path).save(samples, [1, 2], export_images=True)
    with Image.open(tmp_path / "sample_1_0.png") as img:
        assert img.mode == "L" and img.size == (4, 4)
        pixels = np.asarray(img)
    assert pixels.min() == 0 and pixels.max() == 255

    rgb = torch.rand(1, 4, 4, 3)
    SampleStoreClient(tmp_path / "rgb").save(rgb, [0], export_images=True)
    with Image.open(tmp_path / "rgb" / "sample_0_0.png") as img:
        assert img.mode == "RGB"
    with pytest.raises(ShapeMismatchError):
        SampleStoreClient.export_png(np.zeros((4, 4, 2), dtype=np.float32), tmp_path / "x.png")


def test_to_uint8_constant_image():
    assert not to_uint8(np.full((2, 2, 1), 3.0)).any()
