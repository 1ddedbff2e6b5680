"""
Sample Store Client - Portable sample arrays and optional PNG export

Array file: one ASCII header line ``SPRINTARR <d0> <d1> ... <dk>\\n`` followed by
little-endian float32 values in C order. Files are named
``sample_{class}_{index}.f32`` (PNG: ``sample_{class}_{index}.png``).
"""

import re
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np
import torch
from loguru import logger
from PIL import Image

from utils.error_handling import CheckpointError, ShapeMismatchError

ARRAY_TAG = "SPRINTARR"
ARRAY_SUFFIX = ".f32"
_NAME = re.compile(r"^sample_(\d+)_(\d+)$")


def sample_name(label: int, index: int) -> str:
    return f"sample_{label}_{index}"


def parse_sample_name(stem: str) -> Tuple[int, int]:
    """(class, index) encoded in a sample file stem."""
    match = _NAME.match(stem)
    if match is None:
        raise CheckpointError(f"'{stem}' does not follow sample_{{class}}_{{index}}")
    return int(match.group(1)), int(match.group(2))


def write_array(path: Union[str, Path], array: np.ndarray) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array, dtype="<f4")
    header = " ".join([ARRAY_TAG, *(str(d) for d in array.shape)]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(array.tobytes())
    return path


def read_array(path: Union[str, Path]) -> np.ndarray:
    """
    Read an array written by write_array.

    Raises:
        CheckpointError: Missing header, bad tag or wrong payload size
    """
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise CheckpointError(f"{path}: missing shape header")
    fields = data[:newline].decode("ascii", errors="replace").split()
    if not fields or fields[0] != ARRAY_TAG:
        raise CheckpointError(f"{path}: not a sample array")
    try:
        shape = tuple(int(d) for d in fields[1:])
    except ValueError as e:
        raise CheckpointError(f"{path}: bad shape header {fields[1:]}") from e
    payload = data[newline + 1 :]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Min-max scale one (H, W, ch) image to 8-bit; constant images map to 0."""
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip(np.rint((image - lo) * scale), 0, 255).astype(np.uint8)


class SampleStoreClient:
    """Reads and writes one directory of generated samples."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def save(self, samples: torch.Tensor, labels: Iterable[int], export_images: bool = False) -> List[Path]:
        """
        Write one array file per sample, and a PNG when requested.

        Args:
            samples: (B, H, W, ch) images
            labels: (B,) class labels
            export_images: Also write 8-bit grayscale (ch=1) or RGB (ch=3) PNGs

        Returns:
            list: Written array paths, in sample order
        """
        labels = [int(c) for c in labels]
        if len(labels) != samples.shape[0]:
            raise ShapeMismatchError(f"{samples.shape[0]} samples but {len(labels)} labels")
        self.root.mkdir(parents=True, exist_ok=True)
        arrays = samples.detach().cpu().to(torch.float32).numpy()
        written = []
        for index, (label, image) in enumerate(zip(labels, arrays)):
            name = sample_name(label, index)
            written.append(write_array(self.root / f"{name}{ARRAY_SUFFIX}", image))
            if export_images:
                self.export_png(image, self.root / f"{name}.png")
        logger.info(f"wrote {len(written)} samples to {self.root}")
        return written

    @staticmethod
    def export_png(image: np.ndarray, path: Union[str, Path]) -> Path:
        ch = image.shape[-1]
        if ch == 1:
            Image.fromarray(to_uint8(image)[..., 0]).save(path)
        elif ch == 3:
            Image.fromarray(to_uint8(image)).save(path)
        else:
            raise ShapeMismatchError(f"PNG export needs 1 or 3 channels, got {ch}")
        return Path(path)

    def load(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Load every sample array in the directory, ordered by index.

        Returns:
            tuple: (samples (B, H, W, ch) float32, labels (B,) int64)
        """
        files = sorted(self.root.glob(f"sample_*{ARRAY_SUFFIX}"), key=lambda p: parse_sample_name(p.stem)[::-1])
        if not files:
            raise CheckpointError(f"no sample arrays found in {self.root}")
        labels, images = [], []
        for path in files:
            label, _ = parse_sample_name(path.stem)
            labels.append(label)
            images.append(read_array(path))
        shapes = {img.shape for img in images}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"sample arrays in {self.root} have mixed shapes {sorted(shapes)}")
        return torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long)
