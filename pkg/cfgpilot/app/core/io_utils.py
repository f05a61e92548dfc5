"""Dataset files, images (PGM/PNG) and CSV tables."""

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Type, TypeVar, Union

import numpy as np
from PIL import Image
from pydantic import BaseModel

from ..models import DatasetInfo
from .diffusion import ShapeDataset

logger = logging.getLogger(__name__)

DATASET_BIN = "dataset.bin"
DATASET_JSON = "dataset.json"

PathLike = Union[str, Path]
Row = TypeVar("Row", bound=BaseModel)


def ensure_dir(path: PathLike) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {path}: {e.strerror}") from e
    return path


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def save_dataset(dataset: ShapeDataset, directory: PathLike) -> Path:
    directory = ensure_dir(directory)
    (directory / DATASET_BIN).write_bytes(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
    info = DatasetInfo(
        seed=dataset.seed,
        shape=list(dataset.images.shape),
        class_names=list(dataset.class_names),
        labels=[int(y) for y in dataset.labels],
        is_test=[bool(v) for v in dataset.is_test],
        class_counts=dataset.class_counts(),
        n_images=len(dataset.labels),
    )
    (directory / DATASET_JSON).write_text(info.model_dump_json(indent=2))
    logger.info("Wrote %d images to %s", info.n_images, directory)
    return directory


def load_dataset(directory: PathLike) -> ShapeDataset:
    directory = Path(directory)
    meta_path, bin_path = directory / DATASET_JSON, directory / DATASET_BIN
    for path in (meta_path, bin_path):
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
    info = DatasetInfo.model_validate_json(meta_path.read_text())
    raw = bin_path.read_bytes()
    expected = 8 * int(np.prod(info.shape))
    if len(raw) != expected:
        raise ValueError(f"{bin_path} holds {len(raw)} bytes, sidecar describes {expected}")
    images = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(info.shape)
    return ShapeDataset(
        images=images,
        labels=np.asarray(info.labels, dtype=int),
        is_test=np.asarray(info.is_test, dtype=bool),
        seed=info.seed,
        class_names=tuple(info.class_names),
    )


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def to_uint8(image) -> np.ndarray:
    """[-1, 1] floats to 8-bit grey levels."""
    image = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint((image + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def write_image(path: PathLike, image) -> Path:
    """Write a 2-D image; the format (PGM, PNG, ...) follows the file suffix."""
    path = Path(path)
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    Image.fromarray(to_uint8(image)).save(path)
    return path


def read_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as img:
        return from_uint8(np.array(img.convert("L")))


def mosaic(rows: Sequence[Sequence[np.ndarray]], pad: int = 1) -> np.ndarray:
    """Tile equally sized images into one grid with ``pad`` pixels of -1 between tiles."""
    if not rows or not rows[0]:
        raise ValueError("mosaic needs at least one image")
    h, w = np.asarray(rows[0][0]).shape
    n_cols = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) - pad, n_cols * (w + pad) - pad), -1.0)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y, x = i * (h + pad), j * (w + pad)
            out[y:y + h, x:x + w] = tile
    return out


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_models_csv(path: PathLike, rows: Sequence[BaseModel], model: Type[BaseModel]) -> Path:
    header = list(model.model_fields)
    return write_csv(path, header, ([getattr(r, name) for name in header] for r in rows))


def read_csv(path: PathLike) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def read_csv_header(path: PathLike) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")
    with path.open(newline="") as f:
        return next(csv.reader(f), [])


def read_models_csv(path: PathLike, model: Type[Row]) -> List[Row]:
    header = read_csv_header(path)
    expected = list(model.model_fields)
    if header != expected:
        raise ValueError(f"{path} has columns {header}, expected {expected}")
    return [model.model_validate(row) for row in read_csv(path)]


def write_json(path: PathLike, payload: Union[BaseModel, dict]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    text = payload.model_dump_json(indent=2) if isinstance(payload, BaseModel) else json.dumps(payload, indent=2)
    path.write_text(text)
    return path
