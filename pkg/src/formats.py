"""On-disk formats: OGG1 occupancy grids, PLY point clouds and PNG images.

See FORMATS.md for the byte layouts.
"""

import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .errors import GridFormatError, ManifestError
from .occupancy import UNLABELED, OccupancyGrid, PointSource, SemanticPointCloud


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

GRID_MAGIC = b"OGG1"
# magic, H, W, D, N, origin[3], cell_size, frame_index
GRID_HEADER = struct.Struct("<4s4I3ffI")


# ---------------------------------------------------------------------------
# Occupancy grids
# ---------------------------------------------------------------------------

def encode_grid(grid: OccupancyGrid) -> bytes:
    """Serialize a grid; records are (p, class probs...) with ``i`` fastest."""
    H, W, D = grid.dims
    header = GRID_HEADER.pack(
        GRID_MAGIC, H, W, D, grid.num_classes,
        *(float(v) for v in grid.origin), float(grid.cell_size), int(grid.frame_index),
    )
    records = np.concatenate((grid.occupancy[..., None], grid.class_probs), axis=-1)
    # (H, W, D, C) -> (D, W, H, C) so that i varies fastest in C order
    payload = np.ascontiguousarray(records.transpose(2, 1, 0, 3), dtype="<f4")
    return header + payload.tobytes()


def decode_grid(data: bytes, path: PathLike = "<memory>") -> OccupancyGrid:
    """Parse OGG1 bytes.

    Raises:
        GridFormatError: Naming the path and byte offset of the first problem.
    """
    if len(data) < GRID_HEADER.size:
        raise GridFormatError(path, len(data), f"truncated header ({len(data)} of {GRID_HEADER.size} bytes)")
    magic, H, W, D, N, ox, oy, oz, cell, frame = GRID_HEADER.unpack_from(data, 0)
    if magic != GRID_MAGIC:
        raise GridFormatError(path, 0, f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
    if min(H, W, D) == 0 or N == 0:
        raise GridFormatError(path, 4, f"empty lattice {H}x{W}x{D} with {N} classes")
    if not (np.isfinite(cell) and cell > 0):
        raise GridFormatError(path, 32, f"cell size must be positive, got {cell}")

    channels = 1 + N
    expected = GRID_HEADER.size + H * W * D * channels * 4
    if len(data) != expected:
        raise GridFormatError(path, min(len(data), expected), f"payload size {len(data)} bytes, expected {expected}")

    payload = np.frombuffer(data, dtype="<f4", offset=GRID_HEADER.size).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise GridFormatError(path, GRID_HEADER.size + int(bad[0]) * 4, "non-finite value")
    records = payload.reshape(D, W, H, channels).transpose(2, 1, 0, 3)
    return OccupancyGrid(
        occupancy=records[..., 0].copy(),
        class_probs=records[..., 1:].copy(),
        origin=np.array([ox, oy, oz]),
        cell_size=float(cell),
        frame_index=int(frame),
    )


def write_grid(path: PathLike, grid: OccupancyGrid) -> None:
    Path(path).write_bytes(encode_grid(grid))


def read_grid(path: PathLike) -> OccupancyGrid:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise GridFormatError(path, 0, f"unreadable: {e.strerror or e}") from e
    return decode_grid(data, path)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

def _to_uint8(colors: np.ndarray) -> np.ndarray:
    return np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_point_cloud(path: PathLike, cloud: SemanticPointCloud, text: bool = False) -> None:
    """Write x, y, z, red, green, blue, label and source per vertex."""
    vertex = np.empty(
        len(cloud),
        dtype=[
            ("x", "f8"), ("y", "f8"), ("z", "f8"),
            ("red", "u1"), ("green", "u1"), ("blue", "u1"),
            ("label", "i4"), ("source", "u1"),
        ],
    )
    vertex["x"], vertex["y"], vertex["z"] = cloud.positions.T
    rgb = _to_uint8(cloud.colors)
    vertex["red"], vertex["green"], vertex["blue"] = rgb.T
    vertex["label"] = cloud.labels
    vertex["source"] = cloud.sources
    PlyData([PlyElement.describe(vertex, "vertex")], text=text, byte_order="<").write(str(path))


def read_point_cloud(path: PathLike, source: Optional[PointSource] = None) -> SemanticPointCloud:
    """Read a PLY cloud; colour, label and source properties are optional.

    Raises:
        ManifestError: If the file cannot be parsed or lacks x, y, z.
    """
    try:
        ply = PlyData.read(str(path))
        vertex = ply["vertex"].data
    except Exception as e:  # plyfile raises a variety of parse errors
        raise ManifestError(f"{path}: cannot read PLY: {e}") from e

    names = vertex.dtype.names or ()
    if not {"x", "y", "z"} <= set(names):
        raise ManifestError(f"{path}: PLY vertex element lacks x, y, z")
    positions = np.stack([np.asarray(vertex[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1)
    count = len(positions)

    colors = None
    if {"red", "green", "blue"} <= set(names):
        raw = np.stack([np.asarray(vertex[c]) for c in ("red", "green", "blue")], axis=1)
        colors = raw.astype(np.float64) / 255.0 if np.issubdtype(raw.dtype, np.integer) else raw.astype(np.float64)
    labels = np.asarray(vertex["label"], dtype=np.int64) if "label" in names else np.full(count, UNLABELED)

    cloud = SemanticPointCloud.from_points(positions, labels=labels, colors=colors)
    if source is not None:
        cloud.sources[:] = int(source)
    elif "source" in names:
        cloud.sources = np.asarray(vertex["source"], dtype=np.uint8)
    return cloud


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def write_image(path: PathLike, rgb: np.ndarray) -> None:
    """8-bit RGB PNG from a float image in [0, 1]."""
    Image.fromarray(_to_uint8(np.asarray(rgb, dtype=np.float64))).save(path, format="PNG")


def read_image(path: PathLike) -> np.ndarray:
    """Float RGB image in [0, 1] of shape (H, W, 3)."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise ManifestError(f"{path}: cannot read image: {e}") from e


def write_depth(path: PathLike, depth: np.ndarray, depth_max: float) -> None:
    """16-bit grayscale PNG, ``0..depth_max`` mapped linearly to ``0..65535``."""
    scaled = np.clip(np.asarray(depth, dtype=np.float64) / depth_max, 0.0, 1.0) * 65535.0
    Image.fromarray(np.round(scaled).astype(np.uint16)).save(path, format="PNG")


def read_depth(path: PathLike, depth_max: float) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 65535.0 * depth_max


def write_mask(path: PathLike, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path, format="PNG")


def read_mask(path: PathLike) -> np.ndarray:
    """Boolean mask; any non-zero label pixel counts as set."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L")) > 0
    except OSError as e:
        raise ManifestError(f"{path}: cannot read mask: {e}") from e


def write_labels(path: PathLike, labels: np.ndarray) -> None:
    """8-bit PNG of per-pixel class ids."""
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path, format="PNG")
