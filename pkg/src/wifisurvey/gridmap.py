"""Occupancy-grid loading, obstacle thresholding, inflation and distance transforms.

Grids are raster floor maps: a gray-scale occupancy image (walls dark),
a binary free/obstacle mask derived from it, and a Euclidean
distance-to-nearest-obstacle image used by the segmentation stage.

Conventions:
- cells are numpy arrays of shape (height, width), row-major;
- pixel (col, row) has its center at world coordinates
  (origin_x + col * resolution, origin_y + row * resolution);
- all grid objects are treated as immutable after construction.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FREE = 0
OBSTACLE = 1

DEFAULT_RESOLUTION_M = 0.05
DEFAULT_OBSTACLE_THRESHOLD = 100


class ParseError(ValueError):
    """Malformed PGM header or payload."""


class UnsupportedFormat(ValueError):
    """PGM is syntactically valid but not a format we accept (e.g. maxval != 255)."""


class AllFreeError(ValueError):
    """Distance transform requested on a grid with no obstacle pixels."""


@dataclass
class OccupancyGrid:
    """Gray-scale floor map, 0 = black (wall-ish), 255 = white (free-ish)."""

    cells: np.ndarray  # uint8, (height, width)
    resolution: float  # meters per pixel
    origin: tuple[float, float] = (0.0, 0.0)  # world coords of pixel (0, 0)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.ndim != 2:
            raise ValueError("cells must be a 2-D array")
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]


@dataclass
class BinaryGrid:
    """Free/obstacle mask with the geometry of its source OccupancyGrid."""

    cells: np.ndarray  # uint8 in {FREE, OBSTACLE}, (height, width)
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.resolution <= 0:
            raise ValueError("resolution must be > 0")

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def free_mask(self) -> np.ndarray:
        return self.cells == FREE

    @property
    def obstacle_mask(self) -> np.ndarray:
        return self.cells == OBSTACLE

    def world_to_pixel(self, x: float, y: float) -> tuple[int, int]:
        """Containing pixel (col, row) of a world point; pixel centers at origin + index*res."""
        col = int(np.floor((x - self.origin[0]) / self.resolution + 0.5))
        row = int(np.floor((y - self.origin[1]) / self.resolution + 0.5))
        return col, row

    def pixel_to_world(self, col: float, row: float) -> tuple[float, float]:
        return (self.origin[0] + col * self.resolution,
                self.origin[1] + row * self.resolution)

    def contains_pixel(self, col: int, row: int) -> bool:
        return 0 <= col < self.width and 0 <= row < self.height

    def is_free_world(self, x: float, y: float) -> bool:
        col, row = self.world_to_pixel(x, y)
        return self.contains_pixel(col, row) and self.cells[row, col] == FREE


@dataclass
class DistanceImage:
    """Per-pixel exact Euclidean distance to the nearest obstacle, in meters."""

    cells: np.ndarray  # float64, (height, width)
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    # squared distance in pixel units; kept because downstream circle tests
    # are exact on integers but lossy after sqrt
    sq_px: np.ndarray = field(default=None, repr=False)

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]


# ---------------------------------------------------------------------------
# PGM + sidecar I/O

_TOKEN_RE = re.compile(rb"\S+")


def _pgm_tokens(data: bytes, count: int, start: int = 0) -> tuple[list[bytes], int]:
    """Return `count` whitespace-separated tokens, skipping '#' comments."""
    tokens = []
    pos = start
    while len(tokens) < count:
        m = _TOKEN_RE.search(data, pos)
        if m is None:
            raise ParseError("unexpected end of PGM header")
        tok = m.group(0)
        if tok.startswith(b"#"):
            eol = data.find(b"\n", m.start())
            if eol < 0:
                raise ParseError("unterminated comment in PGM header")
            pos = eol + 1
            continue
        tokens.append(tok)
        pos = m.end()
    return tokens, pos


def load_grid(path, resolution: float | None = None,
              origin: tuple[float, float] | None = None) -> OccupancyGrid:
    """Load a P2/P5 PGM; metadata comes from a `<name>.meta.json` sidecar unless given.

    Raises ParseError on malformed files and UnsupportedFormat when maxval != 255.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) == 0:
        raise ParseError(f"{path}: empty file")

    (magic,), pos = _pgm_tokens(data, 1)
    if magic not in (b"P2", b"P5"):
        raise ParseError(f"{path}: not a P2/P5 PGM (magic {magic!r})")
    header, pos = _pgm_tokens(data, 3, pos)
    try:
        width, height, maxval = (int(t) for t in header)
    except ValueError as e:
        raise ParseError(f"{path}: non-integer header field") from e
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"{path}: maxval {maxval} unsupported (need 255)")

    n = width * height
    if magic == b"P5":
        # exactly one whitespace byte after maxval, then raw payload
        payload = data[pos + 1: pos + 1 + n]
        if len(payload) < n:
            raise ParseError(f"{path}: truncated P5 payload")
        cells = np.frombuffer(payload, dtype=np.uint8, count=n)
    else:
        tokens, _ = _pgm_tokens(data, n, pos)
        try:
            cells = np.array([int(t) for t in tokens], dtype=np.int64)
        except ValueError as e:
            raise ParseError(f"{path}: non-integer pixel value") from e
        if cells.min() < 0 or cells.max() > 255:
            raise ParseError(f"{path}: pixel value out of range")
        cells = cells.astype(np.uint8)

    meta = _load_sidecar(path)
    if resolution is None:
        resolution = meta.get("resolution_m", DEFAULT_RESOLUTION_M)
    if origin is None:
        origin = (meta.get("origin_x_m", 0.0), meta.get("origin_y_m", 0.0))
    return OccupancyGrid(cells.reshape(height, width), resolution, tuple(origin))


def _load_sidecar(pgm_path: Path) -> dict:
    sidecar = pgm_path.with_suffix(".meta.json")
    if not sidecar.exists():
        return {}
    return json.loads(sidecar.read_text())


def save_grid(grid, path, binary: bool = True, scale_binary: bool = True) -> None:
    """Write a grid as PGM (P5 by default) plus its metadata sidecar.

    BinaryGrid cells are scaled to {0, 255} for viewability unless
    scale_binary is False; DistanceImage is normalized to 0..255.
    """
    path = Path(path)
    cells = grid.cells
    if isinstance(grid, BinaryGrid) and scale_binary:
        cells = np.where(cells == OBSTACLE, 0, 255).astype(np.uint8)
    elif isinstance(grid, DistanceImage):
        top = float(cells.max())
        cells = (cells / top * 255.0).astype(np.uint8) if top > 0 else np.zeros_like(cells, np.uint8)
    else:
        cells = cells.astype(np.uint8)

    h, w = cells.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    path.write_bytes(header + cells.tobytes())
    sidecar = {
        "resolution_m": grid.resolution,
        "origin_x_m": grid.origin[0],
        "origin_y_m": grid.origin[1],
    }
    path.with_suffix(".meta.json").write_text(json.dumps(sidecar, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Obstacle extraction

def threshold_obstacles(grid: OccupancyGrid, threshold: int = DEFAULT_OBSTACLE_THRESHOLD) -> BinaryGrid:
    """Mark pixels darker than `threshold` as obstacles; gray mid-values count as free."""
    threshold = int(np.clip(threshold, 0, 255))
    cells = np.where(grid.cells < threshold, OBSTACLE, FREE).astype(np.uint8)
    return BinaryGrid(cells, grid.resolution, grid.origin)


def inflate_obstacles(grid: BinaryGrid, robot_radius: float) -> BinaryGrid:
    """Grow obstacles by a Euclidean disk of `robot_radius` meters.

    A pixel becomes an obstacle iff its center lies within robot_radius of
    some source obstacle pixel center. radius 0 is the identity; a grid with
    no obstacles is returned unchanged.
    """
    if robot_radius < 0:
        raise ValueError("robot_radius must be >= 0")
    if not grid.obstacle_mask.any() or robot_radius == 0:
        return BinaryGrid(grid.cells.copy(), grid.resolution, grid.origin)
    sq_px = _edt_squared_px(grid.obstacle_mask)
    r_px_sq = (robot_radius / grid.resolution) ** 2
    cells = np.where(sq_px <= r_px_sq + 1e-9, OBSTACLE, FREE).astype(np.uint8)
    return BinaryGrid(cells, grid.resolution, grid.origin)


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform (two-pass lower-envelope method)

def _edt_1d_sq(f: np.ndarray) -> np.ndarray:
    """1-D squared-distance transform of a sampled function f (lower envelope of parabolas)."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.int64)  # sites of visible parabolas
    z = np.empty(n + 1)              # boundaries between parabolas
    k = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def _edt_squared_px(obstacles: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance (pixel units) to the nearest True pixel."""
    h, w = obstacles.shape
    big = float(h * h + w * w + 1)
    f = np.where(obstacles, 0.0, big)
    # columns then rows
    for col in range(w):
        f[:, col] = _edt_1d_sq(f[:, col])
    for row in range(h):
        f[row, :] = _edt_1d_sq(f[row, :])
    return f


def distance_transform(grid: BinaryGrid) -> DistanceImage:
    """Exact Euclidean distance to the nearest obstacle pixel, in meters.

    Raises AllFreeError when the grid has no obstacle at all (callers should
    add a border wall first).
    """
    if not grid.obstacle_mask.any():
        raise AllFreeError("grid has no obstacle pixels")
    sq_px = _edt_squared_px(grid.obstacle_mask)
    cells = np.sqrt(sq_px) * grid.resolution
    return DistanceImage(cells, grid.resolution, grid.origin, sq_px=sq_px)
