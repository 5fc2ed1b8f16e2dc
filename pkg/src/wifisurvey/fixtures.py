"""Synthetic floor maps used by tests, the demo pipeline and the CLI.

Three floors, drawn rather than traced from any real building:
- room: one rectangular room;
- plus: two crossing corridors of different widths;
- floor3: a department-style floor, central corridor with offices on both
  sides and a larger lab at one end.
"""

from __future__ import annotations

import numpy as np

from .gridmap import OccupancyGrid

FREE_GRAY = 254
WALL_GRAY = 0

FIXTURE_NAMES = ("room", "plus", "floor3")


def _canvas(width_px: int, height_px: int) -> np.ndarray:
    return np.full((height_px, width_px), WALL_GRAY, dtype=np.uint8)


def _carve(cells: np.ndarray, x0: float, y0: float, x1: float, y1: float, res: float):
    """Open a free rectangle given in meters (min-corner inclusive)."""
    c0, c1 = int(round(x0 / res)), int(round(x1 / res))
    r0, r1 = int(round(y0 / res)), int(round(y1 / res))
    cells[r0:r1, c0:c1] = FREE_GRAY


def room_map(resolution: float = 0.1) -> OccupancyGrid:
    """Single 10 x 8 m room with 0.2 m walls."""
    res = resolution
    cells = _canvas(int(10.4 / res), int(8.4 / res))
    _carve(cells, 0.2, 0.2, 10.2, 8.2, res)
    return OccupancyGrid(cells, res)


def plus_map(resolution: float = 0.1) -> OccupancyGrid:
    """Two crossing corridors: 2.4 m wide horizontal, 4.8 m wide vertical."""
    res = resolution
    cells = _canvas(int(24.0 / res), int(24.0 / res))
    _carve(cells, 0.4, 10.8, 23.6, 13.2, res)   # horizontal corridor
    _carve(cells, 9.6, 0.4, 14.4, 23.6, res)    # vertical corridor
    return OccupancyGrid(cells, res)


def floor3_map(resolution: float = 0.1) -> OccupancyGrid:
    """Department-style floor, about 30 x 15 m.

    A 2.4 m corridor runs the length of the floor; four offices open off
    each side through 1.2 m doorways, and a lab sits at the east end.
    """
    res = resolution
    cells = _canvas(int(30.4 / res), int(15.2 / res))
    corr_y0, corr_y1 = 6.4, 8.8
    _carve(cells, 0.4, corr_y0, 24.0, corr_y1, res)            # corridor
    _carve(cells, 24.0, 1.0, 30.0, 14.2, res)                  # lab, east end
    office_w, gap = 5.2, 0.6
    for k in range(4):
        x0 = 0.6 + k * (office_w + gap)
        x1 = x0 + office_w
        _carve(cells, x0, 1.2, x1, 6.2, res)                   # south office
        _carve(cells, x0, 9.0, x1, 14.0, res)                  # north office
        door = (x0 + x1) / 2
        _carve(cells, door - 0.6, 6.2, door + 0.6, corr_y0, res)   # south door
        _carve(cells, door - 0.6, corr_y1, door + 0.6, 9.0, res)   # north door
    return OccupancyGrid(cells, res)


def make_fixture(name: str, resolution: float = 0.1) -> OccupancyGrid:
    builders = {"room": room_map, "plus": plus_map, "floor3": floor3_map}
    if name not in builders:
        raise KeyError(f"unknown fixture {name!r}; have {sorted(builders)}")
    return builders[name](resolution)
