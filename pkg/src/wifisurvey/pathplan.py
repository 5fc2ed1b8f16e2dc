"""Coverage-path planning over segmented regions.

Each region is swept along its principal axis: the eigenvector of the
pixel-coordinate covariance with the larger eigenvalue. The region is
wrapped in the minimum rectangle aligned to that axis, the rectangle is
tiled with fixed-size cells, and cell centers inside the region are
visited in a serpentine (boustrophedon) order, which minimizes turning
for elongated regions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .gridmap import BinaryGrid
from .segmentation import Region, SegmentedMap

DEFAULT_CELL_SIZE_M = 0.8


class DegenerateRegion(ValueError):
    """Region too small to define principal axes."""


class EmptyPlan(ValueError):
    """No region produced any waypoint."""


@dataclass
class PrincipalAxes:
    a1: np.ndarray        # unit 2-vector, sweep direction
    a2: np.ndarray        # unit 2-vector, orthogonal, right-handed with a1
    eigvals: tuple[float, float]  # (lambda1 >= lambda2), px^2


@dataclass
class RectInFPrime:
    """Axis-aligned bounds in the rotated frame F' = [a1; a2], meters."""

    u_min: float
    u_max: float
    v_min: float
    v_max: float
    axes: PrincipalAxes

    @property
    def width(self) -> float:
        return self.u_max - self.u_min

    @property
    def height(self) -> float:
        return self.v_max - self.v_min


@dataclass
class Waypoint:
    region_id: int
    seq: int              # order inside the region's sub-plan
    x: float
    y: float
    heading: float        # travel direction along the current leg, radians


@dataclass
class SurveyPlan:
    waypoints: list[Waypoint]    # global visiting order
    region_order: list[int]
    cell_size: float

    def by_region(self) -> dict[int, list[Waypoint]]:
        out: dict[int, list[Waypoint]] = {}
        for wp in self.waypoints:
            out.setdefault(wp.region_id, []).append(wp)
        return out

    def positions(self) -> np.ndarray:
        return np.array([[wp.x, wp.y] for wp in self.waypoints])

    def to_jsonl(self) -> str:
        lines = []
        for wp in self.waypoints:
            lines.append(json.dumps({
                "region_id": wp.region_id, "seq": wp.seq,
                "x_m": round(wp.x, 6), "y_m": round(wp.y, 6),
                "heading_rad": round(wp.heading, 6),
            }))
        return "\n".join(lines) + "\n"


def principal_axes(region: Region) -> PrincipalAxes:
    """Eigen-decomposition of the 2x2 covariance of region pixel coordinates.

    Sign convention: a1.x >= 0, and a1.y > 0 when a1.x == 0; equal
    eigenvalues fall back to a1 = (1, 0). a2 completes a right-handed frame.
    """
    if len(region.pixels) < 2:
        raise DegenerateRegion(f"region {region.id} has {len(region.pixels)} pixel(s)")
    xy = region.pixels[:, ::-1].astype(float)  # (col, row) -> (x, y)
    cov = np.cov(xy.T, bias=True)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    lam1, lam2 = float(evals[1]), float(evals[0])
    if math.isclose(lam1, lam2, rel_tol=1e-12, abs_tol=1e-12):
        a1 = np.array([1.0, 0.0])
    else:
        a1 = evecs[:, 1].copy()
        if a1[0] < 0 or (abs(a1[0]) < 1e-12 and a1[1] < 0):
            a1 = -a1
        if abs(a1[0]) < 1e-12:
            a1 = np.array([0.0, 1.0])
    a2 = np.array([-a1[1], a1[0]])
    return PrincipalAxes(a1, a2, (lam1, lam2))


def bounding_rectangle(region: Region, axes: PrincipalAxes, resolution: float,
                       origin: tuple[float, float] = (0.0, 0.0)) -> RectInFPrime:
    """Minimum rectangle covering the region's pixel squares, in the F' frame.

    Pixel squares (not just centers) are covered, so the rectangle area is
    never smaller than the region's pixel area; a single row yields a
    one-pixel-high rectangle.
    """
    xy = region.pixels[:, ::-1].astype(float) * resolution
    xy[:, 0] += origin[0]
    xy[:, 1] += origin[1]
    u = xy @ axes.a1
    v = xy @ axes.a2
    # half-pixel margin: extent of a rotated pixel square along each F' axis
    mu = 0.5 * resolution * (abs(axes.a1[0]) + abs(axes.a1[1]))
    mv = 0.5 * resolution * (abs(axes.a2[0]) + abs(axes.a2[1]))
    return RectInFPrime(float(u.min() - mu), float(u.max() + mu),
                        float(v.min() - mv), float(v.max() + mv), axes)


def grid_waypoints(rect: RectInFPrime, region: Region, seg: SegmentedMap,
                   cell_size: float = DEFAULT_CELL_SIZE_M) -> list[Waypoint]:
    """Tile the rectangle with cell_size cells and keep centers inside the region.

    The tiling is centered on the rectangle; rows (along a2) alternate
    direction so consecutive waypoints form a serpentine sweep along a1.
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be > 0")
    a1, a2 = rect.axes.a1, rect.axes.a2
    n_u = max(1, math.ceil(rect.width / cell_size - 1e-9))
    n_v = max(1, math.ceil(rect.height / cell_size - 1e-9))
    u0 = 0.5 * (rect.u_min + rect.u_max) - 0.5 * n_u * cell_size
    v0 = 0.5 * (rect.v_min + rect.v_max) - 0.5 * n_v * cell_size

    res = seg.resolution
    ox, oy = seg.origin
    h, w = seg.label_image.shape
    out: list[Waypoint] = []
    seq = 0
    for j in range(n_v):
        v = v0 + (j + 0.5) * cell_size
        forward = j % 2 == 0
        cols = range(n_u) if forward else range(n_u - 1, -1, -1)
        d = a1 if forward else -a1
        heading = math.atan2(d[1], d[0])
        row_pts = []
        for i in cols:
            u = u0 + (i + 0.5) * cell_size
            p = u * a1 + v * a2
            col = int(math.floor((p[0] - ox) / res + 0.5))
            row = int(math.floor((p[1] - oy) / res + 0.5))
            if 0 <= col < w and 0 <= row < h and seg.label_image[row, col] == region.id:
                row_pts.append((float(p[0]), float(p[1])))
        for x, y in row_pts:
            out.append(Waypoint(region.id, seq, x, y, heading))
            seq += 1
    return out


def _order_regions(sub_plans: dict[int, list[Waypoint]], start: tuple[float, float]) -> list[tuple[int, bool]]:
    """Greedy nearest-entry ordering; a sub-plan may be entered at either end.

    Returns (region_id, reversed) pairs. Isolated here so a smarter tour can
    replace it without touching the rest of the planner.
    """
    pos = np.array(start)
    remaining = sorted(sub_plans)
    order: list[tuple[int, bool]] = []
    while remaining:
        best = None
        for rid in remaining:
            wps = sub_plans[rid]
            d_first = float(np.hypot(wps[0].x - pos[0], wps[0].y - pos[1]))
            d_last = float(np.hypot(wps[-1].x - pos[0], wps[-1].y - pos[1]))
            for d, rev in ((d_first, False), (d_last, True)):
                if best is None or (d, rid, rev) < best:
                    best = (d, rid, rev)
        _, rid, rev = best
        order.append((rid, rev))
        remaining.remove(rid)
        end = sub_plans[rid][0 if rev else -1]
        pos = np.array([end.x, end.y])
    return order


def plan_survey(seg: SegmentedMap, inflated: BinaryGrid,
                cell_size: float = DEFAULT_CELL_SIZE_M) -> SurveyPlan:
    """One serpentine sub-plan per region, regions chained greedily from the map origin."""
    sub_plans: dict[int, list[Waypoint]] = {}
    for region in seg.regions:
        if len(region.pixels) < 2:
            continue
        axes = principal_axes(region)
        rect = bounding_rectangle(region, axes, seg.resolution, seg.origin)
        wps = grid_waypoints(rect, region, seg, cell_size)
        wps = [wp for wp in wps if inflated.is_free_world(wp.x, wp.y)]
        if wps:
            sub_plans[region.id] = wps
    if not sub_plans:
        raise EmptyPlan("no waypoints inside any region")

    order = _order_regions(sub_plans, inflated.pixel_to_world(0, 0))
    waypoints: list[Waypoint] = []
    for rid, rev in order:
        wps = sub_plans[rid]
        if rev:
            wps = [Waypoint(w.region_id, len(wps) - 1 - w.seq, w.x, w.y,
                            math.atan2(-math.sin(w.heading), -math.cos(w.heading)))
                   for w in reversed(wps)]
        waypoints.extend(wps)
    return SurveyPlan(waypoints, [rid for rid, _ in order], cell_size)
