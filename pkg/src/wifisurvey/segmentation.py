"""Decomposition of free space into regular regions.

Pipeline: distance image -> free-space image (circle-stamp maximum,
quantized) -> same-value connected components -> ripple removal
(small regions absorbed by the neighbor sharing most of their boundary)
-> merge of adjacent regions with similar size values.

All stages preserve the partition invariant: regions are disjoint,
4-connected, and cover exactly the free pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .gridmap import DistanceImage

NO_REGION = -1  # label_image value on obstacle pixels

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

DEFAULT_QUANTIZATION_M = 0.5
DEFAULT_OVERLAP_THRESHOLD = 0.40
DEFAULT_VALUE_TOLERANCE_M = 0.5


@dataclass
class SegmentationParams:
    quantization_m: float = DEFAULT_QUANTIZATION_M
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    value_tolerance_m: float = DEFAULT_VALUE_TOLERANCE_M


@dataclass
class FreeSpaceImage:
    """Per-pixel size (meters) of the largest obstacle-free circle covering it."""

    cells: np.ndarray        # float64 (height, width), quantized, 0 on obstacles
    free: np.ndarray         # bool mask of free pixels (a free pixel may carry value 0)
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    quantization: float = DEFAULT_QUANTIZATION_M

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]


@dataclass
class Region:
    id: int
    pixels: np.ndarray       # (k, 2) int array of (row, col)
    value: float             # representative free-space value, meters
    area_px: int = field(init=False)

    def __post_init__(self):
        self.area_px = len(self.pixels)
        if self.area_px == 0:
            raise ValueError("region must be non-empty")


@dataclass
class SegmentedMap:
    regions: list[Region]
    label_image: np.ndarray  # int, region id per pixel, NO_REGION on obstacles
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def region_by_id(self, rid: int) -> Region:
        for r in self.regions:
            if r.id == rid:
                return r
        raise KeyError(rid)


def free_space_image(dist: DistanceImage, quantization: float = DEFAULT_QUANTIZATION_M) -> FreeSpaceImage:
    """Stamp each pixel's clearance circle and keep the per-pixel maximum radius.

    fsi(q) = max over p of { r(p) : ||q - p|| <= r(p) }, floor-quantized to
    multiples of `quantization`. Obstacles stay 0.
    """
    if quantization <= 0:
        raise ValueError("quantization must be > 0")
    res = dist.resolution
    free = dist.cells > 0
    raw = np.zeros_like(dist.cells)

    # one dilation per distinct radius; dilation by a Euclidean disk equals
    # thresholding the distance to the stamping set
    for r_m in np.unique(dist.cells[free]):
        mask = dist.cells == r_m
        rad_px = r_m / res
        reach = ndimage.distance_transform_edt(~mask)
        stamped = reach <= rad_px + 1e-9
        np.maximum(raw, np.where(stamped, r_m, 0.0), out=raw)

    q = np.floor(raw / quantization + 1e-9) * quantization
    q[~free] = 0.0
    return FreeSpaceImage(q, free, res, dist.origin, quantization)


def group_regions(fsi: FreeSpaceImage) -> SegmentedMap:
    """4-connected components of equal quantized value over the free mask."""
    label_image = np.full(fsi.cells.shape, NO_REGION, dtype=np.int64)
    regions: list[Region] = []
    next_id = 0
    for v in np.unique(fsi.cells[fsi.free]):
        mask = (fsi.cells == v) & fsi.free
        labels, n = ndimage.label(mask, structure=FOUR_CONN)
        for comp in range(1, n + 1):
            pix = np.argwhere(labels == comp)
            label_image[pix[:, 0], pix[:, 1]] = next_id
            regions.append(Region(next_id, pix, float(v)))
            next_id += 1
    return SegmentedMap(regions, label_image, fsi.resolution, fsi.origin)


def _neighbor_labels(label_image: np.ndarray) -> np.ndarray:
    """(4, h, w) array of 4-neighbor labels, NO_REGION beyond the map edge."""
    h, w = label_image.shape
    out = np.full((4, h, w), NO_REGION, dtype=label_image.dtype)
    out[0, 1:, :] = label_image[:-1, :]   # up
    out[1, :-1, :] = label_image[1:, :]   # down
    out[2, :, 1:] = label_image[:, :-1]   # left
    out[3, :, :-1] = label_image[:, 1:]   # right
    return out


def boundary_pixel_counts(label_image: np.ndarray) -> tuple[dict[int, int], dict[tuple[int, int], int]]:
    """Per-region boundary sizes, counted in pixels.

    Returns (boundary_px, shared_px) where boundary_px[a] is the number of
    region-a pixels with at least one 4-neighbor outside a (other region,
    obstacle, or map border), and shared_px[(a, b)] is the number of
    region-a pixels with at least one 4-neighbor in region b.
    """
    h, w = label_image.shape
    neigh = _neighbor_labels(label_image)
    own = label_image
    is_region = own != NO_REGION
    on_boundary = ((neigh != own[None]).any(axis=0)) & is_region

    boundary_px = {int(rid): int(c)
                   for rid, c in zip(*np.unique(own[on_boundary], return_counts=True))}

    flat = np.arange(h * w).reshape(h, w)
    triples = []
    for d in range(4):
        nb = neigh[d]
        sel = is_region & (nb != NO_REGION) & (nb != own)
        if sel.any():
            triples.append(np.stack([flat[sel], own[sel], nb[sel]], axis=1))
    shared_px: dict[tuple[int, int], int] = {}
    if triples:
        # a pixel may touch the same neighbor region through several edges
        uniq = np.unique(np.concatenate(triples, axis=0), axis=0)
        keys, counts = np.unique(uniq[:, 1:], axis=0, return_counts=True)
        for (a, b), c in zip(keys, counts):
            shared_px[(int(a), int(b))] = int(c)
    return boundary_px, shared_px


def _adjacency_edges(label_image: np.ndarray) -> set[tuple[int, int]]:
    """Pairs of distinct region ids sharing at least one 4-adjacent pixel edge."""
    edges: set[tuple[int, int]] = set()

    def tally(a: np.ndarray, b: np.ndarray):
        sel = (a != b) & (a != NO_REGION) & (b != NO_REGION)
        if sel.any():
            lo = np.minimum(a[sel], b[sel])
            hi = np.maximum(a[sel], b[sel])
            for i, j in np.unique(np.stack([lo, hi], axis=1), axis=0):
                edges.add((int(i), int(j)))

    tally(label_image[:, :-1], label_image[:, 1:])
    tally(label_image[:-1, :], label_image[1:, :])
    return edges


def _rebuild(seg: SegmentedMap, label_image: np.ndarray, values: dict[int, float]) -> SegmentedMap:
    regions = []
    for rid in sorted(values):
        pix = np.argwhere(label_image == rid)
        if len(pix):
            regions.append(Region(rid, pix, values[rid]))
    return SegmentedMap(regions, label_image, seg.resolution, seg.origin)


def remove_ripples(seg: SegmentedMap, overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> SegmentedMap:
    """Absorb a region into a neighbor when the two overlap by more than
    `overlap_threshold`; repeats until stable.

    Overlap of region a with neighbor b is the fraction of a's boundary
    pixels that touch b. A thin ripple band has nearly all of its boundary
    against its neighbors and collapses; a room connected through a doorway
    keeps most of its boundary on walls and survives. The absorbing neighbor
    is the one with the largest shared-pixel count (ties: lower id); absorbed
    pixels take the absorber's value.
    """
    if not 0 < overlap_threshold < 1:
        raise ValueError("overlap_threshold must be in (0, 1)")
    label_image = seg.label_image.copy()
    values = {r.id: r.value for r in seg.regions}

    changed = True
    while changed:
        changed = False
        boundary_px, shared_px = boundary_pixel_counts(label_image)
        for rid in sorted(values):
            total = boundary_px.get(rid, 0)
            if total == 0:
                continue
            neigh = {b: c for (a, b), c in shared_px.items() if a == rid}
            if not neigh:
                continue
            best_b, best_c = min(neigh.items(), key=lambda kv: (-kv[1], kv[0]))
            if best_c > overlap_threshold * total:
                label_image[label_image == rid] = best_b
                del values[rid]
                changed = True
                break  # boundaries changed, recompute
    return _rebuild(seg, label_image, values)


def merge_similar(seg: SegmentedMap, value_tolerance: float = DEFAULT_VALUE_TOLERANCE_M) -> SegmentedMap:
    """Merge adjacent regions whose values differ by at most `value_tolerance`.

    Merging is transitive along adjacency edges within one pass; the merged
    value is the area-weighted mean. Passes repeat until no edge qualifies.
    """
    if value_tolerance < 0:
        raise ValueError("value_tolerance must be >= 0")
    label_image = seg.label_image.copy()
    values = {r.id: r.value for r in seg.regions}
    areas = {r.id: r.area_px for r in seg.regions}

    while True:
        adjacency = sorted(_adjacency_edges(label_image))
        edges = [(i, j) for (i, j) in adjacency
                 if abs(values[i] - values[j]) <= value_tolerance + 1e-12]
        if not edges:
            break
        parent = {rid: rid for rid in values}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for i, j in edges:
            ri, rj = find(i), find(j)
            if ri != rj:
                lo, hi = min(ri, rj), max(ri, rj)
                parent[hi] = lo
        groups: dict[int, list[int]] = {}
        for rid in values:
            groups.setdefault(find(rid), []).append(rid)
        new_values, new_areas = {}, {}
        for root, members in groups.items():
            area = sum(areas[m] for m in members)
            val = sum(values[m] * areas[m] for m in members) / area
            new_values[root] = val
            new_areas[root] = area
            for m in members:
                if m != root:
                    label_image[label_image == m] = root
        values, areas = new_values, new_areas
    return _rebuild(seg, label_image, values)


def segment(dist: DistanceImage, params: SegmentationParams | None = None) -> SegmentedMap:
    """Full decomposition of a distance image into regular regions."""
    params = params or SegmentationParams()
    fsi = free_space_image(dist, params.quantization_m)
    seg = group_regions(fsi)
    seg = remove_ripples(seg, params.overlap_threshold)
    seg = merge_similar(seg, params.value_tolerance_m)
    return seg
