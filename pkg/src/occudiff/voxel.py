"""Voxel grids, log-odds occupancy mapping, ray casting and local regions."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OCCUPIED, FREE, UNKNOWN = 1, -1, 0

OCCG_MAGIC = b"OCCG"
OCCG_VERSION = 1
_OCCG_HEADER = struct.Struct("<4sIIIIfdddB")
_MAP_RECORD = np.dtype([("i", "<i4"), ("j", "<i4"), ("k", "<i4"), ("l", "<f4")])


@dataclass(frozen=True)
class VoxelGrid:
    """Dense scalar grid. ``values`` has shape ``(nx, ny, nz)`` and is read-only.

    Serialized cell order is x-fastest (Fortran order of the array).
    """

    values: np.ndarray
    voxel_size: float = 0.1
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.array(self.values)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"values must be a non-empty 3D array, got shape {values.shape}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple:
        return tuple(self.values.shape)

    def world_to_index(self, point):
        """Cell containing ``point``, or ``None`` when it falls outside the grid."""
        idx = world_to_index(point, self.voxel_size, self.origin)
        if all(0 <= i < n for i, n in zip(idx, self.dims)):
            return idx
        return None

    def index_to_center(self, index) -> np.ndarray:
        return index_to_center(index, self.voxel_size, self.origin)

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.voxel_size, self.origin)


def world_to_index(point, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> tuple:
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    q = np.floor((np.asarray(point, dtype=np.float64) - np.asarray(origin, dtype=np.float64)) / voxel_size)
    return tuple(int(v) for v in q)


def index_to_center(index, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    return np.asarray(origin, dtype=np.float64) + (np.asarray(index, dtype=np.float64) + 0.5) * voxel_size


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))  # w, x, y, z

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0 or not np.isfinite(n):
            raise ValueError("orientation must be a non-zero quaternion")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "orientation", q / n)

    @classmethod
    def from_yaw(cls, position, yaw: float) -> "Pose":
        return cls(position, np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)]))

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.orientation
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "orientation": self.orientation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Pose":
        return cls(np.array(d["position"]), np.array(d["orientation"]))


# --------------------------------------------------------------------------
# ray casting


def raycast(origin, direction, max_range: float, voxel_size: float, grid_origin=(0.0, 0.0, 0.0)) -> list:
    """Cells pierced by the segment ``origin + s * direction``, ``s`` in ``[0, max_range]``.

    Incremental 3D DDA. Boundary crossings are recomputed from the integer
    cell index rather than accumulated, and axes whose crossings coincide are
    stepped together so an edge or corner touch never adds a cell.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
        raise ValueError("non-finite ray")
    norm = math.sqrt(float(d @ d))
    if norm == 0.0:
        raise ValueError("zero direction vector")
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, got |d| = {norm}")
    if not max_range > 0:
        raise ValueError("max_range must be positive")

    g = np.asarray(grid_origin, dtype=np.float64)
    vs = float(voxel_size)
    o = o.tolist()
    d = d.tolist()
    g = g.tolist()
    cell = [math.floor((o[a] - g[a]) / vs) for a in range(3)]
    step = [1 if d[a] > 0 else -1 if d[a] < 0 else 0 for a in range(3)]
    out = [tuple(cell)]
    while True:
        t_next = []
        for a in range(3):
            if step[a] == 0:
                t_next.append(math.inf)
            else:
                boundary = g[a] + (cell[a] + (1 if step[a] > 0 else 0)) * vs
                t_next.append((boundary - o[a]) / d[a])
        t_min = min(t_next)
        if t_min > max_range:
            break
        at_end = t_min == max_range
        # an end point on a face belongs to the cell above it: only positive steps may fire
        moved = False
        for a in range(3):
            if t_next[a] == t_min and not (at_end and step[a] < 0):
                cell[a] += step[a]
                moved = True
        if not moved:
            break
        out.append(tuple(cell))
        if at_end:
            break
    return out


def raycast_batch(origins, directions, max_ranges, voxel_size: float, grid_origin=(0.0, 0.0, 0.0),
                  max_steps: int | None = None):
    """Vectorised :func:`raycast` over many rays.

    Returns ``(cells, t_enter, valid)`` with shapes ``(R, S, 3)``, ``(R, S)``
    and ``(R, S)``; row ``r`` of ``cells[valid]`` equals ``raycast`` of ray r.
    ``t_enter`` is the ray parameter at which each cell is entered (0 for the
    first cell).
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    R = max(len(o), len(d))
    o = np.broadcast_to(o, (R, 3))
    d = np.broadcast_to(d, (R, 3))
    rng = np.broadcast_to(np.asarray(max_ranges, dtype=np.float64), (R,))
    g = np.asarray(grid_origin, dtype=np.float64)
    vs = float(voxel_size)
    if max_steps is None:
        max_steps = int(np.ceil(rng.max() / vs * 3)) + 4 if R else 1

    cell = np.floor((o - g) / vs).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    cells = np.zeros((R, max_steps, 3), dtype=np.int64)
    t_enter = np.zeros((R, max_steps))
    valid = np.zeros((R, max_steps), dtype=bool)
    cells[:, 0] = cell
    valid[:, 0] = True
    active = np.ones(R, dtype=bool)
    upper = (step > 0).astype(np.int64)
    for s in range(1, max_steps):
        if not active.any():
            break
        boundary = g + (cell + upper) * vs
        with np.errstate(invalid="ignore"):
            t_next = np.where(step != 0, (boundary - o) / np.where(d == 0, 1.0, d), np.inf)
        t_min = t_next.min(axis=1)
        active &= t_min <= rng
        at_end = t_min == rng
        move = (t_next == t_min[:, None]) & active[:, None] & ~(at_end[:, None] & (step < 0))
        active &= move.any(axis=1)
        cell = cell + np.where(move, step, 0)
        cells[:, s] = cell
        t_enter[:, s] = t_min
        valid[:, s] = active
        active &= ~at_end
    if active.any():
        boundary = g + (cell + upper) * vs
        with np.errstate(invalid="ignore"):
            t_next = np.where(step != 0, (boundary - o) / np.where(d == 0, 1.0, d), np.inf)
        if (active & (t_next.min(axis=1) <= rng)).any():
            raise RuntimeError("raycast_batch: max_steps too small")
    return cells, t_enter, valid


# --------------------------------------------------------------------------
# log-odds occupancy map


@dataclass
class OccupancyMap:
    """Sparse log-odds map keyed by integer cell index.

    Single writer (``integrate_scan``); readers must not run concurrently
    with an integration.
    """

    voxel_size: float = 0.1
    origin: tuple = (0.0, 0.0, 0.0)
    l_hit: float = 1.735
    l_miss: float = -0.405
    l_min: float = -2.0
    l_max: float = 3.5
    occupied_threshold: float = 0.85
    free_threshold: float = -0.85
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not self.free_threshold < self.occupied_threshold:
            raise ValueError("free_threshold must be below occupied_threshold")
        if not self.l_min <= self.l_max:
            raise ValueError("l_min must not exceed l_max")

    def state_of(self, index) -> int:
        v = self.cells.get(tuple(index))
        if v is None:
            return UNKNOWN
        if v >= self.occupied_threshold:
            return OCCUPIED
        if v <= self.free_threshold:
            return FREE
        return UNKNOWN

    def world_to_index(self, point) -> tuple:
        return world_to_index(point, self.voxel_size, self.origin)

    def occupied(self) -> set:
        return {k for k, v in self.cells.items() if v >= self.occupied_threshold}

    def free(self) -> set:
        return {k for k, v in self.cells.items() if v <= self.free_threshold}

    def observed_count(self) -> int:
        return sum(1 for v in self.cells.values() if v >= self.occupied_threshold or v <= self.free_threshold)

    def params(self) -> dict:
        return {k: getattr(self, k) for k in ("voxel_size", "l_hit", "l_miss", "l_min", "l_max",
                                              "occupied_threshold", "free_threshold")}


def integrate_scan(occ_map: OccupancyMap, sensor_origin, endpoints, hit_flags) -> OccupancyMap:
    """Fold one scan into ``occ_map`` in place and return it.

    Per scan each touched cell is updated once; a cell that is an endpoint
    of any hit ray takes the hit update and not the miss update.
    """
    o = np.asarray(sensor_origin, dtype=np.float64).reshape(3)
    ends = np.asarray(endpoints, dtype=np.float64).reshape(-1, 3)
    hits = np.asarray(hit_flags, dtype=bool).reshape(-1)
    if len(ends) == 0:
        raise ValueError("endpoints must be non-empty")
    if len(hits) != len(ends):
        raise ValueError("hit_flags and endpoints differ in length")
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(ends))):
        raise ValueError("non-finite coordinates")

    vs = occ_map.voxel_size
    g = np.asarray(occ_map.origin, dtype=np.float64)
    delta = ends - o
    dist = np.linalg.norm(delta, axis=1)
    keep = dist > 0
    dirs = np.zeros_like(delta)
    dirs[keep] = delta[keep] / dist[keep, None]
    end_cells = np.floor((ends - g) / vs).astype(np.int64)

    free_keys = []
    if keep.any():
        cells, _, valid = raycast_batch(o, dirs[keep], dist[keep], vs, g)
        # strictly before the endpoint cell: drop the endpoint cell wherever it appears
        is_end = np.all(cells == end_cells[keep][:, None, :], axis=2)
        before = valid & ~is_end
        free_keys = cells[before]
    hit_cells = end_cells[hits]
    free_set = set(map(tuple, np.unique(free_keys, axis=0).tolist())) if len(free_keys) else set()
    hit_set = set(map(tuple, np.unique(hit_cells, axis=0).tolist())) if len(hit_cells) else set()
    free_set -= hit_set

    c = occ_map.cells
    lo, hi = occ_map.l_min, occ_map.l_max
    for key in free_set:
        c[key] = min(hi, max(lo, c.get(key, 0.0) + occ_map.l_miss))
    for key in hit_set:
        c[key] = min(hi, max(lo, c.get(key, 0.0) + occ_map.l_hit))
    return occ_map


# --------------------------------------------------------------------------
# local regions


REGION_Z_OFFSET = 0.2  # region floor sits this far below the sensor


@dataclass(frozen=True)
class LocalRegion:
    center_pose: Pose
    dims: tuple
    index_origin: tuple  # map index of region cell (0, 0, 0)
    known_values: VoxelGrid
    known_mask: VoxelGrid

    @property
    def mask(self) -> np.ndarray:
        return self.known_mask.values

    @property
    def values(self) -> np.ndarray:
        return self.known_values.values

    def mask_fraction(self) -> float:
        return float(self.mask.mean())

    def world_origin(self) -> np.ndarray:
        return np.asarray(self.known_values.origin)

    def center(self) -> np.ndarray:
        return self.world_origin() + 0.5 * np.asarray(self.dims) * self.known_values.voxel_size

    def occupied_known(self) -> np.ndarray:
        """Binary grid of observed-occupied cells (the running-map baseline crop)."""
        return ((self.mask == 1) & (self.values > 0)).astype(np.uint8)


def region_index_origin(position, dims, voxel_size: float, map_origin=(0.0, 0.0, 0.0)) -> tuple:
    p = np.asarray(position, dtype=np.float64) - np.asarray(map_origin, dtype=np.float64)
    cx = math.floor(p[0] / voxel_size) - dims[0] // 2
    cy = math.floor(p[1] / voxel_size) - dims[1] // 2
    cz = math.floor((p[2] - REGION_Z_OFFSET) / voxel_size)
    return (cx, cy, cz)


def extract_local(occ_map: OccupancyMap, pose: Pose, dims) -> LocalRegion:
    dims = tuple(int(n) for n in dims)
    lo = region_index_origin(pose.position, dims, occ_map.voxel_size, occ_map.origin)
    values = np.zeros(dims)
    mask = np.zeros(dims, dtype=np.uint8)
    occ_t, free_t = occ_map.occupied_threshold, occ_map.free_threshold
    nx, ny, nz = dims
    for (i, j, k), v in occ_map.cells.items():
        a, b, c = i - lo[0], j - lo[1], k - lo[2]
        if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
            if v >= occ_t:
                values[a, b, c], mask[a, b, c] = 1.0, 1
            elif v <= free_t:
                values[a, b, c], mask[a, b, c] = -1.0, 1
    world_lo = np.asarray(occ_map.origin) + np.asarray(lo) * occ_map.voxel_size
    return LocalRegion(
        center_pose=pose,
        dims=dims,
        index_origin=lo,
        known_values=VoxelGrid(values, occ_map.voxel_size, world_lo),
        known_mask=VoxelGrid(mask, occ_map.voxel_size, world_lo),
    )


def crop(grid: VoxelGrid, index_origin, dims, fill=0) -> np.ndarray:
    """Copy a ``dims`` block of ``grid`` starting at map index ``index_origin``.

    ``grid`` must share the map's lattice; cells outside it are ``fill``.
    """
    g0 = np.round(np.asarray(grid.origin) / grid.voxel_size).astype(np.int64)
    start = np.asarray(index_origin) - g0
    out = np.full(dims, fill, dtype=grid.values.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + np.asarray(dims), grid.dims)
    if np.any(src_hi <= src_lo):
        return out
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    out[dst_lo[0]:dst_hi[0], dst_lo[1]:dst_hi[1], dst_lo[2]:dst_hi[2]] = \
        grid.values[src_lo[0]:src_hi[0], src_lo[1]:src_hi[1], src_lo[2]:src_hi[2]]
    return out


def merge_prediction(occ_map: OccupancyMap, region: LocalRegion, predicted) -> set:
    """Novel predicted-occupied cells (map indices) lying in unobserved space.

    The map is not modified; the returned set is an overlay layer.
    """
    pred = predicted.values if isinstance(predicted, VoxelGrid) else np.asarray(predicted)
    if pred.shape != tuple(region.dims):
        raise ValueError(f"prediction dims {pred.shape} != region dims {tuple(region.dims)}")
    novel = np.argwhere((pred > 0) & (region.mask == 0))
    lo = np.asarray(region.index_origin)
    return set(map(tuple, (novel + lo).tolist()))


# --------------------------------------------------------------------------
# OCCG serialization


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    binary = grid.values.dtype in (np.uint8, np.bool_)
    nx, ny, nz = grid.dims
    header = _OCCG_HEADER.pack(OCCG_MAGIC, OCCG_VERSION, nx, ny, nz, grid.voxel_size,
                               *grid.origin, 1 if binary else 0)
    dtype = "<u1" if binary else "<f4"
    return header + np.asarray(grid.values, dtype=dtype).tobytes(order="F")


def grid_from_bytes(buf: bytes) -> VoxelGrid:
    if len(buf) < _OCCG_HEADER.size:
        raise ValueError("truncated OCCG header")
    magic, version, nx, ny, nz, vs, ox, oy, oz, tag = _OCCG_HEADER.unpack_from(buf)
    if magic != OCCG_MAGIC:
        raise ValueError("not an OCCG file")
    if version != OCCG_VERSION:
        raise ValueError(f"unsupported OCCG version {version}")
    if tag not in (0, 1):
        raise ValueError(f"unknown dtype tag {tag}")
    dtype = "<u1" if tag == 1 else "<f4"
    n = nx * ny * nz
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=_OCCG_HEADER.size)
    values = data.reshape((nx, ny, nz), order="F").astype(np.uint8 if tag == 1 else np.float32)
    return VoxelGrid(values, vs, (ox, oy, oz))


def save_grid(path, grid: VoxelGrid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


def map_to_bytes(occ_map: OccupancyMap) -> bytes:
    keys = sorted(occ_map.cells)
    rec = np.zeros(len(keys), dtype=_MAP_RECORD)
    if keys:
        idx = np.asarray(keys, dtype=np.int32)
        rec["i"], rec["j"], rec["k"] = idx[:, 0], idx[:, 1], idx[:, 2]
        rec["l"] = [occ_map.cells[k] for k in keys]
    return rec.tobytes()


def map_from_bytes(buf: bytes, **params) -> OccupancyMap:
    rec = np.frombuffer(buf, dtype=_MAP_RECORD)
    m = OccupancyMap(**params)
    for i, j, k, l in rec.tolist():
        m.cells[(i, j, k)] = float(l)
    return m
