"""Procedural indoor scenes, exploration trajectories and a simulated depth camera.

Scenes are single-story floor plans built by recursive splitting of a
rectangle. Every split wall gets one door, so the rooms always form a single
connected component. Walls run the full grid height and there is no ceiling.
"""
from __future__ import annotations

import heapq
import json
import math
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import voxel
from .voxel import Pose, VoxelGrid

log = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    pass


class PlanningError(RuntimeError):
    pass


@dataclass
class SceneParams:
    size: tuple = (6.4, 6.4)  # meters, x and y extent of the scene
    voxel_size: float = 0.1
    wall_height: float = 1.6
    door_height: float = 1.2
    door_width: float = 0.8
    min_rooms: int = 2
    max_rooms: int = 4
    min_room_size: float = 1.6
    furniture_per_room: tuple = (0, 2)
    furniture_size: tuple = (0.3, 0.8)
    furniture_height: tuple = (0.3, 0.9)
    max_retries: int = 50


@dataclass
class SceneSpec:
    seed: int
    voxel_size: float
    bounds: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax)) meters
    wall_height: float
    door_height: float
    rooms: list  # [(x0, y0, x1, y1)] meters, free interior of each room
    doors: list  # [(room_a, room_b, (x0, y0, x1, y1))] meters, carved opening
    furniture: list  # [((x0, y0, z0), (x1, y1, z1))] meters
    split_walls: list = field(default_factory=list)  # [(axis, cell, lo, hi)] grid cells

    def room_cells(self, r) -> tuple:
        x0, y0, x1, y1 = self.rooms[r]
        vs = self.voxel_size
        return (round(x0 / vs), round(y0 / vs), round(x1 / vs), round(y1 / vs))

    def room_center(self, r) -> np.ndarray:
        x0, y0, x1, y1 = self.rooms[r]
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2])

    def door_graph(self) -> dict:
        graph = {i: set() for i in range(len(self.rooms))}
        for a, b, _ in self.doors:
            graph[a].add(b)
            graph[b].add(a)
        return graph

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DepthCamera:
    width: int = 64
    height: int = 64
    hfov: float = math.pi / 2
    vfov: float = math.pi / 2
    max_range: float = 5.0
    offset: tuple = (0.0, 0.0, 0.0)  # sensor position in the platform frame

    def __post_init__(self):
        if not (0 < self.hfov < math.pi and 0 < self.vfov < math.pi):
            raise ValueError("fields of view must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the camera frame (x forward, y left, z up), shape (H, W, 3)."""
        u = (np.arange(self.width) + 0.5) / self.width * 2 - 1
        v = (np.arange(self.height) + 0.5) / self.height * 2 - 1
        y = -u * math.tan(self.hfov / 2)
        z = -v * math.tan(self.vfov / 2)
        d = np.stack(np.broadcast_arrays(np.ones((self.height, self.width)), y[None, :], z[:, None]), axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


SENSOR_HEIGHT = 0.25  # meters above the floor plane


# --------------------------------------------------------------------------
# scene generation


def _split_rooms(rng, nx, ny, n_rooms, min_cells):
    """Recursively split the interior ``[1, nx-1) x [1, ny-1)`` into rooms.

    Returns leaf rectangles (cell units, half-open) and the split walls, each
    with the index sets of rooms on either side.
    """
    nodes = [(1, 1, nx - 1, ny - 1)]
    members = [[0]]  # leaf ids contained in each node, filled at the end
    splits = []  # (axis, c, lo, hi, node_left, node_right)
    leaves = [0]
    while len(leaves) < n_rooms:
        cands = []
        for leaf in leaves:
            x0, y0, x1, y1 = nodes[leaf]
            for axis, (a0, a1) in enumerate(((x0, x1), (y0, y1))):
                if a1 - a0 >= 2 * min_cells + 1:
                    cands.append((a1 - a0, leaf, axis))
        if not cands:
            break
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        top = [c for c in cands if c[0] == cands[0][0]]
        _, leaf, axis = top[int(rng.integers(len(top)))]
        x0, y0, x1, y1 = nodes[leaf]
        a0, a1 = (x0, x1) if axis == 0 else (y0, y1)
        c = int(rng.integers(a0 + min_cells, a1 - min_cells))
        if axis == 0:
            left, right = (x0, y0, c, y1), (c + 1, y0, x1, y1)
            lo, hi = y0, y1
        else:
            left, right = (x0, y0, x1, c), (x0, c + 1, x1, y1)
            lo, hi = x0, x1
        nodes += [left, right]
        nl, nr = len(nodes) - 2, len(nodes) - 1
        splits.append((axis, c, lo, hi, nl, nr))
        leaves.remove(leaf)
        leaves += [nl, nr]
    del members
    leaf_rects = [nodes[i] for i in leaves]
    node_leaves = {}

    def contained(node):
        if node not in node_leaves:
            nx0, ny0, nx1, ny1 = nodes[node]
            node_leaves[node] = [i for i, (a, b, c, d) in enumerate(leaf_rects)
                                 if a >= nx0 and b >= ny0 and c <= nx1 and d <= ny1]
        return node_leaves[node]

    walls = [(axis, c, lo, hi, contained(nl), contained(nr)) for axis, c, lo, hi, nl, nr in splits]
    return leaf_rects, walls


def _place_doors(rng, rects, walls, door_cells):
    doors = []
    for axis, c, lo, hi, left, right in walls:
        options = []
        for a in left:
            for b in right:
                ra, rb = rects[a], rects[b]
                if axis == 0:
                    if ra[2] != c or rb[0] != c + 1:
                        continue
                    o0, o1 = max(ra[1], rb[1]), min(ra[3], rb[3])
                else:
                    if ra[3] != c or rb[1] != c + 1:
                        continue
                    o0, o1 = max(ra[0], rb[0]), min(ra[2], rb[2])
                if o1 - o0 >= door_cells + 2:
                    options.append((a, b, o0, o1))
        if not options:
            return None
        a, b, o0, o1 = options[int(rng.integers(len(options)))]
        start = int(rng.integers(o0 + 1, o1 - door_cells))
        if axis == 0:
            cells = (c, start, c + 1, start + door_cells)
        else:
            cells = (start, c, start + door_cells, c + 1)
        doors.append((a, b, cells))
    return doors


def _voxelize_cells(nx, ny, nz, rects, walls, doors, furniture_cells, door_h):
    occ = np.zeros((nx, ny, nz), dtype=np.uint8)
    occ[:, :, 0] = 1
    occ[0, :, :] = occ[-1, :, :] = 1
    occ[:, 0, :] = occ[:, -1, :] = 1
    for axis, c, lo, hi in walls:
        if axis == 0:
            occ[c, lo:hi, :] = 1
        else:
            occ[lo:hi, c, :] = 1
    for _, _, (x0, y0, x1, y1) in doors:
        occ[x0:x1, y0:y1, 1:1 + door_h] = 0
    for (x0, y0, z0), (x1, y1, z1) in furniture_cells:
        occ[x0:x1, y0:y1, z0:z1] = 1
    return occ


def voxelize(spec: SceneSpec) -> VoxelGrid:
    """Ground-truth occupancy of a scene: floor, walls and furniture occupied."""
    vs = spec.voxel_size
    (bx0, by0, bz0), (bx1, by1, bz1) = spec.bounds
    nx, ny, nz = round((bx1 - bx0) / vs), round((by1 - by0) / vs), round((bz1 - bz0) / vs)
    rects = [spec.room_cells(r) for r in range(len(spec.rooms))]
    walls = [tuple(w) for w in spec.split_walls]
    doors = [(a, b, tuple(round(v / vs) for v in box)) for a, b, box in spec.doors]
    furn = [(tuple(round(v / vs) for v in lo), tuple(round(v / vs) for v in hi)) for lo, hi in spec.furniture]
    occ = _voxelize_cells(nx, ny, nz, rects, walls, doors, furn, round(spec.door_height / vs))
    return VoxelGrid(occ, vs, spec.bounds[0])


def _walkable(occ: np.ndarray, robot_cells: int = 4) -> np.ndarray:
    """2D mask of columns whose cells ``1..robot_cells`` are all free."""
    return ~occ[:, :, 1:1 + robot_cells].any(axis=2)


def _clear(walk: np.ndarray) -> np.ndarray:
    """Walkable cells whose 8 neighbours are walkable too (one voxel of clearance)."""
    p = np.pad(walk, 1, constant_values=False)
    out = np.ones_like(walk)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            out &= p[1 + dx:1 + dx + walk.shape[0], 1 + dy:1 + dy + walk.shape[1]]
    return out


def _reachable(mask: np.ndarray, start) -> np.ndarray:
    seen = np.zeros_like(mask)
    if not mask[start]:
        return seen
    seen[start] = True
    q = deque([start])
    nx, ny = mask.shape
    while q:
        i, j = q.popleft()
        for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= a < nx and 0 <= b < ny and mask[a, b] and not seen[a, b]:
                seen[a, b] = True
                q.append((a, b))
    return seen


def generate_scene(seed: int, params: SceneParams | None = None):
    """Build a random floor plan and its voxelized ground truth.

    Deterministic in ``seed``. Raises :class:`GenerationError` when no valid
    layout is found within ``params.max_retries`` attempts.
    """
    p = params or SceneParams()
    vs = p.voxel_size
    nx, ny = round(p.size[0] / vs), round(p.size[1] / vs)
    nz = round(p.wall_height / vs)
    min_cells = round(p.min_room_size / vs)
    door_cells = round(p.door_width / vs)
    door_h = min(round(p.door_height / vs), nz - 1)
    if nx < 2 * 1 + min_cells or ny < 2 + min_cells:
        raise GenerationError("scene bounds cannot hold a single room")
    rng = np.random.default_rng(seed)

    for attempt in range(p.max_retries):
        n_rooms = int(rng.integers(p.min_rooms, p.max_rooms + 1))
        rects, walls = _split_rooms(rng, nx, ny, n_rooms, min_cells)
        if len(rects) < p.min_rooms:
            continue
        doors = _place_doors(rng, rects, walls, door_cells)
        if doors is None:
            continue
        wall_cells = [w[:4] for w in walls]
        base = _voxelize_cells(nx, ny, nz, rects, wall_cells, doors, [], door_h)
        centers = [((x0 + x1) // 2, (y0 + y1) // 2) for x0, y0, x1, y1 in rects]
        furniture = []
        for r, (x0, y0, x1, y1) in enumerate(rects):
            lo, hi = p.furniture_per_room
            for _ in range(int(rng.integers(lo, hi + 1))):
                sx, sy = (int(v) for v in np.round(rng.uniform(*p.furniture_size, size=2) / vs))
                sz = int(round(rng.uniform(*p.furniture_height) / vs))
                sx, sy = max(sx, 1), max(sy, 1)
                if x1 - x0 <= sx or y1 - y0 <= sy:
                    continue
                fx = int(rng.integers(x0, x1 - sx + 1))
                fy = int(rng.integers(y0, y1 - sy + 1))
                box = ((fx, fy, 1), (fx + sx, fy + sy, 1 + sz))
                if _furniture_ok(box, centers[r], doors, furniture, base, centers):
                    furniture.append(box)
        occ = _voxelize_cells(nx, ny, nz, rects, wall_cells, doors, furniture, door_h)
        clear = _clear(_walkable(occ))
        reach = _reachable(clear, centers[0])
        if not all(reach[c] for c in centers):
            continue
        spec = SceneSpec(
            seed=int(seed), voxel_size=vs,
            bounds=((0.0, 0.0, 0.0), (nx * vs, ny * vs, nz * vs)),
            wall_height=nz * vs, door_height=door_h * vs,
            rooms=[tuple(v * vs for v in r) for r in rects],
            doors=[(int(a), int(b), tuple(v * vs for v in box)) for a, b, box in doors],
            furniture=[(tuple(v * vs for v in lo), tuple(v * vs for v in hi)) for lo, hi in furniture],
            split_walls=[tuple(int(v) for v in w) for w in wall_cells],
        )
        return spec, VoxelGrid(occ, vs, (0.0, 0.0, 0.0))
    raise GenerationError(f"no valid layout for seed {seed} after {p.max_retries} attempts")


def _furniture_ok(box, center, doors, placed, base, centers, keep_out=3, door_clear=5):
    (x0, y0, _), (x1, y1, _) = box
    cx, cy = center
    if x0 <= cx + keep_out and x1 > cx - keep_out and y0 <= cy + keep_out and y1 > cy - keep_out:
        return False
    for _, _, (dx0, dy0, dx1, dy1) in doors:
        if x0 < dx1 + door_clear and x1 > dx0 - door_clear and y0 < dy1 + door_clear and y1 > dy0 - door_clear:
            return False
    for (px0, py0, _), (px1, py1, _) in placed:
        if x0 < px1 + 1 and x1 > px0 - 1 and y0 < py1 + 1 and y1 > py0 - 1:
            return False
    occ = base.copy()
    for (a0, b0, c0), (a1, b1, c1) in placed + [box]:
        occ[a0:a1, b0:b1, c0:c1] = 1
    reach = _reachable(_clear(_walkable(occ)), centers[0])
    return all(reach[c] for c in centers)


# --------------------------------------------------------------------------
# trajectories


def _grid_path(clear: np.ndarray, start, goal) -> list:
    """Dijkstra on 8-connected clear cells; diagonal moves need both side cells clear."""
    if not (clear[start] and clear[goal]):
        raise PlanningError(f"start {start} or goal {goal} not in clear space")
    nx, ny = clear.shape
    dist = {start: 0.0}
    prev = {}
    heap = [(0.0, start)]
    moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)), (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2))]
    while heap:
        d, cur = heapq.heappop(heap)
        if cur == goal:
            break
        if d > dist[cur]:
            continue
        i, j = cur
        for di, dj, w in moves:
            a, b = i + di, j + dj
            if not (0 <= a < nx and 0 <= b < ny and clear[a, b]):
                continue
            if di and dj and not (clear[i + di, j] and clear[i, j + dj]):
                continue
            nd = d + w
            if nd < dist.get((a, b), math.inf):
                dist[(a, b)] = nd
                prev[(a, b)] = cur
                heapq.heappush(heap, (nd, (a, b)))
    if goal not in dist:
        raise PlanningError(f"goal {goal} unreachable from {start}")
    path = [goal]
    while path[-1] != start:
        path.append(prev[path[-1]])
    return path[::-1]


def _hops(graph: dict, src: int) -> dict:
    d = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in sorted(graph[u]):
            if v not in d:
                d[v] = d[u] + 1
                q.append(v)
    return d


def room_visit_order(spec: SceneSpec, start_room: int) -> list:
    """Greedy nearest-unvisited tour over the door graph (hop distance, ties by id)."""
    graph = spec.door_graph()
    order = [start_room]
    left = set(graph) - {start_room}
    while left:
        hops = _hops(graph, order[-1])
        unreachable = left - set(hops)
        if unreachable:
            raise PlanningError(f"rooms {sorted(unreachable)} unreachable over the door graph")
        nxt = min(left, key=lambda r: (hops[r], r))
        order.append(nxt)
        left.remove(nxt)
    return order


def _resample(points: np.ndarray, step_length: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total == 0:
        return points[:1]
    n = int(math.ceil(total / step_length))
    # shrink by a hair so float round-off never exceeds step_length
    targets = np.linspace(0.0, total, n + 1)
    x = np.interp(targets, s, points[:, 0])
    y = np.interp(targets, s, points[:, 1])
    return np.stack([x, y], axis=1)


def plan_trajectory(scene: SceneSpec, seed: int, step_length: float = 0.3,
                    grid: VoxelGrid | None = None, sensor_height: float = SENSOR_HEIGHT) -> list:
    """Poses that start in a random room and visit every room centre.

    Consecutive positions are at most ``step_length`` apart and each pose
    faces its direction of travel.
    """
    if not scene.rooms:
        raise PlanningError("scene has no rooms")
    if step_length <= 0:
        raise ValueError("step_length must be positive")
    grid = grid if grid is not None else voxelize(scene)
    vs = scene.voxel_size
    clear = _clear(_walkable(grid.values))
    rng = np.random.default_rng(seed)
    start_room = int(rng.integers(len(scene.rooms)))
    x0, y0, x1, y1 = scene.room_cells(start_room)
    candidates = [(i, j) for i in range(x0, x1) for j in range(y0, y1) if clear[i, j]]
    if not candidates:
        raise PlanningError("start room has no clear cell")
    start = candidates[int(rng.integers(len(candidates)))]

    cells = [start]
    for r in room_visit_order(scene, start_room):
        rx0, ry0, rx1, ry1 = scene.room_cells(r)
        goal = ((rx0 + rx1) // 2, (ry0 + ry1) // 2)
        cells += _grid_path(clear, cells[-1], goal)[1:]
    pts = (np.asarray(cells, dtype=np.float64) + 0.5) * vs + np.asarray(grid.origin[:2])
    xy = _resample(pts, step_length * (1 - 1e-9))
    poses = []
    for i, p in enumerate(xy):
        if len(xy) == 1:
            yaw = 0.0
        else:
            a, b = (xy[i], xy[i + 1]) if i + 1 < len(xy) else (xy[i - 1], xy[i])
            yaw = math.atan2(b[1] - a[1], b[0] - a[0])
        poses.append(Pose.from_yaw((p[0], p[1], sensor_height), yaw))
    return poses


def spin_in_place(pose: Pose, n: int) -> list:
    """``n`` poses at ``pose``'s position with yaw advancing a full turn."""
    w, x, y, z = pose.orientation
    yaw = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return [Pose.from_yaw(pose.position, yaw + 2 * math.pi * (i + 1) / n) for i in range(n)]


# --------------------------------------------------------------------------
# depth rendering


@dataclass
class DepthRender:
    depth: np.ndarray  # (H, W) range along each ray; max_range where nothing was hit
    hit: np.ndarray  # (H, W) bool
    points_world: np.ndarray  # (N, 3) hit points
    points_local: np.ndarray  # (N, 3) hit points relative to the local-region centre
    sensor_origin: np.ndarray
    endpoints: np.ndarray  # (H*W, 3) hit points, or max-range points for misses
    hit_flags: np.ndarray  # (H*W,)
    inside_obstacle: bool = False


def region_center(position, dims, voxel_size: float, map_origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    lo = voxel.region_index_origin(position, dims, voxel_size, map_origin)
    return np.asarray(map_origin) + (np.asarray(lo) + 0.5 * np.asarray(dims)) * voxel_size


def _occupied_lookup(grid: VoxelGrid, cells: np.ndarray) -> np.ndarray:
    g0 = np.round(np.asarray(grid.origin) / grid.voxel_size).astype(np.int64)
    local = cells - g0
    dims = np.asarray(grid.dims)
    inside = np.all((local >= 0) & (local < dims), axis=-1)
    out = np.zeros(cells.shape[:-1], dtype=bool)
    li = local[inside]
    out[inside] = grid.values[li[..., 0], li[..., 1], li[..., 2]] > 0
    return out


def render_depth(ground_truth: VoxelGrid, pose: Pose, camera: DepthCamera | None = None,
                 region_dims=(16, 16, 16)) -> DepthRender:
    """Ray-cast every pixel through the occupancy grid.

    Hit points are placed just inside the first occupied voxel so that
    re-voxelizing them lands on that voxel.
    """
    cam = camera or DepthCamera()
    R = pose.rotation_matrix()
    o = pose.position + R @ np.asarray(cam.offset, dtype=np.float64)
    dirs = (cam.ray_directions().reshape(-1, 3)) @ R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n = len(dirs)
    vs = ground_truth.voxel_size
    g = np.asarray(ground_truth.origin)
    ends_miss = o + cam.max_range * dirs
    center = region_center(pose.position, region_dims, vs, g)

    start_cell = np.floor((o - g) / vs).astype(np.int64)
    if _occupied_lookup(ground_truth, start_cell[None])[0]:
        log.warning("camera at %s is inside an occupied voxel", o)
        return DepthRender(np.zeros((cam.height, cam.width)), np.zeros((cam.height, cam.width), bool),
                           np.zeros((0, 3)), np.zeros((0, 3)), o, ends_miss, np.zeros(n, bool),
                           inside_obstacle=True)

    cells, t_enter, valid = voxel.raycast_batch(o, dirs, cam.max_range, vs, g)
    occ = _occupied_lookup(ground_truth, cells) & valid
    hit = occ.any(axis=1)
    first = occ.argmax(axis=1)
    rows = np.arange(n)
    t_hit = t_enter[rows, first]
    hit_cell = cells[rows, first]
    step = np.sign(dirs)
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = g + (hit_cell + (step > 0)) * vs
        t_exit = np.where(step != 0, (bound - o) / np.where(dirs == 0, 1.0, dirs), np.inf).min(axis=1)
    nudge = np.minimum(1e-3 * vs, 0.5 * (t_exit - t_hit))
    pts = o + (t_hit + nudge)[:, None] * dirs
    # near-tied crossings can leave the point on a face; pull it into the cell
    lo = g + hit_cell * vs
    pts = np.clip(pts, lo + 1e-6 * vs, lo + (1 - 1e-6) * vs)

    depth = np.where(hit, t_hit, cam.max_range)
    endpoints = np.where(hit[:, None], pts, ends_miss)
    pw = pts[hit]
    return DepthRender(
        depth=depth.reshape(cam.height, cam.width),
        hit=hit.reshape(cam.height, cam.width),
        points_world=pw,
        points_local=pw - center,
        sensor_origin=o,
        endpoints=endpoints,
        hit_flags=hit,
    )


def subsample_cloud(points: np.ndarray, cap: int, seed: int) -> np.ndarray:
    if len(points) <= cap:
        return points
    idx = np.sort(np.random.default_rng(seed).choice(len(points), cap, replace=False))
    return points[idx]


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetSample:
    ground_truth: VoxelGrid
    conditioning_cloud: np.ndarray
    pose: Pose
    scene_id: int
    step_id: int


@dataclass
class DatasetParams:
    scene: SceneParams = field(default_factory=SceneParams)
    camera: DepthCamera = field(default_factory=DepthCamera)
    region_dims: tuple = (16, 16, 16)
    poses_per_scene: int = 50
    step_length: float = 0.3
    cloud_cap: int = 1024


def sub_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


def scene_samples(scene_id: int, spec: SceneSpec, grid: VoxelGrid, params: DatasetParams, seed: int):
    """Samples along one scene's trajectory (``poses_per_scene`` evenly spaced poses)."""
    step = params.step_length
    traj = plan_trajectory(spec, seed, step, grid)
    while len(traj) < params.poses_per_scene and step > 1e-3:
        step /= 2
        traj = plan_trajectory(spec, seed, step, grid)
    idx = np.unique(np.round(np.linspace(0, len(traj) - 1, params.poses_per_scene)).astype(int))
    for step_id, i in enumerate(idx):
        pose = traj[i]
        lo = voxel.region_index_origin(pose.position, params.region_dims, grid.voxel_size, grid.origin)
        gt = voxel.crop(grid, lo, params.region_dims)
        world_lo = np.asarray(grid.origin) + np.asarray(lo) * grid.voxel_size
        render = render_depth(grid, pose, params.camera, params.region_dims)
        cloud = subsample_cloud(render.points_local, params.cloud_cap, sub_seed(seed, 1000 + step_id))
        yield DatasetSample(VoxelGrid(gt, grid.voxel_size, world_lo), cloud.astype(np.float32), pose,
                            scene_id, step_id)


def make_dataset(scenes, params: DatasetParams, test_ids, seed: int = 0):
    """Stream samples for ``scenes`` (an iterable of ``(id, spec, grid)``).

    Yields ``(split, sample)``; the split is decided by scene id before any
    pose is sampled.
    """
    test_ids = set(test_ids)
    for scene_id, spec, grid in scenes:
        split = "test" if scene_id in test_ids else "train"
        for sample in scene_samples(scene_id, spec, grid, params, sub_seed(seed, scene_id)):
            yield split, sample


def write_points(path, points) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    Path(path).write_bytes(np.uint32(len(pts)).astype("<u4").tobytes() + pts.tobytes())


def read_points(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    n = int(np.frombuffer(buf, dtype="<u4", count=1)[0])
    return np.frombuffer(buf, dtype="<f4", count=3 * n, offset=4).reshape(n, 3).astype(np.float32)


def write_dataset(root, seed: int, scene_ids, test_ids, params: DatasetParams) -> dict:
    """Generate scenes and samples and lay them out under ``root``."""
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    scenes = []
    for sid in scene_ids:
        spec, grid = generate_scene(sub_seed(seed, sid), params.scene)
        voxel.save_grid(root / "scenes" / f"{sid}.occg", grid)
        (root / "scenes" / f"{sid}.json").write_text(json.dumps(spec.to_dict()))
        scenes.append((sid, spec, grid))
    counts = {"train": 0, "test": 0}
    samples = {"train": [], "test": []}
    for split, s in make_dataset(scenes, params, test_ids, seed):
        d = root / "samples" / str(s.scene_id)
        d.mkdir(parents=True, exist_ok=True)
        voxel.save_grid(d / f"{s.step_id}.occg", s.ground_truth)
        write_points(d / f"{s.step_id}.pts", s.conditioning_cloud)
        (d / f"{s.step_id}.pose.json").write_text(json.dumps(s.pose.to_dict()))
        counts[split] += 1
        samples[split].append([s.scene_id, s.step_id])
    manifest = {
        "seed": int(seed),
        "splits": {"train": sorted(set(scene_ids) - set(test_ids)), "test": sorted(set(test_ids))},
        "counts": counts,
        "samples": samples,
        "params": _jsonable(asdict(params)),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def load_samples(root, split: str = "train") -> list:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for scene_id, step_id in manifest["samples"][split]:
        d = root / "samples" / str(scene_id)
        out.append(DatasetSample(
            voxel.load_grid(d / f"{step_id}.occg"),
            read_points(d / f"{step_id}.pts"),
            Pose.from_dict(json.loads((d / f"{step_id}.pose.json").read_text())),
            scene_id, step_id,
        ))
    return out


def load_scene(root, scene_id: int):
    root = Path(root)
    d = json.loads((root / "scenes" / f"{scene_id}.json").read_text())
    spec = SceneSpec(**{k: v for k, v in d.items()})
    return spec, voxel.load_grid(root / "scenes" / f"{scene_id}.occg")
