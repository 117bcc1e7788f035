"""Synthetic dynamic 2D world: moving objects, occluded laser scans, episodes.

A world is a static map (axis-aligned rectangles and discs, fixed for all
episodes) plus moving objects of three classes that cross the scene with
constant velocity and optional per-frame heading jitter.  The stationary
sensor sits at the world origin.  Scans are synthesized by exact
ray-shape intersection, so occlusion arises naturally: nearer shapes
shadow farther ones.

Episode generation is deterministic in (config, length, seed) and
embarrassingly parallel across seeds; a single world state belongs to
one worker.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import RAY_STEP, GridConfig, LaserScan, PartialObservation, raytrace_scan

CLASS_BACKGROUND = 0
CLASS_PEDESTRIAN = 1
CLASS_CAR = 2
CLASS_CYCLIST = 3
CLASS_NAMES = ("background", "pedestrian", "car", "cyclist")
N_CLASSES = 4
IGNORE_LABEL = 255

MOVING_CLASSES = (CLASS_PEDESTRIAN, CLASS_CAR, CLASS_CYCLIST)

EPISODE_MAGIC = b"DTEP"
EPISODE_VERSION = 1

DESPAWN_MARGIN = 0.5  # meters beyond the grid before an object is dropped
MIN_RANGE = 0.01      # meters; noisy ranges are clamped here


@dataclass(frozen=True)
class ClassProfile:
    """Footprint and kinematics of one object class.

    The classes are separable by exactly the cues the tracker can pick
    up: footprint shape/size and motion pattern (speed plus heading
    jitter).  ``clearance`` keeps travel lines away from the sensor.
    """

    shape: str                    # "disc" or "rect"
    size_band: tuple              # disc: (r_lo, r_hi); rect: (len_lo, len_hi, wid_lo, wid_hi)
    speed_band: tuple             # m/s
    heading_jitter: float         # radians per frame, uniform bound
    clearance: float              # m, min distance of the travel line from the sensor


PROFILES = {
    CLASS_PEDESTRIAN: ClassProfile("disc", (0.2, 0.35), (0.5, 2.0), 0.15, 1.2),
    CLASS_CAR: ClassProfile("rect", (3.8, 4.6, 1.7, 2.0), (3.0, 10.0), 0.0, 2.4),
    CLASS_CYCLIST: ClassProfile("rect", (1.7, 1.9, 0.5, 0.7), (2.0, 6.0), 0.03, 1.6),
}


@dataclass(frozen=True)
class StaticShape:
    """Fixed obstacle: axis-aligned rectangle (a,b = full sizes) or disc (a = radius)."""

    kind: str
    cx: float
    cy: float
    a: float
    b: float = 0.0


@dataclass
class SceneObject:
    cls: int
    x: float
    y: float
    heading: float
    speed: float
    dims: tuple            # disc: (radius,); rect: (length, width)
    jitter: float
    spawn_order: int

    @property
    def bound_radius(self) -> float:
        if len(self.dims) == 1:
            return self.dims[0]
        return math.hypot(self.dims[0], self.dims[1]) / 2.0


@dataclass(frozen=True)
class SimConfig:
    """World recipe: grid, frame rate, static map, traffic and sensor knobs.

    Default spawn rates are tuned so that, with the crossroads static
    map, at least ~30% of frames contain an object partially occluded by
    another shape (see ``occlusion_fraction``).
    """

    grid: GridConfig
    frame_rate: float = 8.0
    statics: tuple = ()
    spawn_rates: tuple = (0.035, 0.035, 0.035)   # pedestrian, car, cyclist per frame
    speed_bands: tuple = tuple(PROFILES[c].speed_band for c in MOVING_CLASSES)
    beams: int = 180
    max_range: float = 15.0
    range_noise: float = 0.02

    def __post_init__(self):
        if self.grid.size < 8 or self.grid.size % 2:
            raise ValueError(f"simulation grids need an even size >= 8, got {self.grid.size}")
        if self.frame_rate <= 0:
            raise ValueError("frame rate must be positive")
        if any(r < 0 for r in self.spawn_rates):
            raise ValueError("spawn rates must be >= 0")
        if self.beams < 1:
            raise ValueError("need at least one beam")

    def speed_band(self, cls: int) -> tuple:
        return self.speed_bands[MOVING_CLASSES.index(cls)]

    def spawn_rate(self, cls: int) -> float:
        return self.spawn_rates[MOVING_CLASSES.index(cls)]


def config_digest(config: SimConfig) -> str:
    """Stable hex digest of a fully resolved simulation config."""
    return hashlib.sha256(repr(config).encode()).hexdigest()[:16]


def crossroads_statics(half_extent: float) -> tuple:
    """Intersection-like static map: four corner buildings plus small occluders.

    The thin wall near (1.0, 0.75) casts a shadow over the +x lanes; the
    scripted occluded-crossing scenario drives an object through it.
    """
    b = 2.2  # building side
    d = half_extent - b / 2.0
    return (
        StaticShape("rect", d, d, b, b),
        StaticShape("rect", -d, d, b, b),
        StaticShape("rect", d, -d, b, b),
        StaticShape("rect", -d, -d, b, b),
        StaticShape("rect", 1.0, 0.75, 0.24, 0.5),
        StaticShape("rect", -1.5, -0.5, 0.8, 0.24),
        StaticShape("disc", -0.9, 2.1, 0.25),
    )


STATIC_PRESETS = {
    "crossroads": crossroads_statics,
    "empty": lambda half_extent: (),
}


def default_sim_config(grid_size: int = 48, cell_size: float = 0.2,
                       preset: str = "crossroads", **overrides) -> SimConfig:
    grid = GridConfig(grid_size, cell_size)
    if preset not in STATIC_PRESETS:
        raise ValueError(f"unknown static preset {preset!r}")
    statics = STATIC_PRESETS[preset](grid.half_extent)
    return SimConfig(grid=grid, statics=statics, **overrides)


# ---------------------------------------------------------------------------
# geometry


@lru_cache(maxsize=8)
def _centers(grid: GridConfig):
    idx = (np.arange(grid.size) + 0.5 - grid.size / 2.0) * grid.cell_size
    cx, cy = np.meshgrid(idx, idx, indexing="ij")
    return cx, cy


def _static_mask(shape: StaticShape, cx, cy):
    if shape.kind == "disc":
        return (cx - shape.cx) ** 2 + (cy - shape.cy) ** 2 <= shape.a ** 2
    return (np.abs(cx - shape.cx) <= shape.a / 2.0) & (np.abs(cy - shape.cy) <= shape.b / 2.0)


def _object_mask(obj: SceneObject, cx, cy):
    if len(obj.dims) == 1:
        return (cx - obj.x) ** 2 + (cy - obj.y) ** 2 <= obj.dims[0] ** 2
    c = math.cos(obj.heading)
    s = math.sin(obj.heading)
    u = (cx - obj.x) * c + (cy - obj.y) * s
    v = -(cx - obj.x) * s + (cy - obj.y) * c
    return (np.abs(u) <= obj.dims[0] / 2.0) & (np.abs(v) <= obj.dims[1] / 2.0)


def static_map_grid(config: SimConfig) -> np.ndarray:
    """Binary grid of cells whose center lies inside some static shape."""
    cx, cy = _centers(config.grid)
    out = np.zeros(cx.shape, dtype=np.uint8)
    for shape in config.statics:
        out[_static_mask(shape, cx, cy)] = 1
    return out


def _overlaps_static(obj: SceneObject, statics) -> bool:
    """Conservative overlap test between an object footprint and the static map."""
    for shape in statics:
        if shape.kind == "disc":
            d = math.hypot(obj.x - shape.cx, obj.y - shape.cy)
            if d <= shape.a + obj.bound_radius:
                return True
        else:
            ddx = max(abs(obj.x - shape.cx) - shape.a / 2.0, 0.0)
            ddy = max(abs(obj.y - shape.cy) - shape.b / 2.0, 0.0)
            if math.hypot(ddx, ddy) <= obj.bound_radius:
                return True
    return False


# ---------------------------------------------------------------------------
# world dynamics


@dataclass
class WorldState:
    objects: list = field(default_factory=list)
    next_spawn_order: int = 0


def _line_clearance(px, py, qx, qy) -> float:
    """Distance from the sensor origin to the line through (p, q)."""
    vx, vy = qx - px, qy - py
    norm = math.hypot(vx, vy)
    if norm < 1e-9:
        return math.hypot(px, py)
    return abs(vx * py - vy * px) / norm


def _edge_point(side: int, u: float, h: float):
    if side == 0:
        return (h, u)
    if side == 1:
        return (-h, u)
    if side == 2:
        return (u, h)
    return (u, -h)


def _draw_dims(profile: ClassProfile, rng) -> tuple:
    if profile.shape == "disc":
        return (rng.uniform(*profile.size_band),)
    lo_l, hi_l, lo_w, hi_w = profile.size_band
    return (rng.uniform(lo_l, hi_l), rng.uniform(lo_w, hi_w))


def _spawn_object(cls: int, config: SimConfig, rng, order: int) -> SceneObject | None:
    """Place a new object on a grid edge heading across the scene.

    The exit point is drawn on a different side and resampled until the
    travel line keeps the class clearance from the sensor; footprints
    overlapping the static map are rejected.
    """
    profile = PROFILES[cls]
    h = config.grid.half_extent
    for _ in range(30):
        side = int(rng.integers(4))
        px, py = _edge_point(side, rng.uniform(-h, h), h)
        exit_side = int((side + 1 + rng.integers(3)) % 4)
        qx, qy = _edge_point(exit_side, rng.uniform(-h, h), h)
        if _line_clearance(px, py, qx, qy) < profile.clearance:
            continue
        heading = math.atan2(qy - py, qx - px)
        obj = SceneObject(
            cls=cls,
            x=px,
            y=py,
            heading=heading,
            speed=rng.uniform(*config.speed_band(cls)),
            dims=_draw_dims(profile, rng),
            jitter=profile.heading_jitter,
            spawn_order=order,
        )
        if not _overlaps_static(obj, config.statics):
            return obj
    return None


def _initial_objects(config: SimConfig, rng) -> list:
    """Seed the first frame with a small interior population."""
    objects = []
    order = 0
    h = config.grid.half_extent
    for cls in MOVING_CLASSES:
        profile = PROFILES[cls]
        n = int(rng.poisson(config.spawn_rate(cls) * 20.0))
        for _ in range(n):
            for _ in range(30):
                px = rng.uniform(-0.85 * h, 0.85 * h)
                py = rng.uniform(-0.85 * h, 0.85 * h)
                side = int(rng.integers(4))
                qx, qy = _edge_point(side, rng.uniform(-h, h), h)
                if _line_clearance(px, py, qx, qy) < profile.clearance:
                    continue
                if math.hypot(px, py) < profile.clearance:
                    continue
                obj = SceneObject(
                    cls=cls,
                    x=px,
                    y=py,
                    heading=math.atan2(qy - py, qx - px),
                    speed=rng.uniform(*config.speed_band(cls)),
                    dims=_draw_dims(profile, rng),
                    jitter=profile.heading_jitter,
                    spawn_order=order,
                )
                if not _overlaps_static(obj, config.statics):
                    objects.append(obj)
                    order += 1
                    break
    return objects


def step_world(state: WorldState, config: SimConfig, rng) -> WorldState:
    """Advance one frame: move, despawn at the margin, spawn at edges."""
    dt = 1.0 / config.frame_rate
    h = config.grid.half_extent
    moved = []
    for obj in state.objects:
        heading = obj.heading
        if obj.jitter > 0:
            heading += rng.uniform(-obj.jitter, obj.jitter)
        nx = obj.x + math.cos(heading) * obj.speed * dt
        ny = obj.y + math.sin(heading) * obj.speed * dt
        if max(abs(nx), abs(ny)) - obj.bound_radius > h + DESPAWN_MARGIN:
            continue
        moved.append(dataclasses.replace(obj, x=nx, y=ny, heading=heading))
    order = state.next_spawn_order
    for cls in MOVING_CLASSES:
        rate = config.spawn_rate(cls)
        if rate <= 0:
            continue
        for _ in range(int(rng.poisson(rate))):
            obj = _spawn_object(cls, config, rng, order)
            if obj is not None:
                moved.append(obj)
                order += 1
    return WorldState(objects=moved, next_spawn_order=order)


def render_ground_truth(state: WorldState, config: SimConfig):
    """Occlusion-free occupancy and class grids for the current state.

    Statics are painted first as background, then objects in spawn order,
    so dynamics win over statics and later spawns over earlier ones.
    Class labels carry the ignore marker wherever nothing is occupied.
    """
    cx, cy = _centers(config.grid)
    y_true = np.zeros(cx.shape, dtype=np.uint8)
    c_true = np.full(cx.shape, IGNORE_LABEL, dtype=np.uint8)
    for shape in config.statics:
        mask = _static_mask(shape, cx, cy)
        y_true[mask] = 1
        c_true[mask] = CLASS_BACKGROUND
    for obj in sorted(state.objects, key=lambda o: o.spawn_order):
        mask = _object_mask(obj, cx, cy)
        y_true[mask] = 1
        c_true[mask] = obj.cls
    return y_true, c_true


def occupancy_grid(state: WorldState, config: SimConfig, include=None,
                   with_statics: bool = True) -> np.ndarray:
    """Rasterized occupancy of the scene (optionally a subset of objects)."""
    cx, cy = _centers(config.grid)
    out = np.zeros(cx.shape, dtype=bool)
    if with_statics:
        for shape in config.statics:
            out |= _static_mask(shape, cx, cy)
    objects = state.objects if include is None else include
    for obj in objects:
        out |= _object_mask(obj, cx, cy)
    return out


@lru_cache(maxsize=8)
def _beam_templates(beams: int, max_range_cells: float):
    """Per-beam unit directions and the shared march parameter values.

    Angles are quantized to float32 up front: that is the precision the
    scan reports, and the observation encoder must walk exactly the same
    cells (axis-aligned beams from the corner-seated sensor run along
    cell boundaries, where the last bit decides the row).
    """
    angles = (-math.pi + 2.0 * math.pi * np.arange(beams) / beams).astype(np.float32)
    dirs = np.stack([[math.cos(float(a)), math.sin(float(a))] for a in angles])
    n = int(math.floor(max_range_cells / RAY_STEP))
    ts = np.arange(n + 1, dtype=np.float64) * RAY_STEP
    return angles, dirs, ts


def synthesize_scan(state: WorldState, config: SimConfig, rng,
                    include=None) -> LaserScan:
    """Cast the configured beams against the rasterized scene.

    Beams march in the same sub-cell steps the observation encoder uses,
    so a reported range always ends inside the first occupied cell along
    the beam: the observed-occupied cells coincide with ground-truth
    cells up to range noise.  Noisy ranges are clamped to stay positive
    and within max_range; beams that reach max_range without a hit carry
    the no-return flag.  ``include`` optionally restricts which objects
    are present (used by the occlusion statistics).
    """
    occupied = occupancy_grid(state, config, include=include)
    m = config.grid.size
    origin = m / 2.0
    max_range_cells = config.max_range / config.grid.cell_size
    angles, dirs, ts = _beam_templates(config.beams, max_range_cells)
    noise = rng.normal(0.0, config.range_noise, size=config.beams)

    ranges = np.full(config.beams, config.max_range, dtype=np.float64)
    no_return = np.ones(config.beams, dtype=bool)
    px = origin + dirs[:, :1] * ts[None, :]
    py = origin + dirs[:, 1:2] * ts[None, :]
    ix = np.floor(px).astype(np.int32)
    iy = np.floor(py).astype(np.int32)
    inside = (ix >= 0) & (ix < m) & (iy >= 0) & (iy < m)
    hit = inside & occupied[ix.clip(0, m - 1), iy.clip(0, m - 1)]
    any_hit = hit.any(axis=1)
    first = hit.argmax(axis=1)
    n_samples = ts.shape[0]
    for i in np.nonzero(any_hit)[0]:
        # report the middle of the beam's chord through the hit cell: the
        # cell is the obstacle at grid resolution, and a mid-cell range
        # keeps the float32-rounded, noise-jittered endpoint inside it
        j = int(first[i])
        cell = (ix[i, j], iy[i, j])
        k = j
        while k + 1 < n_samples and (ix[i, k + 1], iy[i, k + 1]) == cell:
            k += 1
        t_hit = 0.5 * (ts[j] + ts[k]) * config.grid.cell_size
        ranges[i] = min(max(t_hit + noise[i], MIN_RANGE), config.max_range)
        no_return[i] = False
    return LaserScan(
        angles=angles,
        ranges=ranges.astype(np.float32),
        max_range=config.max_range,
        no_return=no_return,
    )


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Frame:
    """One time step: partial observation, ground truth, and the raw scan."""

    visibility: np.ndarray   # uint8 [M,M]
    occupancy: np.ndarray    # uint8 [M,M]
    y_true: np.ndarray       # uint8 [M,M]
    c_true: np.ndarray       # uint8 [M,M], 255 = ignore
    angles: np.ndarray       # float32 per beam
    ranges: np.ndarray       # float32 per beam
    no_return: np.ndarray    # uint8 per beam

    @property
    def observation(self) -> PartialObservation:
        return PartialObservation(self.visibility, self.occupancy)

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in dataclasses.fields(Frame)
        )


@dataclass
class Episode:
    """A time-ordered frame sequence with the metadata stored on disk.

    ``cell_size`` is kept at float32 precision, matching the file format,
    so write-then-read is a bit-exact identity.
    """

    m: int
    k: int
    cell_size: float
    seed: int
    frames: list

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.m, self.cell_size)

    def __len__(self):
        return len(self.frames)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (
            self.m == other.m
            and self.k == other.k
            and self.cell_size == other.cell_size
            and self.seed == other.seed
            and self.frames == other.frames
        )


def _make_frame(state: WorldState, config: SimConfig, rng) -> Frame:
    y_true, c_true = render_ground_truth(state, config)
    scan = synthesize_scan(state, config, rng)
    obs = raytrace_scan(scan, config.grid)
    return Frame(
        visibility=obs.visibility,
        occupancy=obs.occupancy,
        y_true=y_true,
        c_true=c_true,
        angles=scan.angles.astype(np.float32),
        ranges=scan.ranges.astype(np.float32),
        no_return=scan.no_return.astype(np.uint8),
    )


def generate_episode(config: SimConfig, length: int, seed: int) -> Episode:
    """Simulate ``length`` frames deterministically from the seed."""
    if length < 1:
        raise ValueError("episode length must be >= 1")
    rng = np.random.default_rng(seed)
    state = WorldState(objects=_initial_objects(config, rng))
    state.next_spawn_order = len(state.objects)
    frames = []
    for _ in range(length):
        frames.append(_make_frame(state, config, rng))
        state = step_world(state, config, rng)
    return Episode(
        m=config.grid.size,
        k=N_CLASSES,
        cell_size=float(np.float32(config.grid.cell_size)),
        seed=seed,
        frames=frames,
    )


def _scripted_state(objects) -> WorldState:
    return WorldState(objects=list(objects), next_spawn_order=len(objects))


def _run_scripted(config: SimConfig, objects, length: int, seed: int) -> Episode:
    rng = np.random.default_rng(seed)
    state = _scripted_state(objects)
    frames = [None] * length
    for t in range(length):
        frames[t] = _make_frame(state, config, rng)
        state = step_world(state, config, rng)
    return Episode(
        m=config.grid.size,
        k=N_CLASSES,
        cell_size=float(np.float32(config.grid.cell_size)),
        seed=seed,
        frames=frames,
    )


SCENARIO_NAMES = ("occluded-crossing", "static-only", "mixed-traffic")


def scripted_scenario(name: str, config: SimConfig, length: int = 40) -> Episode:
    """Deterministic hand-authored scenes used by the evaluation probes.

    occluded-crossing: one constant-velocity disc passes behind the thin
    wall of the crossroads map, fully occluded for several consecutive
    frames with visible entry and exit.  static-only: fixed obstacles
    only.  mixed-traffic: one object of every class.
    """
    if name not in SCENARIO_NAMES:
        raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")
    quiet = dataclasses.replace(config, spawn_rates=(0.0, 0.0, 0.0))
    if name == "static-only":
        return _run_scripted(quiet, [], length, seed=1001)
    if name == "occluded-crossing":
        walker = SceneObject(
            cls=CLASS_PEDESTRIAN,
            x=-0.6,
            y=1.4,
            heading=0.0,
            speed=0.8,
            dims=(0.3,),
            jitter=0.0,
            spawn_order=0,
        )
        return _run_scripted(quiet, [walker], length, seed=1002)
    car = SceneObject(
        cls=CLASS_CAR, x=-4.6, y=-1.65, heading=0.0, speed=4.0,
        dims=(4.2, 1.8), jitter=0.0, spawn_order=0,
    )
    cyclist = SceneObject(
        cls=CLASS_CYCLIST, x=4.6, y=1.55, heading=math.pi, speed=3.0,
        dims=(1.8, 0.6), jitter=0.0, spawn_order=1,
    )
    walker = SceneObject(
        cls=CLASS_PEDESTRIAN, x=1.8, y=-4.4, heading=math.pi / 2.0, speed=1.2,
        dims=(0.3,), jitter=0.0, spawn_order=2,
    )
    return _run_scripted(quiet, [car, cyclist, walker], length, seed=1003)


# ---------------------------------------------------------------------------
# episode file format


class EpisodeFormatError(ValueError):
    """Malformed or corrupt episode file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


_HEADER = struct.Struct("<4sHIIIIfQ")
_BEAM_DTYPE = np.dtype([("angle", "<f4"), ("range", "<f4"), ("no_return", "u1")])


def write_episode(path, episode: Episode):
    """Serialize an episode (little-endian, CRC32 trailer)."""
    m = episode.m
    beams = len(episode.frames[0].angles)
    parts = [
        _HEADER.pack(
            EPISODE_MAGIC,
            EPISODE_VERSION,
            m,
            episode.k,
            len(episode.frames),
            beams,
            episode.cell_size,
            episode.seed,
        )
    ]
    for frame in episode.frames:
        parts.append(frame.visibility.astype(np.uint8).tobytes())
        parts.append(frame.occupancy.astype(np.uint8).tobytes())
        parts.append(frame.y_true.astype(np.uint8).tobytes())
        parts.append(frame.c_true.astype(np.uint8).tobytes())
        beam_rec = np.empty(beams, dtype=_BEAM_DTYPE)
        beam_rec["angle"] = frame.angles
        beam_rec["range"] = frame.ranges
        beam_rec["no_return"] = frame.no_return
        parts.append(beam_rec.tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_episode(path) -> Episode:
    """Parse and CRC-check an episode file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 4:
        raise EpisodeFormatError("file too short for an episode header", len(blob))
    payload, crc_bytes = blob[:-4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    actual_crc = zlib.crc32(payload) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise EpisodeFormatError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            len(payload),
        )
    magic, version, m, k, t, beams, cell_size, seed = _HEADER.unpack_from(payload, 0)
    if magic != EPISODE_MAGIC:
        raise EpisodeFormatError(f"bad magic {magic!r}", 0)
    if version != EPISODE_VERSION:
        raise EpisodeFormatError(f"unsupported episode version {version}", 4)
    offset = _HEADER.size
    grid_bytes = m * m
    frame_bytes = 4 * grid_bytes + beams * _BEAM_DTYPE.itemsize
    if len(payload) != _HEADER.size + t * frame_bytes:
        raise EpisodeFormatError(
            f"payload length {len(payload)} does not match header (expected "
            f"{_HEADER.size + t * frame_bytes})",
            offset,
        )
    frames = []
    for _ in range(t):
        grids = []
        for _ in range(4):
            arr = np.frombuffer(payload, dtype=np.uint8, count=grid_bytes, offset=offset)
            grids.append(arr.reshape(m, m).copy())
            offset += grid_bytes
        beam_rec = np.frombuffer(payload, dtype=_BEAM_DTYPE, count=beams, offset=offset)
        offset += beams * _BEAM_DTYPE.itemsize
        frames.append(
            Frame(
                visibility=grids[0],
                occupancy=grids[1],
                y_true=grids[2],
                c_true=grids[3],
                angles=beam_rec["angle"].copy(),
                ranges=beam_rec["range"].copy(),
                no_return=beam_rec["no_return"].copy(),
            )
        )
    return Episode(m=m, k=k, cell_size=cell_size, seed=seed, frames=frames)


# ---------------------------------------------------------------------------
# occlusion statistics (used to tune spawn rates)


def occlusion_fraction(config: SimConfig, n_frames: int, seed: int) -> float:
    """Fraction of frames with at least one partially occluded object.

    An object counts as partially occluded when some cell of it that
    would be observed occupied were it alone in the scene is hidden by
    another shape.  Noise is disabled for the comparison scans.
    """
    quiet = dataclasses.replace(config, range_noise=0.0)
    rng = np.random.default_rng(seed)
    state = WorldState(objects=_initial_objects(quiet, rng))
    state.next_spawn_order = len(state.objects)
    hits = 0
    total = 0
    for _ in range(n_frames):
        if state.objects:
            total += 1
            full = raytrace_scan(synthesize_scan(state, quiet, np.random.default_rng(0)), quiet.grid)
            cx, cy = _centers(quiet.grid)
            occluded = False
            for obj in state.objects:
                solo_cfg = dataclasses.replace(quiet, statics=())
                solo = raytrace_scan(
                    synthesize_scan(state, solo_cfg, np.random.default_rng(0), include=[obj]),
                    quiet.grid,
                )
                mask = _object_mask(obj, cx, cy)
                solo_cells = int((solo.occupancy.astype(bool) & mask).sum())
                seen_cells = int((full.occupancy.astype(bool) & mask).sum())
                if solo_cells - seen_cells >= 1:
                    occluded = True
                    break
            if occluded:
                hits += 1
        state = step_world(state, quiet, rng)
    return hits / max(1, total)
