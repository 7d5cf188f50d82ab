"""Procedural driving worlds: scene graphs, ego kinematics and voxelisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import volume as wv
from .camera import CameraRig, default_rig

WHEELBASE = 2.5
DT = 0.5
LANE_WIDTH = 3.5
SIDEWALK_WIDTH = 2.0
MARK_HALF = 0.25          # half width of a painted line, one voxel wide in total
DASH, GAP = 3.0, 3.0
SCENE_EXTENT = (-40.0, 80.0)  # along-road span populated with objects

LAYOUTS = ("straight", "curved", "intersection")
WEATHERS = ("sunny", "rainy", "night")


class InfeasibleScene(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    layout: str = "straight"
    building_density: float = 0.5   # buildings per 10 m of road side
    tree_density: float = 0.5       # trees per 10 m of road side
    vehicle_count: int = 3
    pedestrian_count: int = 2
    weather: str = "sunny"
    location: str = "town"
    environment: str = "suburb"

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.weather not in WEATHERS:
            raise ValueError(f"unknown weather {self.weather!r}")
        if min(self.building_density, self.tree_density) < 0:
            raise ValueError("densities must be >= 0")
        if self.vehicle_count < 0 or self.pedestrian_count < 0:
            raise ValueError("counts must be >= 0")


@dataclass
class EgoState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    velocity: float = 0.0

    def __post_init__(self):
        if self.velocity < 0:
            raise ValueError("velocity must be >= 0")

    @property
    def pose(self):
        return (self.x, self.y, self.yaw)


def step_ego(state: EgoState, action, dt: float = DT, wheelbase: float = WHEELBASE) -> EgoState:
    """Kinematic bicycle step with midpoint heading integration."""
    v, steer = float(action[0]), float(action[1])
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(steer) >= math.pi / 2:
        raise ValueError("|steering| must be below pi/2")
    if v < 0:
        raise ValueError("velocity must be >= 0")
    dyaw = v / wheelbase * math.tan(steer) * dt
    mid = state.yaw + 0.5 * dyaw
    return EgoState(state.x + v * dt * math.cos(mid), state.y + v * dt * math.sin(mid),
                    state.yaw + dyaw, v)


# -- scene graph ---------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Oriented box resting at height ``z0``; footprint is half-open in local axes."""
    x: float
    y: float
    yaw: float
    length: float
    width: float
    height: float
    cls: int
    z0: float = 0.0


@dataclass(frozen=True)
class Tree:
    x: float
    y: float
    trunk_radius: float = 0.4
    trunk_height: float = 2.5
    canopy_radius: float = 1.5
    canopy_top: float = 5.0


@dataclass(frozen=True)
class Agent:
    """Vehicle moving at constant speed along a lane path."""
    lane: int                 # index into Scene.lanes
    s0: float                 # arc-length position at t = 0
    speed: float
    length: float = 4.5
    width: float = 2.0
    height: float = 1.5


@dataclass(frozen=True)
class Lane:
    """Lane centreline: straight (origin, heading) or arc around (cx, cy) with signed radius."""
    kind: str
    x0: float
    y0: float
    heading: float
    radius: float = 0.0       # arcs only; > 0 turns left

    def pose_at(self, s: float):
        if self.kind == "line":
            return (self.x0 + s * math.cos(self.heading), self.y0 + s * math.sin(self.heading),
                    self.heading)
        r = self.radius
        cx = self.x0 - r * math.sin(self.heading)
        cy = self.y0 + r * math.cos(self.heading)
        yaw = self.heading + s / r
        return cx + r * math.sin(yaw), cy - r * math.cos(yaw), yaw


@dataclass
class Scene:
    spec: SceneSpec
    lanes: list
    ego_start: EgoState
    buildings: list = field(default_factory=list)
    trees: list = field(default_factory=list)
    pedestrians: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    curve_radius: float = 0.0
    cross_x: float = 0.0
    ego_steer: float = 0.0

    def agent_boxes(self, t: float) -> list:
        out = []
        for a in self.agents:
            x, y, yaw = self.lanes[a.lane].pose_at(a.s0 + a.speed * t)
            out.append(Box(x, y, yaw, a.length, a.width, a.height, wv.VEHICLE, wv.VOXEL_SIZE))
        return out

    def ground(self, xw: np.ndarray, yw: np.ndarray):
        """Ground class and map colour for world points; arrays broadcast together."""
        spec = self.spec
        half = LANE_WIDTH
        cls = np.zeros(np.broadcast(xw, yw).shape, np.uint8)
        rgb = np.zeros(cls.shape + (3,), np.uint8)
        if spec.layout == "curved":
            r = self.curve_radius
            lat = r - np.hypot(xw, yw - r)
            along = np.arctan2(xw, r - yw) * r
            road_parts = [(lat, along)]
        else:
            road_parts = [(yw, xw)]
            if spec.layout == "intersection":
                road_parts.append((xw - self.cross_x, yw))
        road = np.zeros(cls.shape, bool)
        walk = np.zeros(cls.shape, bool)
        mark = np.zeros(cls.shape, bool)
        cross = np.zeros(cls.shape, bool)
        for lat, along in road_parts:
            on = np.abs(lat) < half
            road |= on
            walk |= (np.abs(lat) >= half) & (np.abs(lat) < half + SIDEWALK_WIDTH)
            dashed = np.mod(along, DASH + GAP) < DASH
            mark |= on & (np.abs(lat) <= MARK_HALF) & dashed
        if spec.layout == "intersection":
            in_box = (np.abs(yw) < half) & (np.abs(xw - self.cross_x) < half)
            mark &= ~in_box
            walk &= ~road
            # zebra bands just outside the junction box
            for lat, along, other in ((yw, xw - self.cross_x, xw), (xw - self.cross_x, yw, yw)):
                band = (np.abs(along) >= half + 0.5) & (np.abs(along) < half + 2.5)
                cross |= (np.abs(lat) < half) & band & (np.mod(np.floor(lat / 0.5), 2) == 0)
        else:
            walk &= ~road
        cls[walk] = wv.SIDEWALK
        cls[road] = wv.ROAD
        cls[mark] = wv.LANE
        rgb[road] = wv.MAP_ROAD
        rgb[cross] = wv.MAP_CROSSWALK
        rgb[mark] = wv.MAP_LANE
        return cls, rgb

    def lane_lines(self):
        """Analytic painted line positions, as (kind, params) for geometry checks."""
        if self.spec.layout == "curved":
            return [("circle", (0.0, self.curve_radius, self.curve_radius))]
        lines = [("hline", 0.0)]
        if self.spec.layout == "intersection":
            lines.append(("vline", self.cross_x))
        return lines


def _footprint_clear(scene: Scene, box: Box, margin: float = 0.5) -> bool:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = np.linspace(-box.length / 2 - margin, box.length / 2 + margin, 7)
    ly = np.linspace(-box.width / 2 - margin, box.width / 2 + margin, 5)
    gx, gy = np.meshgrid(lx, ly)
    xw = box.x + c * gx - s * gy
    yw = box.y + s * gx + c * gy
    cls, _ = scene.ground(xw, yw)
    return not cls.any()


def _overlaps(a: Box, others, gap: float = 0.5) -> bool:
    ra = math.hypot(a.length, a.width) / 2
    return any(math.hypot(a.x - b.x, a.y - b.y) < ra + math.hypot(b.length, b.width) / 2 + gap
               for b in others)


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    lo, hi = SCENE_EXTENT
    span = hi - lo
    lanes = []
    curve_radius = cross_x = 0.0
    if spec.layout == "curved":
        curve_radius = float(rng.uniform(25.0, 40.0))
        # ego lane (outer, counter-clockwise) and oncoming lane (inner, clockwise)
        lanes.append(Lane("arc", 0.0, -LANE_WIDTH / 2, 0.0, curve_radius + LANE_WIDTH / 2))
        lanes.append(Lane("arc", 0.0, LANE_WIDTH / 2, math.pi, -(curve_radius - LANE_WIDTH / 2)))
        steer = math.atan(WHEELBASE / (curve_radius + LANE_WIDTH / 2))
    else:
        lanes.append(Lane("line", lo, -LANE_WIDTH / 2, 0.0))
        lanes.append(Lane("line", hi, LANE_WIDTH / 2, math.pi))
        steer = 0.0
        if spec.layout == "intersection":
            cross_x = float(rng.uniform(10.0, 20.0))
            lanes.append(Lane("line", cross_x + LANE_WIDTH / 2, lo, math.pi / 2))
            lanes.append(Lane("line", cross_x - LANE_WIDTH / 2, hi, -math.pi / 2))
    scene = Scene(spec, lanes, EgoState(0.0, -LANE_WIDTH / 2, 0.0, 0.0),
                  curve_radius=curve_radius, cross_x=cross_x, ego_steer=steer)

    # agents: oncoming and crossing lanes only, one speed per lane so they never collide
    agent_lanes = list(range(1, len(lanes)))
    min_gap = 10.0
    capacity = int(span // min_gap) * len(agent_lanes)
    if spec.vehicle_count > capacity:
        raise InfeasibleScene(f"{spec.vehicle_count} vehicles exceed lane capacity {capacity}")
    slots = [(ln, k) for ln in agent_lanes for k in range(int(span // min_gap))]
    picks = rng.choice(len(slots), size=spec.vehicle_count, replace=False)
    lane_speed = {ln: float(rng.uniform(2.0, 8.0)) for ln in agent_lanes}
    for i in sorted(picks.tolist()):
        ln, k = slots[i]
        s0 = k * min_gap + float(rng.uniform(0.0, min_gap - 5.0))
        scene.agents.append(Agent(ln, s0, lane_speed[ln]))

    def side_positions(density):
        n = int(rng.poisson(density * span / 10.0 * 2))
        return n

    for _ in range(side_positions(spec.building_density)):
        for _attempt in range(20):
            b = Box(float(rng.uniform(lo, hi)), float(rng.uniform(-30.0, 30.0)), 0.0,
                    float(rng.uniform(4.0, 10.0)), float(rng.uniform(4.0, 8.0)),
                    float(rng.uniform(3.0, 7.5)), wv.BUILDING)
            if spec.layout == "curved":
                b = Box(b.x, b.y + curve_radius * float(rng.uniform(0, 1)), float(rng.uniform(0, math.pi)),
                        b.length, b.width, b.height, b.cls)
            if _footprint_clear(scene, b) and not _overlaps(b, scene.buildings):
                scene.buildings.append(b)
                break
    for _ in range(side_positions(spec.tree_density)):
        for _attempt in range(20):
            tr = Tree(float(rng.uniform(lo, hi)), float(rng.uniform(-20.0, 20.0)))
            probe = Box(tr.x, tr.y, 0.0, 2 * tr.canopy_radius, 2 * tr.canopy_radius, 1.0, 0)
            if spec.layout == "curved":
                probe = Box(tr.x, tr.y + curve_radius * 0.5, 0.0, probe.length, probe.width, 1.0, 0)
                tr = Tree(probe.x, probe.y)
            if _footprint_clear(scene, probe, 0.0) and not _overlaps(probe, scene.buildings):
                scene.trees.append(tr)
                break
    for _ in range(spec.pedestrian_count):
        for _attempt in range(50):
            x = float(rng.uniform(-10.0, 40.0))
            off = LANE_WIDTH + SIDEWALK_WIDTH / 2
            y = off if rng.random() < 0.5 else -off
            if spec.layout == "curved":
                x, y, _ = Lane("arc", 0.0, -off, 0.0, curve_radius + off).pose_at(x)
            p = Box(x, y, 0.0, 1.0, 1.0, 1.75, wv.PEDESTRIAN, wv.VOXEL_SIZE)
            cls, _ = scene.ground(np.array([x]), np.array([y]))
            if cls[0] == wv.SIDEWALK and not _overlaps(p, scene.pedestrians, 0.2):
                scene.pedestrians.append(p)
                break
    return scene


def default_actions(scene: Scene, n: int, velocity: float) -> list:
    """Lane-following actions for the scene's ego route."""
    return [(float(velocity), scene.ego_steer)] * n


# -- voxelisation --------------------------------------------------------------

def _grid_centres(shape, vs):
    z, h, w = shape
    xe = (np.arange(w) + 0.5) * vs - w * vs / 2
    ye = (np.arange(h) + 0.5) * vs - h * vs / 2
    ze = (np.arange(z) + 0.5) * vs
    return ze, ye, xe


def rasterize(scene: Scene, ego_pose, t: float, shape=(wv.Z, wv.H, wv.W),
              voxel_size: float = wv.VOXEL_SIZE) -> wv.WorldVolume:
    ex, ey, eyaw = (float(v) for v in ego_pose)
    ze, ye, xe = _grid_centres(shape, voxel_size)
    XE, YE = np.meshgrid(xe, ye)                     # [H, W]
    c, s = math.cos(eyaw), math.sin(eyaw)
    XW = ex + c * XE - s * YE
    YW = ey + s * XE + c * YE
    occ = np.zeros(shape, np.uint8)
    gcls, rgb = scene.ground(XW, YW)
    occ[0] = gcls

    def fill_box(b: Box):
        cb, sb = math.cos(b.yaw), math.sin(b.yaw)
        dx, dy = XW - b.x, YW - b.y
        lx = cb * dx + sb * dy
        ly = -sb * dx + cb * dy
        foot = (lx >= -b.length / 2) & (lx < b.length / 2) & (ly >= -b.width / 2) & (ly < b.width / 2)
        if not foot.any():
            return
        zs = (ze >= b.z0) & (ze < b.z0 + b.height)
        col = foot[None] & zs[:, None, None]
        occ[col] = b.cls

    for b in scene.buildings:
        fill_box(b)
    for tr in scene.trees:
        r2 = (XW - tr.x) ** 2 + (YW - tr.y) ** 2
        trunk = (r2 < tr.trunk_radius ** 2)[None] & (ze < tr.trunk_height)[:, None, None]
        canopy = (r2 < tr.canopy_radius ** 2)[None] & ((ze >= tr.trunk_height) & (ze < tr.canopy_top))[:, None, None]
        occ[trunk | canopy] = wv.VEGETATION
    for b in scene.pedestrians:
        fill_box(b)
    for b in scene.agent_boxes(t):
        fill_box(b)
    return wv.WorldVolume(occ, rgb, voxel_size, (ex, ey, eyaw))


# -- sequences -----------------------------------------------------------------

PROMPT_TEMPLATE = ("Drive in {weather} in {location}. The driving scene is in {environment}, "
                   "captured by multi-view camera.")


def make_prompt(spec: SceneSpec) -> str:
    return PROMPT_TEMPLATE.format(weather=spec.weather, location=spec.location,
                                  environment=spec.environment)


def generate_sequence(spec: SceneSpec, actions, n_frames: int, rig: CameraRig | None = None,
                      dt: float = DT, render: bool = True):
    """Roll the ego through a procedural scene.

    ``actions[i]`` is attached to frame ``i`` and drives the step to frame ``i + 1``.
    Returns the volume sequence, per-frame dicts of camera name -> RGB image
    (empty when ``render`` is false) and the prompt.
    """
    from .render import raycast_render

    if len(actions) < n_frames:
        raise ValueError(f"{len(actions)} actions for {n_frames} frames")
    scene = build_scene(spec)
    rig = rig or default_rig()
    state = scene.ego_start
    frames, images = [], []
    for i in range(n_frames):
        vol = rasterize(scene, state.pose, i * dt)
        frames.append(vol)
        images.append({cam.name: raycast_render(vol, cam, spec.weather) for cam in rig} if render else {})
        state = step_ego(state, actions[i], dt)
    acts = [(float(a[0]), float(a[1])) for a in actions[:n_frames]]
    return wv.WorldVolumeSequence(frames, acts, dt), images, make_prompt(spec)
