"""Deterministic simulated patient / robot / ultrasound world.

Geometry model
--------------
The scanned surface is a half-cylinder "abdomen" aligned with the y axis:
``z(x, y) = sqrt(max(0, R^2 - x^2))`` with R = 150 mm over
x in [-200, 200], y in [-250, 250]. Inward surface normals on the curved
part point at the cylinder axis, so a probe seated at footprint x images
along the ray through ``(0, y, 0)``.

Imaging model
-------------
Executing a trajectory records one frame per pose. The image plane at a
frame passes through the probe position with normal along the direction of
travel; the image centerline is the probe axis (the pose direction). The
organ is in-plane when the footprint-bounded image strip (half-width
30 mm) overlaps the organ ellipsoid and, for breath-hold-gated organs, a
breath-hold window is active at that frame. The lateral offset ratio is the
in-plane distance from the centerline to the organ-center projection over
the footprint half-width, clipped to [0, 1].

Everything is deterministic given (seed, call sequence); worlds serialize
to canonical JSON, including the RNG state, for replay and diff testing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    DegenerateTrajectoryError,
    NoSweepYetError,
    ProbeNotPlacedError,
    RefineImpossibleError,
    SpeedOutOfRangeError,
    UnknownFixtureError,
    UnknownLandmarkError,
    UnknownSweepError,
    UnknownTrajectoryError,
)
from .tools import LATEST

SPEED_MIN_MM_S = 1.0
SPEED_MAX_MM_S = 50.0
N_POINTS_MIN = 2
N_POINTS_MAX = 500

#: default landmark footprints (x, y) in mm; lifted onto the surface at load.
DEFAULT_LANDMARKS: dict[str, tuple[float, float]] = {
    "xiphoid": (0.0, 120.0),
    "umbilicus": (0.0, 0.0),
    "right_costal_margin": (-70.0, 80.0),
    "left_costal_margin": (70.0, 80.0),
    "right_iliac_crest": (-80.0, -80.0),
    "left_iliac_crest": (80.0, -80.0),
    "l1": (0.0, 60.0),
    "l2": (0.0, 30.0),
    "l3": (0.0, 0.0),
    "l4": (0.0, -30.0),
    "l5": (0.0, -60.0),
    "right_midaxillary": (-110.0, 0.0),
    "left_midaxillary": (110.0, 0.0),
}


@dataclass
class WorldConfig:
    radius: float = 150.0
    x_extent: tuple[float, float] = (-200.0, 200.0)
    y_extent: tuple[float, float] = (-250.0, 250.0)
    footprint_halfwidth: float = 30.0
    segmentation_sigma: float = 2.0
    force_max: float = 15.0
    force_saturation: float = 5.0
    breath_hold_frames: int = 60
    visible_fraction_min: float = 0.5
    offset_ratio_max: float = 0.2
    default_plan_points: int = 50
    default_speed: float = 10.0


@dataclass
class SurfaceModel:
    """Half-cylinder abdomen surface with closed-form heights and normals."""

    radius: float = 150.0

    def height(self, x: float) -> float:
        return math.sqrt(max(0.0, self.radius * self.radius - x * x))

    def lift(self, x: float, y: float) -> np.ndarray:
        return np.array([x, y, self.height(x)], dtype=float)

    def inward_normal(self, x: float) -> np.ndarray:
        """Unit inward normal at footprint x (independent of y)."""
        r = self.radius
        if abs(x) >= r:
            return np.array([0.0, 0.0, -1.0])
        z = self.height(x)
        n = np.array([-x / r, 0.0, -z / r])
        return n / np.linalg.norm(n)

    def radial_footprint(self, point: np.ndarray) -> tuple[float, float]:
        """Footprint (x, y) whose inward-normal ray passes through ``point``.

        On the curved part every inward normal points at the cylinder axis,
        so the projection preserves the angle around the axis. Points at or
        below z = 0 fall back to vertical projection.
        """
        px, py, pz = float(point[0]), float(point[1]), float(point[2])
        rho = math.hypot(px, pz)
        if pz <= 1e-9 or rho <= 1e-9:
            return px, py
        return self.radius * px / rho, py


@dataclass
class Pose:
    position: np.ndarray
    direction: np.ndarray  # unit vector

    def to_dict(self) -> dict[str, Any]:
        return {
            "position": [float(v) for v in self.position],
            "direction": [float(v) for v in self.direction],
        }


@dataclass
class Organ:
    name: str
    center: np.ndarray          # true center = prior + atlas_offset
    radii: np.ndarray           # ellipsoid semi-axes, axis-aligned
    requires_breath_hold: bool
    atlas_offset: np.ndarray    # hidden deviation of true center from the prior

    def support_radius(self, direction: np.ndarray) -> float:
        """Half-extent of the ellipsoid along a unit direction."""
        return float(np.sqrt(np.sum((self.radii * direction) ** 2)))

    def to_dict(self) -> dict[str, Any]:
        return {
            "center": [float(v) for v in self.center],
            "radii": [float(v) for v in self.radii],
            "requires_breath_hold": self.requires_breath_hold,
            "atlas_offset": [float(v) for v in self.atlas_offset],
        }


@dataclass
class Trajectory:
    poses: list[Pose]
    speed: float

    def to_dict(self) -> dict[str, Any]:
        return {"poses": [p.to_dict() for p in self.poses], "speed": float(self.speed)}


@dataclass
class FrameObs:
    position: np.ndarray
    confidence: float
    organ_in_plane: bool
    lateral_offset_ratio: float | None  # present only when organ_in_plane

    def to_dict(self) -> dict[str, Any]:
        return {
            "position": [float(v) for v in self.position],
            "confidence": float(self.confidence),
            "organ_in_plane": self.organ_in_plane,
            "lateral_offset_ratio": None if self.lateral_offset_ratio is None
            else float(self.lateral_offset_ratio),
        }


@dataclass
class SweepRecord:
    trajectory_index: int
    frames: list[FrameObs]

    @property
    def visible_frames(self) -> list[FrameObs]:
        return [f for f in self.frames if f.organ_in_plane]

    @property
    def visible_fraction(self) -> float:
        return len(self.visible_frames) / len(self.frames) if self.frames else 0.0

    @property
    def mean_offset_ratio(self) -> float:
        """Mean lateral offset over visible frames; 1.0 when nothing is visible."""
        visible = self.visible_frames
        if not visible:
            return 1.0
        return float(np.mean([f.lateral_offset_ratio for f in visible]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "trajectory_index": self.trajectory_index,
            "frames": [f.to_dict() for f in self.frames],
        }


def _data_dir() -> Path:
    return Path(str(resources.files("russ"))) / "data"


def list_fixtures() -> list[str]:
    return sorted(p.stem for p in (_data_dir() / "scenes").glob("*.json"))


def _load_scene(fixture: str) -> dict[str, Any]:
    path = _data_dir() / "scenes" / f"{fixture}.json"
    if not path.is_file():
        raise UnknownFixtureError(f"no scene fixture {fixture!r} (have {list_fixtures()})")
    return json.loads(path.read_text())


@dataclass
class WorldState:
    """Single-owner mutable state of one scanning episode."""

    seed: int
    fixture: str
    config: WorldConfig
    surface: SurfaceModel
    landmarks: dict[str, np.ndarray]
    organs: dict[str, Organ]
    probe: Pose
    probe_placed: bool = False
    force: float = 0.0
    breath_hold_frames_remaining: int = 0
    frame_counter: int = 0
    trajectories: list[Trajectory] = field(default_factory=list)
    sweeps: list[SweepRecord] = field(default_factory=list)
    adjustments: list[dict[str, Any]] = field(default_factory=list)
    voice_log: list[str] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    # -- bookkeeping ------------------------------------------------------

    @property
    def tracked_organ(self) -> Organ:
        """The scene organ that frames report on (scenes ship one organ)."""
        return self.organs[min(self.organs)]

    def current_confidence(self) -> float:
        return contact_confidence(self, self.probe, self.force)

    def resolve_trajectory(self, ref: Any) -> int:
        if isinstance(ref, str) and ref.strip().lower() == LATEST:
            if not self.trajectories:
                raise UnknownTrajectoryError("no trajectory planned yet")
            return len(self.trajectories) - 1
        if isinstance(ref, int) and not isinstance(ref, bool) and 0 <= ref < len(self.trajectories):
            return ref
        raise UnknownTrajectoryError(f"unknown trajectory reference {ref!r}")

    def resolve_sweep(self, ref: Any) -> int:
        if isinstance(ref, str) and ref.strip().lower() == LATEST:
            if not self.sweeps:
                raise UnknownSweepError("no sweep recorded yet")
            return len(self.sweeps) - 1
        if isinstance(ref, int) and not isinstance(ref, bool) and 0 <= ref < len(self.sweeps):
            return ref
        raise UnknownSweepError(f"unknown sweep reference {ref!r}")

    def to_canonical_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "fixture": self.fixture,
            "force": float(self.force),
            "probe": self.probe.to_dict(),
            "probe_placed": self.probe_placed,
            "breath_hold_frames_remaining": self.breath_hold_frames_remaining,
            "frame_counter": self.frame_counter,
            "landmarks": {k: [float(v) for v in p] for k, p in sorted(self.landmarks.items())},
            "organs": {k: o.to_dict() for k, o in sorted(self.organs.items())},
            "trajectories": [t.to_dict() for t in self.trajectories],
            "sweeps": [s.to_dict() for s in self.sweeps],
            "adjustments": self.adjustments,
            "voice_log": self.voice_log,
            "rng_state": json.loads(json.dumps(self.rng.bit_generator.state)),
        }

    def to_canonical_json(self) -> str:
        return json.dumps(self.to_canonical_dict(), sort_keys=True, separators=(",", ":"))


def init_world(seed: int, fixture: str) -> WorldState:
    """Deterministic world from a scene fixture id.

    Landmarks come from the default table (plus any the scene adds); each
    organ's true center is the scene prior plus a hidden atlas offset drawn
    uniformly in [-25, 25] mm per axis from the seeded stream.
    """
    scene = _load_scene(fixture)
    config = WorldConfig(**scene.get("overrides", {}))
    surface = SurfaceModel(radius=config.radius)
    rng = np.random.default_rng(seed)

    landmarks: dict[str, np.ndarray] = {}
    table = dict(DEFAULT_LANDMARKS)
    for name, xy in scene.get("landmarks", {}).items():
        table[name.lower()] = (float(xy[0]), float(xy[1]))
    for name, (x, y) in table.items():
        landmarks[name] = surface.lift(x, y)

    organs: dict[str, Organ] = {}
    for name in sorted(scene["organs"]):
        spec = scene["organs"][name]
        offset = rng.uniform(-25.0, 25.0, 3)
        prior = np.asarray(spec["center"], dtype=float)
        organs[name.lower()] = Organ(
            name=name.lower(),
            center=prior + offset,
            radii=np.asarray(spec["radii"], dtype=float),
            requires_breath_hold=bool(spec.get("requires_breath_hold", False)),
            atlas_offset=offset,
        )

    probe = Pose(position=np.array([0.0, 0.0, 250.0]), direction=np.array([0.0, 0.0, -1.0]))
    return WorldState(
        seed=seed, fixture=fixture, config=config, surface=surface,
        landmarks=landmarks, organs=organs, probe=probe, rng=rng,
    )


# -- tool effects ----------------------------------------------------------


def plan_trajectory(
    world: WorldState,
    target_organ: str,
    start_landmark: str,
    end_landmark: str,
    n_points: int | None = None,
) -> Trajectory:
    """Linear footprint interpolation between two landmarks, lifted on-surface."""
    n = world.config.default_plan_points if n_points is None else n_points
    if not (N_POINTS_MIN <= n <= N_POINTS_MAX):
        raise ValueError(f"n_points must be in [{N_POINTS_MIN}, {N_POINTS_MAX}], got {n}")
    start = _landmark(world, start_landmark)
    end = _landmark(world, end_landmark)
    if math.hypot(end[0] - start[0], end[1] - start[1]) < 1e-9:
        raise DegenerateTrajectoryError(
            f"{start_landmark!r} and {end_landmark!r} share a footprint"
        )
    poses = _sample_track(world.surface, (start[0], start[1]), (end[0], end[1]), n)
    traj = Trajectory(poses=poses, speed=world.config.default_speed)
    world.trajectories.append(traj)
    return traj


def _landmark(world: WorldState, name: str) -> np.ndarray:
    key = name.strip().lower()
    if key not in world.landmarks:
        raise UnknownLandmarkError(f"unknown landmark {name!r}")
    return world.landmarks[key]


def _sample_track(
    surface: SurfaceModel,
    start_xy: tuple[float, float],
    end_xy: tuple[float, float],
    n: int,
) -> list[Pose]:
    poses = []
    for t in np.linspace(0.0, 1.0, n):
        x = start_xy[0] + t * (end_xy[0] - start_xy[0])
        y = start_xy[1] + t * (end_xy[1] - start_xy[1])
        poses.append(Pose(position=surface.lift(x, y), direction=surface.inward_normal(x)))
    return poses


def contact_confidence(world: WorldState, pose: Pose, force: float) -> float:
    """Alignment times force ramp: max(0, d.n) * clip(force / 5 N, 0, 1)."""
    n = world.surface.inward_normal(float(pose.position[0]))
    alignment = max(0.0, float(np.dot(pose.direction, n)))
    ramp = min(max(force / world.config.force_saturation, 0.0), 1.0)
    return alignment * ramp


def execute_motion(world: WorldState, target: Any, speed: float) -> SweepRecord | Pose:
    """Run a trajectory (recording a sweep) or move the probe to a position.

    ``target`` is a trajectory index / "latest", or a position triple
    [x, y, z]. The breath-hold counter drops by one per recorded frame.
    """
    if not (SPEED_MIN_MM_S <= speed <= SPEED_MAX_MM_S):
        raise SpeedOutOfRangeError(
            f"speed {speed} mm/s outside [{SPEED_MIN_MM_S}, {SPEED_MAX_MM_S}]"
        )
    if isinstance(target, (list, tuple, np.ndarray)):
        if len(target) != 3:
            raise UnknownTrajectoryError(f"pose target must be [x, y, z], got {target!r}")
        world.probe = Pose(
            position=np.asarray([float(v) for v in target]),
            direction=world.probe.direction.copy(),
        )
        world.probe_placed = True
        return world.probe

    idx = world.resolve_trajectory(target)
    traj = world.trajectories[idx]
    organ = world.tracked_organ
    frames: list[FrameObs] = []
    for i, pose in enumerate(traj.poses):
        travel = _travel_direction(traj.poses, i)
        conf = contact_confidence(world, pose, world.force)
        hold_ok = (not organ.requires_breath_hold) or world.breath_hold_frames_remaining > 0
        in_geom, ratio = _image_geometry(world, pose, travel, organ)
        in_plane = in_geom and hold_ok
        frames.append(FrameObs(
            position=pose.position.copy(),
            confidence=conf,
            organ_in_plane=in_plane,
            lateral_offset_ratio=ratio if in_plane else None,
        ))
        world.breath_hold_frames_remaining = max(0, world.breath_hold_frames_remaining - 1)
        world.frame_counter += 1
    world.probe = Pose(position=traj.poses[-1].position.copy(),
                       direction=traj.poses[-1].direction.copy())
    world.probe_placed = True
    sweep = SweepRecord(trajectory_index=idx, frames=frames)
    world.sweeps.append(sweep)
    return sweep


def _travel_direction(poses: list[Pose], i: int) -> np.ndarray:
    if i < len(poses) - 1:
        d = poses[i + 1].position - poses[i].position
    else:
        d = poses[i].position - poses[i - 1].position
    norm = np.linalg.norm(d)
    return d / norm if norm > 1e-12 else np.array([0.0, 1.0, 0.0])


def _image_geometry(
    world: WorldState, pose: Pose, travel: np.ndarray, organ: Organ
) -> tuple[bool, float]:
    """(strip overlaps organ, lateral offset ratio) for one frame.

    The image plane passes through the probe position with normal along
    ``travel``; its width axis is travel x probe-direction. The organ is in
    the image when the plane cuts the ellipsoid and the in-plane lateral
    distance is within footprint half-width plus the organ's own half-extent.
    """
    v = organ.center - pose.position
    along = abs(float(np.dot(v, travel)))
    w = np.cross(travel, pose.direction)
    norm = np.linalg.norm(w)
    if norm < 1e-12:
        # degenerate frame: travel parallel to the probe axis
        return False, 1.0
    w = w / norm
    lateral = abs(float(np.dot(v, w)))
    half = world.config.footprint_halfwidth
    in_geom = along <= organ.support_radius(travel) and lateral <= half + organ.support_radius(w)
    ratio = min(lateral / half, 1.0)
    return in_geom, ratio


def adjust_contact(world: WorldState, sweep: Any = None) -> tuple[Pose, float]:
    """Align the probe with the local normal and restore contact force.

    Never decreases confidence at the current position; idempotent.
    """
    if not world.probe_placed:
        raise ProbeNotPlacedError("probe has not been positioned yet")
    if sweep is not None:
        world.resolve_sweep(sweep)  # validate the reference, value otherwise unused
    before = world.current_confidence()
    world.probe = Pose(
        position=world.probe.position.copy(),
        direction=world.surface.inward_normal(float(world.probe.position[0])),
    )
    world.force = min(world.config.force_max, max(world.force, world.config.force_saturation))
    after = world.current_confidence()
    world.adjustments.append({
        "frame_counter": world.frame_counter,
        "confidence_before": float(before),
        "confidence_after": float(after),
        "force": float(world.force),
    })
    return world.probe, world.force


BREATH_KEYWORDS = ("breath", "inhale", "hold")


def voice_guidance(world: WorldState, message: str) -> dict[str, Any]:
    """Speak to the patient; breath-hold phrasing opens a breath-hold window."""
    world.voice_log.append(message)
    lowered = message.lower()
    if any(k in lowered for k in BREATH_KEYWORDS):
        world.breath_hold_frames_remaining = world.config.breath_hold_frames
        return {"effect": "breath_hold",
                "breath_hold_frames_remaining": world.breath_hold_frames_remaining}
    return {"effect": "logged",
            "breath_hold_frames_remaining": world.breath_hold_frames_remaining}


def segment_organ(world: WorldState, sweep: Any) -> np.ndarray | None:
    """Organ centroid estimate from a sweep, or None when never visible.

    The estimate is the true center plus seeded Gaussian noise
    (config.segmentation_sigma per axis; zero sigma gives the exact center).
    """
    idx = world.resolve_sweep(sweep)
    record = world.sweeps[idx]
    if not record.visible_frames:
        return None
    noise = world.rng.normal(0.0, 1.0, 3) * world.config.segmentation_sigma
    return world.tracked_organ.center + noise


def refine_trajectory(world: WorldState, sweep: Any) -> Trajectory | None:
    """Replan the sweep's trajectory centered on the organ estimate.

    Returns None (no change) when the sweep already shows the organ well:
    mean lateral offset <= config.offset_ratio_max and visible fraction
    >= config.visible_fraction_min. Otherwise shifts the source trajectory
    so its midpoint footprint is the surface projection of the estimated
    centroid, re-lifts it, appends it, and returns it.
    """
    idx = world.resolve_sweep(sweep)
    record = world.sweeps[idx]
    cfg = world.config
    if (record.visible_frames
            and record.mean_offset_ratio <= cfg.offset_ratio_max
            and record.visible_fraction >= cfg.visible_fraction_min):
        return None
    estimate = segment_organ(world, idx)
    if estimate is None:
        raise RefineImpossibleError("organ not visible in the sweep; cannot re-center")
    source = world.trajectories[record.trajectory_index]
    start = source.poses[0].position
    end = source.poses[-1].position
    mid_xy = ((start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0)
    target_xy = world.surface.radial_footprint(estimate)
    dx, dy = target_xy[0] - mid_xy[0], target_xy[1] - mid_xy[1]
    poses = _sample_track(
        world.surface,
        (float(start[0] + dx), float(start[1] + dy)),
        (float(end[0] + dx), float(end[1] + dy)),
        len(source.poses),
    )
    traj = Trajectory(poses=poses, speed=source.speed)
    world.trajectories.append(traj)
    return traj


def is_scan_successful(world: WorldState, guideline) -> bool:
    """Did the last sweep visualize the guideline's target organ well?

    True iff visible fraction >= config.visible_fraction_min and mean
    lateral offset over visible frames <= config.offset_ratio_max.
    """
    if not world.sweeps:
        raise NoSweepYetError("no sweep was executed")
    target = guideline.target_organ.strip().lower()
    if target not in world.organs or world.organs[target] is not world.tracked_organ:
        return False
    last = world.sweeps[-1]
    if not last.visible_frames:
        return False
    return (last.visible_fraction >= world.config.visible_fraction_min
            and last.mean_offset_ratio <= world.config.offset_ratio_max)
