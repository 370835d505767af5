"""Deterministic 2-D workspace simulator.

A scene is a flat rectangular workspace with colored object patches on a
uniform background. The synthetic camera is an orthographic top-down crop:
a square window of side ``fov * workspace extent`` centered at the agent's
(x, y), rotated with the agent's heading, and resampled bilinearly to the
sensor resolution. Agent dynamics are a per-axis double integrator with
clamp-and-stop walls.

Everything here is a pure function of its inputs; rendering the same pose
twice gives bit-identical images.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AgentState",
    "Scene",
    "SceneObject",
    "SensorFrame",
    "load_scene",
    "make_patch",
    "random_walk_policy",
    "render_camera",
    "resample_bilinear",
    "step_dynamics",
    "wrap_angle",
]

UNIT_BOUNDS = np.array([[0.0, 1.0], [0.0, 1.0]])

PROCEDURAL_SHAPES = ("circle", "square", "triangle", "star", "cross", "ring")


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class AgentState:
    """Planar pose (x, y, theta) plus velocities."""

    position: np.ndarray  # (2,)
    heading: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # (xdot, ydot, thetadot)

    def pose(self) -> np.ndarray:
        """Pose vector (x, y, theta) with theta wrapped."""
        return np.array([self.position[0], self.position[1], float(wrap_angle(self.heading))])

    @staticmethod
    def from_pose(pose, velocity=None) -> "AgentState":
        pose = np.asarray(pose, dtype=float)
        vel = np.zeros(3) if velocity is None else np.asarray(velocity, dtype=float)
        return AgentState(position=pose[:2].copy(), heading=float(wrap_angle(pose[2])), velocity=vel.copy())


@dataclass(frozen=True)
class SensorFrame:
    """RGB image (C, H, W) in [0, 1] plus the capture pose."""

    image: np.ndarray
    pose: np.ndarray  # (x, y, theta) at capture


@dataclass(frozen=True)
class SceneObject:
    name: str
    center: np.ndarray  # (2,)
    size: float  # side of the square patch footprint, workspace units
    patch: np.ndarray  # (C, Ph, Pw) RGB in [0, 1], pre-composited on background


class Scene:
    """Immutable workspace description: background color + object patches."""

    def __init__(self, objects, background=(1.0, 1.0, 1.0), bounds=None):
        self.background = np.asarray(background, dtype=float)
        self.bounds = UNIT_BOUNDS.copy() if bounds is None else np.asarray(bounds, dtype=float)
        self.objects = list(objects)
        names = [o.name for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate object names in scene: {names}")
        for obj in self.objects:
            if obj.patch.ndim != 3 or obj.patch.shape[1] < 1 or obj.patch.shape[2] < 1:
                raise ValueError(f"object {obj.name!r} has empty patch {obj.patch.shape}")
            if not (np.all(obj.center >= self.bounds[:, 0]) and np.all(obj.center <= self.bounds[:, 1])):
                raise ValueError(f"object {obj.name!r} center {obj.center} outside workspace bounds")

    def extent(self) -> np.ndarray:
        return self.bounds[:, 1] - self.bounds[:, 0]


def _supersampled_mask(shape: str, n: int, ss: int = 4) -> np.ndarray:
    """Anti-aliased [0,1] occupancy mask of a procedural shape on an n x n patch."""
    m = n * ss
    # pixel centers in [-1, 1]^2, row 0 at top (+y)
    c = (np.arange(m) + 0.5) / m * 2.0 - 1.0
    xx, yy = np.meshgrid(c, -c, indexing="xy")
    if shape == "circle":
        mask = xx**2 + yy**2 <= 0.81
    elif shape == "square":
        mask = (np.abs(xx) <= 0.8) & (np.abs(yy) <= 0.8)
    elif shape == "triangle":
        # upward triangle with vertices (0, 0.9), (+-0.9, -0.7)
        mask = (yy >= -0.7) & (yy <= 0.9 - np.abs(xx) * (1.6 / 0.9))
    elif shape == "star":
        ang = np.arctan2(yy, xx)
        rad = np.hypot(xx, yy)
        # 5-point star: radius modulated between inner 0.35 and outer 0.9
        lobe = 0.5 * (1.0 + np.cos(5.0 * (ang - np.pi / 2.0)))
        mask = rad <= 0.35 + 0.55 * lobe
    elif shape == "cross":
        mask = (np.abs(xx) <= 0.3) | (np.abs(yy) <= 0.3)
        mask &= (np.abs(xx) <= 0.85) & (np.abs(yy) <= 0.85)
    elif shape == "ring":
        rad = np.hypot(xx, yy)
        mask = (rad <= 0.85) & (rad >= 0.45)
    else:
        raise ValueError(f"unknown procedural shape {shape!r}; choose from {PROCEDURAL_SHAPES}")
    mask = mask.astype(float).reshape(n, ss, n, ss).mean(axis=(1, 3))
    return mask


def make_patch(shape: str, color, background, resolution: int = 48) -> np.ndarray:
    """Procedural (3, n, n) patch: colored shape composited on the background."""
    mask = _supersampled_mask(shape, resolution)
    color = np.asarray(color, dtype=float).reshape(3, 1, 1)
    bg = np.asarray(background, dtype=float).reshape(3, 1, 1)
    return mask[None] * color + (1.0 - mask[None]) * bg


def _bilinear_gather(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) image at fractional pixel coords with edge clamping.

    Coordinates follow the pixel-center convention: integer coordinate k is
    the center of pixel k, so continuous position c in [0, 1] maps to
    c * N - 0.5.
    """
    C, H, W = img.shape
    r = np.clip(rows, 0.0, H - 1.0)
    c = np.clip(cols, 0.0, W - 1.0)
    r0 = np.clip(np.floor(r).astype(int), 0, max(H - 2, 0))
    c0 = np.clip(np.floor(c).astype(int), 0, max(W - 2, 0))
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    tr = r - r0
    tc = c - c0
    top = img[:, r0, c0] * (1.0 - tc) + img[:, r0, c1] * tc
    bot = img[:, r1, c0] * (1.0 - tc) + img[:, r1, c1] * tc
    return top * (1.0 - tr) + bot * tr


def resample_bilinear(img: np.ndarray, shape) -> np.ndarray:
    """Resample a (C, H, W) image to (C, shape[0], shape[1])."""
    H, W = shape
    rows = ((np.arange(H) + 0.5) / H) * img.shape[1] - 0.5
    cols = ((np.arange(W) + 0.5) / W) * img.shape[2] - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear_gather(img, rr, cc)


def render_camera(scene: Scene, state: AgentState, fov: float, shape=(64, 64)) -> SensorFrame:
    """Orthographic top-down crop at the agent pose.

    The camera window is a square of side ``fov * extent`` centered at
    (x, y) and rotated with the heading, so the returned image is the scene
    crop rotated by -theta. Points outside the workspace show background.
    """
    if not (0.0 < fov <= 1.0):
        raise ValueError(f"fov must be in (0, 1], got {fov}")
    pos = np.asarray(state.position, dtype=float)
    if np.any(pos < scene.bounds[:, 0]) or np.any(pos > scene.bounds[:, 1]):
        raise ValueError(f"agent position {pos} outside workspace bounds")

    H, W = shape
    extent = scene.extent()
    win = fov * extent  # window side lengths (x, y)
    u = (np.arange(W) + 0.5) / W - 0.5
    v = (np.arange(H) + 0.5) / H - 0.5
    uu, vv = np.meshgrid(u, v, indexing="xy")
    # camera-frame offsets: +u right, row 0 at top (+y before rotation)
    cam = np.stack([uu * win[0], -vv * win[1]], axis=-1)  # (H, W, 2)
    th = float(state.heading)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    pts = cam @ rot.T + pos  # world-frame sample points

    img = np.empty((3, H, W), dtype=float)
    img[:] = scene.background.reshape(3, 1, 1)
    for obj in scene.objects:
        half = obj.size / 2.0
        lo = obj.center - half
        hi = obj.center + half
        inside = (
            (pts[..., 0] >= lo[0]) & (pts[..., 0] <= hi[0]) & (pts[..., 1] >= lo[1]) & (pts[..., 1] <= hi[1])
        )
        if not inside.any():
            continue
        p = pts[inside]
        _, Ph, Pw = obj.patch.shape
        cols = (p[:, 0] - lo[0]) / obj.size * Pw - 0.5
        rows = (hi[1] - p[:, 1]) / obj.size * Ph - 0.5  # patch row 0 at +y edge
        img[:, inside] = _bilinear_gather(obj.patch, rows, cols)
    np.clip(img, 0.0, 1.0, out=img)
    return SensorFrame(image=img, pose=state.pose())


def step_dynamics(state: AgentState, control, dt: float, bounds=None, limits=1.0) -> AgentState:
    """Per-axis double-integrator step with clamp-and-stop walls.

    Controls are accelerations (ax, ay, atheta), saturated at ``limits``.
    Exact zero-order-hold update: p' = p + v dt + a dt^2/2, v' = v + a dt.
    Positions are clamped into bounds with the offending velocity zeroed;
    heading wraps instead of clamping.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    bounds = UNIT_BOUNDS if bounds is None else np.asarray(bounds, dtype=float)
    a = np.clip(np.asarray(control, dtype=float), -limits, limits)
    vel = np.asarray(state.velocity, dtype=float)

    pos = state.position + vel[:2] * dt + 0.5 * a[:2] * dt * dt
    new_v = vel + a * dt
    clamped = np.clip(pos, bounds[:, 0], bounds[:, 1])
    hit = clamped != pos
    new_v2 = new_v[:2].copy()
    new_v2[hit] = 0.0

    heading = float(wrap_angle(state.heading + vel[2] * dt + 0.5 * a[2] * dt * dt))
    return AgentState(
        position=clamped,
        heading=heading,
        velocity=np.array([new_v2[0], new_v2[1], new_v[2]]),
    )


def random_walk_policy(state: AgentState, rng: np.random.Generator, std: float = 1.0, limits: float = 1.0):
    """Baseline data-collection policy: Gaussian random accelerations."""
    if std == 0.0:
        return np.zeros(3)
    return np.clip(rng.normal(0.0, std, size=3), -limits, limits)


def _load_patch_file(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return np.transpose(arr, (2, 0, 1))


def load_scene(path: str) -> Scene:
    """Load a scene JSON document.

    Schema: {"background": [r,g,b], "bounds": [[xlo,xhi],[ylo,yhi]] (optional),
    "objects": [{"name", "center": [x,y], "patch": {"shape","size","color"}
    or {"path","size"}}]}. Patch paths resolve relative to the scene file.
    """
    with open(path) as f:
        doc = json.load(f)
    background = doc.get("background", [1.0, 1.0, 1.0])
    bounds = doc.get("bounds")
    objects = []
    for spec in doc.get("objects", []):
        patch_spec = spec["patch"]
        size = float(patch_spec["size"])
        if size <= 0:
            raise ValueError(f"object {spec.get('name')!r} has non-positive size {size}")
        if "path" in patch_spec:
            patch_path = patch_spec["path"]
            if not os.path.isabs(patch_path):
                patch_path = os.path.join(os.path.dirname(os.path.abspath(path)), patch_path)
            patch = _load_patch_file(patch_path)
        else:
            patch = make_patch(patch_spec["shape"], patch_spec["color"], background)
        objects.append(
            SceneObject(
                name=spec["name"],
                center=np.asarray(spec["center"], dtype=float),
                size=size,
                patch=patch,
            )
        )
    return Scene(objects=objects, background=background, bounds=bounds)
