"""Floor-plan geometry, image-source multipath and trajectory generation.

Everything here is a pure function of immutable inputs. Points are plain
length-2 numpy arrays (or anything ``np.asarray`` accepts).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

_EPS = 1e-12


@dataclass(frozen=True)
class Wall:
    start: tuple[float, float]
    end: tuple[float, float]
    reflective: bool = True
    name: str = ""

    def __post_init__(self):
        a = np.asarray(self.start, dtype=float)
        b = np.asarray(self.end, dtype=float)
        if a.shape != (2,) or b.shape != (2,):
            raise ValueError("wall endpoints must be 2-D points")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("wall endpoints must be finite")
        if np.linalg.norm(b - a) <= _EPS:
            raise ValueError(f"degenerate wall {self.name!r}: endpoints coincide")

    @property
    def a(self) -> np.ndarray:
        return np.asarray(self.start, dtype=float)

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.end, dtype=float)


@dataclass(frozen=True)
class Anchor:
    id: int
    position: tuple[float, float]

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)


@dataclass(frozen=True)
class VirtualAnchor:
    anchor_id: int
    position: np.ndarray
    wall_sequence: tuple[int, ...]

    @property
    def order(self) -> int:
        return len(self.wall_sequence)


@dataclass(frozen=True)
class PropagationComponent:
    distance: float
    normalized_amplitude: float
    order: int = 0  # 0 is the LOS component

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("component distance must be positive")
        if not self.normalized_amplitude > 0:
            raise ValueError("normalized amplitude must be positive")

    @property
    def is_los(self) -> bool:
        return self.order == 0


@dataclass(frozen=True)
class AmplitudeModel:
    """Free-space path loss in normalized-amplitude dB."""

    ref_db: float = 38.0
    ref_distance: float = 1.0
    reflection_loss_db: float = 3.0

    def amplitude_db(self, distance, order=0):
        distance = np.asarray(distance, dtype=float)
        return (self.ref_db - 20.0 * np.log10(distance / self.ref_distance)
                - self.reflection_loss_db * np.asarray(order))

    def amplitude(self, distance, order=0):
        return 10.0 ** (self.amplitude_db(distance, order) / 20.0)


@dataclass(frozen=True)
class Trajectory:
    positions: np.ndarray  # (N, 2)
    velocities: np.ndarray  # (N, 2)
    dt: float

    def __len__(self):
        return len(self.positions)

    @property
    def states(self) -> np.ndarray:
        """Stacked ``[px, py, vx, vy]`` per time step."""
        return np.hstack([self.positions, self.velocities])


def mirror_anchor(anchor_position, wall: Wall) -> np.ndarray:
    """Reflect a point across the infinite line through ``wall``."""
    p = np.asarray(anchor_position, dtype=float)
    a, b = wall.a, wall.b
    t = b - a
    n = np.array([-t[1], t[0]]) / np.linalg.norm(t)
    return p - 2.0 * np.dot(p - a, n) * n


def _segment_param(p0, p1, wall: Wall):
    """Intersection parameters (s along p0->p1, t along wall), or None if parallel."""
    r = p1 - p0
    w = wall.b - wall.a
    denom = r[0] * w[1] - r[1] * w[0]
    if abs(denom) <= _EPS * max(1.0, np.linalg.norm(r) * np.linalg.norm(w)):
        return None
    d = wall.a - p0
    s = (d[0] * w[1] - d[1] * w[0]) / denom
    t = (d[0] * r[1] - d[1] * r[0]) / denom
    return s, t


def _segment_crosses(p0, p1, wall: Wall, tol=1e-9) -> bool:
    st = _segment_param(p0, p1, wall)
    if st is None:
        return False
    s, t = st
    return tol < s < 1.0 - tol and tol < t < 1.0 - tol


def los_blocked(p, anchor: Anchor | np.ndarray, walls, exclude=()) -> bool:
    """True iff the open segment p <-> anchor crosses the interior of any wall."""
    p0 = np.asarray(p, dtype=float)
    p1 = anchor.p if isinstance(anchor, Anchor) else np.asarray(anchor, dtype=float)
    for k, wall in enumerate(walls):
        if k in exclude:
            continue
        if _segment_crosses(p0, p1, wall):
            return True
    return False


def virtual_anchors(anchor: Anchor, walls, max_order: int = 2) -> list[VirtualAnchor]:
    """All image sources of ``anchor`` up to ``max_order`` reflections."""
    reflective = [k for k, w in enumerate(walls) if w.reflective]
    out = []
    for order in range(1, max_order + 1):
        for seq in itertools.product(reflective, repeat=order):
            if any(seq[i] == seq[i + 1] for i in range(order - 1)):
                continue
            pos = anchor.p
            for k in seq:
                pos = mirror_anchor(pos, walls[k])
            out.append(VirtualAnchor(anchor.id, pos, tuple(seq)))
    return out


def specular_path(p, anchor: Anchor, va: VirtualAnchor, walls):
    """Reflection points of the specular path p -> ... -> anchor, or None if invalid.

    Reflection points must lie strictly inside their wall segments and every
    sub-segment must be free of other walls.
    """
    p = np.asarray(p, dtype=float)
    # image positions after each reflection, innermost first
    images = [anchor.p]
    for k in va.wall_sequence:
        images.append(mirror_anchor(images[-1], walls[k]))

    points = []
    src = p
    for level in range(va.order, 0, -1):
        wall = walls[va.wall_sequence[level - 1]]
        target = images[level]
        st = _segment_param(src, target, wall)
        if st is None:
            return None
        s, t = st
        if not (_EPS < s < 1.0 - _EPS and 1e-9 < t < 1.0 - 1e-9):
            return None
        refl = src + s * (target - src)
        points.append(refl)
        src = refl
    # check each leg against walls other than those it starts/ends on
    nodes = [p] + points + [anchor.p]
    seq_rev = list(reversed(va.wall_sequence))
    for i in range(len(nodes) - 1):
        excl = set()
        if i > 0:
            excl.add(seq_rev[i - 1])
        if i < len(seq_rev):
            excl.add(seq_rev[i])
        if los_blocked(nodes[i], nodes[i + 1], walls, exclude=excl):
            return None
    return points


def compute_components(p, anchor: Anchor, walls, max_order: int = 2,
                       amp_model: AmplitudeModel | None = None,
                       vas: list[VirtualAnchor] | None = None) -> list[PropagationComponent]:
    """LOS and specular multipath components seen by ``anchor`` from ``p``.

    Components are sorted by distance. ``vas`` may be passed to reuse a
    precomputed image-source list.
    """
    if max_order not in (0, 1, 2):
        raise ValueError("max_order must be 0, 1 or 2")
    amp_model = amp_model or AmplitudeModel()
    p = np.asarray(p, dtype=float)
    if np.linalg.norm(p - anchor.p) <= _EPS:
        raise ValueError("agent position coincides with anchor")

    comps = []
    if not los_blocked(p, anchor, walls):
        d = float(np.linalg.norm(p - anchor.p))
        comps.append(PropagationComponent(d, float(amp_model.amplitude(d)), 0))
    if vas is None:
        vas = virtual_anchors(anchor, walls, max_order)
    for va in vas:
        if va.order > max_order:
            continue
        if specular_path(p, anchor, va, walls) is None:
            continue
        d = float(np.linalg.norm(p - va.position))
        comps.append(PropagationComponent(d, float(amp_model.amplitude(d, va.order)), va.order))
    comps.sort(key=lambda c: c.distance)
    return comps


def generate_trajectory(waypoints, n_steps: int, dt: float) -> Trajectory:
    """Constant-speed arc-length sampling of a polyline through ``waypoints``."""
    wp = np.asarray(waypoints, dtype=float)
    if wp.ndim != 2 or wp.shape[1] != 2 or len(wp) < 2:
        raise ValueError("need at least two 2-D waypoints")
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
    if np.any(seg <= _EPS):
        raise ValueError("consecutive waypoints coincide")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.linspace(0.0, cum[-1], n_steps)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg[idx]
    pos = wp[idx] + frac[:, None] * (wp[idx + 1] - wp[idx])
    vel = np.gradient(pos, dt, axis=0)
    return Trajectory(pos, vel, float(dt))


def generate_grid(bounds, spacing: float) -> np.ndarray:
    """Row-major grid of points ((xmin, xmax), (ymin, ymax)) with ``spacing``.

    Both boundary values are included when the extent is divisible by the
    spacing (up to rounding).
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    (x0, x1), (y0, y1) = bounds

    def axis(lo, hi):
        n = int(np.floor((hi - lo) / spacing + 1e-9)) + 1
        return lo + spacing * np.arange(n)

    xs, ys = axis(x0, x1), axis(y0, y1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass
class Scenario:
    """Walls, anchors, trajectory recipe and training grids."""

    walls: list[Wall]
    anchors: list[Anchor]
    waypoints: np.ndarray
    n_steps: int = 190
    dt: float = 0.1
    grid_bounds: tuple = ((-10.0, 10.0), (-10.0, 10.0))
    pretrain_spacing: float = 0.25
    full_spacing: float = 1.0
    max_order: int = 2
    amp_model: AmplitudeModel = field(default_factory=AmplitudeModel)

    def __post_init__(self):
        ids = [a.id for a in self.anchors]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError("anchor ids must be unique and contiguous from 1")
        self.anchors = sorted(self.anchors, key=lambda a: a.id)
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        self._vas = {}

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def trajectory(self) -> Trajectory:
        return generate_trajectory(self.waypoints, self.n_steps, self.dt)

    def vas(self, anchor: Anchor) -> list[VirtualAnchor]:
        if anchor.id not in self._vas:
            self._vas[anchor.id] = virtual_anchors(anchor, self.walls, self.max_order)
        return self._vas[anchor.id]

    def components(self, p, anchor: Anchor) -> list[PropagationComponent]:
        return compute_components(p, anchor, self.walls, self.max_order,
                                  self.amp_model, vas=self.vas(anchor))

    def visibility(self, positions) -> np.ndarray:
        """Boolean (N, J) LOS visibility along ``positions``."""
        positions = np.atleast_2d(positions)
        return np.array([[not los_blocked(p, a, self.walls) for a in self.anchors]
                         for p in positions])

    def without_obstacles(self) -> "Scenario":
        """Copy with every non-reflective wall removed."""
        return Scenario([w for w in self.walls if w.reflective], list(self.anchors),
                        self.waypoints, self.n_steps, self.dt, self.grid_bounds,
                        self.pretrain_spacing, self.full_spacing, self.max_order,
                        self.amp_model)

    def pretrain_grid(self) -> np.ndarray:
        return generate_grid(self.grid_bounds, self.pretrain_spacing)

    def full_grid(self) -> np.ndarray:
        return generate_grid(self.grid_bounds, self.full_spacing)

    def sparse_grid(self, anchor: Anchor) -> np.ndarray:
        """Full-grid positions from which ``anchor`` is obstructed."""
        g = self.full_grid()
        mask = np.array([los_blocked(p, anchor, self.walls) for p in g])
        return g[mask]

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        walls = [Wall(tuple(w["start"]), tuple(w["end"]), bool(w.get("reflective", True)),
                      str(w.get("name", ""))) for w in doc["walls"]]
        anchors = [Anchor(int(a["id"]), tuple(a["position"])) for a in doc["anchors"]]
        traj = doc["trajectory"]
        grid = doc.get("grid", {})
        amp = doc.get("amplitude", {})
        return cls(
            walls=walls,
            anchors=anchors,
            waypoints=np.asarray(traj["waypoints"], dtype=float),
            n_steps=int(traj.get("n_steps", 190)),
            dt=float(traj.get("dt", 0.1)),
            grid_bounds=tuple(tuple(map(float, b)) for b in grid.get("bounds", [[-10, 10], [-10, 10]])),
            pretrain_spacing=float(grid.get("pretrain_spacing", 0.25)),
            full_spacing=float(grid.get("full_spacing", 1.0)),
            max_order=int(doc.get("max_order", 2)),
            amp_model=AmplitudeModel(float(amp.get("ref_db", 38.0)),
                                     float(amp.get("ref_distance", 1.0)),
                                     float(amp.get("reflection_loss_db", 3.0))),
        )

    def to_dict(self) -> dict:
        return {
            "walls": [{"name": w.name, "start": list(w.start), "end": list(w.end),
                       "reflective": w.reflective} for w in self.walls],
            "anchors": [{"id": a.id, "position": list(a.position)} for a in self.anchors],
            "trajectory": {"waypoints": self.waypoints.tolist(), "n_steps": self.n_steps,
                           "dt": self.dt},
            "grid": {"bounds": [list(b) for b in self.grid_bounds],
                     "pretrain_spacing": self.pretrain_spacing,
                     "full_spacing": self.full_spacing},
            "max_order": self.max_order,
            "amplitude": {"ref_db": self.amp_model.ref_db,
                          "ref_distance": self.amp_model.ref_distance,
                          "reflection_loss_db": self.amp_model.reflection_loss_db},
        }


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return Scenario.from_dict(yaml.safe_load(fh))


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scenario.to_dict(), fh, sort_keys=False)


DEFAULT_SCENARIO_PATH = Path(__file__).parent / "data" / "default_scenario.yaml"


def default_scenario() -> Scenario:
    """The shipped two-anchor floor plan with a central obstacle."""
    return load_scenario(DEFAULT_SCENARIO_PATH)
