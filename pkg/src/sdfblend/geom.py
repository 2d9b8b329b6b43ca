"""Core geometry: point sets, meshes, analytic CSG signed-distance scenes,
and the seeded sampling routines that produce training data.

Conventions
-----------
* World space is the unit cube ``[-0.5, 0.5]^3``; valid scenes fit inside it.
* Points are float64 arrays of shape (n, 3). Every sampler is a pure
  function of its inputs and an explicit integer seed.
* Primitive SDFs are exact; CSG nodes combine children with min/max, which
  is a signed-distance *bound* (exact on primitive interiors/exteriors away
  from blend seams).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, SamplingError, SceneError

UNIT_BOX = (np.full(3, -0.5), np.full(3, 0.5))

SAMPLE_TAGS = ("near-surface", "uniform", "surface", "positive")

SCENE_SCHEMA_VERSION = 1
SAMPLES_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Value types


@dataclass
class PointCloud:
    """Ordered set of 3-D points, shape (n, 3)."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class TriMesh:
    """Indexed triangle mesh."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("degenerate triangle (repeated vertex index)")

    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0


@dataclass
class SampleSet:
    """Query points with target signed distances and per-sample origin tags."""

    points: np.ndarray
    targets: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        self.tags = np.asarray(self.tags)
        if not (len(self.points) == len(self.targets) == len(self.tags)):
            raise ValueError("points, targets and tags must have equal length")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets contain non-finite values")

    def __len__(self) -> int:
        return self.points.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "version": SAMPLES_SCHEMA_VERSION,
            "points": self.points.tolist(),
            "targets": self.targets.tolist(),
            "tags": [str(t) for t in self.tags],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SampleSet":
        if doc.get("version") != SAMPLES_SCHEMA_VERSION:
            raise CheckpointError(
                f"unsupported sample-set schema version {doc.get('version')!r}"
            )
        return cls(np.array(doc["points"]), np.array(doc["targets"]),
                   np.array(doc["tags"]))


# ---------------------------------------------------------------------------
# Scene nodes


def _rotation_axis_angle(axis, degrees: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        raise SceneError("rotation axis must be nonzero")
    x, y, z = axis / n
    c = np.cos(np.radians(degrees))
    s = np.sin(np.radians(degrees))
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


@dataclass
class _Node:
    def sdf(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_json_dict(self) -> dict:
        raise NotImplementedError


@dataclass(kw_only=True)
class Primitive(_Node):
    translate: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray | None = None  # 3x3 world-from-local, or None

    def __post_init__(self):
        self.translate = np.asarray(self.translate, dtype=np.float64).reshape(3)

    def _to_local(self, pts: np.ndarray) -> np.ndarray:
        q = pts - self.translate
        if self.rotation is not None:
            q = q @ self.rotation  # (R^T q^T)^T
        return q

    def _local_sdf(self, q: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _local_bounds(self) -> np.ndarray:
        """Half-extents of the axis-aligned local bounding box."""
        raise NotImplementedError

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        return self._local_sdf(self._to_local(pts))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        he = self._local_bounds()
        corners = he * np.array([[sx, sy, sz] for sx in (-1, 1)
                                 for sy in (-1, 1) for sz in (-1, 1)])
        if self.rotation is not None:
            corners = corners @ self.rotation.T
        corners = corners + self.translate
        return corners.min(axis=0), corners.max(axis=0)

    def _transform_json(self) -> dict:
        out = {}
        if np.any(self.translate != 0.0):
            out["translate"] = self.translate.tolist()
        if self.rotation is not None:
            out["rotation"] = self.rotation.tolist()
        return out


@dataclass(kw_only=True)
class Sphere(Primitive):
    radius: float = 0.0

    def _local_sdf(self, q):
        return np.linalg.norm(q, axis=-1) - self.radius

    def _local_bounds(self):
        return np.full(3, self.radius)

    def to_json_dict(self):
        return {"type": "sphere", "radius": self.radius, **self._transform_json()}


@dataclass(kw_only=True)
class Box(Primitive):
    half_extents: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        super().__post_init__()
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)

    def _local_sdf(self, q):
        d = np.abs(q) - self.half_extents
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside

    def _local_bounds(self):
        return self.half_extents.copy()

    def to_json_dict(self):
        return {"type": "box", "half_extents": self.half_extents.tolist(),
                **self._transform_json()}


@dataclass(kw_only=True)
class Torus(Primitive):
    """Ring in the local xy-plane around the z axis."""

    major_radius: float = 0.0
    minor_radius: float = 0.0

    def _local_sdf(self, q):
        ring = np.hypot(q[..., 0], q[..., 1]) - self.major_radius
        return np.hypot(ring, q[..., 2]) - self.minor_radius

    def _local_bounds(self):
        r = self.major_radius + self.minor_radius
        return np.array([r, r, self.minor_radius])

    def to_json_dict(self):
        return {"type": "torus", "major_radius": self.major_radius,
                "minor_radius": self.minor_radius, **self._transform_json()}


@dataclass(kw_only=True)
class Cylinder(Primitive):
    """Finite cylinder along the local z axis."""

    radius: float = 0.0
    half_height: float = 0.0

    def _local_sdf(self, q):
        dr = np.hypot(q[..., 0], q[..., 1]) - self.radius
        dz = np.abs(q[..., 2]) - self.half_height
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        inside = np.minimum(np.maximum(dr, dz), 0.0)
        return outside + inside

    def _local_bounds(self):
        return np.array([self.radius, self.radius, self.half_height])

    def to_json_dict(self):
        return {"type": "cylinder", "radius": self.radius,
                "half_height": self.half_height, **self._transform_json()}


@dataclass(kw_only=True)
class Capsule(Primitive):
    """Segment along the local z axis inflated by a radius."""

    radius: float = 0.0
    half_height: float = 0.0

    def _local_sdf(self, q):
        w = q.copy()
        w[..., 2] -= np.clip(w[..., 2], -self.half_height, self.half_height)
        return np.linalg.norm(w, axis=-1) - self.radius

    def _local_bounds(self):
        return np.array([self.radius, self.radius,
                         self.half_height + self.radius])

    def to_json_dict(self):
        return {"type": "capsule", "radius": self.radius,
                "half_height": self.half_height, **self._transform_json()}


@dataclass(kw_only=True)
class _Combine(_Node):
    children: list = field(default_factory=list)
    kind: str = "union"

    def sdf(self, pts):
        vals = [c.sdf(pts) for c in self.children]
        if self.kind == "union":
            return np.minimum.reduce(vals)
        if self.kind == "intersection":
            return np.maximum.reduce(vals)
        # difference: first child minus the rest
        out = vals[0]
        for v in vals[1:]:
            out = np.maximum(out, -v)
        return out

    def bounds(self):
        bs = [c.bounds() for c in self.children]
        if self.kind == "union":
            return (np.min([b[0] for b in bs], axis=0),
                    np.max([b[1] for b in bs], axis=0))
        if self.kind == "intersection":
            lo = np.max([b[0] for b in bs], axis=0)
            hi = np.min([b[1] for b in bs], axis=0)
            return lo, np.maximum(hi, lo)
        return bs[0]

    def to_json_dict(self):
        return {"type": self.kind,
                "children": [c.to_json_dict() for c in self.children]}


def union(*children) -> _Combine:
    return _Combine(children=list(children), kind="union")


def intersection(*children) -> _Combine:
    return _Combine(children=list(children), kind="intersection")


def difference(a, *rest) -> _Combine:
    return _Combine(children=[a, *rest], kind="difference")


# ---------------------------------------------------------------------------
# SceneSpec


_PRIM_SIZES = {
    Sphere: ("radius",),
    Box: ("half_extents",),
    Torus: ("major_radius", "minor_radius"),
    Cylinder: ("radius", "half_height"),
    Capsule: ("radius", "half_height"),
}


@dataclass
class SceneSpec:
    """Analytic CSG scene acting as a ground-truth SDF oracle."""

    root: _Node

    def __post_init__(self):
        self._validate(self.root)
        lo, hi = self.root.bounds()
        if np.any(lo < -0.5 - 1e-9) or np.any(hi > 0.5 + 1e-9):
            raise SceneError(
                f"scene bounds [{lo}, {hi}] exceed the unit cube [-0.5, 0.5]^3"
            )

    @staticmethod
    def _validate(node: _Node) -> None:
        if isinstance(node, Primitive):
            for name in _PRIM_SIZES[type(node)]:
                v = np.atleast_1d(getattr(node, name))
                if np.any(v <= 0.0):
                    raise SceneError(f"{type(node).__name__}.{name} must be > 0")
            return
        if isinstance(node, _Combine):
            if not node.children:
                raise SceneError("combine node has no children")
            if node.kind == "difference" and len(node.children) < 2:
                raise SceneError("difference needs at least two children")
            for c in node.children:
                SceneSpec._validate(c)
            return
        raise SceneError(f"unknown scene node {type(node).__name__}")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance (bound) for an (n, 3) array of query points."""
        pts = np.asarray(pts, dtype=np.float64)
        return self.root.sdf(pts)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.root.bounds()

    def to_json_dict(self) -> dict:
        return {"version": SCENE_SCHEMA_VERSION, "root": self.root.to_json_dict()}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SceneSpec":
        if doc.get("version") != SCENE_SCHEMA_VERSION:
            raise SceneError(f"unsupported scene schema version {doc.get('version')!r}")
        if "root" not in doc:
            raise SceneError("scene document has no root node")
        return cls(root=_node_from_json(doc["root"]))

    @classmethod
    def load(cls, path) -> "SceneSpec":
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as e:
            raise SceneError(f"cannot read scene file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise SceneError(f"scene file {path} is not valid JSON: {e}") from e
        return cls.from_json_dict(doc)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2)
            f.write("\n")


def _node_from_json(doc: dict) -> _Node:
    kind = doc.get("type")
    if kind in ("union", "intersection", "difference"):
        children = [_node_from_json(c) for c in doc.get("children", [])]
        return _Combine(children=children, kind=kind)
    common = {}
    if "translate" in doc:
        common["translate"] = np.asarray(doc["translate"], dtype=np.float64)
    if "rotation" in doc:
        common["rotation"] = np.asarray(doc["rotation"], dtype=np.float64)
    elif "rotate" in doc:
        common["rotation"] = _rotation_axis_angle(doc["rotate"]["axis"],
                                                  doc["rotate"]["degrees"])
    try:
        if kind == "sphere":
            return Sphere(radius=float(doc["radius"]), **common)
        if kind == "box":
            return Box(half_extents=np.asarray(doc["half_extents"]), **common)
        if kind == "torus":
            return Torus(major_radius=float(doc["major_radius"]),
                         minor_radius=float(doc["minor_radius"]), **common)
        if kind == "cylinder":
            return Cylinder(radius=float(doc["radius"]),
                            half_height=float(doc["half_height"]), **common)
        if kind == "capsule":
            return Capsule(radius=float(doc["radius"]),
                           half_height=float(doc["half_height"]), **common)
    except KeyError as e:
        raise SceneError(f"{kind} node is missing field {e}") from e
    raise SceneError(f"unknown scene node type {kind!r}")


def scene_sdf(scene: SceneSpec, x) -> float:
    """Signed distance of a single point (total function)."""
    return float(scene.sdf(np.asarray(x, dtype=np.float64).reshape(1, 3))[0])


# ---------------------------------------------------------------------------
# Sampling


def _numeric_gradient(scene: SceneSpec, pts: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(pts)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        g[:, ax] = (scene.sdf(pts + e) - scene.sdf(pts - e)) / (2.0 * h)
    return g


def surface_points(scene: SceneSpec, n: int, seed: int,
                   tol: float = 1e-4, max_iters: int = 30) -> PointCloud:
    """`n` points with |sdf| <= tol, via seeded rejection + Newton projection.

    Candidates are drawn uniformly in the scene's (slightly inflated)
    bounding box and projected along the numeric SDF gradient. Raises
    SamplingError if more than 1% of candidates fail to converge.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = scene.bounds()
    lo, hi = lo - 0.02, hi + 0.02
    collected: list[np.ndarray] = []
    n_collected = 0
    tried = 0
    failed = 0
    while n_collected < n:
        m = max(n - n_collected, 256)
        p = rng.uniform(lo, hi, size=(m, 3))
        for _ in range(max_iters):
            d = scene.sdf(p)
            live = np.abs(d) > tol
            if not live.any():
                break
            g = _numeric_gradient(scene, p[live])
            gn = np.sum(g * g, axis=1)
            gn = np.maximum(gn, 1e-12)
            p[live] -= (d[live] / gn)[:, None] * g
        d = scene.sdf(p)
        ok = np.abs(d) <= tol
        tried += m
        failed += int(np.count_nonzero(~ok))
        if failed > 0.01 * tried and tried >= 512:
            raise SamplingError(
                f"surface projection failed for {failed}/{tried} candidates "
                f"(> 1%); scene may be degenerate"
            )
        keep = p[ok]
        collected.append(keep)
        n_collected += len(keep)
    pts = np.concatenate(collected, axis=0)[:n]
    return PointCloud(pts)


def farthest_point_sample(cloud: PointCloud, n: int, seed: int) -> np.ndarray:
    """Greedy farthest-point subset; returns the chosen indices in order.

    The first index is drawn from the seed; each later pick maximizes the
    minimum distance to the already-chosen set, ties broken by lowest index.
    """
    m = len(cloud)
    if not 1 <= n <= m:
        raise ValueError(f"n={n} out of range for cloud of {m} points")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(m))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = first
    pts = cloud.points
    dists = np.linalg.norm(pts - pts[first], axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(dists))  # argmax returns the lowest tied index
        chosen[k] = nxt
        dists = np.minimum(dists, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen


def sample_training_set(scene: SceneSpec, n_near: int, n_uniform: int,
                        noise_stds: tuple[float, float] = (0.01, 0.003),
                        seed: int = 0) -> SampleSet:
    """Near-surface + uniform query points with exact oracle targets."""
    if n_near + n_uniform < 1:
        raise ValueError("need at least one sample")
    if noise_stds[0] <= 0 or noise_stds[1] <= 0:
        raise ValueError("noise stds must be > 0")
    ss = np.random.SeedSequence(seed)
    s_surf, s_noise, s_unif = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    parts, tags = [], []
    if n_near > 0:
        surf = surface_points(scene, n_near, s_surf).points
        rng = np.random.default_rng(s_noise)
        noise = rng.normal(size=(n_near, 3))
        half = (n_near + 1) // 2
        stds = np.where(np.arange(n_near) < half, noise_stds[0], noise_stds[1])
        parts.append(surf + stds[:, None] * noise)
        tags.append(np.full(n_near, "near-surface"))
    if n_uniform > 0:
        rng = np.random.default_rng(s_unif)
        parts.append(rng.uniform(-0.5, 0.5, size=(n_uniform, 3)))
        tags.append(np.full(n_uniform, "uniform"))
    pts = np.concatenate(parts, axis=0)
    return SampleSet(points=pts, targets=scene.sdf(pts),
                     tags=np.concatenate(tags))


def positive_points(scene: SceneSpec, n: int, margin: float, seed: int) -> PointCloud:
    """`n` points with sdf > margin, by rejection sampling in the unit cube."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    rng = np.random.default_rng(seed)
    collected: list[np.ndarray] = []
    n_collected = 0
    tried = 0
    while n_collected < n:
        m = max(n - n_collected, 1024)
        p = rng.uniform(-0.5, 0.5, size=(m, 3))
        ok = scene.sdf(p) > margin
        tried += m
        keep = p[ok]
        collected.append(keep)
        n_collected += len(keep)
        if tried >= 8192 and n_collected < 0.01 * tried:
            raise SamplingError(
                f"positive-point acceptance rate {n_collected}/{tried} below 1%"
            )
    return PointCloud(np.concatenate(collected, axis=0)[:n])


def sample_mesh_surface(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform sampling of points on a triangle mesh."""
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    v = mesh.vertices
    t = mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(t), size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    flip = u + w > 1.0
    u[flip], w[flip] = 1.0 - u[flip], 1.0 - w[flip]
    pts = a[tri] + u[:, None] * (b[tri] - a[tri]) + w[:, None] * (c[tri] - a[tri])
    return PointCloud(pts)
