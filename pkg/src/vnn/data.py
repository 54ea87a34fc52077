"""Synthetic shape datasets, rotation sampling, augmentation, and file I/O.

Shapes are analytic primitives (sphere, box, torus, cylinder) sampled
uniformly on their surfaces and centered at the origin by construction, so
occupancy labels stay exact.  All randomness flows through ``Rng`` children
of one seed; generating a dataset twice with the same seed is bit-identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import Rng

CLASS_NAMES = ("sphere", "box", "torus", "cylinder")


class ParseError(ValueError):
    """Malformed point-cloud file; carries the offending line number."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


# ---------------------------------------------------------------------------
# rotations

def rotate(x: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Apply a rotation to the trailing 3-axis of x (right multiplication)."""
    return np.asarray(x, dtype=np.float64) @ r


def is_rotation(r: np.ndarray, tol: float = 1e-12) -> bool:
    r = np.asarray(r)
    if r.shape != (3, 3):
        return False
    return (np.abs(r.T @ r - np.eye(3)).max() <= tol
            and abs(np.linalg.det(r) - 1.0) <= tol)


def sample_rotation_uniform(rng: Rng) -> np.ndarray:
    """Haar-uniform rotation from a normalized 4-normal quaternion."""
    q = rng.normal(4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_z(angle: float) -> np.ndarray:
    """Rotation about the vertical axis by a fixed angle."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_rotation_z(rng: Rng) -> np.ndarray:
    """Rotation about the vertical axis by a uniform angle in [0, 2*pi)."""
    return rotation_z(rng.uniform((), 0.0, 2.0 * np.pi))


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in [0, pi] recovered from the trace."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# primitives

@dataclass(frozen=True)
class Primitive:
    """Analytic solid with a uniform surface sampler and exact inside test.

    params by kind: sphere (radius,), box (hx, hy, hz) half-extents,
    torus (major, minor), cylinder (radius, half_height).
    """

    kind: str
    params: tuple

    def __post_init__(self):
        arity = {"sphere": 1, "box": 3, "torus": 2, "cylinder": 2, "ellipsoid": 3}
        if self.kind not in arity:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if len(self.params) != arity[self.kind]:
            raise ValueError(f"{self.kind} needs {arity[self.kind]} params, got {self.params}")


def primitive_surface_points(prim: Primitive, n: int, rng: Rng) -> np.ndarray:
    """n points uniform w.r.t. surface area, centered at the origin."""
    if prim.kind == "sphere":
        (r,) = prim.params
        u = rng.normal((n, 3))
        return r * u / np.linalg.norm(u, axis=1, keepdims=True)

    if prim.kind == "box":
        hx, hy, hz = prim.params
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
        face = rng.integers(0, 6, size=n) if np.ptp(areas) == 0 else _weighted_faces(areas, n, rng)
        uv = rng.uniform((n, 2), -1.0, 1.0)
        pts = np.empty((n, 3))
        half = np.array([hx, hy, hz])
        for i in range(n):
            axis = face[i] // 2
            sign = 1.0 if face[i] % 2 == 0 else -1.0
            others = [a for a in range(3) if a != axis]
            pts[i, axis] = sign * half[axis]
            pts[i, others[0]] = uv[i, 0] * half[others[0]]
            pts[i, others[1]] = uv[i, 1] * half[others[1]]
        return pts

    if prim.kind == "torus":
        major, minor = prim.params
        u = rng.uniform((n,), 0.0, 2.0 * np.pi)
        v = np.empty(n)
        filled = 0
        while filled < n:           # area-weighted rejection on the tube angle
            cand = rng.uniform((n,), 0.0, 2.0 * np.pi)
            accept = rng.uniform((n,)) <= (major + minor * np.cos(cand)) / (major + minor)
            take = cand[accept][: n - filled]
            v[filled:filled + take.size] = take
            filled += take.size
        ring = major + minor * np.cos(v)
        return np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)

    if prim.kind == "ellipsoid":
        a, b, c = prim.params
        pts = np.empty((n, 3))
        filled = 0
        # area-weighted rejection on the unit-sphere parametrization
        weight_cap = max(b * c, a * c, a * b)
        while filled < n:
            u = rng.normal((n, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            w = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2
                        + (a * b * u[:, 2]) ** 2)
            accept = rng.uniform((n,)) <= w / weight_cap
            take = u[accept][: n - filled]
            pts[filled:filled + take.shape[0]] = take * np.array([a, b, c])
            filled += take.shape[0]
        return pts

    if prim.kind == "cylinder":
        r, hh = prim.params
        side = 2.0 * np.pi * r * 2.0 * hh
        cap = np.pi * r * r
        choice = rng.uniform((n,)) * (side + 2 * cap)
        ang = rng.uniform((n,), 0.0, 2.0 * np.pi)
        rad = r * np.sqrt(rng.uniform((n,)))
        z_side = rng.uniform((n,), -hh, hh)
        pts = np.empty((n, 3))
        on_side = choice < side
        top = ~on_side & (choice < side + cap)
        pts[:, 0] = np.where(on_side, r * np.cos(ang), rad * np.cos(ang))
        pts[:, 1] = np.where(on_side, r * np.sin(ang), rad * np.sin(ang))
        pts[:, 2] = np.where(on_side, z_side, np.where(top, hh, -hh))
        return pts

    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def _weighted_faces(areas: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    cum = np.cumsum(areas / areas.sum())
    return np.searchsorted(cum, rng.uniform((n,)), side="right").clip(0, 5)


def primitive_contains(prim: Primitive, queries: np.ndarray) -> np.ndarray:
    """Exact inside-or-on-boundary test; queries (Q, 3) -> bool (Q,)."""
    q = np.asarray(queries, dtype=np.float64)
    if prim.kind == "sphere":
        (r,) = prim.params
        return np.einsum("qd,qd->q", q, q) <= r * r
    if prim.kind == "box":
        half = np.asarray(prim.params)
        return np.all(np.abs(q) <= half, axis=1)
    if prim.kind == "torus":
        major, minor = prim.params
        ring = np.sqrt(q[:, 0] ** 2 + q[:, 1] ** 2) - major
        return ring * ring + q[:, 2] ** 2 <= minor * minor
    if prim.kind == "cylinder":
        r, hh = prim.params
        return (q[:, 0] ** 2 + q[:, 1] ** 2 <= r * r) & (np.abs(q[:, 2]) <= hh)
    if prim.kind == "ellipsoid":
        semi = np.asarray(prim.params)
        return np.einsum("qd,qd->q", q / semi, q / semi) <= 1.0
    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def occupancy_ground_truth(prim: Primitive, queries: np.ndarray) -> np.ndarray:
    """Exact 0/1 occupancy labels for query points."""
    return primitive_contains(prim, queries).astype(np.float64)


def random_primitive(kind: str, rng: Rng) -> Primitive:
    """Draw per-sample size parameters.

    Ranges are chosen so the classes share an overall scale (size alone is
    not the cue) while staying geometrically distinct: round vs cornered vs
    holed vs elongated-with-caps.
    """
    if kind == "sphere":
        return Primitive("sphere", (float(rng.uniform((), 0.85, 1.15)),))
    if kind == "box":
        return Primitive("box", tuple(rng.uniform((3,), 0.55, 0.9)))
    if kind == "torus":
        return Primitive("torus", (float(rng.uniform((), 0.85, 1.1)),
                                   float(rng.uniform((), 0.18, 0.28))))
    if kind == "cylinder":
        return Primitive("cylinder", (float(rng.uniform((), 0.35, 0.55)),
                                      float(rng.uniform((), 0.8, 1.2))))
    if kind == "ellipsoid":
        # distinctly anisotropic: sorted semi-axes keep the family stable
        semi = np.sort(rng.uniform((3,), 0.45, 1.2))[::-1]
        return Primitive("ellipsoid", tuple(float(s) for s in semi))
    raise ValueError(f"unknown class name {kind!r}")


# ---------------------------------------------------------------------------
# samples and datasets

@dataclass
class PointCloudSample:
    points: np.ndarray                      # (N, 3)
    class_label: Optional[int] = None
    point_labels: Optional[np.ndarray] = None   # (N,) int64
    occupancy: Optional[tuple] = None       # (queries (Q,3), labels (Q,) in {0,1})
    shape: Optional[Primitive] = None       # generator descriptor, when synthetic
    pose: np.ndarray = field(default_factory=lambda: np.eye(3))  # net applied rotation


@dataclass
class AugmentPolicy:
    mode: str          # I | z | so3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("I", "z", "so3"):
            raise ValueError(f"augment mode must be I, z or so3, got {self.mode!r}")


def radial_part_labels(points: np.ndarray, parts: int = 2) -> np.ndarray:
    """Rotation-invariant per-point labels: quantile bins of centered radius."""
    centered = points - points.mean(axis=0, keepdims=True)
    radius = np.linalg.norm(centered, axis=1)
    edges = np.quantile(radius, np.linspace(0, 1, parts + 1)[1:-1])
    return np.searchsorted(edges, radius, side="right").astype(np.int64)


def _occupancy_queries(prim: Primitive, count: int, rng: Rng) -> tuple:
    # mix of uniform-in-cube and near-surface queries for a sharp boundary
    n_uniform = count // 2
    uniform = rng.uniform((n_uniform, 3), -1.4, 1.4)
    near = (primitive_surface_points(prim, count - n_uniform, rng)
            + 0.03 * rng.normal((count - n_uniform, 3)))
    queries = np.concatenate([uniform, near], axis=0)
    return queries, occupancy_ground_truth(prim, queries)


def synth_dataset(rng: Rng, classes: Sequence[str], per_class: int,
                  points_per_cloud: int, noise_sigma: float = 0.005,
                  with_point_labels: bool = False,
                  occupancy_queries: int = 0) -> list[PointCloudSample]:
    """Class-balanced clouds of noisy surface samples; pure function of rng."""
    if points_per_cloud < 16:
        raise ValueError(f"points_per_cloud must be >= 16, got {points_per_cloud}")
    samples = []
    for label, kind in enumerate(classes):
        for j in range(per_class):
            sub = rng.child(label, j)
            prim = random_primitive(kind, sub.child(0))
            pts = primitive_surface_points(prim, points_per_cloud, sub.child(1))
            if noise_sigma > 0:
                pts = pts + noise_sigma * sub.child(2).normal(pts.shape)
            sample = PointCloudSample(points=pts, class_label=label, shape=prim)
            if with_point_labels:
                sample.point_labels = radial_part_labels(pts)
            if occupancy_queries > 0:
                sample.occupancy = _occupancy_queries(prim, occupancy_queries, sub.child(3))
            samples.append(sample)
    return samples


def augment(sample: PointCloudSample, policy: AugmentPolicy, rng: Rng) -> PointCloudSample:
    """Rotate a sample per policy; labels never change.  Mode I is a no-op."""
    if policy.mode == "I":
        return sample
    r = sample_rotation_z(rng) if policy.mode == "z" else sample_rotation_uniform(rng)
    occ = sample.occupancy
    if occ is not None:
        occ = (rotate(occ[0], r), occ[1])
    return replace(sample, points=rotate(sample.points, r), occupancy=occ,
                   pose=sample.pose @ r)


# ---------------------------------------------------------------------------
# file formats

def save_xyz(sample: PointCloudSample, path) -> None:
    """ASCII 'x y z [label]' lines; %.17g preserves float64 exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, p in enumerate(sample.points):
            line = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if sample.point_labels is not None:
                line += f" {int(sample.point_labels[i])}"
            fh.write(line + "\n")


def load_xyz(path) -> PointCloudSample:
    points, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ParseError(path, line_no, f"expected 3 or 4 columns, got {len(parts)}")
            try:
                points.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric coordinate in {parts[:3]}")
            if len(parts) == 4:
                try:
                    labels.append(int(parts[3]))
                except ValueError:
                    raise ParseError(path, line_no, f"non-integer label {parts[3]!r}")
    if labels and len(labels) != len(points):
        raise ParseError(path, 0, "label column present on only some lines")
    return PointCloudSample(
        points=np.asarray(points, dtype=np.float64).reshape(len(points), 3),
        point_labels=np.asarray(labels, dtype=np.int64) if labels else None,
    )


def load_off(path) -> PointCloudSample:
    """Vertex cloud from an OFF file; faces are ignored."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [(i + 1, ln.strip()) for i, ln in enumerate(fh)]
    lines = [(no, ln) for no, ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0][1] != "OFF":
        raise ParseError(path, lines[0][0] if lines else 1, "missing OFF header")
    try:
        counts = lines[1][1].split()
        n_vertices = int(counts[0])
    except (IndexError, ValueError):
        raise ParseError(path, lines[1][0] if len(lines) > 1 else 2, "bad counts line")
    verts = []
    for no, ln in lines[2:2 + n_vertices]:
        parts = ln.split()
        if len(parts) < 3:
            raise ParseError(path, no, "vertex line with fewer than 3 coordinates")
        try:
            verts.append([float(parts[0]), float(parts[1]), float(parts[2])])
        except ValueError:
            raise ParseError(path, no, "non-numeric vertex coordinate")
    if len(verts) != n_vertices:
        raise ParseError(path, lines[-1][0], f"expected {n_vertices} vertices, got {len(verts)}")
    return PointCloudSample(points=np.asarray(verts, dtype=np.float64))


def save_manifest(entries: Sequence[tuple], path) -> None:
    """One 'relative/path label' line per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        for rel, label in entries:
            fh.write(f"{rel} {int(label)}\n")


def load_manifest(path) -> list[tuple]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rsplit(None, 1)
            if len(parts) != 2:
                raise ParseError(path, line_no, "expected 'path label'")
            try:
                entries.append((parts[0], int(parts[1])))
            except ValueError:
                raise ParseError(path, line_no, f"non-integer label {parts[1]!r}")
    return entries


def load_dataset(manifest_path) -> list[PointCloudSample]:
    """Load every cloud referenced by a manifest, attaching class labels."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rel, label in load_manifest(manifest_path):
        full = os.path.join(base, rel)
        sample = load_off(full) if rel.lower().endswith(".off") else load_xyz(full)
        sample.class_label = label
        samples.append(sample)
    return samples
