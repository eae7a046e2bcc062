"""Point-cloud ingestion (XYZ + manifest) and synthetic labeled shape families."""

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import InvalidInputError, farthest_point_sample, normalize_unit_sphere


class DataError(ValueError):
    """Unreadable or inconsistent dataset input."""


@dataclass
class LabeledCloudSet:
    samples: list = field(default_factory=list)  # (points, label, sample_id)
    label_names: list = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        ids = [s[2] for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("sample ids are not unique")
        known = set(self.label_names)
        for _, label, sid in self.samples:
            if label not in known:
                raise DataError(f"sample {sid!r} has unknown label {label!r}")

    def __len__(self):
        return len(self.samples)

    def clouds(self):
        return np.stack([s[0] for s in self.samples])

    def labels(self):
        return [s[1] for s in self.samples]

    def label_index(self):
        return np.array([self.label_names.index(s[1]) for s in self.samples])

    def ids(self):
        return [s[2] for s in self.samples]


def read_xyz(path):
    """Parse whitespace-separated ``x y z`` lines; ``#`` lines and blanks are skipped."""
    pts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            try:
                xyz = [float(v) for v in parts]
            except ValueError:
                xyz = None
            if xyz is None or len(xyz) != 3 or not np.isfinite(xyz).all():
                raise DataError(f"{path}:{lineno}: expected three finite numbers, got {s!r}")
            pts.append(xyz)
    if not pts:
        raise DataError(f"{path}: empty point cloud")
    return np.asarray(pts, dtype=np.float64)


def write_xyz(path, points, header=None):
    with open(path, "w", encoding="utf-8") as f:
        if header:
            f.write(f"# {header}\n")
        for x, y, z in np.asarray(points, dtype=np.float64):
            f.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def resample(points, n, rng):
    """Bring a cloud to exactly ``n`` points: FPS down, random duplicates up."""
    m = points.shape[0]
    if m == n:
        return points
    if m > n:
        return points[farthest_point_sample(points, n, 0)]
    extra = rng.integers(0, m, size=n - m)
    return np.concatenate([points, points[extra]])


def prepare_cloud(points, n, rng):
    normed, _ = normalize_unit_sphere(points)
    return resample(normed, n, rng)


def load_xyz_dir(root, manifest, n_points=1024, seed=0):
    """Load the clouds listed in ``manifest`` (``path<TAB>label<TAB>split`` lines).

    Returns ``{"train": LabeledCloudSet, "test": LabeledCloudSet}``; sample ids
    are the relative paths.
    """
    rng = np.random.default_rng(seed)
    rows = []
    with open(manifest, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("train", "test"):
                raise DataError(f"{manifest}:{lineno}: expected 'path<TAB>label<TAB>train|test'")
            rows.append(parts)
    labels = sorted({r[1] for r in rows})
    splits = {"train": [], "test": []}
    for rel, label, split in rows:
        path = os.path.join(root, rel)
        if not os.path.exists(path):
            raise DataError(f"{manifest}: missing file {path}")
        splits[split].append((prepare_cloud(read_xyz(path), n_points, rng), label, rel))
    return {k: LabeledCloudSet(v, labels, k) for k, v in splits.items()}


# ---- synthetic surfaces; each returns (n, 3) points roughly within [-1, 1]^3 ----


def _sphere(n, rng):
    half = rng.standard_normal(((n + 1) // 2, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    # antipodal pairs keep the centroid at the origin
    return np.concatenate([half, -half])[:n]


def _cube(n, rng):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1, 1, (n, 2))
    pts = np.empty((n, 3))
    axis, sign = face // 2, np.where(face % 2, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [i for i in range(3) if i != a]
        pts[sel, a] = sign[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _cylinder(n, rng, r=1.0, h=1.0):
    side_area, cap_area = 2 * np.pi * r * 2 * h, np.pi * r * r
    part = rng.choice(3, n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    theta = rng.uniform(0, 2 * np.pi, n)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-h, h, n), np.full(n, h)], -h)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _triangles(n, rng, tris):
    tris = np.asarray(tris, dtype=np.float64)
    areas = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    which = rng.choice(len(tris), n, p=areas / areas.sum())
    u, v = rng.uniform(0, 1, (2, n))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tris[which]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def _cone(n, rng):
    slant = np.sqrt(1 + 4)
    side, base = np.pi * slant, np.pi
    on_side = rng.uniform(0, 1, n) < side / (side + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    # side: radius shrinks linearly to the apex; sqrt keeps density uniform in area
    frac = np.sqrt(rng.uniform(0, 1, n))
    rad = np.where(on_side, frac, np.sqrt(rng.uniform(0, 1, n)))
    z = np.where(on_side, 1 - 2 * frac, -1.0)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _torus(n, rng, R=1.0, r=0.35):
    out = []
    while sum(len(o) for o in out) < n:
        theta = rng.uniform(0, 2 * np.pi, 2 * n)
        phi = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.uniform(0, 1, 2 * n) < (R + r * np.cos(phi)) / (R + r)
        theta, phi = theta[keep], phi[keep]
        w = R + r * np.cos(phi)
        out.append(np.stack([w * np.cos(theta), w * np.sin(theta), r * np.sin(phi)], axis=1))
    return np.concatenate(out)[:n]


def _pyramid(n, rng):
    b = [(-1, -1, -1), (1, -1, -1), (1, 1, -1), (-1, 1, -1)]
    apex = (0, 0, 1)
    tris = [(b[i], b[(i + 1) % 4], apex) for i in range(4)] + [(b[0], b[1], b[2]), (b[0], b[2], b[3])]
    return _triangles(n, rng, tris)


def _plane(n, rng):
    uv = rng.uniform(-1, 1, (n, 2))
    return np.column_stack([uv, np.zeros(n)])


def _helix(n, rng, turns=2.0):
    s = rng.uniform(0, 1, n)
    a = 2 * np.pi * turns * s
    return np.stack([np.cos(a), np.sin(a), 2 * s - 1], axis=1)


SHAPES = {
    "sphere": _sphere,
    "cube": _cube,
    "cylinder": _cylinder,
    "cone": _cone,
    "torus": _torus,
    "pyramid": _pyramid,
    "plane": _plane,
    "helix": _helix,
}


def sample_shape(name, n, rng, jitter=0.005):
    """One normalized sample: surface points, random rotation about z, gaussian jitter."""
    if name not in SHAPES:
        raise InvalidInputError(f"unknown shape {name!r}; choose from {sorted(SHAPES)}")
    pts = SHAPES[name](n, rng)
    a = rng.uniform(0, 2 * np.pi)
    rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    pts = pts @ rot.T
    if jitter > 0:
        pts = pts + rng.normal(0.0, jitter, pts.shape)
    return normalize_unit_sphere(pts)[0]


def make_synthetic(classes, per_class, n_points=1024, seed=0, split="train", jitter=0.005):
    if per_class < 1:
        raise InvalidInputError("per_class must be >= 1")
    classes = list(classes)
    for c in classes:
        if c not in SHAPES:
            raise InvalidInputError(f"unknown shape {c!r}; choose from {sorted(SHAPES)}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(per_class):
        for c in classes:
            samples.append((sample_shape(c, n_points, rng, jitter), c, f"{split}/{c}/{i:05d}"))
    return LabeledCloudSet(samples, classes, split)
