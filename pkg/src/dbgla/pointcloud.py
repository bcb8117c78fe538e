"""Point cloud container, text file formats and a synthetic scene generator.

Supported formats:

* ``xyz``  -- one point per line, ``x y z``
* ``xyzl`` -- ``x y z label`` with an integer label
* ``ply_ascii`` -- ASCII PLY with ``x y z``, optional ``uchar red green blue``
  and an optional ``int label`` property

Positions are written with 17 significant digits, so a save/load cycle
reproduces float64 values exactly.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, StorageError, ValidationError

FORMATS = ("xyz", "xyzl", "ply_ascii")
_SUFFIX_FORMAT = {".xyz": "xyz", ".xyzl": "xyzl", ".ply": "ply_ascii"}


@dataclass
class PointCloud:
    positions: np.ndarray
    features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    class_names: Optional[list] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise ValidationError(f"positions must be N x 3 with N >= 1, got {self.positions.shape}")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions must be finite")
        n = len(self.positions)
        if self.features is None:
            self.features = np.zeros((n, 0))
        self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)
        if self.class_names is not None and self.num_classes is None:
            self.num_classes = len(self.class_names)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (n,) or not np.issubdtype(self.labels.dtype, np.integer):
                raise ValidationError(f"labels must be {n} integers, got {self.labels.dtype} {self.labels.shape}")
            self.labels = self.labels.astype(np.int64)
            if self.num_classes is None:
                self.num_classes = int(self.labels.max()) + 1
            bad = (self.labels < 0) | (self.labels >= self.num_classes)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ValidationError(f"label {self.labels[i]} at point {i} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.positions)

    @property
    def num_features(self):
        return self.features.shape[1]

    def class_histogram(self):
        if self.labels is None:
            return None
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# file formats


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in FORMATS:
            raise ValidationError(f"unknown point cloud format {fmt!r}; expected one of {FORMATS}")
        return fmt
    try:
        return _SUFFIX_FORMAT[Path(path).suffix.lower()]
    except KeyError:
        raise ValidationError(f"cannot infer format from {path}; pass one of {FORMATS}") from None


def load(path, format=None, num_classes=None):  # noqa: A002
    fmt = _infer_format(path, format)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if fmt == "ply_ascii":
        return _parse_ply(text, path, num_classes)
    ncols = 3 if fmt == "xyz" else 4
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} columns, found {len(parts)}", path, lineno)
        try:
            xyz = [float(v) for v in parts[:3]]
            label = int(parts[3]) if ncols == 4 else None
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
        rows.append((xyz, label, lineno))
    if not rows:
        raise ParseError("no points", path)
    positions = np.array([r[0] for r in rows])
    labels = np.array([r[1] for r in rows], dtype=np.int64) if ncols == 4 else None
    if labels is not None and (labels < 0).any():
        raise ParseError(f"negative label {labels.min()}", path, rows[int(np.argmin(labels))][2])
    return PointCloud(positions, labels=labels, num_classes=num_classes)


def _parse_ply(text, path, num_classes):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", path, 1)
    props, count, body_start, in_vertex = [], None, None, False
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            if parts[1] != "ascii":
                raise ParseError(f"only ascii PLY is supported, got {parts[1]}", path, lineno)
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = lineno
            break
    if body_start is None or count is None:
        raise ParseError("incomplete PLY header", path)
    missing = {"x", "y", "z"} - set(props)
    if missing:
        raise ParseError(f"PLY vertex lacks {sorted(missing)}", path)
    data = []
    for lineno in range(body_start + 1, body_start + 1 + count):
        if lineno - 1 >= len(lines):
            raise ParseError(f"expected {count} vertices, file ended", path, lineno)
        parts = lines[lineno - 1].split()
        if len(parts) < len(props):
            raise ParseError(f"expected {len(props)} values, found {len(parts)}", path, lineno)
        try:
            data.append([float(v) for v in parts[: len(props)]])
        except ValueError as exc:
            raise ParseError(str(exc), path, lineno) from None
    data = np.array(data).reshape(count, len(props))
    col = {name: i for i, name in enumerate(props)}
    positions = data[:, [col["x"], col["y"], col["z"]]]
    features = None
    if all(c in col for c in ("red", "green", "blue")):
        features = data[:, [col["red"], col["green"], col["blue"]]] / 255.0
    labels = None
    if "label" in col:
        labels = data[:, col["label"]].astype(np.int64)
        if (labels < 0).any():
            bad = int(np.flatnonzero(labels < 0)[0])
            raise ParseError(f"negative label {labels[bad]}", path, body_start + 1 + bad)
    return PointCloud(positions, features=features, labels=labels, num_classes=num_classes)


def save(pc, path, format=None, colors=None):  # noqa: A002
    """Write ``pc``. For PLY, ``colors`` (N x 3 uint8) overrides feature colours."""
    fmt = _infer_format(path, format)
    fmt_pos = "%.17g %.17g %.17g"
    try:
        with open(path, "w") as fh:
            if fmt == "xyz":
                np.savetxt(fh, pc.positions, fmt=fmt_pos)
            elif fmt == "xyzl":
                if pc.labels is None:
                    raise ValidationError("xyzl output needs labels")
                for p, lab in zip(pc.positions, pc.labels):
                    fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {int(lab)}\n")
            else:
                _write_ply(fh, pc, colors)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def _write_ply(fh, pc, colors):
    if colors is None and pc.num_features == 3:
        colors = np.clip(np.rint(pc.features * 255.0), 0, 255)
    header = ["ply", "format ascii 1.0", f"element vertex {len(pc)}",
              "property double x", "property double y", "property double z"]
    if colors is not None:
        colors = np.asarray(colors).astype(np.int64)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if pc.labels is not None:
        header.append("property int label")
    header.append("end_header")
    fh.write("\n".join(header) + "\n")
    for i, p in enumerate(pc.positions):
        row = [f"{p[0]:.17g}", f"{p[1]:.17g}", f"{p[2]:.17g}"]
        if colors is not None:
            row += [str(int(c)) for c in colors[i]]
        if pc.labels is not None:
            row.append(str(int(pc.labels[i])))
        fh.write(" ".join(row) + "\n")


# ---------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("plane", "box", "sphere", "cylinder")


@dataclass
class SceneObject:
    """A labelled primitive. ``size`` holds half-extents; sphere uses size[0] as radius."""

    class_id: int
    shape: str
    center: Sequence[float]
    size: Sequence[float]
    count: int


@dataclass
class SceneSpec:
    """Scene recipe. Background points fill the extent as a floor plane
    (z = 0) or a uniform volume; their count is density x extent volume."""

    extent: Sequence[float]
    background_density: float
    objects: list = field(default_factory=list)
    seed: int = 0
    background_class: int = 0
    background_shape: str = "plane"
    class_names: Optional[list] = None
    noise: float = 0.005

    def background_count(self):
        return int(round(self.background_density * float(np.prod(self.extent))))

    def validate(self):
        extent = np.asarray(self.extent, dtype=float)
        if extent.shape != (3,) or (extent <= 0).any():
            raise ValidationError(f"extent must be three positive lengths, got {self.extent}")
        if self.background_shape not in ("plane", "volume"):
            raise ValidationError(f"background_shape must be plane or volume, got {self.background_shape!r}")
        if self.background_density < 0:
            raise ValidationError("background_density must be >= 0")
        total = self.background_count()
        for i, obj in enumerate(self.objects):
            if obj.shape not in SHAPES:
                raise ValidationError(f"object {i}: unknown shape {obj.shape!r}")
            if obj.count < 1:
                raise ValidationError(f"object {i}: count must be positive")
            if obj.class_id < 0:
                raise ValidationError(f"object {i}: negative class id")
            lo, hi = _object_bounds(obj)
            if (lo < 0).any() or (hi > extent).any():
                raise ValidationError(f"object {i} ({obj.shape} at {list(obj.center)}) leaves the scene extent")
            total += obj.count
        if total < 1:
            raise ValidationError("scene has no points")


def _object_bounds(obj):
    c = np.asarray(obj.center, dtype=float)
    s = np.asarray(obj.size, dtype=float)
    if obj.shape == "sphere":
        s = np.full(3, s[0])
    elif obj.shape == "cylinder":
        s = np.array([s[0], s[0], s[2]])
    elif obj.shape == "plane":
        s = np.array([s[0], s[1], 0.0])
    return c - s, c + s


def _sample_shape(rng, shape, center, size, count):
    center = np.asarray(center, dtype=float)
    size = np.asarray(size, dtype=float)
    if shape == "plane":
        pts = np.column_stack([rng.uniform(-size[0], size[0], count),
                               rng.uniform(-size[1], size[1], count), np.zeros(count)])
    elif shape == "box":
        pts = rng.uniform(-size, size, size=(count, 3))
    elif shape == "sphere":
        d = rng.normal(size=(count, 3))
        pts = size[0] * d / np.linalg.norm(d, axis=1, keepdims=True)
    else:
        theta = rng.uniform(0, 2 * np.pi, count)
        pts = np.column_stack([size[0] * np.cos(theta), size[0] * np.sin(theta),
                               rng.uniform(-size[2], size[2], count)])
    return center + pts


def generate_scene(spec):
    """Deterministic labelled cloud for ``spec``; per-class counts are exact."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    extent = np.asarray(spec.extent, dtype=float)
    chunks, labels = [], []
    nb = spec.background_count()
    if nb:
        if spec.background_shape == "plane":
            bg = np.column_stack([rng.uniform(0, extent[0], nb), rng.uniform(0, extent[1], nb), np.zeros(nb)])
        else:
            bg = rng.uniform(0, extent, size=(nb, 3))
        chunks.append(bg)
        labels.append(np.full(nb, spec.background_class))
    for obj in spec.objects:
        chunks.append(_sample_shape(rng, obj.shape, obj.center, obj.size, obj.count))
        labels.append(np.full(obj.count, obj.class_id))
    positions = np.concatenate(chunks)
    if spec.noise > 0:
        positions = positions + rng.normal(scale=spec.noise, size=positions.shape)
        positions = np.clip(positions, 0.0, extent)
    labels = np.concatenate(labels).astype(np.int64)
    n_classes = max(int(labels.max()) + 1, len(spec.class_names or []))
    return PointCloud(positions, labels=labels, class_names=spec.class_names, num_classes=n_classes)


def imbalanced_scene_spec(n_points=500, seed=0, small_fraction=0.02):
    """Four-class indoor-like scene: sparse floor, sparse pole, a dense table
    top and a small object (``small_fraction`` of points) resting on it.

    The table top is the densest region and the small class sits inside it.
    """
    n_small = max(1, int(round(small_fraction * n_points)))
    n_table = int(round(0.30 * n_points))
    n_pole = int(round(0.18 * n_points))
    n_floor = n_points - n_small - n_table - n_pole
    extent = (4.0, 4.0, 2.0)
    rng = np.random.default_rng(seed)
    tx, ty = rng.uniform(1.2, 2.8, size=2)
    px, py = (tx + 1.0) % 3.0 + 0.5, (ty + 1.6) % 3.0 + 0.5
    sx, sy = tx + rng.uniform(-0.15, 0.15), ty + rng.uniform(-0.15, 0.15)
    objects = [
        SceneObject(1, "cylinder", (px, py, 0.8), (0.1, 0.1, 0.75), n_pole),
        SceneObject(2, "plane", (tx, ty, 0.75), (0.35, 0.35, 0.0), n_table),
        SceneObject(3, "sphere", (sx, sy, 0.84), (0.07, 0.07, 0.07), n_small),
    ]
    return SceneSpec(extent=extent, background_density=n_floor / float(np.prod(extent)), objects=objects,
                     seed=seed, class_names=["floor", "pole", "table", "small_object"])


def dense_cluster_spec(n_background=4000, n_cluster=400, cluster_half=0.25, seed=0, extent=(4.0, 4.0, 4.0)):
    """Uniform volume background plus one box cluster; returns (spec, density_ratio)."""
    ext = np.asarray(extent, dtype=float)
    center = tuple(ext / 2)
    spec = SceneSpec(extent=extent, background_density=n_background / float(np.prod(ext)),
                     objects=[SceneObject(1, "box", center, (cluster_half,) * 3, n_cluster)],
                     seed=seed, background_shape="volume", noise=0.0)
    bg_density = n_background / float(np.prod(ext))
    cluster_density = n_cluster / (2 * cluster_half) ** 3 + bg_density
    return spec, cluster_density / bg_density
