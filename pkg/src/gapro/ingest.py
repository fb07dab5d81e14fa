"""Scene containers and their on-disk formats.

Five formats live here: PLY point clouds (ascii and binary little endian),
box sets as JSON, superpoint partitions as newline-delimited integers, dense
feature matrices in a small binary container, and the pseudo-label archive.
Every writer is deterministic and every (writer, reader) pair round-trips
bit-exactly; tests fuzz this.

All binary formats are little endian regardless of host byte order.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gapro.errors import FormatError, GeometryError

_PLY_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
    ]
)

_FEAT_MAGIC = b"FEAT"
_LABEL_MAGIC = b"GPRO"
_LABEL_VERSION = 1


def _require(cond, msg, exc=ValueError):
    if not cond:
        raise exc(msg)


# ---------------------------------------------------------------------------
# containers


@dataclass
class PointCloud:
    """A colored point cloud.

    Attributes
    ----------
    positions : (N, 3) float64 array, finite.
    colors : (N, 3) float64 array with channels in [0, 1].
    """

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        _require(self.positions.ndim == 2 and self.positions.shape[1] == 3,
                 "positions must have shape (N, 3)")
        _require(self.colors.shape == self.positions.shape,
                 "colors must have shape (N, 3)")
        _require(len(self.positions) >= 1, "point cloud must be non-empty")
        _require(np.isfinite(self.positions).all(), "positions must be finite")
        _require(np.isfinite(self.colors).all()
                 and (self.colors >= 0.0).all() and (self.colors <= 1.0).all(),
                 "colors must lie in [0, 1]")

    @property
    def count(self):
        return len(self.positions)


@dataclass
class AABB:
    """Axis-aligned box with a class and a scene-unique instance id."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    class_id: int
    instance_id: int

    def __post_init__(self):
        self.min_corner = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        self.max_corner = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        _require(np.isfinite(self.min_corner).all() and np.isfinite(self.max_corner).all(),
                 "box corners must be finite", GeometryError)
        _require((self.min_corner <= self.max_corner).all(),
                 "box min corner must not exceed max corner", GeometryError)
        self.class_id = int(self.class_id)
        self.instance_id = int(self.instance_id)
        _require(self.class_id >= 0, "class_id must be non-negative", GeometryError)
        _require(self.instance_id >= 0, "instance_id must be non-negative", GeometryError)

    @property
    def volume(self):
        return float(np.prod(self.max_corner - self.min_corner))

    def contains(self, points):
        """Inclusive containment test for an (N, 3) array of points."""
        points = np.asarray(points, dtype=np.float64)
        return ((points >= self.min_corner) & (points <= self.max_corner)).all(axis=-1)


@dataclass
class BoxSet:
    """An ordered collection of boxes for one scene.

    Instance ids must be unique.  The stacked corner arrays are derived on
    construction and should be treated as read-only.
    """

    boxes: list

    mins: np.ndarray = field(init=False, repr=False)
    maxs: np.ndarray = field(init=False, repr=False)
    class_ids: np.ndarray = field(init=False, repr=False)
    instance_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.boxes = list(self.boxes)
        _require(len(self.boxes) >= 1, "box set must be non-empty", GeometryError)
        ids = [b.instance_id for b in self.boxes]
        _require(len(set(ids)) == len(ids),
                 "instance ids must be unique within a scene", GeometryError)
        self.mins = np.stack([b.min_corner for b in self.boxes])
        self.maxs = np.stack([b.max_corner for b in self.boxes])
        self.class_ids = np.array([b.class_id for b in self.boxes], dtype=np.int64)
        self.instance_ids = np.array(ids, dtype=np.int64)

    def __len__(self):
        return len(self.boxes)

    def __iter__(self):
        return iter(self.boxes)

    def __getitem__(self, k):
        return self.boxes[k]

    @property
    def volumes(self):
        return np.prod(self.maxs - self.mins, axis=1)


@dataclass
class SuperpointPartition:
    """Point-to-superpoint assignment in first-occurrence normal form.

    Ids are dense in [0, S) and numbered by the order in which their first
    member point appears; that is the form the reader produces and the only
    one accepted here, so that writing is the inverse of reading.  Use
    :meth:`from_labels` to normalize arbitrary label arrays.
    """

    assignment: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        _require(self.assignment.ndim == 1 and len(self.assignment) >= 1,
                 "assignment must be a non-empty 1-d array")
        _require((self.assignment >= 0).all(), "superpoint ids must be non-negative")
        # first occurrence of id s must precede every occurrence of id s+1
        seen_max = np.maximum.accumulate(self.assignment)
        _require((self.assignment <= np.concatenate(([0], seen_max[:-1] + 1))).all(),
                 "assignment must be in first-occurrence dense form "
                 "(normalize with SuperpointPartition.from_labels)")

    @classmethod
    def from_labels(cls, labels):
        """Build a partition from arbitrary hashable-as-int labels."""
        labels = np.asarray(labels)
        _require(labels.ndim == 1 and len(labels) >= 1,
                 "labels must be a non-empty 1-d array")
        _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
        order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
        return cls(order[inverse])

    @property
    def superpoint_count(self):
        return int(self.assignment.max()) + 1

    @property
    def count(self):
        return len(self.assignment)


@dataclass
class FeatureMatrix:
    """Dense per-point features, stored as float32 to match the file format."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        _require(self.values.ndim == 2, "feature matrix must be 2-d")
        _require(self.values.shape[0] >= 1 and self.values.shape[1] >= 1,
                 "feature matrix must be non-empty")
        _require(np.isfinite(self.values).all(), "features must be finite")

    @property
    def count(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


@dataclass
class InstanceLabels:
    """Pseudo labels for one instance over its candidate points.

    ``candidate_indices`` are sorted, strictly increasing point indices.
    ``mean`` and ``variance`` are float32 because the archive stores float32
    and the in-memory object must round-trip bit-exactly.
    """

    class_id: int
    candidate_indices: np.ndarray
    mask: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.class_id = int(self.class_id)
        _require(self.class_id >= 0, "class_id must be non-negative")
        self.candidate_indices = np.asarray(self.candidate_indices, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.variance = np.asarray(self.variance, dtype=np.float32)
        n = len(self.candidate_indices)
        _require(self.candidate_indices.ndim == 1, "candidate_indices must be 1-d")
        _require(self.mask.shape == (n,) and self.mean.shape == (n,)
                 and self.variance.shape == (n,),
                 "mask, mean and variance must match candidate count")
        if n > 1:
            _require((np.diff(self.candidate_indices) > 0).all(),
                     "candidate_indices must be sorted and unique")
        if n:
            _require(self.candidate_indices[0] >= 0, "point indices must be non-negative")
            _require((self.mean >= 0.0).all() and (self.mean <= 1.0).all(),
                     "means must lie in [0, 1]")
            _require((self.variance >= 0.0).all(), "variances must be non-negative")

    @property
    def count(self):
        return len(self.candidate_indices)


@dataclass
class PseudoLabels:
    """Per-instance pseudo labels for one scene of ``n_points`` points."""

    n_points: int
    instances: list

    def __post_init__(self):
        self.n_points = int(self.n_points)
        _require(self.n_points >= 1, "n_points must be positive")
        self.instances = list(self.instances)
        for inst in self.instances:
            if inst.count:
                _require(int(inst.candidate_indices[-1]) < self.n_points,
                         "candidate index out of range")

    @property
    def instance_count(self):
        return len(self.instances)

    def dense_masks(self):
        """Expand to a (K, N) boolean mask matrix."""
        out = np.zeros((len(self.instances), self.n_points), dtype=bool)
        for k, inst in enumerate(self.instances):
            out[k, inst.candidate_indices[inst.mask]] = True
        return out


# ---------------------------------------------------------------------------
# PLY


def write_point_cloud(path, cloud, binary=True):
    """Write a PLY file with x, y, z float32 and red, green, blue uint8.

    Colors are scaled from [0, 1] to bytes by round(c * 255).
    """
    rec = np.empty(cloud.count, dtype=_PLY_DTYPE)
    pos32 = cloud.positions.astype(np.float32)
    rec["x"], rec["y"], rec["z"] = pos32[:, 0], pos32[:, 1], pos32[:, 2]
    col = np.rint(cloud.colors * 255.0).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]

    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {cloud.count}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(rec.tobytes())
        else:
            lines = [
                "%.9g %.9g %.9g %d %d %d"
                % (r["x"], r["y"], r["z"], r["red"], r["green"], r["blue"])
                for r in rec
            ]
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def _parse_ply_header(lines):
    """Validate the supported dialect and return (format, vertex_count)."""
    _require(lines and lines[0] == "ply", "not a PLY file", FormatError)
    fmt = None
    count = None
    props = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            _require(len(parts) == 3 and parts[2] == "1.0",
                     f"malformed format line: {line!r}", FormatError)
            _require(parts[1] in ("ascii", "binary_little_endian"),
                     f"unsupported PLY format {parts[1]!r}", FormatError)
            fmt = parts[1]
        elif parts[0] == "element":
            _require(parts[1] == "vertex" and count is None,
                     "only a single vertex element is supported", FormatError)
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise FormatError(f"malformed element line: {line!r}")
            _require(count >= 1, "vertex count must be positive", FormatError)
        elif parts[0] == "property":
            _require(count is not None, "property outside an element", FormatError)
            _require(len(parts) == 3, f"malformed property line: {line!r}", FormatError)
            props.append((parts[1], parts[2]))
        else:
            raise FormatError(f"unsupported header line: {line!r}")
    _require(fmt is not None, "missing format line", FormatError)
    _require(count is not None, "missing vertex element", FormatError)
    names = [n for _, n in props]
    types = [t for t, _ in props]
    _require(names == ["x", "y", "z", "red", "green", "blue"],
             f"unsupported property layout {names}", FormatError)
    _require(all(t in ("float", "float32") for t in types[:3])
             and all(t in ("uchar", "uint8") for t in types[3:]),
             f"unsupported property types {types}", FormatError)
    return fmt, count


def load_point_cloud(path):
    """Read a PLY file in the dialect produced by :func:`write_point_cloud`."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    _require(end >= 0, "missing end_header", FormatError)
    try:
        header = raw[:end].decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("PLY header is not ascii")
    fmt, count = _parse_ply_header(header.splitlines())
    body = raw[end + len(b"end_header\n"):]

    if fmt == "binary_little_endian":
        _require(len(body) == count * _PLY_DTYPE.itemsize,
                 "binary payload size does not match vertex count", FormatError)
        rec = np.frombuffer(body, dtype=_PLY_DTYPE)
    else:
        try:
            tokens = body.decode("ascii").split()
        except UnicodeDecodeError:
            raise FormatError("PLY ascii body is not ascii")
        _require(len(tokens) == count * 6,
                 "ascii payload does not match vertex count", FormatError)
        cols = np.array(tokens, dtype=object).reshape(count, 6)
        rec = np.empty(count, dtype=_PLY_DTYPE)
        try:
            for i, name in enumerate(("x", "y", "z")):
                rec[name] = cols[:, i].astype(np.float64).astype(np.float32)
            for i, name in enumerate(("red", "green", "blue")):
                chan = cols[:, 3 + i].astype(np.int64)
                _require((chan >= 0).all() and (chan <= 255).all(),
                         "color channel out of byte range", FormatError)
                rec[name] = chan.astype(np.uint8)
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed ascii vertex data: {exc}")

    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    _require(np.isfinite(positions).all(), "non-finite coordinates", FormatError)
    return PointCloud(positions, colors)


# ---------------------------------------------------------------------------
# boxes


def write_boxes(path, boxes):
    """Write a box set as a JSON array of {min, max, class, instance}."""
    entries = [
        {
            "min": [float(v) for v in b.min_corner],
            "max": [float(v) for v in b.max_corner],
            "class": b.class_id,
            "instance": b.instance_id,
        }
        for b in boxes
    ]
    with open(path, "wb") as fh:
        fh.write((json.dumps(entries, indent=2) + "\n").encode("ascii"))


def _box_from_entry(i, entry):
    _require(isinstance(entry, dict), f"box {i}: expected an object", FormatError)
    for key in ("min", "max", "class", "instance"):
        _require(key in entry, f"box {i}: missing key {key!r}", FormatError)
    lo, hi = entry["min"], entry["max"]
    for name, corner in (("min", lo), ("max", hi)):
        _require(isinstance(corner, list) and len(corner) == 3
                 and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                         for v in corner),
                 f"box {i}: {name} must be a list of 3 numbers", FormatError)
    for name in ("class", "instance"):
        v = entry[name]
        _require(isinstance(v, int) and not isinstance(v, bool),
                 f"box {i}: {name} must be an integer", FormatError)
    return AABB(np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64),
                entry["class"], entry["instance"])


def load_boxes(path):
    """Read a JSON box file, validating structure and geometry."""
    try:
        payload = json.loads(Path(path).read_text(encoding="ascii"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid box JSON: {exc}")
    _require(isinstance(payload, list), "box file must contain a JSON array", FormatError)
    _require(len(payload) >= 1, "box file must contain at least one box", FormatError)
    return BoxSet([_box_from_entry(i, e) for i, e in enumerate(payload)])


# ---------------------------------------------------------------------------
# superpoints


def write_superpoints(path, partition):
    """Write one superpoint id per line."""
    with open(path, "wb") as fh:
        fh.write(("\n".join(str(int(s)) for s in partition.assignment) + "\n")
                 .encode("ascii"))


def load_superpoints(path):
    """Read newline-delimited ids and remap to first-occurrence dense form."""
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise FormatError("superpoint file is not ascii")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    _require(len(lines) >= 1, "superpoint file is empty", FormatError)
    try:
        labels = np.array([int(ln) for ln in lines], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"malformed superpoint id: {exc}")
    return SuperpointPartition.from_labels(labels)


# ---------------------------------------------------------------------------
# feature matrix


def write_feature_matrix(path, features):
    """Write the FEAT container: magic, N, d as u32, then row-major f32."""
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(np.array([features.count, features.dim], dtype="<u4").tobytes())
        fh.write(features.values.astype("<f4").tobytes())


def load_feature_matrix(path):
    raw = Path(path).read_bytes()
    _require(len(raw) >= 12, "feature file truncated", FormatError)
    _require(raw[:4] == _FEAT_MAGIC, "bad feature file magic", FormatError)
    n, d = (int(v) for v in np.frombuffer(raw[4:12], dtype="<u4"))
    _require(n >= 1 and d >= 1, "feature dimensions must be positive", FormatError)
    expect = 12 + 4 * n * d
    _require(len(raw) == expect, "feature payload size mismatch", FormatError)
    values = np.frombuffer(raw[12:], dtype="<f4").reshape(n, d)
    _require(np.isfinite(values).all(), "non-finite feature values", FormatError)
    return FeatureMatrix(values.copy())


# ---------------------------------------------------------------------------
# pseudo-label archive


def write_pseudo_labels(path, labels):
    """Write the GPRO archive.

    Layout, all little endian: magic, version u32, N u32, K u32, then per
    instance class u32, candidate count u32, candidate indices u32, the mask
    packed 8 bits per byte (np.packbits order), mean f32, variance f32.
    """
    chunks = [
        _LABEL_MAGIC,
        np.array([_LABEL_VERSION, labels.n_points, labels.instance_count],
                 dtype="<u4").tobytes(),
    ]
    for inst in labels.instances:
        chunks.append(np.array([inst.class_id, inst.count], dtype="<u4").tobytes())
        chunks.append(inst.candidate_indices.astype("<u4").tobytes())
        chunks.append(np.packbits(inst.mask).tobytes())
        chunks.append(inst.mean.astype("<f4").tobytes())
        chunks.append(inst.variance.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Cursor:
    """Sequential reader over a bytes object with truncation checks."""

    def __init__(self, raw):
        self.raw = raw
        self.off = 0

    def take(self, n, what):
        _require(self.off + n <= len(self.raw), f"archive truncated in {what}",
                 FormatError)
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u32(self, what):
        return int(np.frombuffer(self.take(4, what), dtype="<u4")[0])


def load_pseudo_labels(path):
    raw = Path(path).read_bytes()
    cur = _Cursor(raw)
    _require(cur.take(4, "magic") == _LABEL_MAGIC, "bad label archive magic",
             FormatError)
    version = cur.u32("version")
    _require(version == _LABEL_VERSION,
             f"unsupported label archive version {version}", FormatError)
    n_points = cur.u32("point count")
    _require(n_points >= 1, "point count must be positive", FormatError)
    n_inst = cur.u32("instance count")
    instances = []
    for k in range(n_inst):
        class_id = cur.u32("class id")
        count = cur.u32("candidate count")
        idx = np.frombuffer(cur.take(4 * count, "candidate indices"),
                            dtype="<u4").astype(np.int64)
        packed = np.frombuffer(cur.take((count + 7) // 8, "mask"), dtype=np.uint8)
        mask = np.unpackbits(packed, count=count).astype(bool)
        mean = np.frombuffer(cur.take(4 * count, "means"), dtype="<f4").copy()
        variance = np.frombuffer(cur.take(4 * count, "variances"), dtype="<f4").copy()
        if count > 1:
            _require((np.diff(idx) > 0).all(),
                     f"instance {k}: candidate indices not sorted", FormatError)
        if count:
            _require(int(idx[-1]) < n_points,
                     f"instance {k}: candidate index out of range", FormatError)
            _require(np.isfinite(mean).all() and np.isfinite(variance).all(),
                     f"instance {k}: non-finite statistics", FormatError)
            _require((mean >= 0.0).all() and (mean <= 1.0).all(),
                     f"instance {k}: means outside [0, 1]", FormatError)
            _require((variance >= 0.0).all(),
                     f"instance {k}: negative variances", FormatError)
        # padding bits beyond the mask length must be zero
        if count % 8 and count:
            tail = np.unpackbits(packed[-1:])[count % 8:]
            _require(not tail.any(), f"instance {k}: nonzero mask padding", FormatError)
        instances.append(InstanceLabels(class_id, idx, mask, mean, variance))
    _require(cur.off == len(raw), "trailing bytes after last instance", FormatError)
    return PseudoLabels(n_points, instances)
