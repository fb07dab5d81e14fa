"""Evaluation: mask AP, box perturbations, and synthetic scenes.

The AP protocol is the usual instance-segmentation one: predictions are
matched greedily to ground truth in descending confidence order at a given
IoU threshold, the precision-recall curve is interpolated at 101 recall
points, and AP averages the per-class values.  ``ap`` is the mean over the
0.50:0.05:0.95 threshold ladder; ``ap50``, ``ap25`` and ``ap90`` are single
thresholds.
"""

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gapro._kernels import box_membership
from gapro.errors import FormatError, GenerationError, GeometryError
from gapro.ingest import (
    AABB,
    BoxSet,
    InstanceLabels,
    PointCloud,
    PseudoLabels,
    SuperpointPartition,
)

_AP_GRID = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))

_VOXEL_SIZE = 0.25
_COLOR_BINS = 4


# ---------------------------------------------------------------------------
# ground truth


@dataclass
class GroundTruth:
    """Per-point instance and class ids; -1 marks background on both."""

    instance_ids: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if self.instance_ids.ndim != 1 or len(self.instance_ids) < 1:
            raise ValueError("instance_ids must be a non-empty 1-d array")
        if self.class_ids.shape != self.instance_ids.shape:
            raise ValueError("class_ids must match instance_ids")
        if ((self.instance_ids < 0) != (self.class_ids < 0)).any():
            raise ValueError("background must have both ids negative")
        fg = self.instance_ids[self.instance_ids >= 0]
        if len(fg):
            present = np.unique(fg)
            if present[0] != 0 or present[-1] != len(present) - 1:
                raise ValueError("instance ids must be dense in [0, K)")
            for k in present:
                cls = np.unique(self.class_ids[self.instance_ids == k])
                if len(cls) != 1:
                    raise ValueError(f"instance {k} spans multiple classes")

    @property
    def count(self):
        return len(self.instance_ids)

    @property
    def n_instances(self):
        fg = self.instance_ids >= 0
        return int(self.instance_ids[fg].max()) + 1 if fg.any() else 0

    def instance_mask(self, k):
        return self.instance_ids == k

    def instance_class(self, k):
        rows = np.flatnonzero(self.instance_ids == k)
        if not len(rows):
            raise ValueError(f"instance {k} has no points")
        return int(self.class_ids[rows[0]])


def write_ground_truth(path, gt):
    """Write one "instance class" pair per line."""
    lines = [f"{int(i)} {int(c)}" for i, c in zip(gt.instance_ids, gt.class_ids)]
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def load_ground_truth(path):
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError:
        raise FormatError("ground-truth file is not ascii")
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise FormatError("ground-truth file is empty")
    if any(len(r) != 2 for r in rows):
        raise FormatError("expected two integers per ground-truth line")
    try:
        data = np.array([[int(a), int(b)] for a, b in rows], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"malformed ground-truth id: {exc}")
    try:
        return GroundTruth(data[:, 0], data[:, 1])
    except ValueError as exc:
        raise FormatError(str(exc))


# ---------------------------------------------------------------------------
# masks and AP


def mask_iou(a, b):
    """Intersection over union of two boolean masks; 0.0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("masks must be 1-d and of equal length")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


@dataclass
class ApReport:
    """AP summary; ``ap`` averages the 0.50:0.05:0.95 ladder."""

    ap: float
    ap50: float
    ap25: float
    ap90: float
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap25": self.ap25,
            "ap90": self.ap90,
            "per_class": {str(k): dict(v) for k, v in sorted(self.per_class.items())},
        }


def _interp_ap(tp_flags, n_gt):
    """101-point interpolated AP from ordered true-positive flags."""
    if n_gt == 0:
        return 0.0
    if not len(tp_flags):
        return 0.0
    tp = np.cumsum(tp_flags)
    prec = tp / np.arange(1, len(tp_flags) + 1)
    rec = tp / n_gt
    grid = np.linspace(0.0, 1.0, 101)
    # precision envelope: best precision at recall >= r
    idx = np.searchsorted(rec, grid, side="left")
    env = np.maximum.accumulate(prec[::-1])[::-1]
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def _greedy_match(iou, order, tau):
    """Greedy confidence-ordered matching; returns tp flags in order."""
    matched = np.zeros(iou.shape[1], dtype=bool)
    flags = np.zeros(len(order), dtype=bool)
    for rank, p in enumerate(order):
        best = -1
        best_iou = tau
        for g in range(iou.shape[1]):
            if matched[g]:
                continue
            v = iou[p, g]
            if v > best_iou or (v == best_iou and v >= tau and best < 0):
                best_iou = v
                best = g
        if best >= 0:
            matched[best] = True
            flags[rank] = True
    return flags


def average_precision(masks, confidences, class_ids, gt, thresholds=None):
    """Class-mean average precision of predicted instance masks.

    Parameters
    ----------
    masks : (M, N) bool array or sequence of (N,) bool masks.
    confidences : (M,) floats.
    class_ids : (M,) ints; predictions outside the GT class set are ignored.
    gt : GroundTruth
    thresholds : optional IoU ladder for ``ap``; default 0.50:0.05:0.95.

    Returns
    -------
    ApReport
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    confidences = np.asarray(confidences, dtype=np.float64)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if not (len(masks) == len(confidences) == len(class_ids)):
        raise ValueError("masks, confidences and class_ids must align")
    for m in masks:
        if m.shape != (gt.count,):
            raise ValueError("mask length must match the ground truth")
    ladder = _AP_GRID if thresholds is None else tuple(float(t) for t in thresholds)
    if any(not 0.0 < t <= 1.0 for t in ladder):
        raise ValueError("thresholds must lie in (0, 1]")
    taus = sorted(set(ladder) | {0.25, 0.50, 0.90})

    gt_classes = sorted(
        {gt.instance_class(k) for k in range(gt.n_instances)})
    per_class = {}
    for cls in gt_classes:
        gts = [gt.instance_mask(k) for k in range(gt.n_instances)
               if gt.instance_class(k) == cls]
        preds = np.flatnonzero(class_ids == cls)
        # stable descending confidence
        order = preds[np.lexsort((preds, -confidences[preds]))]
        iou = np.zeros((len(masks), len(gts)))
        for p in order:
            for g, gmask in enumerate(gts):
                iou[p, g] = mask_iou(masks[p], gmask)
        by_tau = {}
        for tau in taus:
            flags = _greedy_match(iou, [int(p) for p in order], tau)
            by_tau[tau] = _interp_ap(flags, len(gts))
        per_class[cls] = {
            "ap": float(np.mean([by_tau[t] for t in ladder])),
            "ap50": by_tau[0.50],
            "ap25": by_tau[0.25],
            "ap90": by_tau[0.90],
        }

    def class_mean(key):
        if not per_class:
            return 0.0
        return float(np.mean([v[key] for v in per_class.values()]))

    return ApReport(
        ap=class_mean("ap"),
        ap50=class_mean("ap50"),
        ap25=class_mean("ap25"),
        ap90=class_mean("ap90"),
        per_class=per_class,
    )


def labels_to_predictions(labels):
    """Turn pseudo labels into (masks, confidences, class_ids) for AP.

    The confidence of an instance is the mean of its stored means over the
    masked points; instances with an empty mask are skipped.
    """
    masks = []
    confs = []
    classes = []
    for inst in labels.instances:
        if not inst.mask.any():
            continue
        dense = np.zeros(labels.n_points, dtype=bool)
        dense[inst.candidate_indices[inst.mask]] = True
        masks.append(dense)
        confs.append(float(inst.mean[inst.mask].astype(np.float64).mean()))
        classes.append(inst.class_id)
    return masks, np.array(confs), np.array(classes, dtype=np.int64)


def mask_to_aabb(cloud, mask, class_id=0, instance_id=0):
    """Tight axis-aligned box over the masked points."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (cloud.count,):
        raise ValueError("mask length must match the cloud")
    if not mask.any():
        raise GeometryError("cannot extract a box from an empty mask")
    pts = cloud.positions[mask]
    return AABB(pts.min(axis=0), pts.max(axis=0), class_id, instance_id)


# ---------------------------------------------------------------------------
# box perturbations


def perturb_box_corners(boxes, noise, rng, fractional=False):
    """Add independent uniform noise in [-noise, noise] to every corner
    coordinate.  With ``fractional`` the amplitude scales per axis with the
    box dimension.  Corners are re-sorted so min <= max stays true."""
    if noise < 0.0:
        raise ValueError("noise must be non-negative")
    out = []
    for b in boxes:
        scale = noise * (b.max_corner - b.min_corner) if fractional else noise
        delta = rng.uniform(-1.0, 1.0, (2, 3)) * scale
        lo = b.min_corner + delta[0]
        hi = b.max_corner + delta[1]
        out.append(AABB(np.minimum(lo, hi), np.maximum(lo, hi),
                        b.class_id, b.instance_id))
    return BoxSet(out)


def drop_boxes(boxes, rate, rng):
    """Drop each box independently with probability ``rate``; the largest
    box survives a total wipeout so the result is never empty."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    keep = rng.random(len(boxes)) >= rate
    if not keep.any():
        keep[int(np.argmax(boxes.volumes))] = True
    return BoxSet([b for b, k in zip(boxes, keep) if k])


# ---------------------------------------------------------------------------
# uncertainty-guided replacement


def uncertainty_guided_replacement(labels, gt, quantile, lowest=False):
    """Replace the ``quantile`` fraction of label entries ranked by variance
    with ground truth.

    By default the highest-variance entries are replaced (the useful
    direction: uncertain assignments are the error-prone ones); with
    ``lowest`` the other tail is taken, which exists for controlled
    comparisons.  Instance k of the labels is matched to GT instance id k.

    Replaced entries get mask and mean equal to the GT bit and variance 0.
    """
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    if labels.n_points != gt.count:
        raise ValueError("labels and ground truth sizes differ")
    if quantile == 0.0:
        return labels
    counts = [inst.count for inst in labels.instances]
    total = int(np.sum(counts))
    if total == 0:
        return labels
    n_replace = int(np.ceil(quantile * total))
    variances = np.concatenate([
        inst.variance.astype(np.float64) for inst in labels.instances
        if inst.count])
    key = variances if lowest else -variances
    chosen = np.zeros(total, dtype=bool)
    chosen[np.argsort(key, kind="stable")[:n_replace]] = True

    instances = []
    offset = 0
    for k, inst in enumerate(labels.instances):
        sel = chosen[offset:offset + inst.count]
        offset += inst.count
        if not sel.any():
            instances.append(inst)
            continue
        bit = gt.instance_ids[inst.candidate_indices[sel]] == k
        mask = inst.mask.copy()
        mean = inst.mean.copy()
        var = inst.variance.copy()
        mask[sel] = bit
        mean[sel] = bit.astype(np.float32)
        var[sel] = 0.0
        instances.append(InstanceLabels(inst.class_id, inst.candidate_indices,
                                        mask, mean, var))
    return PseudoLabels(labels.n_points, instances)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneSpec:
    """Parameters of a synthetic scene.

    Objects are laid out in a chain along x; ``overlap_factor`` 0 keeps the
    boxes disjoint and 1 interpenetrates neighbors by up to the smaller box
    width.  ``color_separability`` 1 gives each object a saturated distinct
    color, 0 collapses the palette to gray.
    """

    seed: int = 0
    n_objects: tuple = (8, 15)
    points_per_object: tuple = (500, 2000)
    overlap_factor: float = 0.5
    color_separability: float = 1.0
    n_background: int = 500
    primitive: str = "cuboid"
    class_count: int = 3

    def __post_init__(self):
        lo, hi = self.n_objects
        if not (isinstance(lo, int) and isinstance(hi, int) and 2 <= lo <= hi):
            raise GenerationError("n_objects must be an int range with lo >= 2")
        lo, hi = self.points_per_object
        if not (isinstance(lo, int) and isinstance(hi, int) and 8 <= lo <= hi):
            raise GenerationError("points_per_object must be an int range "
                                  "with lo >= 8")
        if not 0.0 <= self.overlap_factor <= 1.0:
            raise GenerationError("overlap_factor must lie in [0, 1]")
        if not 0.0 <= self.color_separability <= 1.0:
            raise GenerationError("color_separability must lie in [0, 1]")
        if self.n_background < 0:
            raise GenerationError("n_background must be non-negative")
        if self.primitive not in ("cuboid", "ellipsoid", "mixed"):
            raise GenerationError(f"unknown primitive {self.primitive!r}")
        if self.class_count < 1:
            raise GenerationError("class_count must be positive")


def _palette(n, separability):
    """Distinct hues blended toward mid-gray as separability drops."""
    cols = np.empty((n, 3))
    for k in range(n):
        h = (0.12 + 0.61803398875 * k) % 1.0
        cols[k] = colorsys.hsv_to_rgb(h, 0.85, 0.9)
    return 0.5 + separability * (cols - 0.5)


def _sample_object(rng, center, half, primitive, n):
    if primitive == "mixed":
        primitive = "cuboid" if rng.random() < 0.5 else "ellipsoid"
    if primitive == "cuboid":
        return rng.uniform(center - half, center + half, (n, 3))
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.random(n) ** (1.0 / 3.0)
    return center + u * r[:, None] * half


def _quantize(positions, colors):
    """Snap to the file grid so that disk round-trips are exact."""
    pos = positions.astype(np.float32).astype(np.float64)
    col = np.rint(np.clip(colors, 0.0, 1.0) * 255.0) / 255.0
    return pos, col


def generate_scene(spec):
    """Generate a seeded synthetic scene.

    Returns
    -------
    (PointCloud, BoxSet, SuperpointPartition, GroundTruth)

    Box k is the tight bounding box of object k's points, carries instance
    id k and class id k mod class_count, so labels, boxes and ground truth
    share one indexing.  Superpoints come from a voxel hash (0.25 m) over
    position and binned color.
    """
    rng = np.random.default_rng(spec.seed)
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    palette = _palette(n_obj, spec.color_separability)

    pos_chunks = []
    col_chunks = []
    inst_chunks = []
    x_cursor = 0.0
    prev_width = None
    for k in range(n_obj):
        extent = rng.uniform(0.5, 1.4, 3)
        half = extent / 2.0
        if prev_width is None:
            x_min = 0.0
        elif spec.overlap_factor > 0.0:
            depth = spec.overlap_factor * rng.uniform(0.3, 0.7) \
                * min(prev_width, extent[0])
            x_min = x_cursor - depth
        else:
            x_min = x_cursor + 0.15 + rng.uniform(0.0, 0.1)
        center = np.array([
            x_min + half[0],
            rng.uniform(-0.2, 0.2),
            rng.uniform(-0.2, 0.2),
        ])
        n_pts = int(rng.integers(spec.points_per_object[0],
                                 spec.points_per_object[1] + 1))
        pts = _sample_object(rng, center, half, spec.primitive, n_pts)
        cols = palette[k] + rng.normal(0.0, 0.02, (n_pts, 3))
        pos_chunks.append(pts)
        col_chunks.append(cols)
        inst_chunks.append(np.full(n_pts, k, dtype=np.int64))
        x_cursor = x_min + extent[0]
        prev_width = extent[0]

    positions = np.vstack(pos_chunks)
    colors = np.vstack(col_chunks)
    instances = np.concatenate(inst_chunks)
    positions, colors = _quantize(positions, colors)

    class_ids = instances % spec.class_count
    boxes = BoxSet([
        AABB(positions[instances == k].min(axis=0),
             positions[instances == k].max(axis=0),
             int(k % spec.class_count), int(k))
        for k in range(n_obj)
    ])

    if spec.n_background:
        lo = positions.min(axis=0) - 0.8
        hi = positions.max(axis=0) + 0.8
        bg = []
        remaining = spec.n_background
        for _ in range(1000):
            cand = rng.uniform(lo, hi, (max(remaining * 2, 16), 3))
            cand = cand.astype(np.float32).astype(np.float64)
            outside = ~box_membership(cand, boxes.mins, boxes.maxs).any(axis=1)
            cand = cand[outside][:remaining]
            if len(cand):
                bg.append(cand)
                remaining -= len(cand)
            if remaining == 0:
                break
        if remaining:
            raise GenerationError("could not place background outside boxes")
        bg = np.vstack(bg)
        bg_cols = np.rint(rng.uniform(0.2, 0.8, (len(bg), 3)) * 255.0) / 255.0
        positions = np.vstack([positions, bg])
        colors = np.vstack([colors, bg_cols])
        instances = np.concatenate([instances,
                                    np.full(len(bg), -1, dtype=np.int64)])
        class_ids = np.concatenate([class_ids,
                                    np.full(len(bg), -1, dtype=np.int64)])

    vox = np.floor(positions / _VOXEL_SIZE).astype(np.int64)
    cbin = np.minimum((colors * _COLOR_BINS).astype(np.int64), _COLOR_BINS - 1)
    _, inverse = np.unique(np.hstack([vox, cbin]), axis=0, return_inverse=True)
    superpoints = SuperpointPartition.from_labels(inverse)

    cloud = PointCloud(positions, colors)
    gt = GroundTruth(instances, np.where(instances >= 0, class_ids, -1))
    return cloud, boxes, superpoints, gt
