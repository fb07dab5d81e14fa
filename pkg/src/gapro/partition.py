"""Region tables: who is inside which box, and which pairs compete.

A region is a point or a superpoint depending on granularity.  Regions in no
box are background, regions in exactly one box are determined, and regions
in two or more boxes are undetermined.  Undetermined regions are resolved
per competing pair; regions under three or more boxes are folded onto the
dominant pair, the one whose box intersection holds the most points.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial.distance import cdist

from gapro._kernels import box_membership
from gapro.errors import DegeneratePairError

KIND_BACKGROUND = 0
KIND_DETERMINED = 1
KIND_UNDETERMINED = 2


def point_box_membership(cloud, boxes):
    """Inclusive point-in-box matrix of shape (N, K)."""
    return box_membership(cloud.positions, boxes.mins, boxes.maxs)


def select_dominant_pair(members, pair_counts, instance_ids):
    """Pick the competing pair for a region covered by 3+ boxes.

    Parameters
    ----------
    members : sequence of box indices covering the region, length >= 2.
    pair_counts : (K, K) array
        pair_counts[i, j] is the number of points inside boxes i and j both.
    instance_ids : (K,) array of scene instance ids.

    Returns
    -------
    (i, j) box indices with instance_ids[i] < instance_ids[j].  Ties on the
    intersection count go to the lexicographically smallest instance id
    pair, which makes the choice invariant to box order.
    """
    members = sorted(int(m) for m in members)
    if len(members) < 2:
        raise ValueError("need at least two covering boxes")
    best = None
    best_key = None
    for a, b in combinations(members, 2):
        i, j = (a, b) if instance_ids[a] < instance_ids[b] else (b, a)
        key = (-int(pair_counts[i, j]), int(instance_ids[i]), int(instance_ids[j]))
        if best_key is None or key < best_key:
            best_key = key
            best = (i, j)
    return best


@dataclass
class RegionTable:
    """Per-region geometry for one scene.

    Attributes
    ----------
    granularity : "point" or "superpoint".
    features : (R, d) float64 region features (means over member points).
    membership : (R, K) bool region-in-box matrix.
    kind : (R,) int8, one of the KIND_* constants.
    owner : (R,) int64 box index for determined regions, else -1.
    pair : (R, 2) int64 canonical competing box indices, else -1.
    sizes : (R,) int64 member point counts.
    point_membership : (N, K) bool point-level containment.
    point_region : (N,) int64 region index of each point.
    instance_ids : (K,) int64 copied from the box set.
    """

    granularity: str
    features: np.ndarray
    membership: np.ndarray
    kind: np.ndarray
    owner: np.ndarray
    pair: np.ndarray
    sizes: np.ndarray
    point_membership: np.ndarray
    point_region: np.ndarray
    instance_ids: np.ndarray
    _groups: list = None

    @property
    def n_regions(self):
        return len(self.kind)

    def points_of(self, r):
        """Indices of the points belonging to region ``r``."""
        if self.granularity == "point":
            return np.array([r], dtype=np.int64)
        return self._groups[r]

    def undetermined_pairs(self):
        """Canonical competing pairs, sorted by their instance id pair."""
        rows = np.flatnonzero(self.kind == KIND_UNDETERMINED)
        pairs = {(int(self.pair[r, 0]), int(self.pair[r, 1])) for r in rows}
        return sorted(pairs, key=lambda p: (int(self.instance_ids[p[0]]),
                                            int(self.instance_ids[p[1]])))


def _region_reduce(assignment, n_regions, values):
    """Per-region column sums of ``values`` grouped by ``assignment``."""
    out = np.empty((n_regions, values.shape[1]), dtype=np.float64)
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(assignment, weights=values[:, c],
                                minlength=n_regions)
    return out


def build_region_table(cloud, boxes, superpoints=None, features=None):
    """Build the region table for a scene.

    Features are [position ; color] (d = 6) unless an external feature
    matrix is supplied, in which case its rows are used instead.  Superpoint
    regions average their member rows and belong to a box when a strict
    majority of their points are inside it.
    """
    n = cloud.count
    if superpoints is not None and superpoints.count != n:
        raise ValueError("superpoint assignment length must match point count")
    if features is not None and features.count != n:
        raise ValueError("feature matrix rows must match point count")

    inbox = point_box_membership(cloud, boxes)
    if features is not None:
        point_feats = features.values.astype(np.float64)
    else:
        point_feats = np.hstack([cloud.positions, cloud.colors])

    groups = None
    if superpoints is None:
        granularity = "point"
        assignment = np.arange(n, dtype=np.int64)
        region_feats = point_feats
        membership = inbox
        sizes = np.ones(n, dtype=np.int64)
    else:
        granularity = "superpoint"
        assignment = superpoints.assignment
        n_regions = superpoints.superpoint_count
        sizes = np.bincount(assignment, minlength=n_regions)
        region_feats = _region_reduce(assignment, n_regions, point_feats)
        region_feats /= sizes[:, None]
        counts = np.empty((n_regions, len(boxes)), dtype=np.int64)
        for k in range(len(boxes)):
            counts[:, k] = np.bincount(assignment[inbox[:, k]], minlength=n_regions)
        # strict majority, exact in integers
        membership = 2 * counts > sizes[:, None]
        order = np.argsort(assignment, kind="stable")
        bounds = np.searchsorted(assignment[order], np.arange(1, n_regions))
        groups = np.split(order, bounds)

    n_regions = len(membership)
    n_boxes = membership.sum(axis=1)
    kind = np.full(n_regions, KIND_BACKGROUND, dtype=np.int8)
    kind[n_boxes == 1] = KIND_DETERMINED
    kind[n_boxes >= 2] = KIND_UNDETERMINED

    owner = np.full(n_regions, -1, dtype=np.int64)
    det = kind == KIND_DETERMINED
    owner[det] = np.argmax(membership[det], axis=1)

    pair = np.full((n_regions, 2), -1, dtype=np.int64)
    undet = np.flatnonzero(kind == KIND_UNDETERMINED)
    if len(undet):
        pair_counts = inbox.T.astype(np.int64) @ inbox.astype(np.int64)
        ids = boxes.instance_ids
        for r in undet:
            members = np.flatnonzero(membership[r])
            if len(members) == 2:
                a, b = members
                pair[r] = (a, b) if ids[a] < ids[b] else (b, a)
            else:
                pair[r] = select_dominant_pair(members, pair_counts, ids)

    return RegionTable(
        granularity=granularity,
        features=region_feats,
        membership=membership,
        kind=kind,
        owner=owner,
        pair=pair,
        sizes=sizes,
        point_membership=inbox,
        point_region=assignment,
        instance_ids=boxes.instance_ids.copy(),
        _groups=groups,
    )


@dataclass
class OverlapStats:
    """Determined / undetermined composition of a region table."""

    granularity: str
    n_regions: int
    n_background: int
    n_determined: int
    n_undetermined: int
    fraction_two: float
    membership_histogram: dict

    def to_dict(self):
        return {
            "granularity": self.granularity,
            "n_regions": self.n_regions,
            "n_background": self.n_background,
            "n_determined": self.n_determined,
            "n_undetermined": self.n_undetermined,
            "fraction_two": self.fraction_two,
            "membership_histogram": {str(k): v for k, v in
                                     sorted(self.membership_histogram.items())},
        }


def overlap_statistics(table):
    """Summarize a region table.

    ``fraction_two`` is the share of undetermined regions covered by exactly
    two boxes; it is NaN when there are no undetermined regions.
    """
    n_boxes = table.membership.sum(axis=1)
    n_undet = int((n_boxes >= 2).sum())
    hist = {int(k): int(v) for k, v in zip(*np.unique(n_boxes, return_counts=True))}
    fraction_two = float(hist.get(2, 0)) / n_undet if n_undet else float("nan")
    return OverlapStats(
        granularity=table.granularity,
        n_regions=table.n_regions,
        n_background=int((n_boxes == 0).sum()),
        n_determined=int((n_boxes == 1).sum()),
        n_undetermined=n_undet,
        fraction_two=fraction_two,
        membership_histogram=hist,
    )


def pair_training_data(table, pair, point_cap=None):
    """Assemble GP training and query sets for one competing pair.

    Training inputs are the determined regions owned by either box of the
    pair, labelled 1.0 for the first box and 0.0 for the second; query
    inputs are the undetermined regions assigned to the pair.  When
    ``point_cap`` is a positive integer and the training side is larger, it
    is thinned to the cap by walking (query, training) feature distances in
    ascending order and keeping each training region that first enters the
    union, so every survivor is among the nearest of some query region.

    Returns
    -------
    (train_x, train_f, query_x, query_regions)

    Raises
    ------
    DegeneratePairError
        If either box of the pair owns no determined region.
    ValueError
        If the pair has no undetermined regions (caller bug).
    """
    i, j = int(pair[0]), int(pair[1])
    det = table.kind == KIND_DETERMINED
    rows_i = np.flatnonzero(det & (table.owner == i))
    rows_j = np.flatnonzero(det & (table.owner == j))
    undet = np.flatnonzero((table.kind == KIND_UNDETERMINED)
                           & (table.pair[:, 0] == i) & (table.pair[:, 1] == j))
    if len(undet) == 0:
        raise ValueError(f"pair ({i}, {j}) has no undetermined regions")
    if len(rows_i) == 0 or len(rows_j) == 0:
        side = i if len(rows_i) == 0 else j
        raise DegeneratePairError(
            f"box {side} of pair ({i}, {j}) has no determined regions")

    train_rows = np.concatenate([rows_i, rows_j])
    train_rows.sort()
    if point_cap is not None and point_cap > 0 and len(train_rows) > point_cap:
        dist = cdist(table.features[undet], table.features[train_rows])
        n_t = dist.shape[1]
        # ascending distance, ties to the lower training index
        order = np.lexsort((np.tile(np.arange(n_t), dist.shape[0]), dist.ravel()))
        keep = np.zeros(n_t, dtype=bool)
        kept = 0
        for pos in order:
            t = pos % n_t
            if not keep[t]:
                keep[t] = True
                kept += 1
                if kept == point_cap:
                    break
        train_rows = train_rows[keep]

    train_x = table.features[train_rows]
    train_f = (table.owner[train_rows] == i).astype(np.float64)
    return train_x, train_f, table.features[undet], undet
