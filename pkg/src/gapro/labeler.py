"""Pseudo-label generation.

Points under at most one box are labelled directly: members of a determined
region get mask 1, mean 1, variance 0 for the owning instance, and points in
no box belong to no instance.  Points under two or more boxes are resolved
per competing pair.  The default mode fits a GP to the pair's determined
regions (labels 1 for the first instance, 0 for the second) and assigns each
undetermined region by thresholding the probability that its latent value
favors the first instance; the posterior mean and variance are stored with
the winning and losing masks so a consumer can weight or gate the labels.

Alternative modes keep the same determined handling and replace only the
pair rule: ``gp_regress`` thresholds the posterior mean at 0.5 without the
probit step, ``smaller_box`` awards the overlap to the smaller box,
``linear`` fits a logistic classifier on the same training data, and
``ignore`` drops undetermined regions altogether.
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from gapro.errors import DegeneratePairError
from gapro.gp import (
    GpHyperparams,
    gp_condition,
    marginal_log_likelihood,
    optimize_hyperparams,
    probit_squash,
)
from gapro.ingest import InstanceLabels, PseudoLabels
from gapro.partition import (
    KIND_DETERMINED,
    KIND_UNDETERMINED,
    build_region_table,
    pair_training_data,
)

MODES = ("gp_classify", "gp_regress", "ignore", "smaller_box", "linear")
GRANULARITIES = ("point", "superpoint")

# default training cap at point granularity; superpoint tables are small
# enough to use every determined region
_POINT_CAP_DEFAULT = 800

_LINEAR_STEPS = 200
_LINEAR_LR = 0.1

_HALF32 = np.float32(0.5)
_ONE32 = np.float32(1.0)


@dataclass
class LabelerConfig:
    """Knobs for :func:`generate_pseudo_labels`.

    ``point_cap`` limits the GP training set per pair: ``None`` picks the
    granularity default (800 at point level, unlimited at superpoint level)
    and 0 disables the cap.  ``threads`` defaults to the GAPRO_THREADS
    environment variable, or 1.
    """

    mode: str = "gp_classify"
    granularity: str = "superpoint"
    length_scale: float = 0.5
    output_scale: float = 1.0
    jitter: float = 1e-4
    learnable: bool = True
    opt_iters: int = 50
    lr: float = 0.1
    threshold: float = 0.5
    point_cap: int = None
    threads: int = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.opt_iters < 0:
            raise ValueError("opt_iters must be non-negative")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.point_cap is not None and self.point_cap < 0:
            raise ValueError("point_cap must be non-negative")
        if self.threads is not None and self.threads < 1:
            raise ValueError("threads must be positive")

    def gp_params(self):
        return GpHyperparams(self.length_scale, self.output_scale, self.jitter)

    def effective_cap(self):
        if self.point_cap is None:
            return _POINT_CAP_DEFAULT if self.granularity == "point" else 0
        return self.point_cap

    def effective_threads(self):
        if self.threads is not None:
            return self.threads
        env = os.environ.get("GAPRO_THREADS", "")
        try:
            return max(1, int(env))
        except ValueError:
            return 1


def _smaller_box_rule(boxes, i, j):
    """True when box i wins the overlap; ties go to the canonical first."""
    return boxes.volumes[i] <= boxes.volumes[j]


def _fit_linear(x, f):
    """Plain-gradient logistic regression from zero weights."""
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(_LINEAR_STEPS):
        r = expit(x @ w + b) - f
        w -= _LINEAR_LR * (x.T @ r) / len(f)
        b -= _LINEAR_LR * float(r.mean())
    return w, b


def _nudge_half(e32):
    """Move posterior means off exactly 0.5 so the mirrored loser mean
    (1 - e) lands strictly below the mask threshold."""
    at_half = e32 == _HALF32
    if at_half.any():
        e32 = e32.copy()
        e32[at_half] = np.nextafter(_HALF32, _ONE32)
    return e32


def _resolve_pair(table, boxes, pair, config):
    """Label the undetermined regions of one competing pair.

    Returns (region_rows, decisions, mean_i, mean_j, variance, diag) where
    decisions[r] is True when the region goes to the canonical first box.
    All statistics are float32, with mean_j mirrored from mean_i.
    """
    i, j = pair
    diag = {
        "pair": [int(table.instance_ids[i]), int(table.instance_ids[j])],
        "mode": config.mode,
    }
    cap = config.effective_cap()
    try:
        x, f, xs, rows = pair_training_data(table, pair, cap)
    except DegeneratePairError:
        rows = np.flatnonzero((table.kind == KIND_UNDETERMINED)
                              & (table.pair[:, 0] == i) & (table.pair[:, 1] == j))
        warnings.warn(
            f"pair {diag['pair']} has no determined data on one side; "
            "falling back to the smaller-box rule")
        d = np.full(len(rows), _smaller_box_rule(boxes, i, j))
        mean_i = d.astype(np.float32)
        diag.update(mode="smaller_box_fallback", n_query=len(rows))
        return rows, d, mean_i, _ONE32 - mean_i, np.zeros(len(rows), np.float32), diag

    diag.update(n_train=len(f), n_query=len(rows))

    if config.mode == "smaller_box":
        d = np.full(len(rows), _smaller_box_rule(boxes, i, j))
        mean_i = d.astype(np.float32)
        return rows, d, mean_i, _ONE32 - mean_i, np.zeros(len(rows), np.float32), diag

    if config.mode == "linear":
        w, b = _fit_linear(x, f)
        p32 = expit(xs @ w + b).astype(np.float32)
        d = p32 >= config.threshold
        var = np.zeros(len(rows), np.float32)
        return rows, d, np.clip(p32, 0.0, 1.0), np.clip(_ONE32 - p32, 0.0, 1.0), var, diag

    params = config.gp_params()
    if config.learnable:
        params = optimize_hyperparams(x, f, params, config.opt_iters, config.lr)
    post = gp_condition(x, f, xs, params)
    diag.update(
        length_scale=params.length_scale,
        output_scale=params.output_scale,
        mll=marginal_log_likelihood(x, f, params),
    )

    e32 = _nudge_half(post.mean.astype(np.float32))
    v32 = post.variance.astype(np.float32)
    if config.mode == "gp_classify" and config.threshold != 0.5:
        # probability that the latent favors the first instance, i.e. that
        # f* exceeds the class midpoint 1/2
        score = probit_squash(post.mean - 0.5, post.variance)
        d = np.asarray(score >= config.threshold)
    else:
        # at the default threshold the probit rule reduces to the stored
        # mean against 1/2; deciding on the float32 value keeps the mask
        # consistent with the archived statistics
        d = e32 >= _HALF32
    mean_i = np.clip(e32, 0.0, 1.0)
    mean_j = np.clip(_ONE32 - e32, 0.0, 1.0)
    return rows, d, mean_i, mean_j, v32, diag


def generate_pseudo_labels(cloud, boxes, config=None, superpoints=None,
                           features=None, diagnostics=None):
    """Generate per-instance pseudo labels for one scene.

    Parameters
    ----------
    cloud : PointCloud
    boxes : BoxSet
    config : LabelerConfig, defaults to LabelerConfig().
    superpoints : SuperpointPartition, required at superpoint granularity.
    features : FeatureMatrix, optional
        Replaces the raw [position ; color] region features.
    diagnostics : list, optional
        When given, one dict per competing pair is appended in pair order
        (training sizes, fitted hyperparameters, final marginal log
        likelihood).

    Returns
    -------
    PseudoLabels with one entry per box, in box order.  A candidate point of
    instance k always lies inside box k; a masked point is masked by at most
    one instance.
    """
    config = config or LabelerConfig()
    if config.granularity == "superpoint" and superpoints is None:
        raise ValueError("superpoint granularity requires a superpoint partition")

    table = build_region_table(
        cloud, boxes,
        superpoints if config.granularity == "superpoint" else None,
        features)
    inbox = table.point_membership
    n_inst = len(boxes)
    chunks = [[] for _ in range(n_inst)]  # (indices, mask, mean, variance)

    for k in range(n_inst):
        rows = np.flatnonzero((table.kind == KIND_DETERMINED) & (table.owner == k))
        if not len(rows):
            continue
        pts = np.concatenate([table.points_of(r) for r in rows])
        pts = pts[inbox[pts, k]]  # clip superpoint stragglers to the box
        if len(pts):
            chunks[k].append((pts,
                              np.ones(len(pts), dtype=bool),
                              np.ones(len(pts), dtype=np.float32),
                              np.zeros(len(pts), dtype=np.float32)))

    pairs = table.undetermined_pairs()
    diags = [None] * len(pairs)
    results = [None] * len(pairs)
    if config.mode != "ignore" and pairs:
        threads = config.effective_threads()

        def work(idx):
            return _resolve_pair(table, boxes, pairs[idx], config)

        if threads > 1 and len(pairs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, range(len(pairs))))
        else:
            results = [work(idx) for idx in range(len(pairs))]

        for idx, (i, j) in enumerate(pairs):
            rows, d, mean_i, mean_j, var, diag = results[idx]
            diags[idx] = diag
            for r, dec, mi, mj, vv in zip(rows, d, mean_i, mean_j, var):
                pts = table.points_of(r)
                pts_i = pts[inbox[pts, i]]
                pts_j = pts[inbox[pts, j]]
                if len(pts_i):
                    chunks[i].append((pts_i,
                                      np.full(len(pts_i), dec, dtype=bool),
                                      np.full(len(pts_i), mi, dtype=np.float32),
                                      np.full(len(pts_i), vv, dtype=np.float32)))
                if len(pts_j):
                    chunks[j].append((pts_j,
                                      np.full(len(pts_j), not dec, dtype=bool),
                                      np.full(len(pts_j), mj, dtype=np.float32),
                                      np.full(len(pts_j), vv, dtype=np.float32)))

    if diagnostics is not None:
        diagnostics.extend(d for d in diags if d is not None)

    instances = []
    for k in range(n_inst):
        if chunks[k]:
            idx = np.concatenate([c[0] for c in chunks[k]])
            order = np.argsort(idx)
            instances.append(InstanceLabels(
                boxes.class_ids[k],
                idx[order],
                np.concatenate([c[1] for c in chunks[k]])[order],
                np.concatenate([c[2] for c in chunks[k]])[order],
                np.concatenate([c[3] for c in chunks[k]])[order]))
        else:
            instances.append(InstanceLabels(
                boxes.class_ids[k],
                np.empty(0, dtype=np.int64),
                np.empty(0, dtype=bool),
                np.empty(0, dtype=np.float32),
                np.empty(0, dtype=np.float32)))
    return PseudoLabels(cloud.count, instances)


def self_train_relabel(cloud, boxes, features, config=None, superpoints=None,
                       diagnostics=None):
    """Regenerate pseudo labels using learned per-point features.

    This is the self-training refinement: once a segmenter has been trained
    on the first-round labels, its point embeddings replace the raw
    [position ; color] features and the undetermined regions are resolved
    again in that space.  Determined labels are unchanged by construction.
    """
    if features is None:
        raise ValueError("self_train_relabel requires a feature matrix")
    return generate_pseudo_labels(cloud, boxes, config, superpoints,
                                  features, diagnostics)
