"""Verification accuracy, embedding-geometry statistics, and gradient diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import nn
from .losses import global_softmax_grad
from .regularizers import StackedEmbeddings


@dataclass
class RoundMetrics:
    round: int
    mean_local_loss: float
    combined_objective: float
    verification_accuracy: float
    cross_client_max_cos: float
    within_client_max_cos: float
    mean_anchor_feature_dist: float

    def to_dict(self) -> dict:
        return asdict(self)


def best_threshold_accuracy(similarities: np.ndarray, same: np.ndarray) -> float:
    """Best accuracy over all thresholds on 'same iff similarity >= t'.

    Sweeps every midpoint of consecutive sorted similarities plus the two
    extremes, so the result depends only on the ordering of similarities.
    """
    similarities = np.asarray(similarities, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if similarities.size == 0 or similarities.shape != same.shape:
        raise ValueError("need matching, nonempty similarity/label arrays")
    order = np.sort(np.unique(similarities))
    midpoints = (order[:-1] + order[1:]) / 2.0
    thresholds = np.concatenate([[order[0] - 1.0], midpoints, [order[-1] + 1.0]])
    pred = similarities[None, :] >= thresholds[:, None]
    accuracy = (pred == same[None, :]).mean(axis=1)
    return float(accuracy.max())


def pair_cosines(params: nn.BackboneParams, x: np.ndarray, pairs) -> np.ndarray:
    """Cosine similarity of embedded sample pairs (pairs index into x)."""
    feats = nn.forward(params, x)
    norms = np.linalg.norm(feats, axis=1)
    norms[norms == 0.0] = 1.0
    feats = feats / norms[:, None]
    return (feats[pairs.idx_a] * feats[pairs.idx_b]).sum(axis=1)


def verification_accuracy(params: nn.BackboneParams, x: np.ndarray, pairs) -> float:
    """Best-threshold accuracy on same/different-identity pairs."""
    if len(pairs) == 0:
        raise ValueError("empty pair list")
    return best_threshold_accuracy(pair_cosines(params, x, pairs), pairs.same)


@dataclass
class SimilarityStats:
    cross_client_max_cos: float
    within_client_max_cos: float
    cross_hist: np.ndarray    # 50 counts over [-1, 1]
    within_hist: np.ndarray
    bin_edges: np.ndarray
    excluded_zero_norm: int


def embedding_similarity_stats(
    emb: StackedEmbeddings, bins: int = 50, class_of: np.ndarray | None = None
) -> SimilarityStats:
    """Pairwise column cosines, split into within-client and cross-client.

    When ``class_of`` gives an identity per column, pairs of columns naming
    the same identity (duplicate columns under shared ownership) are
    skipped -- after merging those are identical by construction and would
    pin the cross-client max at 1.
    """
    if emb.num_columns < 2:
        raise ValueError("need at least 2 columns")
    norms = np.linalg.norm(emb.W, axis=0)
    keep = norms > 0.0
    excluded = int((~keep).sum())
    w = emb.W[:, keep] / norms[keep]
    clients = emb.client_of[keep]
    cos = w.T @ w
    iu, ju = np.triu_indices(w.shape[1], k=1)
    distinct = np.ones(iu.shape, dtype=bool)
    if class_of is not None:
        cls = np.asarray(class_of)[keep]
        distinct = cls[iu] != cls[ju]
    is_cross = clients[iu] != clients[ju]
    cross = cos[iu, ju][is_cross & distinct]
    within = cos[iu, ju][~is_cross & distinct]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    # floating error can push a cosine a hair past +/-1
    cross_hist, _ = np.histogram(np.clip(cross, -1, 1), bins=edges)
    within_hist, _ = np.histogram(np.clip(within, -1, 1), bins=edges)
    return SimilarityStats(
        cross_client_max_cos=float(cross.max()) if cross.size else float("nan"),
        within_client_max_cos=float(within.max()) if within.size else float("nan"),
        cross_hist=cross_hist,
        within_hist=within_hist,
        bin_edges=edges,
        excluded_zero_norm=excluded,
    )


def mean_anchor_feature_distance(server, clients) -> float:
    """Mean distance between each sample's feature and its own class embedding."""
    total, count = 0.0, 0
    for cl in clients:
        if cl.n_samples == 0:
            continue
        feats = nn.forward(server.theta, cl.x)
        cols = server.embeddings.W[:, server.head_slices[cl.client_id]]
        total += float(np.linalg.norm(cols[:, cl.y_local].T - feats, axis=1).sum())
        count += cl.n_samples
    return total / count if count else float("nan")


@dataclass
class DirectionReport:
    """Comparison of the correction gradient against its two reference forms.

    For a probe sample whose target embedding is set equal to its feature,
    the embedding-anchored correction gradient and its feature-anchored form
    coincide; both are positive multiples of the probe direction, as is the
    centralized full-softmax gradient on the same column.
    """

    correction_grads: np.ndarray       # (n_cross, d) embedding-anchored form
    feature_form_grads: np.ndarray     # (n_cross, d) feature-anchored form
    global_grads: np.ndarray           # (n_cross, d) centralized softmax gradient
    cross_columns: np.ndarray
    max_correction_vs_feature_diff: float
    feature_vs_global_ratios: np.ndarray
    direction_cosines: np.ndarray      # correction vs centralized directions


def grad_direction_diagnostic(server, clients, cfg, client_id: int = 0, sample: int = 0) -> DirectionReport:
    """Evaluate the correction geometry on one probe sample.

    The probe replaces the sample's own class embedding with its feature and
    then compares, per cross-client column: (a) the stop-gradient correction
    term, (b) the same term with the feature substituted for the anchor, and
    (c) the centralized softmax gradient over the full class space.
    """
    cl = clients[client_id]
    feature = nn.forward(server.theta, cl.x[sample])
    label = int(cl.y_local[sample])
    w = server.embeddings.W.copy()
    own = server.head_slices[cl.client_id]
    anchor_col = own.start + label
    w[:, anchor_col] = feature

    client_of = server.embeddings.client_of
    cross = np.flatnonzero(client_of != cl.client_id)
    anchor = w[:, anchor_col]

    # (a) embedding-anchored: exp(w_j . a) a / (exp(a . a) + sum_cross exp(w . a))
    exps_a = np.exp(w[:, cross].T @ anchor)
    denom_a = np.exp(anchor @ anchor) + exps_a.sum()
    correction = (exps_a / denom_a)[:, None] * anchor[None, :]

    # (b) feature-anchored: same expression with the raw feature as the anchor
    exps_f = np.exp(w[:, cross].T @ feature)
    denom_f = np.exp(anchor @ feature) + exps_f.sum()
    feature_form = (exps_f / denom_f)[:, None] * feature[None, :]

    # (c) centralized softmax over the full stacked class space
    full = global_softmax_grad(w, feature, _global_index(server, cl, label))
    global_grads = full.grad_embeddings[:, cross].T

    def _mag(g):
        return np.linalg.norm(g, axis=1)

    ratios = _mag(feature_form) / _mag(global_grads)
    cosines = np.array(
        [
            float(a @ c / (np.linalg.norm(a) * np.linalg.norm(c)))
            for a, c in zip(correction, global_grads)
        ]
    )
    return DirectionReport(
        correction_grads=correction,
        feature_form_grads=feature_form,
        global_grads=global_grads,
        cross_columns=cross,
        max_correction_vs_feature_diff=float(np.abs(correction - feature_form).max()),
        feature_vs_global_ratios=ratios,
        direction_cosines=cosines,
    )


def _global_index(server, client, label: int) -> int:
    return server.head_slices[client.client_id].start + label


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    worst_index: tuple
    passed: bool


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-5,
) -> FiniteDiffReport:
    """Central differences per coordinate against an analytic gradient.

    Relative error uses max(1, |a| + |b|) as the denominator so tiny
    gradients are compared absolutely.
    """
    if h <= 0.0:
        raise ValueError("h must be > 0")
    x0 = np.asarray(x0, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != x0.shape:
        raise ValueError("analytic_grad shape must match x0")
    worst, worst_idx = 0.0, ()
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xp[idx] += h
        fp = f(xp)
        xp[idx] -= 2 * h
        fm = f(xp)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value near index {idx}")
        numeric = (fp - fm) / (2 * h)
        a = analytic_grad[idx]
        rel = abs(numeric - a) / max(1.0, abs(numeric) + abs(a))
        if rel > worst:
            worst, worst_idx = rel, idx
    return FiniteDiffReport(max_rel_err=float(worst), worst_index=worst_idx, passed=worst < tol)
