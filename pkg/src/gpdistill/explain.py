"""Explanations and evaluation on top of a distilled GP.

Everything here reads a frozen predictor/mapper/store:

* :func:`knn_explain` — rank inducing instances by learned-kernel similarity
  to a test instance, in the space of the predictor's winning head.
* :func:`contribution_maps` — decompose one similarity value into per-cell
  contributions on both instances' spatial grids.  The branch feature of a
  conv mapper is f = leaky(a / ‖a‖) with a the sum-pooled maps z, so

      f¹·f² = Σ_c Λ¹_c Λ²_c a¹_c a²_c / (‖a¹‖‖a²‖),   Λ_c = 1 or α,

  and distributing a¹_c = Σ_ij z¹_cij over cells yields a map on x1 whose
  cells sum back to the similarity exactly; symmetrically for x2.
* :func:`faithfulness` — per-head Pearson between predictor outputs and GP
  means, plus argmax accuracies of both.
* :func:`dataset_debug` — the label-noise hunt: repeatedly take the next
  misclassified test instance and surface its most similar not-yet-shown
  training instance; corrupted labels surface early when the kernel is
  faithful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError
from .gpcore import GpHyper, InducingStore, forward_gp
from .nets import KernelMapper, Predictor, forward_mapper, forward_predictor, \
    mapper_internals
from .numkit import pearson

__all__ = [
    "DebugSession",
    "ExplanationReport",
    "FaithfulnessReport",
    "contribution_maps",
    "dataset_debug",
    "discovery_curve",
    "faithfulness",
    "knn_explain",
    "random_debug_order",
]

_CHUNK = 256


@dataclass
class ExplanationReport:
    """Nearest inducing instances of one test instance, optionally with maps."""

    test_index: int
    head: int
    neighbor_indices: np.ndarray
    similarities: np.ndarray
    contrib_on_test: list[np.ndarray] = field(default_factory=list)
    contrib_on_neighbor: list[np.ndarray] = field(default_factory=list)


@dataclass
class FaithfulnessReport:
    """How closely the GP means track the predictor on a probe set."""

    per_head_pearson: list[float]
    ann_accuracy: float
    gp_accuracy: float
    n_probe: int


@dataclass
class DebugSession:
    """Outcome of one dataset-debugging pass."""

    corrupted_mask: np.ndarray
    presentation_order: np.ndarray
    discovery_curve: np.ndarray


def knn_explain(x_test, store: InducingStore, km: KernelMapper, p: Predictor,
                k: int, test_index: int = -1,
                inducing_ds=None) -> ExplanationReport:
    """Top-k inducing instances by kernel similarity under the winning head.

    Ranking is by descending similarity with ties giving the lower inducing
    index.  Passing ``inducing_ds`` (the dataset the store was built from)
    additionally computes contribution maps between the test instance and
    each neighbor, which requires a conv mapper.
    """
    g = forward_predictor(p, x_test)
    if g.ndim != 1:
        raise ShapeError("knn_explain: one test instance at a time")
    if not 1 <= k <= store.n_rows:
        raise ParameterError(f"knn_explain: k must be in [1, {store.n_rows}]")
    head = int(np.argmax(g))
    f = forward_mapper(km, x_test, head)
    sims = store.u[head] @ f
    order = np.argsort(-sims, kind="stable")[:k]
    report = ExplanationReport(
        test_index=int(test_index),
        head=head,
        neighbor_indices=store.index_map[order].copy(),
        similarities=sims[order].copy(),
    )
    if inducing_ds is not None:
        instances = np.asarray(inducing_ds.instances, dtype=np.float64)
        for di in report.neighbor_indices:
            on_test, on_nb, _total = contribution_maps(
                x_test, instances[int(di)], km, head)
            report.contrib_on_test.append(on_test)
            report.contrib_on_neighbor.append(on_nb)
    return report


def contribution_maps(x1, x2, km: KernelMapper, head: int):
    """Split kernel_similarity(x1, x2) into per-cell maps on both instances.

    Returns (map_on_x1, map_on_x2, total); each map sums to ``total``.  Needs
    a conv mapper — the cells are the branch's pre-pooling spatial grid.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ShapeError("contribution_maps: instance shapes differ")
    i1 = mapper_internals(km, x1, head)
    i2 = mapper_internals(km, x2, head)
    z1, a1, n1 = i1["z"][0], i1["a"][0], float(i1["norms"][0])
    z2, a2, n2 = i2["z"][0], i2["a"][0], float(i2["norms"][0])
    lam1 = np.where(i1["b"][0] > 0, 1.0, km.alpha)
    lam2 = np.where(i2["b"][0] > 0, 1.0, km.alpha)
    scale = 1.0 / (n1 * n2)
    map1 = np.einsum("chw,c->hw", z1, lam1 * lam2 * a2) * scale
    map2 = np.einsum("chw,c->hw", z2, lam1 * lam2 * a1) * scale
    total = float(i1["f"][0] @ i2["f"][0])
    return map1, map2, total


def _forward_chunked(fn, x: np.ndarray) -> np.ndarray:
    return np.concatenate([fn(x[i:i + _CHUNK]) for i in range(0, x.shape[0], _CHUNK)],
                          axis=0)


def faithfulness(p: Predictor, store: InducingStore, km: KernelMapper,
                 probe_ds, hp: GpHyper) -> FaithfulnessReport:
    """Per-head Pearson of predictor vs GP mean over a probe set + accuracies.

    A head whose values have no variance on the probe (on either side) gets
    NaN rather than aborting the report.
    """
    x = np.asarray(probe_ds.instances, dtype=np.float64)
    labels = np.asarray(probe_ds.labels)
    g = _forward_chunked(lambda c: forward_predictor(p, c), x)
    mu = _forward_chunked(lambda c: forward_gp(c, store, km, hp).mean, x)
    rs = []
    for h in range(hp.n_heads):
        try:
            rs.append(pearson(g[:, h], mu[:, h]))
        except DegenerateInputError:
            rs.append(float("nan"))
    return FaithfulnessReport(
        per_head_pearson=rs,
        ann_accuracy=float(np.mean(np.argmax(g, axis=1) == labels)),
        gp_accuracy=float(np.mean(np.argmax(mu, axis=1) == labels)),
        n_probe=int(x.shape[0]),
    )


def discovery_curve(order: np.ndarray, corrupted_mask: np.ndarray) -> np.ndarray:
    """Cumulative corrupted-instance count along a presentation order."""
    order = np.asarray(order)
    mask = np.asarray(corrupted_mask, dtype=bool)
    if order.shape[0] != mask.shape[0]:
        raise ShapeError("discovery_curve: order and mask lengths differ")
    return np.cumsum(mask[order].astype(np.int64))


def random_debug_order(n: int, seed: int) -> np.ndarray:
    """Baseline presentation order: a seeded uniform permutation."""
    return np.random.default_rng(seed).permutation(n)


def dataset_debug(train_ds, test_ds, p: Predictor, store: InducingStore,
                  km: KernelMapper, corrupted_mask, seed: int = 0) -> DebugSession:
    """Surface suspicious training instances via misclassified test queries.

    Misclassified test instances (predictor argmax ≠ label) are cycled in
    ascending test-index order; each turn presents the training instance most
    similar to the current query — under the query's predicted head, using
    the store's kernel rows — among those not yet shown, until every training
    instance has been presented.  With no misclassified test instance at all,
    the order falls back to a seeded random permutation.
    """
    train_x = np.asarray(train_ds.instances, dtype=np.float64)
    m = train_x.shape[0]
    if m != store.n_rows:
        raise ParameterError("dataset_debug: store does not cover train_ds")
    mask = np.asarray(corrupted_mask, dtype=bool)
    if mask.shape != (m,):
        raise ShapeError("dataset_debug: corrupted_mask must flag every "
                         "training instance")
    test_x = np.asarray(test_ds.instances, dtype=np.float64)
    g = _forward_chunked(lambda c: forward_predictor(p, c), test_x)
    pred = np.argmax(g, axis=1)
    mis = np.flatnonzero(pred != np.asarray(test_ds.labels))

    if mis.size == 0:
        order_rows = np.random.default_rng(seed).permutation(m)
    else:
        sims_per_query = []
        for t in mis:
            f = forward_mapper(km, test_x[t], int(pred[t]))
            sims_per_query.append(store.u[int(pred[t])] @ f)
        shown = np.zeros(m, dtype=bool)
        order_rows = np.empty(m, dtype=np.int64)
        for step in range(m):
            sims = sims_per_query[step % mis.size]
            # argmax over unshown rows; ties resolve to the lower row
            r = int(np.argmax(np.where(shown, -np.inf, sims)))
            shown[r] = True
            order_rows[step] = r
    presentation = store.index_map[order_rows]
    return DebugSession(
        corrupted_mask=mask,
        presentation_order=presentation,
        discovery_curve=discovery_curve(presentation, mask),
    )
