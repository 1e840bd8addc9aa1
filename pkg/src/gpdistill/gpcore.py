"""Per-head Gaussian-process posterior over a store of inducing rows.

Each predictor head ℓ gets its own GP whose kernel is the dot product of
learned features: k(x, x') = f_ℓ(x)ᵀ f_ℓ(x').  With U the M×D matrix of
inducing-row features, v the M-vector of the predictor's head outputs at the
inducing instances, and G = UᵀU the cached Gram, the posterior at query
features u is

    mean = uᵀ (G + σ² I)⁻¹ Uᵀ v
    cov  = uᵀu − uᵀ (G + σ² I)⁻¹ G u

which are the M-space formulas k(u,·)(K + σ²I)⁻¹v and
k(u,u) − k(u,·)(K + σ²I)⁻¹k(·,u) pushed through to D-space, so no M×M
matrix is ever formed.

Training mode evaluates the same posterior on a *working copy* of the store
in which a requested batch of inducing rows is replaced by freshly computed
features, so that (on a tape — see :mod:`gpdistill.distill`) gradients can
flow into the kernel mapper through the inducing side as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lowrank
from .errors import NumericalError, ParameterError, ShapeError
from .nets import KernelMapper, Predictor, forward_mapper, forward_predictor

__all__ = [
    "EPS_COV",
    "GpHyper",
    "GpPosterior",
    "InducingStore",
    "forward_gp",
    "init_gp_params",
    "kernel_similarity",
    "posterior_from_features",
    "update_inducing_rows",
]

#: covariance floor used whenever a posterior covariance divides a loss term
EPS_COV = 1e-6

#: covariances this far below zero indicate a real inconsistency, not round-off
COV_NEG_TOL = -1e-9

#: chunk size for batched feature extraction over large inducing sets
_CHUNK = 256


@dataclass(frozen=True)
class GpHyper:
    """Hyperparameters shared by all per-head GPs.

    n_heads: number of predictor heads (one GP per head).
    kernel_dim: dimensionality D of the learned kernel features.
    n_inducing: number of inducing rows M.
    sigma_gp2: observation-noise variance σ² added to the kernel Gram (> 0).
    sigma_g2: variance of the predictor-output observation model (>= 0).
    """

    n_heads: int
    kernel_dim: int
    n_inducing: int
    sigma_gp2: float = 1.0
    sigma_g2: float = 0.0

    def __post_init__(self):
        if self.n_heads < 1:
            raise ParameterError("GpHyper: n_heads must be >= 1")
        if self.kernel_dim < 1:
            raise ParameterError("GpHyper: kernel_dim must be >= 1")
        if self.n_inducing < 1:
            raise ParameterError("GpHyper: n_inducing must be >= 1")
        if not np.isfinite(self.sigma_gp2) or self.sigma_gp2 <= 0.0:
            raise ParameterError("GpHyper: sigma_gp2 must be positive")
        if not np.isfinite(self.sigma_g2) or self.sigma_g2 < 0.0:
            raise ParameterError("GpHyper: sigma_g2 must be >= 0")


@dataclass
class GpPosterior:
    """Posterior mean/cov per query and head; shape (L,) or (B, L)."""

    mean: np.ndarray
    cov: np.ndarray


class InducingStore:
    """Per-head inducing-row features, target values, and Gram caches.

    u[h]: (M, D) kernel features of the inducing instances under head h.
    v[h]: (M,) predictor outputs of head h at the inducing instances.
    gram[h]: GramCache of u[h].
    index_map: (M,) dataset indices, row i of u corresponds to instance
        index_map[i] of the inducing dataset.
    """

    def __init__(self, u: list[np.ndarray], v: list[np.ndarray],
                 gram: list[lowrank.GramCache], index_map: np.ndarray):
        if not (len(u) == len(v) == len(gram)):
            raise ShapeError("InducingStore: per-head lists must align")
        m = index_map.shape[0]
        for uh, vh in zip(u, v):
            if uh.shape[0] != m or vh.shape[0] != m:
                raise ShapeError("InducingStore: row counts must match index_map")
        self.u = u
        self.v = v
        self.gram = gram
        self.index_map = np.asarray(index_map, dtype=np.int64)
        self._row_of = {int(ds): row for row, ds in enumerate(self.index_map)}

    @property
    def n_heads(self) -> int:
        return len(self.u)

    @property
    def n_rows(self) -> int:
        return self.index_map.shape[0]

    def rows_for(self, dataset_indices) -> np.ndarray:
        """Map dataset indices to store rows; unknown index raises KeyError."""
        rows = np.empty(len(dataset_indices), dtype=np.int64)
        for j, ds in enumerate(dataset_indices):
            key = int(ds)
            if key not in self._row_of:
                raise KeyError(f"no inducing row for dataset index {key}")
            rows[j] = self._row_of[key]
        return rows


def _clamp_cov(cov: np.ndarray) -> np.ndarray:
    """Clamp tiny negative round-off to 0; larger negatives are real errors."""
    low = float(np.min(cov)) if cov.size else 0.0
    if low < COV_NEG_TOL:
        raise NumericalError(
            f"posterior covariance {low} is negative beyond round-off tolerance"
        )
    return np.maximum(cov, 0.0)


def posterior_from_features(uq: np.ndarray, gram: np.ndarray, c: np.ndarray,
                            sigma_gp2: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean/cov for query features against one head's D-space state.

    uq: (B, D) query features; gram: (D, D) = UᵀU; c: (D,) = Uᵀv.
    Returns (mean (B,), raw cov (B,)) — cov is not clamped here.
    """
    d = gram.shape[0]
    s = gram + sigma_gp2 * np.eye(d)
    w = np.linalg.solve(s, c)
    mean = uq @ w
    t = np.linalg.solve(s, gram @ uq.T)
    quad = np.einsum("bd,db->b", uq, t)
    ufu = np.einsum("bd,bd->b", uq, uq)
    return mean, ufu - quad


def _query_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim in (1, 3):
        return x[None, ...], True
    if x.ndim in (2, 4):
        return x, False
    raise ShapeError(f"queries must have 1-4 dims, got {x.ndim}")


def _features_chunked(km: KernelMapper, x: np.ndarray, head: int) -> np.ndarray:
    outs = [forward_mapper(km, x[i : i + _CHUNK], head)
            for i in range(0, x.shape[0], _CHUNK)]
    return np.concatenate(outs, axis=0)


def forward_gp(x, store: InducingStore, km: KernelMapper, hp: GpHyper,
               xt: tuple | None = None, training: bool = False) -> GpPosterior:
    """Posterior mean/cov of every head's GP at query instance(s) ``x``.

    In training mode, ``xt = (dataset_indices, instances)`` names an inducing
    batch whose rows are recomputed with the current mapper on a working copy
    of the store (the store itself is not modified).  The batch accepts a
    single instance or a batch evaluated against one store snapshot.
    """
    if store.n_heads != hp.n_heads or km.n_heads != hp.n_heads:
        raise ParameterError("forward_gp: store/mapper/hyper head counts differ")
    xb, single = _query_batch(x)
    if training:
        if xt is None:
            raise ParameterError("forward_gp: training mode needs an inducing batch")
        t_idx, t_inst = xt
        rows = store.rows_for(t_idx)
    means = []
    covs = []
    for h in range(hp.n_heads):
        uq = forward_mapper(km, xb, h)
        if training:
            new_rows = forward_mapper(km, np.asarray(t_inst, dtype=np.float64), h)
            if new_rows.ndim == 1:
                new_rows = new_rows[None, :]
            old_rows = store.u[h][rows]
            gram = (store.gram[h].gram
                    - old_rows.T @ old_rows + new_rows.T @ new_rows)
            v = store.v[h]
            c = store.u[h].T @ v - old_rows.T @ v[rows] + new_rows.T @ v[rows]
        else:
            gram = store.gram[h].gram
            c = store.u[h].T @ store.v[h]
        mean, cov = posterior_from_features(uq, gram, c, hp.sigma_gp2)
        means.append(mean)
        covs.append(_clamp_cov(cov))
    mean = np.stack(means, axis=1)
    cov = np.stack(covs, axis=1)
    if single:
        return GpPosterior(mean=mean[0], cov=cov[0])
    return GpPosterior(mean=mean, cov=cov)


def init_gp_params(ds, p: Predictor, km: KernelMapper, hp: GpHyper,
                   with_audit: bool = False) -> InducingStore:
    """Build the store from an inducing dataset: features and head outputs.

    Row m holds u[h][m] = f_h(x̃_m) and v[h][m] = g_h(x̃_m) for every head h.
    """
    instances = np.asarray(ds.instances, dtype=np.float64)
    m = instances.shape[0]
    if m != hp.n_inducing:
        raise ParameterError(
            f"init_gp_params: dataset has {m} rows, hyper says {hp.n_inducing}"
        )
    if p.n_heads != hp.n_heads or km.n_heads != hp.n_heads:
        raise ParameterError("init_gp_params: head counts differ")
    if km.kernel_dim != hp.kernel_dim:
        raise ParameterError("init_gp_params: mapper kernel_dim differs from hyper")
    logits = np.concatenate(
        [forward_predictor(p, instances[i : i + _CHUNK])
         for i in range(0, m, _CHUNK)], axis=0)
    u = []
    v = []
    gram = []
    for h in range(hp.n_heads):
        uh = _features_chunked(km, instances, h)
        u.append(uh)
        v.append(logits[:, h].copy())
        gram.append(lowrank.gram_init(uh, with_audit=with_audit))
    return InducingStore(u=u, v=v, gram=gram, index_map=np.arange(m))


def update_inducing_rows(store: InducingStore, dataset_indices, instances,
                         km: KernelMapper) -> InducingStore:
    """Refresh the stored features of the named inducing instances, in place.

    Target values v are never touched: they come from the frozen predictor.
    Gram caches are updated incrementally; once a cache's update budget is
    spent, it is rebuilt from the full row matrix (the forced-recompute
    cadence in :mod:`gpdistill.lowrank`).
    """
    rows = store.rows_for(dataset_indices)
    instances = np.asarray(instances, dtype=np.float64)
    if instances.shape[0] != rows.shape[0]:
        raise ShapeError("update_inducing_rows: indices/instances length mismatch")
    if len(np.unique(rows)) != len(rows):
        raise ParameterError("update_inducing_rows: duplicate rows in one batch")
    for h in range(store.n_heads):
        new_rows = forward_mapper(km, instances, h)
        cache = store.gram[h]
        for j, r in enumerate(rows):
            lowrank.gram_update_row(cache, store.u[h][r], new_rows[j],
                                    row_index=int(r))
            store.u[h][r] = new_rows[j]
        if lowrank.needs_rebuild(cache):
            store.gram[h] = lowrank.gram_init(
                store.u[h], with_audit=cache.row_digests is not None)
    return store


def kernel_similarity(x1, x2, km: KernelMapper, head: int) -> float:
    """Learned-kernel similarity of two instances under one head."""
    f1 = forward_mapper(km, x1, head)
    f2 = forward_mapper(km, x2, head)
    if f1.ndim != 1 or f2.ndim != 1:
        raise ShapeError("kernel_similarity expects single instances")
    return float(np.dot(f1, f2))
