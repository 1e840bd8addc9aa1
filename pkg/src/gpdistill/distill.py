"""Distilling a frozen predictor into the per-head GPs.

The only trainable object here is the kernel mapper.  Each iteration of
:func:`explain_ann`:

1. draws a query batch from the training set (optionally *mixing* random
   pairs, x = λ·x_i + (1−λ)·x_j with λ ~ U[mix_low, mix_high] — queries off
   the inducing manifold are what give the loss a training signal when the
   training and inducing sets coincide);
2. draws an inducing batch whose rows are recomputed on the tape, so
   gradients flow into the mapper through the inducing side of the kernel as
   well as the query side (:func:`optim_kern_mappings`);
3. takes one Adam step on the mapper against :func:`gp_loss`;
4. draws a *fresh* inducing batch and refreshes those rows in the store with
   the updated mapper.

The per-head loss for a query x with predictor output g and posterior
(mean, cov) is

    ((mean − g)² + σ²_g) / max(cov, ε) + log max(cov, ε)

averaged over the query batch and summed over heads; its minimum over cov
sits at cov = (mean − g)², so covariances learn to track the squared
residuals while means track the predictor.  :func:`ann_elbo_loss` is the
complementary objective for fine-tuning the predictor against a frozen GP:
½(mean − g)²/max(cov, ε) per head plus cross-entropy to the labels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Var
from .errors import DegenerateInputError, NumericalError, ParameterError, ShapeError
from .gpcore import COV_NEG_TOL, EPS_COV, GpHyper, GpPosterior, InducingStore, \
    forward_gp, update_inducing_rows
from .nets import (
    AdamState,
    KernelMapper,
    Predictor,
    adam_step,
    forward_mapper,
    forward_predictor,
    init_adam,
    mapper_parameters,
)
from .numkit import pearson

__all__ = [
    "DistillConfig",
    "TrainTrace",
    "ann_elbo_loss",
    "explain_ann",
    "gp_loss",
    "gp_loss_value",
    "mix_instances",
    "optim_kern_mappings",
]


@dataclass
class DistillConfig:
    """Knobs of the distillation loop.

    max_iter: number of optimization iterations (0 = initialization only).
    batch_query / batch_inducing: per-iteration batch sizes.
    lr: Adam learning rate for the mapper.
    lr_decay_every / lr_decay_factor: optional step decay (0 = constant lr).
    mixing_enabled: draw query pairs and blend them with λ ~ U[low, high].
    seed: seeds every random draw of the loop.
    checkpoint_every: invoke the checkpoint sink every N iterations (0 = off).
    eps_cov: covariance floor inside the losses.
    probe_every: evaluate held-out per-head Pearson every N iterations.
    """

    max_iter: int = 3000
    batch_query: int = 32
    batch_inducing: int = 32
    lr: float = 1e-4
    lr_decay_every: int = 0
    lr_decay_factor: float = 1.0
    mixing_enabled: bool = True
    mixing_low: float = -1.0
    mixing_high: float = 2.0
    seed: int = 0
    checkpoint_every: int = 0
    eps_cov: float = EPS_COV
    probe_every: int = 100

    def __post_init__(self):
        if self.max_iter < 0:
            raise ParameterError("DistillConfig: max_iter must be >= 0")
        if self.batch_query < 1 or self.batch_inducing < 1:
            raise ParameterError("DistillConfig: batch sizes must be >= 1")
        if self.lr <= 0:
            raise ParameterError("DistillConfig: lr must be positive")
        if self.mixing_high <= self.mixing_low:
            raise ParameterError("DistillConfig: empty mixing range")
        if self.eps_cov <= 0:
            raise ParameterError("DistillConfig: eps_cov must be positive")
        if self.probe_every < 1:
            raise ParameterError("DistillConfig: probe_every must be >= 1")


@dataclass
class TrainTrace:
    """Per-iteration losses plus probe Pearson snapshots.

    Wall-clock stamps stay in memory for diagnostics only; report writers
    never serialize them, keeping all emitted files byte-deterministic.
    """

    losses: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    probe_iters: list[int] = field(default_factory=list)
    probe_pearson: list[list[float]] = field(default_factory=list)

    def record(self, loss: float) -> None:
        self.losses.append(float(loss))
        self.wall_times.append(time.perf_counter())

    def record_probe(self, iteration: int, per_head: list[float]) -> None:
        self.probe_iters.append(int(iteration))
        self.probe_pearson.append([float(r) for r in per_head])


# ------------------------------------------------------------------ losses


def _head_gp_terms(tape: Tape, mean: Var, cov: Var, g_head: np.ndarray,
                   sigma_g2: float, eps_cov: float) -> Var:
    if float(np.min(cov.value)) < COV_NEG_TOL:
        raise NumericalError("gp_loss: covariance negative beyond round-off")
    cov_f = tape.maximum_const(cov, eps_cov)
    resid = tape.sub(mean, tape.constant(g_head))
    num = tape.add(tape.square(resid), tape.constant(np.float64(sigma_g2)))
    return tape.mean(tape.add(tape.div(num, cov_f), tape.log(cov_f)))


def gp_loss(tape: Tape, means: list[Var], covs: list[Var], g_out: np.ndarray,
            hp: GpHyper, eps_cov: float = EPS_COV) -> Var:
    """Mapper-training loss: batch mean of the per-head terms, summed on heads.

    means/covs hold one (B,) node per head; g_out is the frozen predictor's
    (B, L) output for the same queries.
    """
    g_out = np.asarray(g_out, dtype=np.float64)
    if g_out.ndim != 2 or g_out.shape[1] != hp.n_heads:
        raise ShapeError("gp_loss: g_out must be (B, n_heads)")
    if len(means) != hp.n_heads or len(covs) != hp.n_heads:
        raise ShapeError("gp_loss: need one mean/cov node per head")
    total: Var | None = None
    for h in range(hp.n_heads):
        term = _head_gp_terms(tape, means[h], covs[h], g_out[:, h],
                              hp.sigma_g2, eps_cov)
        total = term if total is None else tape.add(total, term)
    return total


def gp_loss_value(post: GpPosterior, g_out: np.ndarray, hp: GpHyper,
                  eps_cov: float = EPS_COV) -> float:
    """Numeric twin of :func:`gp_loss` for a posterior already in hand."""
    mean = np.atleast_2d(np.asarray(post.mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(post.cov, dtype=np.float64))
    tape = Tape()
    means = [tape.constant(mean[:, h]) for h in range(hp.n_heads)]
    covs = [tape.constant(cov[:, h]) for h in range(hp.n_heads)]
    g_out = np.atleast_2d(np.asarray(g_out, dtype=np.float64))
    return float(gp_loss(tape, means, covs, g_out, hp, eps_cov).value)


def ann_elbo_loss(tape: Tape, post: GpPosterior, g_var: Var,
                  labels: np.ndarray, hp: GpHyper,
                  eps_cov: float = EPS_COV) -> Var:
    """Predictor-side objective against a frozen GP posterior.

    post holds numeric (B, L) mean/cov; g_var is the differentiable (B, L)
    predictor output; labels are the supervised classes.
    """
    mean = np.atleast_2d(np.asarray(post.mean, dtype=np.float64))
    cov = np.atleast_2d(np.asarray(post.cov, dtype=np.float64))
    if g_var.value.shape != mean.shape:
        raise ShapeError("ann_elbo_loss: posterior and predictor shapes differ")
    cov_f = np.maximum(cov, eps_cov)
    resid = tape.sub(tape.constant(mean), g_var)
    quad = tape.mul(tape.square(resid), tape.constant(0.5 / cov_f))
    fit = tape.mean(tape.sum(quad, axis=1))
    ce = tape.cross_entropy_with_logits(g_var, labels)
    return tape.add(fit, ce)


def mix_instances(xa: np.ndarray, xb: np.ndarray, rng: np.random.Generator,
                  low: float = -1.0, high: float = 2.0):
    """Blend paired instances with per-pair λ ~ U[low, high).

    Returns (mixed, lambdas); λ is recorded so a run can be reproduced.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    if xa.shape != xb.shape:
        raise ShapeError("mix_instances: operand shapes differ")
    if high <= low:
        raise ParameterError("mix_instances: empty λ range")
    lam = rng.uniform(low, high, size=xa.shape[0])
    lam_b = lam.reshape((xa.shape[0],) + (1,) * (xa.ndim - 1))
    return lam_b * xa + (1.0 - lam_b) * xb, lam


# ------------------------------------------------------- tape posterior


def _posterior_graph_head(tape: Tape, uq: Var, new_rows: Var,
                          store: InducingStore, head: int, rows: np.ndarray,
                          sigma_gp2: float) -> tuple[Var, Var]:
    """Posterior (mean, cov) nodes for one head with rows substituted live.

    The working Gram G_w = G − Σ old·oldᵀ + Σ new·newᵀ and the working
    projection c_w = Uᵀv − Σ old·v + Σ new·v split into a constant part
    (everything stale) plus tape terms in the fresh rows, so the whole
    posterior stays differentiable w.r.t. the mapper.
    """
    old_rows = store.u[head][rows]
    v = store.v[head]
    v_batch = v[rows]
    d = store.gram[head].gram.shape[0]
    g_base = store.gram[head].gram - old_rows.T @ old_rows
    s_base = g_base + sigma_gp2 * np.eye(d)
    c_base = store.u[head].T @ v - old_rows.T @ v_batch

    n_t = tape.transpose(new_rows)
    s_var = tape.add(tape.constant(s_base), tape.matmul(n_t, new_rows))
    c_var = tape.add(tape.constant(c_base), tape.matmul(n_t, tape.constant(v_batch)))
    w_var = tape.solve_sym(s_var, c_var)
    mean = tape.matmul(uq, w_var)

    uq_t = tape.transpose(uq)
    gu = tape.add(tape.matmul(tape.constant(g_base), uq_t),
                  tape.matmul(n_t, tape.matmul(new_rows, uq_t)))
    q_var = tape.solve_sym(s_var, gu)
    quad = tape.sum(tape.mul(uq_t, q_var), axis=0)
    ufu = tape.sum(tape.mul(uq, uq), axis=1)
    cov = tape.sub(ufu, quad)
    return mean, cov


def gp_posterior_graph(tape: Tape, x: np.ndarray, xt: tuple,
                       store: InducingStore, km: KernelMapper, hp: GpHyper,
                       params: dict[int, Var]) -> tuple[list[Var], list[Var]]:
    """Differentiable training-mode posterior for every head.

    Numerically equivalent to ``forward_gp(x, …, xt=xt, training=True)``
    (covariances here are pre-clamp); gradients flow into the mapper through
    both the query features and the substituted inducing rows.
    """
    t_idx, t_inst = xt
    rows = store.rows_for(t_idx)
    means: list[Var] = []
    covs: list[Var] = []
    for h in range(hp.n_heads):
        uq = forward_mapper(km, x, h, tape=tape, params=params)
        new_rows = forward_mapper(km, np.asarray(t_inst, dtype=np.float64), h,
                                  tape=tape, params=params)
        mean, cov = _posterior_graph_head(tape, uq, new_rows, store, h, rows,
                                          hp.sigma_gp2)
        means.append(mean)
        covs.append(cov)
    return means, covs


def optim_kern_mappings(x: np.ndarray, xt: tuple, store: InducingStore,
                        km: KernelMapper, p: Predictor, hp: GpHyper,
                        opt: AdamState, cfg: DistillConfig,
                        lr: float | None = None) -> float:
    """One Adam step on the mapper parameters; the predictor stays frozen.

    Returns the loss value at the visited point.
    """
    g_out = forward_predictor(p, x)
    if g_out.ndim == 1:
        g_out = g_out[None, :]
        x = np.asarray(x, dtype=np.float64)[None, ...]
    tape = Tape()
    params = mapper_parameters(km)
    pvars = {id(a): tape.parameter(a) for a in params}
    means, covs = gp_posterior_graph(tape, x, xt, store, km, hp, pvars)
    loss = gp_loss(tape, means, covs, g_out, hp, cfg.eps_cov)
    adj = tape.backward(loss)
    grads = []
    for a in params:
        g = adj[pvars[id(a)].i]
        grads.append(np.zeros_like(a) if g is None else g)
    adam_step(params, grads, opt, lr=cfg.lr if lr is None else lr)
    return float(loss.value)


# --------------------------------------------------------------- main loop


def _probe_pearson(probe_x: np.ndarray, probe_g: np.ndarray,
                   store: InducingStore, km: KernelMapper,
                   hp: GpHyper) -> list[float]:
    post = forward_gp(probe_x, store, km, hp)
    out = []
    for h in range(hp.n_heads):
        try:
            out.append(pearson(probe_g[:, h], post.mean[:, h]))
        except DegenerateInputError:
            out.append(float("nan"))
    return out


def explain_ann(ds_train, ds_inducing, p: Predictor, km: KernelMapper,
                hp: GpHyper, cfg: DistillConfig, store: InducingStore,
                probe_ds=None, checkpoint_sink=None) -> TrainTrace:
    """Run the distillation loop against an already-initialized store.

    ds_train supplies query instances; ds_inducing must be the dataset the
    store was built from.  The predictor is read, never written.  With
    ``max_iter = 0`` the store and mapper are returned exactly as
    initialized.  The checkpoint sink is called as
    ``sink(iteration, store, km, rng)`` on the configured cadence and once
    at the end; if an iteration raises, the sink is flushed before the
    error propagates.
    """
    train_x = np.asarray(ds_train.instances, dtype=np.float64)
    ind_x = np.asarray(ds_inducing.instances, dtype=np.float64)
    n_train = train_x.shape[0]
    m = ind_x.shape[0]
    if m != store.n_rows:
        raise ParameterError("explain_ann: store does not match ds_inducing")
    bq = min(cfg.batch_query, n_train)
    bi = min(cfg.batch_inducing, m)
    rng = np.random.default_rng(cfg.seed)
    opt = init_adam(mapper_parameters(km))
    trace = TrainTrace()

    probe_x = probe_g = None
    if probe_ds is not None:
        probe_x = np.asarray(probe_ds.instances, dtype=np.float64)
        probe_g = forward_predictor(p, probe_x)

    def run_probe(iteration: int) -> None:
        if probe_x is None:
            return
        trace.record_probe(iteration, _probe_pearson(probe_x, probe_g, store, km, hp))

    lr = cfg.lr
    try:
        for it in range(1, cfg.max_iter + 1):
            if cfg.lr_decay_every and it > 1 and (it - 1) % cfg.lr_decay_every == 0:
                lr *= cfg.lr_decay_factor
            q_idx = rng.choice(n_train, size=bq, replace=False)
            x = train_x[q_idx]
            if cfg.mixing_enabled:
                p_idx = rng.choice(n_train, size=bq, replace=False)
                x, _ = mix_instances(x, train_x[p_idx], rng,
                                     cfg.mixing_low, cfg.mixing_high)
            t_rows = rng.choice(m, size=bi, replace=False)
            t_idx = store.index_map[t_rows]
            loss = optim_kern_mappings(x, (t_idx, ind_x[t_rows]), store, km,
                                       p, hp, opt, cfg, lr=lr)
            r_rows = rng.choice(m, size=bi, replace=False)
            update_inducing_rows(store, store.index_map[r_rows],
                                 ind_x[r_rows], km)
            trace.record(loss)
            if it == 1 or it % cfg.probe_every == 0 or it == cfg.max_iter:
                run_probe(it)
            if checkpoint_sink is not None and cfg.checkpoint_every and \
                    it % cfg.checkpoint_every == 0:
                checkpoint_sink(it, store, km, rng)
    except Exception:
        if checkpoint_sink is not None:
            checkpoint_sink(len(trace.losses), store, km, rng)
        raise
    if cfg.max_iter == 0:
        run_probe(0)
    if checkpoint_sink is not None:
        checkpoint_sink(cfg.max_iter, store, km, rng)
    return trace
