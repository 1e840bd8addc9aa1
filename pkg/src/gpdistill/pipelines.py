"""End-to-end stages shared by the command-line tool and the test harness.

Each ``run_*`` function consumes an AppConfig plus a run seed and an output
directory, writes its report files there, and returns the in-memory results
so callers can assert on them without re-reading files.

Seeding discipline: the dataset seed lives in the config ([data] seed) so a
data draw can be pinned independently; the run seed (CLI --seed) drives
model init, training, and every stochastic loop.  All derived seeds come
from :func:`derive_seed` so two runs with the same config+seed are
bit-identical, and report writers never emit wall-clock values.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import AppConfig
from .datasets import Dataset, corrupt_labels, gen_synthetic, load_idx_dataset, subset
from .distill import explain_ann
from .errors import CapabilityError, ParameterError
from .explain import (
    dataset_debug,
    discovery_curve,
    faithfulness,
    knn_explain,
    random_debug_order,
)
from .gpcore import GpHyper, InducingStore, init_gp_params, update_inducing_rows
from .nets import (
    KernelMapper,
    Predictor,
    build_conv_mapper,
    build_conv_predictor,
    build_dense_mapper,
    build_mlp_predictor,
    predictor_accuracy,
    train_predictor,
)
from .reports import image_grid, write_json_report, write_pgm, write_trace_csv

__all__ = [
    "build_datasets",
    "build_mapper",
    "build_predictor",
    "derive_seed",
    "run_debug_dataset",
    "run_distill",
    "run_explain",
    "run_faithfulness",
    "run_sweep_inducing",
    "run_train_ann",
]

# fixed salts for every stochastic stage (documented, never reused)
SALT_PREDICTOR_INIT = 1
SALT_MAPPER_INIT = 2
SALT_PREDICTOR_TRAIN = 3
SALT_DISTILL = 4
SALT_DEBUG_FALLBACK = 5
SALT_CORRUPTION = 6
SALT_RANDOM_ORDER_BASE = 1000

# data-side salts applied to the dataset seed
SALT_DATA_TEST = 101
SALT_DATA_INDUCING = 102


def derive_seed(seed: int, salt: int) -> int:
    """Stable, collision-spread child seed for one named stage."""
    return (seed * 1_000_003 + salt) % (2**31)


# ------------------------------------------------------------------- builders


def build_datasets(cfg: AppConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(train, test, inducing); inducing is a seeded subset of train."""
    d = cfg.data
    if d.kind == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(d, key):
                raise ParameterError(f"data.kind=idx needs data.{key}")
        train = load_idx_dataset(d.train_images, d.train_labels, name="idx-train")
        test = load_idx_dataset(d.test_images, d.test_labels, name="idx-test")
    else:
        train = gen_synthetic(d.kind, d.n_train, d.seed, separation=d.separation)
        test = gen_synthetic(d.kind, d.n_test, derive_seed(d.seed, SALT_DATA_TEST),
                             separation=d.separation)
    if not 1 <= d.n_inducing <= train.n:
        raise ParameterError(
            f"data.n_inducing={d.n_inducing} must lie in [1, n_train={train.n}]")
    rng = np.random.default_rng(derive_seed(d.seed, SALT_DATA_INDUCING))
    rows = np.sort(rng.choice(train.n, size=d.n_inducing, replace=False))
    inducing = subset(train, rows, name=f"{train.name}/inducing")
    return train, test, inducing


def build_predictor(cfg: AppConfig, ds: Dataset, seed: int) -> Predictor:
    rng = np.random.default_rng(derive_seed(seed, SALT_PREDICTOR_INIT))
    l = ds.n_classes
    if cfg.predictor.arch == "conv":
        if ds.instances.ndim != 4:
            raise ParameterError("predictor.arch=conv needs image instances")
        shape = tuple(ds.instances.shape[1:])
        return build_conv_predictor(rng, shape, cfg.predictor.channels,
                                    cfg.predictor.dense_width, l)
    n_in = int(np.prod(ds.instances.shape[1:]))
    return build_mlp_predictor(rng, n_in, cfg.predictor.hidden, l)


def build_mapper(cfg: AppConfig, ds: Dataset, seed: int) -> KernelMapper:
    rng = np.random.default_rng(derive_seed(seed, SALT_MAPPER_INIT))
    l = ds.n_classes
    if cfg.mapper.arch == "conv":
        if ds.instances.ndim != 4:
            raise ParameterError("mapper.arch=conv needs image instances")
        shape = tuple(ds.instances.shape[1:])
        return build_conv_mapper(rng, shape, cfg.mapper.channels,
                                 cfg.gp.kernel_dim, l)
    n_in = int(np.prod(ds.instances.shape[1:]))
    return build_dense_mapper(rng, n_in, cfg.mapper.hidden, cfg.gp.kernel_dim, l)


def _hyper(cfg: AppConfig, n_heads: int, n_inducing: int) -> GpHyper:
    return GpHyper(n_heads=n_heads, kernel_dim=cfg.gp.kernel_dim,
                   n_inducing=n_inducing, sigma_gp2=cfg.gp.sigma_gp2,
                   sigma_g2=cfg.gp.sigma_g2)


def _train_stage(cfg: AppConfig, train: Dataset, seed: int) -> tuple[Predictor, list[float]]:
    p = build_predictor(cfg, train, seed)
    losses = train_predictor(p, train.instances, train.labels,
                             iters=cfg.predictor.iters, batch=cfg.predictor.batch,
                             lr=cfg.predictor.lr,
                             seed=derive_seed(seed, SALT_PREDICTOR_TRAIN))
    return p, losses


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def refresh_all_rows(store: InducingStore, inducing: Dataset,
                     km: KernelMapper) -> None:
    """Recompute every stored feature row with the current mapper."""
    update_inducing_rows(store, store.index_map,
                         inducing.instances[store.index_map], km)


# --------------------------------------------------------------------- stages


def run_train_ann(cfg: AppConfig, seed: int, out, checkpoint_path=None) -> dict:
    """Fit the predictor, initialize mapper+store, checkpoint everything."""
    out = _out_dir(out)
    train, test, inducing = build_datasets(cfg)
    p, losses = _train_stage(cfg, train, seed)
    km = build_mapper(cfg, train, seed)
    hp = _hyper(cfg, train.n_classes, inducing.n)
    store = init_gp_params(inducing, p, km, hp)
    ckpt = Path(checkpoint_path) if checkpoint_path else out / "model.ckpt"
    save_checkpoint(ckpt, hp, p, km, store, iteration=0)
    report = {
        "stage": "train-ann",
        "seed": seed,
        "n_train": train.n,
        "n_test": test.n,
        "n_inducing": inducing.n,
        "final_loss": losses[-1] if losses else None,
        "train_accuracy": predictor_accuracy(p, train.instances, train.labels),
        "test_accuracy": predictor_accuracy(p, test.instances, test.labels),
        "checkpoint": ckpt.name,
    }
    write_json_report(out / "train_ann.json", report)
    return {"report": report, "checkpoint": ckpt, "predictor": p,
            "mapper": km, "store": store, "hyper": hp}


def _load_or_train(cfg: AppConfig, seed: int, checkpoint_path,
                   train: Dataset, inducing: Dataset):
    if checkpoint_path is not None:
        data = load_checkpoint(checkpoint_path)
        return data.predictor, data.mapper, data.store, data.hyper
    p, _ = _train_stage(cfg, train, seed)
    km = build_mapper(cfg, train, seed)
    hp = _hyper(cfg, train.n_classes, inducing.n)
    store = init_gp_params(inducing, p, km, hp)
    return p, km, store, hp


def run_distill(cfg: AppConfig, seed: int, out, checkpoint_path=None,
                max_iter: int | None = None) -> dict:
    """Distill the predictor into the per-head GPs; emit trace + reports."""
    out = _out_dir(out)
    train, test, inducing = build_datasets(cfg)
    p, km, store, hp = _load_or_train(cfg, seed, checkpoint_path, train, inducing)
    dcfg = replace(cfg.distill, seed=derive_seed(seed, SALT_DISTILL))
    if max_iter is not None:
        dcfg = replace(dcfg, max_iter=max_iter)
    ckpt_out = out / "distilled.ckpt"

    def sink(iteration, sink_store, sink_km, rng):
        save_checkpoint(ckpt_out, hp, p, sink_km, sink_store, rng=rng,
                        iteration=iteration)

    trace = explain_ann(train, inducing, p, km, hp, dcfg, store,
                        probe_ds=test, checkpoint_sink=sink)
    if dcfg.max_iter > 0:
        refresh_all_rows(store, inducing, km)
        save_checkpoint(ckpt_out, hp, p, km, store, iteration=dcfg.max_iter)
    faith = faithfulness(p, store, km, test, hp)
    write_trace_csv(out / "trace.csv", trace, hp.n_heads)
    report = {
        "stage": "distill",
        "seed": seed,
        "iterations": dcfg.max_iter,
        "mixing": dcfg.mixing_enabled,
        "final_loss": trace.losses[-1] if trace.losses else None,
        "per_head_pearson": faith.per_head_pearson,
        "ann_accuracy": faith.ann_accuracy,
        "gp_accuracy": faith.gp_accuracy,
        "n_probe": faith.n_probe,
        "checkpoint": ckpt_out.name,
    }
    write_json_report(out / "distill.json", report)
    return {"report": report, "trace": trace, "checkpoint": ckpt_out,
            "predictor": p, "mapper": km, "store": store, "hyper": hp,
            "faithfulness": faith}


def run_faithfulness(cfg: AppConfig, seed: int, out, checkpoint_path) -> dict:
    """Per-head Pearson + accuracies of a checkpointed model on the test set."""
    out = _out_dir(out)
    if checkpoint_path is None:
        raise ParameterError("faithfulness needs --checkpoint")
    train, test, inducing = build_datasets(cfg)
    data = load_checkpoint(checkpoint_path)
    faith = faithfulness(data.predictor, data.store, data.mapper, test,
                         data.hyper)
    lines = ["head,pearson,n_probe"]
    for h, r in enumerate(faith.per_head_pearson):
        lines.append(f"{h},{float(r)!r},{faith.n_probe}")
    (out / "faithfulness.csv").write_text("\n".join(lines) + "\n")
    report = {
        "stage": "faithfulness",
        "seed": seed,
        "per_head_pearson": faith.per_head_pearson,
        "ann_accuracy": faith.ann_accuracy,
        "gp_accuracy": faith.gp_accuracy,
        "n_probe": faith.n_probe,
    }
    write_json_report(out / "faithfulness.json", report)
    return {"report": report, "faithfulness": faith}


def run_explain(cfg: AppConfig, seed: int, out, checkpoint_path,
                indices: list[int]) -> dict:
    """kNN explanations (and, for conv mappers, contribution-map images)."""
    out = _out_dir(out)
    if checkpoint_path is None:
        raise ParameterError("explain needs --checkpoint")
    if not indices:
        raise ParameterError("explain needs at least one test index")
    train, test, inducing = build_datasets(cfg)
    data = load_checkpoint(checkpoint_path)
    entries = []
    for idx in indices:
        if not 0 <= idx < test.n:
            raise ParameterError(f"test index {idx} outside [0, {test.n})")
        x = test.instances[idx]
        try:
            rep = knn_explain(x, data.store, data.mapper, data.predictor,
                              k=cfg.explain_k, test_index=idx,
                              inducing_ds=inducing)
            has_maps = True
        except CapabilityError:
            rep = knn_explain(x, data.store, data.mapper, data.predictor,
                              k=cfg.explain_k, test_index=idx)
            has_maps = False
        entry = {
            "test_index": idx,
            "head": rep.head,
            "neighbor_indices": rep.neighbor_indices,
            "similarities": rep.similarities,
        }
        if has_maps:
            test_grid = image_grid(rep.contrib_on_test)
            nb_grid = image_grid(rep.contrib_on_neighbor)
            lo_t, hi_t = write_pgm(out / f"explain_{idx}_test_maps.pgm", test_grid)
            lo_n, hi_n = write_pgm(out / f"explain_{idx}_neighbor_maps.pgm", nb_grid)
            neighbors_img = image_grid(
                [inducing.instances[int(i)].sum(axis=0)
                 for i in rep.neighbor_indices])
            lo_i, hi_i = write_pgm(out / f"explain_{idx}_neighbors.pgm",
                                   neighbors_img)
            entry["images"] = {
                "test_maps": {"file": f"explain_{idx}_test_maps.pgm",
                              "scale": [lo_t, hi_t]},
                "neighbor_maps": {"file": f"explain_{idx}_neighbor_maps.pgm",
                                  "scale": [lo_n, hi_n]},
                "neighbors": {"file": f"explain_{idx}_neighbors.pgm",
                              "scale": [lo_i, hi_i]},
            }
        else:
            entry["images"] = None
        entries.append(entry)
    report = {"stage": "explain", "seed": seed, "k": cfg.explain_k,
              "explanations": entries}
    write_json_report(out / "explain.json", report)
    return {"report": report}


def run_debug_dataset(cfg: AppConfig, seed: int, out) -> dict:
    """Corrupt labels, train+distill on the noise, then hunt the corruption.

    The inducing set is the full corrupted training set — the protocol
    surfaces training instances, so every one of them must be explainable.
    """
    out = _out_dir(out)
    train, test, _ = build_datasets(cfg)
    noisy, mask = corrupt_labels(train, cfg.debug.corrupt_frac,
                                 derive_seed(seed, SALT_CORRUPTION))
    p, _ = _train_stage(cfg, noisy, seed)
    km = build_mapper(cfg, noisy, seed)
    hp = _hyper(cfg, noisy.n_classes, noisy.n)
    store = init_gp_params(noisy, p, km, hp)
    dcfg = replace(cfg.distill, seed=derive_seed(seed, SALT_DISTILL))
    explain_ann(noisy, noisy, p, km, hp, dcfg, store, probe_ds=test)
    refresh_all_rows(store, noisy, km)

    session = dataset_debug(noisy, test, p, store, km, mask,
                            seed=derive_seed(seed, SALT_DEBUG_FALLBACK))
    guided_curve = session.discovery_curve
    random_curves = []
    for i in range(cfg.debug.n_random_orders):
        order = random_debug_order(noisy.n,
                                   derive_seed(seed, SALT_RANDOM_ORDER_BASE + i))
        random_curves.append(discovery_curve(order, mask))
    random_mean = np.mean(np.stack(random_curves, axis=0), axis=0)
    report = {
        "stage": "debug-dataset",
        "seed": seed,
        "n_train": noisy.n,
        "n_corrupted": int(mask.sum()),
        "corrupt_frac": cfg.debug.corrupt_frac,
        "guided_curve": guided_curve,
        "random_mean_curve": random_mean,
        "n_random_orders": cfg.debug.n_random_orders,
    }
    write_json_report(out / "debug.json", report)
    return {"report": report, "session": session, "mask": mask,
            "guided_curve": guided_curve, "random_mean_curve": random_mean}


def run_sweep_inducing(cfg: AppConfig, seed: int, out) -> dict:
    """Faithfulness as a function of the inducing-set size, across splits."""
    out = _out_dir(out)
    m_values = cfg.sweep.m_values
    if not m_values:
        raise ParameterError("sweep needs at least one inducing size")
    per_split = []
    for split in range(cfg.sweep.n_splits):
        split_seed = derive_seed(seed, 2000 + split)
        data_cfg = replace(cfg.data, seed=derive_seed(cfg.data.seed, split))
        split_cfg = replace(cfg, data=data_cfg)
        train, test, _ = build_datasets(split_cfg)
        p, _ = _train_stage(split_cfg, train, split_seed)
        row = []
        for j, m in enumerate(m_values):
            if m > train.n:
                raise ParameterError(f"sweep m={m} exceeds n_train={train.n}")
            rng = np.random.default_rng(derive_seed(split_seed, 3000 + j))
            rows = np.sort(rng.choice(train.n, size=m, replace=False))
            inducing = subset(train, rows, name=f"{train.name}/m{m}")
            km = build_mapper(split_cfg, train, derive_seed(split_seed, j))
            hp = _hyper(split_cfg, train.n_classes, m)
            store = init_gp_params(inducing, p, km, hp)
            dcfg = replace(cfg.distill,
                           seed=derive_seed(split_seed, SALT_DISTILL + j))
            explain_ann(train, inducing, p, km, hp, dcfg, store)
            refresh_all_rows(store, inducing, km)
            faith = faithfulness(p, store, km, test, hp)
            finite = [r for r in faith.per_head_pearson if np.isfinite(r)]
            row.append(float(np.mean(finite)) if finite else float("nan"))
        per_split.append(row)
    arr = np.asarray(per_split)
    mean = arr.mean(axis=0)
    stderr = arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0]) \
        if arr.shape[0] > 1 else np.zeros(arr.shape[1])
    lines = ["m,split,pearson_mean"]
    for s in range(arr.shape[0]):
        for j, m in enumerate(m_values):
            lines.append(f"{m},{s},{arr[s, j]!r}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    report = {
        "stage": "sweep-inducing",
        "seed": seed,
        "m_values": list(m_values),
        "n_splits": cfg.sweep.n_splits,
        "per_split": arr,
        "mean": mean,
        "stderr": stderr,
    }
    write_json_report(out / "sweep.json", report)
    return {"report": report, "per_split": arr, "mean": mean, "stderr": stderr}
