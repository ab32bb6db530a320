"""Experiment orchestration: method registry, station-availability sweeps,
label-ratio sweeps, masking-rate heatmaps, PCA exports, and metrics tables.
"""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import RandomStream
from .crossl import (
    FeatureExtractor,
    VicregWeights,
    build_extractor,
    pretrain,
)
from .downstream import (
    AugmentConfig,
    ConstantModel,
    InpaintingModel,
    SensingModel,
    build_head,
    constant_baseline,
    train_dae,
    train_downstream,
    train_ensemble,
    train_naive,
)
from .nnkit import TrainConfig
from .pipeline import Dataset

EXHAUSTIVE_COMBINATION_CAP = 256


def rmse(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(labels, dtype=float)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must have equal non-zero length")
    return float(np.sqrt(np.mean((p - y) ** 2)))


@dataclass(frozen=True)
class SweepSpec:
    available_station_counts: Tuple[int, ...] = (1, 4, 8)
    label_ratios: Tuple[float, ...] = (0.001, 0.1, 1.0)
    p_mask_grid: Tuple[float, ...] = (0.1, 0.5, 0.9)
    seeds: Tuple[int, ...] = (0, 1, 2)
    combination_policy: str = "exhaustive"  # exhaustive | monte_carlo
    n_draws: int = 500

    def __post_init__(self):
        if any(r <= 0 or r > 1 for r in self.label_ratios):
            raise ValueError("label ratios must be in (0, 1]")
        if self.combination_policy not in ("exhaustive", "monte_carlo"):
            raise ValueError(f"unknown combination policy {self.combination_policy}")


@dataclass
class MetricsRow:
    method: str
    k_available: int
    label_ratio: float
    seed: int
    rmse: float
    runtime_s: float

    def __post_init__(self):
        if self.rmse < 0:
            raise ValueError("RMSE must be non-negative")


@dataclass
class TrainSettings:
    """Resolved training hyperparameters shared by all grid cells."""

    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=1.1e-4, batch_size=4096)
    )
    downstream: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=2.0e-5, batch_size=256)
    )
    dae_lr: float = 1.6e-4
    vicreg: VicregWeights = field(default_factory=VicregWeights)
    embedding_dim: int = 64
    aggregator_hidden: Tuple[int, int] = (256, 128)
    encoder_widths: Optional[Tuple[int, ...]] = None  # None = identity encoders
    p_mask_crossl: float = 0.5
    p_mask_sma: float = 0.5
    mode: str = "frozen"  # frozen | joint
    aug_strategy: str = "offline_double"
    p_aug: float = 0.5
    naive_variant: str = "office"


def desk_settings(
    pretrain_epochs: int = 200,
    downstream_epochs: int = 400,
    mode: str = "frozen",
) -> TrainSettings:
    """Fast desk-scale preset for the synthetic scenario.

    Online augmentation redraws masks every epoch, so downstream training sees
    a far wider range of availability patterns than a single offline doubling
    would. The compact embedding keeps the frozen-extractor head estimable
    from very few labels, which is what makes the method degrade gracefully
    as the label budget shrinks."""
    return TrainSettings(
        pretrain=TrainConfig(
            learning_rate=1e-3, batch_size=256, max_epochs=pretrain_epochs, patience=20
        ),
        downstream=TrainConfig(
            learning_rate=1e-3, batch_size=256, max_epochs=downstream_epochs, patience=30
        ),
        mode=mode,
        aug_strategy="online",
        embedding_dim=16,
        encoder_widths=(64,),
    )


METHODS = (
    "constant",
    "naive",
    "ensemble",
    "dae",
    "crossl",
    "proposed",
    "sma",
    "re",
    "inpaint",
)


def pretrain_extractor(
    unlabeled: Dataset,
    settings: TrainSettings,
    seed: int,
    p_mask: Optional[float] = None,
    cache: Optional[dict] = None,
) -> FeatureExtractor:
    """CroSSL-pretrained extractor, cached per (seed, p_mask)."""
    p = settings.p_mask_crossl if p_mask is None else p_mask
    key = (seed, p)
    if cache is not None and key in cache:
        return cache[key]
    rng = RandomStream(seed, "crossl")
    fx = build_extractor(
        unlabeled.n_stations,
        unlabeled.k,
        rng.child("init"),
        embedding_dim=settings.embedding_dim,
        aggregator_hidden=settings.aggregator_hidden,
        encoder_widths=settings.encoder_widths,
    )
    pretrain(fx, unlabeled, p, settings.vicreg, settings.pretrain, rng.child("fit"))
    if cache is not None:
        cache[key] = fx
    return fx


def train_method(
    name: str,
    labeled: Dataset,
    unlabeled: Optional[Dataset],
    settings: TrainSettings,
    seed: int,
    extractor_cache: Optional[dict] = None,
    p_mask_crossl: Optional[float] = None,
    p_mask_sma: Optional[float] = None,
):
    """Train one method end to end and return a predictor with .predict."""
    rng = RandomStream(seed, f"method/{name}")
    p_sma = settings.p_mask_sma if p_mask_sma is None else p_mask_sma
    if name == "constant":
        return constant_baseline()
    if name == "naive":
        return train_naive(labeled, settings.downstream, rng, settings.naive_variant)
    if name == "ensemble":
        return train_ensemble(labeled, settings.downstream, rng)
    if name in ("sma", "re"):
        head = build_head(labeled.n_stations * labeled.k, rng.child("init"))
        model = SensingModel(None, head, "joint")
        aug = AugmentConfig(
            kind="sma" if name == "sma" else "random_erase",
            p_mask=p_sma,
            strategy=settings.aug_strategy,
            p_aug=settings.p_aug,
        )
        train_downstream(model, labeled, aug, settings.downstream, rng)
        return model
    if name == "dae":
        if unlabeled is None:
            raise ValueError("dae requires unlabeled data")
        dae_tc = replace(settings.pretrain, learning_rate=settings.dae_lr)
        dae, _ = train_dae(
            unlabeled, p_sma, dae_tc, rng.child("dae"), settings.embedding_dim
        )
        head = build_head(settings.embedding_dim, rng.child("init"))
        model = SensingModel(dae.extractor, head, "frozen")
        train_downstream(model, labeled, AugmentConfig(kind="none"), settings.downstream, rng)
        return model
    if name == "inpaint":
        base = train_naive(labeled, settings.downstream, rng.child("base"), settings.naive_variant)
        if unlabeled is None:
            raise ValueError("inpaint requires unlabeled data")
        dae_tc = replace(settings.pretrain, learning_rate=settings.dae_lr)
        dae, _ = train_dae(
            unlabeled, p_sma, dae_tc, rng.child("dae"), settings.embedding_dim
        )
        return InpaintingModel(base, dae)
    if name in ("crossl", "proposed"):
        if unlabeled is None:
            raise ValueError(f"{name} requires unlabeled data")
        fx = pretrain_extractor(unlabeled, settings, seed, p_mask_crossl, extractor_cache)
        if settings.mode == "joint":
            # joint fine-tuning mutates the extractor: work on a private copy
            fx = fx.cast(np.float32)
        head = build_head(settings.embedding_dim, rng.child("init"))
        model = SensingModel(fx, head, settings.mode)
        if name == "proposed":
            aug = AugmentConfig(
                kind="sma", p_mask=p_sma, strategy=settings.aug_strategy, p_aug=settings.p_aug
            )
        else:
            aug = AugmentConfig(kind="none")
        train_downstream(model, labeled, aug, settings.downstream, rng)
        return model
    raise ValueError(f"unknown method {name}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _masked_rmse(model, test: Dataset, mask_indices: Sequence[int]) -> float:
    xm = test.x.astype(np.float32)
    if len(mask_indices):
        xm = xm.copy()
        xm[:, list(mask_indices), :] = 0.0
    return rmse(model.predict(xm), test.labels)


def eval_at_availability(
    model,
    test: Dataset,
    k: int,
    policy: str = "exhaustive",
    n_draws: int = 500,
    rng: Optional[RandomStream] = None,
    pooled: bool = False,
) -> float:
    """RMSE averaged over station-missingness combinations with k available.

    exhaustive: every size-(N_d - k) mask (falls back to Monte Carlo above
    the combination cap); monte_carlo: n_draws uniform random combinations.
    By default per-combination RMSEs are averaged; pooled=True pools squared
    errors across combinations before the root.
    """
    n_d = test.n_stations
    if not (1 <= k <= n_d):
        raise ValueError(f"k must be in [1, {n_d}], got {k}")
    n_masked = n_d - k
    if policy == "exhaustive" and math.comb(n_d, n_masked) > EXHAUSTIVE_COMBINATION_CAP:
        policy = "monte_carlo"
    if policy == "exhaustive":
        combos = list(itertools.combinations(range(n_d), n_masked))
    elif policy == "monte_carlo":
        rng = rng or RandomStream(0, "availability_mc")
        combos = [
            tuple(sorted(rng.generator.choice(n_d, n_masked, replace=False)))
            for _ in range(n_draws)
        ]
    else:
        raise ValueError(f"unknown policy {policy}")
    if pooled:
        sq = [
            np.mean(
                (
                    model.predict(_zero_stations(test.x, c))
                    - np.asarray(test.labels, dtype=float)
                )
                ** 2
            )
            for c in combos
        ]
        return float(np.sqrt(np.mean(sq)))
    values = [_masked_rmse(model, test, c) for c in combos]
    return float(np.mean(values))


def _zero_stations(x: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    xm = x.astype(np.float32)
    if len(indices):
        xm = xm.copy()
        xm[:, list(indices), :] = 0.0
    return xm


def label_ratio_subset(train: Dataset, ratio: float, rng: RandomStream) -> Dataset:
    """Seed-deterministic uniform random subset of ceil(ratio * N) samples."""
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if ratio == 1.0:
        return train
    n_sub = int(np.ceil(ratio * train.n))
    idx = np.sort(rng.generator.choice(train.n, n_sub, replace=False))
    return train.subset(idx)


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


def run_grid(
    spec: SweepSpec,
    methods: Sequence[str],
    train: Dataset,
    test: Dataset,
    unlabeled: Optional[Dataset],
    settings: TrainSettings,
    out_dir=None,
) -> Tuple[List[MetricsRow], List[dict]]:
    """methods x label ratios x seeds trained once each (cached); every
    trained model evaluated at each availability level. Per-cell failures are
    recorded and the grid continues."""
    rows: List[MetricsRow] = []
    failures: List[dict] = []
    extractor_cache: dict = {}
    for method in methods:
        for ratio in spec.label_ratios:
            for seed in spec.seeds:
                sub = label_ratio_subset(
                    train, ratio, RandomStream(seed, f"label_subset/{ratio}")
                )
                t0 = time.perf_counter()
                try:
                    model = train_method(
                        method, sub, unlabeled, settings, seed, extractor_cache
                    )
                except Exception as exc:  # noqa: BLE001 - grid must continue
                    failures.append(
                        {"method": method, "ratio": ratio, "seed": seed, "error": repr(exc)}
                    )
                    continue
                train_time = time.perf_counter() - t0
                for k in spec.available_station_counts:
                    t1 = time.perf_counter()
                    try:
                        value = eval_at_availability(
                            model,
                            test,
                            k,
                            spec.combination_policy,
                            spec.n_draws,
                            RandomStream(seed, f"mc/{method}/{ratio}/{k}"),
                        )
                    except Exception as exc:  # noqa: BLE001
                        failures.append(
                            {
                                "method": method,
                                "ratio": ratio,
                                "seed": seed,
                                "k": k,
                                "error": repr(exc),
                            }
                        )
                        continue
                    rows.append(
                        MetricsRow(
                            method=method,
                            k_available=k,
                            label_ratio=ratio,
                            seed=seed,
                            rmse=value,
                            runtime_s=train_time + (time.perf_counter() - t1),
                        )
                    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out_dir / "metrics.csv")
        write_summary_csv(rows, out_dir / "summary.csv")
        if failures:
            _write_dicts_csv(failures, out_dir / "errors.csv")
    return rows, failures


def run_masking_heatmap(
    p_grid: Sequence[float],
    ks: Sequence[int],
    seeds: Sequence[int],
    train: Dataset,
    test: Dataset,
    unlabeled: Dataset,
    settings: TrainSettings,
    out_path=None,
) -> List[dict]:
    """Mean RMSE per (pretrain p_mask, downstream p_mask, k) cell, averaged
    over seeds; mirrors the masking-rate sensitivity grid."""
    cells = []
    extractor_cache: dict = {}
    for p_cro in p_grid:
        for p_sma in p_grid:
            per_seed = {k: [] for k in ks}
            for seed in seeds:
                model = train_method(
                    "proposed",
                    train,
                    unlabeled,
                    settings,
                    seed,
                    extractor_cache,
                    p_mask_crossl=p_cro,
                    p_mask_sma=p_sma,
                )
                for k in ks:
                    per_seed[k].append(eval_at_availability(model, test, k))
            for k in ks:
                cells.append(
                    {
                        "p_mask_crossl": p_cro,
                        "p_mask_sma": p_sma,
                        "k_available": k,
                        "rmse_mean": float(np.mean(per_seed[k])),
                        "rmse_std": float(np.std(per_seed[k])),
                    }
                )
    if out_path is not None:
        _write_dicts_csv(cells, out_path)
    return cells


# ---------------------------------------------------------------------------
# PCA export
# ---------------------------------------------------------------------------


def pca_export(
    train_vectors: np.ndarray, test_vectors: np.ndarray, dims: int = 2
) -> Tuple[np.ndarray, np.ndarray]:
    """Fit a PCA projection on the training vectors, apply the same affine
    map to the test vectors."""
    tr = np.asarray(train_vectors, dtype=float)
    te = np.asarray(test_vectors, dtype=float)
    mean = tr.mean(axis=0)
    centered = tr - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10)) if len(s) else 0
    if rank < dims:
        raise ValueError(f"training data rank {rank} below requested dims {dims}")
    comps = vt[:dims]
    return centered @ comps.T, (te - mean) @ comps.T


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ["method", "k_available", "label_ratio", "seed", "rmse", "runtime_s"]


def write_metrics_csv(rows: List[MetricsRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(
                [r.method, r.k_available, repr(r.label_ratio), r.seed, repr(r.rmse), f"{r.runtime_s:.3f}"]
            )


def summarize(rows: List[MetricsRow]) -> List[dict]:
    groups: Dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.method, r.k_available, r.label_ratio), []).append(r.rmse)
    out = []
    for (method, k, ratio), values in sorted(groups.items()):
        out.append(
            {
                "method": method,
                "k_available": k,
                "label_ratio": ratio,
                "rmse_mean": float(np.mean(values)),
                "rmse_std": float(np.std(values)),  # 0 for a single seed, never NaN
                "n_seeds": len(values),
            }
        )
    return out


def write_summary_csv(rows: List[MetricsRow], path) -> None:
    _write_dicts_csv(summarize(rows), path)


def _write_dicts_csv(records: List[dict], path) -> None:
    if not records:
        return
    cols = list(records[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in records:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
